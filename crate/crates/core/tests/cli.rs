//! The `declutter` binary: subcommand wiring, outputs and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn declutter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_declutter")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--out", p(out), "--views", "4", "--resolution", "32", "--count", "6"];
    args.extend_from_slice(extra);
    declutter(&args)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gen_small(&a, &["--seed", "7"]).status.success());
    assert!(gen_small(&b, &["--seed", "7"]).status.success());
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.len() >= 4 * 4 + 3);
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn gen_data_defaults_and_distractor_routing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("default");
    assert!(declutter(&["gen-data", "--out", p(&d)]).status.success());
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["config"]["n_views"], 20);
    assert_eq!(spec["config"]["resolution"], 128);
    assert_eq!(spec["config"]["distractor"]["kind"], "snow-blob");
    let c = dir.path().join("confetti");
    assert!(gen_small(&c, &["--distractor", "confetti"]).status.success());
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["config"]["distractor"]["kind"], "confetti-quad");
}

#[test]
fn gen_data_refuses_a_non_empty_directory_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    assert!(gen_small(&d, &[]).status.success());
    let o = gen_small(&d, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(gen_small(&d, &["--force"]).status.success());
}

#[test]
fn train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(gen_small(&data, &[]).status.success());
    let o = declutter(&[
        "train", "--data", p(&data), "--labels", p(&data.join("labels")), "--out", p(&run), "--desk", "--iters", "6",
        "--batch-rays", "32", "--samples", "8", "--patch-size", "12", "--checkpoint-every", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty(), "logs belong on stderr");
    for f in ["ckpt_3.bin", "ckpt_6.bin", "loss.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let rows = fs::read_to_string(run.join("loss.csv")).unwrap().lines().count();
    assert_eq!(rows, 7);

    let renders = dir.path().join("renders");
    let o = declutter(&["render", "--checkpoint", p(&run.join("ckpt_6.bin")), "--data", p(&data), "--out", p(&renders), "--pose-index", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files_under(&renders), vec![PathBuf::from("r_000.png")]);

    let o = declutter(&["render", "--checkpoint", p(&run.join("ckpt_6.bin")), "--data", p(&data), "--out", p(&renders), "--pose-index", "9"]);
    assert_eq!(o.status.code(), Some(1));

    let report = dir.path().join("eval.json");
    let o = declutter(&["eval", "--rendered", p(&renders), "--clean", p(&data.join("clean")), "--region", "full-image", "--out", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["mean_psnr"].as_f64().unwrap() > 0.0);
    assert!(report.with_extension("csv").is_file());
}

#[test]
fn eval_of_clean_against_clean_reports_the_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_small(&data, &[]).status.success());
    let report = dir.path().join("eval.json");
    let o = declutter(&[
        "eval", "--rendered", p(&data.join("clean")), "--clean", p(&data.join("clean")), "--labels", p(&data.join("labels")), "--out", p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["mean_psnr"], 99.0);
    assert_eq!(v["mean_ssim"], 1.0);
    assert_eq!(v["region"], "box-interior");
}

#[test]
fn checkpoint_errors_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(gen_small(&data, &[]).status.success());
    let o = declutter(&["render", "--checkpoint", p(&dir.path().join("nope.bin")), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(2));

    let o = declutter(&[
        "train", "--data", p(&data), "--out", p(&run), "--desk", "--iters", "1", "--batch-rays", "8", "--samples", "4", "--loss-variant", "rgb",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("ckpt_1.bin");
    let mut bytes = fs::read(&ck).unwrap();
    bytes[8] = 9;
    fs::write(&ck, bytes).unwrap();
    let o = declutter(&["render", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("version 9") && msg.contains("version 1"), "{msg}");
}

#[test]
fn fully_boxed_labels_exit_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_small(&data, &[]).status.success());
    let labels = dir.path().join("labels");
    fs::create_dir(&labels).unwrap();
    for i in 0..4 {
        fs::write(labels.join(format!("r_{i:03}.txt")), "0 0.5 0.5 1 1\n").unwrap();
    }
    let o = declutter(&["train", "--data", p(&data), "--labels", p(&labels), "--out", p(&dir.path().join("run")), "--iters", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("no supervision"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(declutter(&[]).status.code(), Some(1));
    assert_eq!(declutter(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(declutter(&["train", "--data", "x", "--out", "y", "--loss-variant", "nope"]).status.code(), Some(1));
    let help = declutter(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--iters", "--seed", "--batch-rays", "--lambda1-post", "--lambda2-post", "--s-scale", "--config"] {
        assert!(text.contains(flag), "help lacks {flag}");
    }
}

#[test]
fn detector_math_reports_targets_and_losses() {
    let o = declutter(&["detector-math", "--box", "0,0,10,6", "--location", "5,3", "--prob", "0.5", "--pred", "5,5,3,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["targets"]["centerness"], 1.0);
    assert!((v["focal_loss"].as_f64().unwrap() - 0.0433).abs() < 1e-4);
    assert!(v["iou_loss"].as_f64().unwrap().abs() < 1e-9);
    let o = declutter(&["detector-math", "--box", "0,0,10", "--location", "5,3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn repro_lists_all_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("repro");
    let o = declutter(&[
        "repro", "--out", p(&out), "--all-variants", "--iters", "2", "--batch-rays", "16", "--samples", "4", "--patch-size", "12",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("summary.md")).unwrap();
    for row in ["| A | rgb |", "| B | rgb+lpips |", "| C | rgb+mvcl |", "| D | full |", "| baseline | full | ignored |"] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }
    assert!(out.join("runs/masked_full_seed0/ckpt_2.bin").is_file());
}
