use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use declutter::checkpoint::Checkpoint;
use declutter::detector_math::{fcos_targets, focal_loss, iou_loss, FOCAL_ALPHA, FOCAL_GAMMA};
use declutter::image::{read_png, write_png, write_png_gray16, Image};
use declutter::losses::{FeatureExtractor, FilterBank};
use declutter::metrics::{masked_eval, write_report, Region};
use declutter::pipeline::{desk_train_config, eval_sampling, load_views, repro, ReproConfig};
use declutter::scene_io::{read_label_file, BBox};
use declutter::synthbench::{write_dataset, DistractorKind, DistractorSpec, GenConfig, RigLayout};
use declutter::trainer::{checkpoint_name, LossVariant, TrainConfig, Trainer};
use declutter::volume_renderer::quantize_depth;
use declutter::{Error, Result};

#[derive(Parser)]
#[command(name = "declutter", version, about = "Distractor-free radiance fields from boxed multi-view images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    GenData(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render views of a trained model.
    Render(RenderArgs),
    /// Score rendered images against clean references.
    Eval(EvalArgs),
    /// Generate data, train the ablation variants and the unmasked baseline, and tabulate.
    Repro(ReproArgs),
    /// Evaluate detector target math for one box and location.
    DetectorMath(DetectorArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Distractor {
    Snow,
    Confetti,
    Petal,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, value_enum, default_value = "snow")]
    distractor: Distractor,
    /// Sprites per view.
    #[arg(long, default_value_t = 25)]
    count: usize,
    #[arg(long, default_value_t = 2.0)]
    size_min: f64,
    #[arg(long, default_value_t = 6.0)]
    size_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    circle: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl GenArgs {
    fn config(&self) -> GenConfig {
        let kind = match self.distractor {
            Distractor::Snow => DistractorKind::SnowBlob,
            Distractor::Confetti => DistractorKind::ConfettiQuad,
            Distractor::Petal => DistractorKind::PetalEllipse,
        };
        GenConfig {
            n_views: self.views,
            resolution: self.resolution,
            layout: if self.circle { RigLayout::Circle } else { RigLayout::Hemisphere },
            distractor: DistractorSpec {
                kind,
                count: self.count,
                size_min: self.size_min,
                size_max: self.size_max,
                seed: self.seed,
                ..DistractorSpec::default()
            },
            ..GenConfig::default()
        }
    }
}

/// Training flags; each one overrides the config file when given.
#[derive(Args, Clone)]
struct TrainFlags {
    /// TOML file with `TrainConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the single-core desk settings (256 rays, 48 samples, one 16² patch); `repro` always does.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lambda1_post: Option<f64>,
    #[arg(long)]
    lambda2_post: Option<f64>,
    #[arg(long)]
    s_scale: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self, variant: Option<LossVariant>, desk_default: bool) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None if self.desk || desk_default => desk_train_config(0, LossVariant::Full),
            None => TrainConfig::default(),
        };
        if let Some(v) = variant {
            c.variant = v;
        }
        macro_rules! set {
            ($($flag:ident => $field:expr),*) => {$( if let Some(v) = self.$flag { $field = v; } )*};
        }
        set!(iters => c.iterations, seed => c.seed, batch_rays => c.batch_rays, samples => c.n_samples,
             lambda1_post => c.lambda.post.0, lambda2_post => c.lambda.post.1, patch_size => c.patch_size,
             patches => c.patches_per_step, checkpoint_every => c.checkpoint_every, workers => c.workers);
        if let Some(s) = self.s_scale {
            c.s_scale = Some(s);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding transforms.json.
    #[arg(long)]
    data: PathBuf,
    /// YOLO label directory; omit to train without boxes.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    loss_variant: Option<LossVariant>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose poses are rendered.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render a single pose; all poses otherwise.
    #[arg(long)]
    pose_index: Option<usize>,
    /// Also write 16-bit depth PNGs.
    #[arg(long)]
    depth: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered PNGs.
    #[arg(long)]
    rendered: PathBuf,
    /// Directory of clean reference PNGs with the same file names.
    #[arg(long)]
    clean: PathBuf,
    /// YOLO labels; required for box-interior evaluation.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "box-interior")]
    region: RegionArg,
    /// JSON report path; a CSV twin is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    BoxInterior,
    FullImage,
}

#[derive(Args)]
struct ReproArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_variant, default_value = "full")]
    loss_variant: LossVariant,
    /// Train all four loss variants (A–D).
    #[arg(long)]
    all_variants: bool,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Skip the unmasked baseline.
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct DetectorArgs {
    /// Box corners `x0,y0,x1,y1`.
    #[arg(long = "box", value_delimiter = ',', required = true)]
    bbox: Vec<f64>,
    /// Feature-map location `x,y`.
    #[arg(long, value_delimiter = ',', required = true)]
    location: Vec<f64>,
    /// Predicted class probability for the focal term.
    #[arg(long)]
    prob: Option<f64>,
    /// Predicted offsets `x0*,x1*,y0*,y1*` for the IoU term.
    #[arg(long, value_delimiter = ',')]
    pred: Option<Vec<f64>>,
}

fn parse_variant(s: &str) -> std::result::Result<LossVariant, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let bench = write_dataset(&a.out, &a.config(), a.force)?;
            eprintln!(
                "wrote {} views to {} (sprites cover {:.1}% of pixels)",
                bench.poses.len(),
                a.out.display(),
                100.0 * bench.sprite_coverage()
            );
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Repro(a) => {
            let variants = if a.all_variants { LossVariant::ALL.to_vec() } else { vec![a.loss_variant] };
            // repro is a desk-scale experiment unless a config file says otherwise
            let train = a.flags.resolve(Some(a.loss_variant), true)?;
            let cfg = ReproConfig {
                gen: GenConfig::default(),
                variants,
                seeds: a.seeds.clone(),
                baseline: !a.no_baseline,
                train,
                out_dir: a.out.clone(),
                force: a.force,
            };
            let report = repro(&cfg, |msg| eprintln!("{msg}"))?;
            eprint!("{}", report.table());
            Ok(())
        }
        Command::DetectorMath(a) => detector(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let config = a.flags.resolve(a.loss_variant, false)?;
    let views = load_views(&a.data, a.labels.as_deref())?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(views, config, Checkpoint::load(p)?)?,
        None => Trainer::new(views, config)?,
    }
    .with_output(&a.out)?;
    eprintln!(
        "training {} iterations on {} supervised pixels ({})",
        trainer.config.iterations,
        trainer.supervised_pixels(),
        trainer.config.variant
    );
    trainer.run(|r| {
        if r.iteration % 500 == 0 {
            eprintln!("it {:>6}  total {:.5}  rgb {:.5}  mvcl {:.5}  lpips {:.5}", r.iteration, r.total, r.rgb, r.mvcl, r.lpips);
        }
    })?;
    eprintln!("wrote {}", a.out.join(checkpoint_name(trainer.iteration)).display());
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let config: TrainConfig = serde_json::from_str(&ck.config_json).unwrap_or_default();
    let views = load_views(&a.data, None)?;
    let sampling = eval_sampling(&config.sampling(&views));
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let indices: Vec<usize> = match a.pose_index {
        Some(i) if i >= views.len() => return Err(Error::invalid(format!("pose index {i} out of range (dataset has {} views)", views.len()))),
        Some(i) => vec![i],
        None => (0..views.len()).collect(),
    };
    for i in indices {
        let v = &views[i];
        let (img, depth) = ck.model.render_image(&v.camera, &v.pose, &sampling)?;
        write_png(&a.out.join(format!("{}.png", v.name)), &img)?;
        if a.depth {
            let (q, scale) = quantize_depth(&depth, sampling.far);
            write_png_gray16(&a.out.join(format!("{}_depth.png", v.name)), img.width, img.height, &q)?;
            eprintln!("{}: depth scale {scale:.3e} units per level", v.name);
        }
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png") && !p.to_string_lossy().ends_with("_depth.png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    Ok(stems)
}

fn eval(a: EvalArgs) -> Result<()> {
    let region = match a.region {
        RegionArg::BoxInterior => Region::BoxInterior,
        RegionArg::FullImage => Region::FullImage,
    };
    if region == Region::BoxInterior && a.labels.is_none() {
        return Err(Error::invalid("box-interior evaluation needs --labels"));
    }
    let stems = png_stems(&a.rendered)?;
    if stems.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", a.rendered.display())));
    }
    let (mut rendered, mut clean, mut boxes) = (Vec::<Image>::new(), Vec::<Image>::new(), Vec::<Vec<BBox>>::new());
    for s in &stems {
        let r = read_png(&a.rendered.join(format!("{s}.png")))?;
        let c = read_png(&a.clean.join(format!("{s}.png")))?;
        let b = match &a.labels {
            Some(dir) => {
                let p = dir.join(format!("{s}.txt"));
                if p.is_file() {
                    read_label_file(&p, c.width, c.height)?
                } else {
                    Vec::new()
                }
            }
            None => Vec::new(),
        };
        rendered.push(r);
        clean.push(c);
        boxes.push(b);
    }
    let fb = FilterBank::default();
    let report = masked_eval(&rendered, &clean, &boxes, region, &fb as &dyn FeatureExtractor)?;
    write_report(&report, &a.out, &a.out.with_extension("csv"))?;
    eprintln!(
        "{} views ({} skipped): mean PSNR {:.2} dB, mean SSIM {:.4}, LPIPS-proxy {:.4}",
        report.views.len(),
        report.skipped.len(),
        report.mean_psnr.min(99.0),
        report.mean_ssim,
        report.mean_lpips_proxy
    );
    Ok(())
}

fn detector(a: DetectorArgs) -> Result<()> {
    let counts = [("--box", a.bbox.len(), 4), ("--location", a.location.len(), 2), ("--pred", a.pred.as_ref().map_or(4, Vec::len), 4)];
    for (flag, got, want) in counts {
        if got != want {
            return Err(Error::invalid(format!("{flag} takes {want} comma-separated numbers, got {got}")));
        }
    }
    let b = BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3], 0);
    let t = fcos_targets((a.location[0], a.location[1]), &b);
    let mut out = serde_json::json!({ "targets": t });
    if let Some(p) = a.prob {
        out["focal_loss"] = serde_json::json!(focal_loss(p, t.positive, FOCAL_ALPHA, FOCAL_GAMMA));
    }
    if let Some(pred) = &a.pred {
        let pred: [f64; 4] = [pred[0], pred[1], pred[2], pred[3]];
        out["iou_loss"] = serde_json::json!(iou_loss(&pred, &t.offsets())?);
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Error::Serde(e.to_string()))?);
    Ok(())
}
