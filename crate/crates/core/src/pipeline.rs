//! End-to-end glue: benchmark → training → renders → box-interior evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{FeatureExtractor, FilterBank};
use crate::metrics::{masked_eval, EvalReport, Region};
use crate::scene_io::{load_dataset, BBox, CameraModel, Pose, ViewRecord};
use crate::synthbench::{frame_name, write_dataset, Benchmark, GenConfig};
use crate::trainer::{LossVariant, TrainConfig, Trainer};
use crate::volume_renderer::{RadianceModel, SamplingConfig};

/// Training views from a benchmark: corrupted images, with their boxes when `masked`.
pub fn benchmark_views(bench: &Benchmark, masked: bool) -> Vec<ViewRecord> {
    bench
        .poses
        .iter()
        .zip(&bench.corrupted)
        .enumerate()
        .map(|(i, (pose, cv))| ViewRecord {
            view_id: i,
            name: frame_name(i),
            image: cv.image.clone(),
            camera: bench.camera,
            pose: *pose,
            boxes: if masked { cv.boxes.clone() } else { Vec::new() },
        })
        .collect()
}

/// Deterministic (unjittered) sampling for evaluation renders.
pub fn eval_sampling(train: &SamplingConfig) -> SamplingConfig {
    SamplingConfig { jitter: false, ..*train }
}

pub fn render_views(model: &RadianceModel<f32>, cams: &[(CameraModel, Pose)], sampling: &SamplingConfig) -> Result<Vec<Image>> {
    cams.iter().map(|(c, p)| model.render_image(c, p, sampling).map(|(img, _)| img)).collect()
}

/// Outcome of one training run scored against clean references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: LossVariant,
    pub seed: u64,
    /// False for the baseline that ignores the boxes.
    pub masked: bool,
    pub box_psnr: f64,
    pub box_ssim: f64,
    pub box_lpips_proxy: f64,
    pub full_psnr: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Renders every training pose and scores it against `clean` inside `boxes` and over the full frame.
pub fn score_model(
    model: &RadianceModel<f32>,
    sampling: &SamplingConfig,
    cams: &[(CameraModel, Pose)],
    clean: &[Image],
    boxes: &[Vec<BBox>],
    extractor: &dyn FeatureExtractor,
) -> Result<(EvalReport, EvalReport, Vec<Image>)> {
    let renders = render_views(model, cams, &eval_sampling(sampling))?;
    let boxed = masked_eval(&renders, clean, boxes, Region::BoxInterior, extractor)?;
    let full = masked_eval(&renders, clean, boxes, Region::FullImage, extractor)?;
    Ok((boxed, full, renders))
}

/// Trains one configuration on a benchmark and scores it inside the ground-truth boxes.
pub fn run_experiment(bench: &Benchmark, config: &TrainConfig, masked: bool, out_dir: Option<&Path>) -> Result<(RunSummary, Trainer)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(benchmark_views(bench, masked), config.clone())?;
    if let Some(d) = out_dir {
        trainer = trainer.with_output(d)?;
    }
    trainer.run(|_| {})?;
    let cams: Vec<_> = bench.poses.iter().map(|p| (bench.camera, *p)).collect();
    let boxes: Vec<Vec<BBox>> = bench.corrupted.iter().map(|c| c.boxes.clone()).collect();
    let (boxed, full, _) = score_model(&trainer.model, trainer.sampling(), &cams, &bench.clean, &boxes, &FilterBank::default())?;
    let summary = RunSummary {
        variant: config.variant,
        seed: config.seed,
        masked,
        box_psnr: boxed.mean_psnr,
        box_ssim: boxed.mean_ssim,
        box_lpips_proxy: boxed.mean_lpips_proxy,
        full_psnr: full.mean_psnr,
        final_loss: trainer.log.last().map_or(f64::NAN, |r| r.total),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((summary, trainer))
}

/// Training settings sized for a single workstation core. Only the per-step budget
/// (rays, samples, patches) is reduced; the iteration count stays at 10k.
pub fn desk_train_config(seed: u64, variant: LossVariant) -> TrainConfig {
    TrainConfig {
        seed,
        variant,
        batch_rays: 256,
        n_samples: 48,
        patches_per_step: 1,
        patch_size: 16,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct ReproConfig {
    pub gen: GenConfig,
    pub variants: Vec<LossVariant>,
    pub seeds: Vec<u64>,
    /// Also train each seed with the boxes ignored.
    pub baseline: bool,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproReport {
    pub runs: Vec<RunSummary>,
}

impl ReproReport {
    pub fn mean_box_psnr(&self, variant: LossVariant, masked: bool) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.variant == variant && r.masked == masked).map(|r| r.box_psnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Markdown table: one row per variant (plus the unmasked baseline), averaged over seeds.
    pub fn table(&self) -> String {
        let mut out = String::from("| row | loss | boxes | box PSNR | box SSIM | box LPIPS-proxy | full PSNR | runs |\n|---|---|---|---|---|---|---|---|\n");
        let mut keys: Vec<(LossVariant, bool)> = Vec::new();
        for r in &self.runs {
            if !keys.contains(&(r.variant, r.masked)) {
                keys.push((r.variant, r.masked));
            }
        }
        keys.sort_by_key(|(v, m)| (!m, v.letter()));
        for (v, m) in keys {
            let rs: Vec<&RunSummary> = self.runs.iter().filter(|r| r.variant == v && r.masked == m).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            out.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.4} | {:.4} | {:.2} | {} |\n",
                if m { v.letter().to_string() } else { "baseline".into() },
                v,
                if m { "masked" } else { "ignored" },
                mean(|r| r.box_psnr.min(99.0)),
                mean(|r| r.box_ssim),
                mean(|r| r.box_lpips_proxy),
                mean(|r| r.full_psnr.min(99.0)),
                rs.len()
            ));
        }
        out
    }
}

/// Generates the dataset, trains every requested variant and seed, and writes a summary.
pub fn repro(cfg: &ReproConfig, mut progress: impl FnMut(&str)) -> Result<ReproReport> {
    let data_dir = cfg.out_dir.join("data");
    let bench = write_dataset(&data_dir, &cfg.gen, cfg.force)?;
    progress(&format!(
        "dataset: {} views, sprite coverage {:.1}%, box coverage {:.1}%",
        bench.poses.len(),
        100.0 * bench.sprite_coverage(),
        100.0 * bench.box_coverage()
    ));
    let mut runs = Vec::new();
    let mut jobs: Vec<(LossVariant, u64, bool)> = Vec::new();
    for &seed in &cfg.seeds {
        for &v in &cfg.variants {
            jobs.push((v, seed, true));
        }
        if cfg.baseline {
            jobs.push((*cfg.variants.last().unwrap_or(&LossVariant::Full), seed, false));
        }
    }
    for (variant, seed, masked) in jobs {
        let name = format!("{}_{}_seed{seed}", if masked { "masked" } else { "baseline" }, variant.to_string().replace('+', "-"));
        let run_dir = cfg.out_dir.join("runs").join(&name);
        let train = TrainConfig { seed, variant, ..cfg.train.clone() };
        let (summary, _) = run_experiment(&bench, &train, masked, Some(&run_dir))?;
        progress(&format!("{name}: box PSNR {:.2} dB, full PSNR {:.2} dB ({:.0} s)", summary.box_psnr, summary.full_psnr, summary.seconds));
        runs.push(summary);
    }
    let report = ReproReport { runs };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
    let p = cfg.out_dir.join("summary.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = cfg.out_dir.join("summary.md");
    fs::write(&p, report.table()).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// Loads `<dir>/transforms.json` with labels from `labels` (if given).
pub fn load_views(data_dir: &Path, labels: Option<&Path>) -> Result<Vec<ViewRecord>> {
    load_dataset(&data_dir.join("transforms.json"), labels)
}
