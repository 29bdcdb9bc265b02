//! Optimization loop: ray batching over unmasked pixels, joint forward/backward through
//! renderer, network and hash tables, Adam with exponential learning-rate decay.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::hash_encoding::{HashGrid, HashGridConfig};
use crate::losses::{
    mvcl_count, mvcl_loss, perceptual_loss, photometric_loss, total_loss, FeatureExtractor, FilterBank, LambdaSchedule,
    LossBreakdown, Patch, PatchPair, RayBatchSupervision,
};
use crate::radiance_field::{FieldConfig, FieldGrads, FieldNetwork};
use crate::real::Real;
use crate::scene_io::{pixel_in_boxes, ViewRecord, MASK_VALUE};
use crate::volume_renderer::{camera_ray, ray_seed, ModelGrads, RadianceModel, Ray, RayBatchTape, SamplingConfig};

/// Rays per parallel segment. Fixed, so results do not depend on the worker count.
const SEGMENT: usize = 256;
const PATCH_SALT: u64 = 0x5EED_0F_9A7C;
const STEP_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Which loss terms are active (the rows of the ablation grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossVariant {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "rgb+lpips")]
    RgbLpips,
    #[serde(rename = "rgb+mvcl")]
    RgbMvcl,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [LossVariant::Rgb, LossVariant::RgbLpips, LossVariant::RgbMvcl, LossVariant::Full];

    pub fn uses_mvcl(self) -> bool {
        matches!(self, LossVariant::RgbMvcl | LossVariant::Full)
    }

    pub fn uses_perceptual(self) -> bool {
        matches!(self, LossVariant::RgbLpips | LossVariant::Full)
    }

    /// Row letter in the ablation table.
    pub fn letter(self) -> char {
        match self {
            LossVariant::Rgb => 'A',
            LossVariant::RgbLpips => 'B',
            LossVariant::RgbMvcl => 'C',
            LossVariant::Full => 'D',
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Rgb => "rgb",
            LossVariant::RgbLpips => "rgb+lpips",
            LossVariant::RgbMvcl => "rgb+mvcl",
            LossVariant::Full => "full",
        })
    }
}

impl FromStr for LossVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("unknown loss variant {s:?} (expected rgb, rgb+lpips, rgb+mvcl or full)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub n_samples: usize,
    /// Stratified jitter of sample depths; off places samples at bin midpoints.
    pub jitter: bool,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda: LambdaSchedule,
    /// MVCL scale `s`; `None` means `1/K` for `K` views.
    pub s_scale: Option<f64>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub variant: LossVariant,
    pub patches_per_step: usize,
    pub patch_size: usize,
    /// Save `ckpt_<it>.bin` every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Worker threads; 0 uses the machine's parallelism.
    pub workers: usize,
    pub grid: HashGridConfig,
    pub field: FieldConfig,
    pub aabb: Aabb,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_rays: 4096,
            n_samples: 128,
            jitter: true,
            lr_start: 2e-3,
            lr_end: 2e-5,
            lambda: LambdaSchedule::default(),
            s_scale: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-15,
            variant: LossVariant::Full,
            patches_per_step: 4,
            patch_size: 32,
            checkpoint_every: 0,
            workers: 0,
            grid: HashGridConfig::default(),
            field: FieldConfig::default(),
            aabb: Aabb::UNIT,
            background: [1.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.batch_rays < 1 || self.n_samples < 1 {
            return Err(Error::invalid("iterations, batch_rays and n_samples must be at least 1"));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::invalid(format!("need lr_start > lr_end > 0, got {} and {}", self.lr_start, self.lr_end)));
        }
        if self.s_scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::invalid("s_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam hyper-parameters out of range"));
        }
        self.grid.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn sampling(&self, views: &[ViewRecord]) -> SamplingConfig {
        SamplingConfig {
            jitter: self.jitter,
            seed: self.seed,
            background: self.background,
            ..SamplingConfig::bracketing(&self.aabb, views.iter().map(|v| v.pose.center()), self.n_samples)
        }
    }
}

/// `lr_start · (lr_end/lr_start)^(it/(iterations−1))`.
pub fn lr_at(config: &TrainConfig, iteration: usize) -> f64 {
    if config.iterations <= 1 {
        return config.lr_start;
    }
    let frac = iteration as f64 / (config.iterations - 1) as f64;
    config.lr_start * (config.lr_end / config.lr_start).powf(frac)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One Adam step on a single parameter; `step` is the 1-based global step used for bias correction.
#[inline]
pub fn adam_update<T: Real>(param: &mut T, m: &mut T, v: &mut T, grad: T, lr: f64, step: u64, hp: &AdamParams) {
    let g = grad.to_f64();
    let m1 = hp.beta1 * m.to_f64() + (1.0 - hp.beta1) * g;
    let v1 = hp.beta2 * v.to_f64() + (1.0 - hp.beta2) * g * g;
    let mhat = m1 / (1.0 - hp.beta1.powi(step as i32));
    let vhat = v1 / (1.0 - hp.beta2.powi(step as i32));
    *param = T::of(param.to_f64() - lr * mhat / (vhat.sqrt() + hp.eps));
    *m = T::of(m1);
    *v = T::of(v1);
}

/// First and second moments for every parameter, plus the global step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub grid_m: Vec<Vec<f32>>,
    pub grid_v: Vec<Vec<f32>>,
    pub net_m: FieldNetwork<f32>,
    pub net_v: FieldNetwork<f32>,
}

impl AdamState {
    pub fn new(model: &RadianceModel<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.grid.tables.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState { step: 0, grid_m: zeros.clone(), grid_v: zeros, net_m: model.net.zeros_like(), net_v: model.net.zeros_like() }
    }

    /// Dense update of the network, sparse update of the touched hash rows only.
    pub fn apply(&mut self, model: &mut RadianceModel<f32>, grads: &ModelGrads<f32>, lr: f64, hp: &AdamParams) {
        self.step += 1;
        let step = self.step;
        let f = model.grid.config.features;
        for level in 0..model.grid.tables.len() {
            let table = &mut model.grid.tables[level];
            let (m, v) = (&mut self.grid_m[level], &mut self.grid_v[level]);
            let g = &grads.grid.tables[level];
            for &row in grads.grid.touched_rows(level) {
                for k in row as usize * f..(row as usize + 1) * f {
                    adam_update(&mut table[k], &mut m[k], &mut v[k], g[k], lr, step, hp);
                }
            }
        }
        let gs = grads.net.param_slices();
        let ms = self.net_m.param_slices_mut();
        let vs = self.net_v.param_slices_mut();
        for (((p, g), m), v) in model.net.param_slices_mut().into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                adam_update(&mut p[i], &mut m[i], &mut v[i], g[i], lr, step, hp);
            }
        }
    }
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub rgb: f64,
    pub mvcl: f64,
    pub lpips: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub grad_norm: f64,
    pub rays: usize,
    pub touched_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PoolEntry {
    view: u32,
    x: u16,
    y: u16,
}

/// A square patch scheduled for perceptual supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub view: usize,
    pub origin: (usize, usize),
    pub size: usize,
    /// Row-major; true where the pixel lies inside one of the view's boxes.
    pub boxed: Vec<bool>,
}

/// Training state over a fixed set of views.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: RadianceModel<f32>,
    pub adam: AdamState,
    /// Completed iterations.
    pub iteration: usize,
    pub log: Vec<LogRow>,
    views: Vec<ViewRecord>,
    pool: Vec<PoolEntry>,
    sampling: SamplingConfig,
    scale: f64,
    extractor: Box<dyn FeatureExtractor>,
    grads: ModelGrads<f32>,
    out_dir: Option<PathBuf>,
    audited_epoch: Option<usize>,
}

fn mix(seed: u64, salt: u64, iteration: usize) -> u64 {
    ray_seed(seed ^ salt, iteration, (0, 0))
}

impl Trainer {
    pub fn new(views: Vec<ViewRecord>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let grid = HashGrid::<f32>::new(config.grid, config.seed)?;
        let net = FieldNetwork::<f32>::new(grid.feature_dim(), config.field, config.seed.wrapping_add(1))?;
        let model = RadianceModel::new(grid, net, config.aabb)?;
        let adam = AdamState::new(&model);
        Self::assemble(views, config, model, adam, 0)
    }

    /// Continues from a checkpoint; the data order is derived from the iteration count, so
    /// resuming reproduces an uninterrupted run.
    pub fn resume(views: Vec<ViewRecord>, config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.model.grid.config != config.grid || checkpoint.model.net.config != config.field {
            return Err(Error::invalid("checkpoint architecture differs from the training configuration"));
        }
        Self::assemble(views, config, checkpoint.model, checkpoint.adam, checkpoint.iteration)
    }

    fn assemble(views: Vec<ViewRecord>, config: TrainConfig, model: RadianceModel<f32>, adam: AdamState, iteration: usize) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::invalid(format!("training needs at least 2 views, got {}", views.len())));
        }
        if config.variant.uses_perceptual() && config.patches_per_step > 0 {
            let fb = FilterBank::default();
            if config.patch_size < fb.min_size() {
                return Err(Error::invalid(format!("patch_size {} is below the extractor minimum {}", config.patch_size, fb.min_size())));
            }
            if views.iter().any(|v| v.camera.width < config.patch_size || v.camera.height < config.patch_size) {
                return Err(Error::invalid("patch_size exceeds a view's dimensions"));
            }
        }
        let mut pool = Vec::new();
        for (vi, v) in views.iter().enumerate() {
            if v.camera.width > u16::MAX as usize || v.camera.height > u16::MAX as usize {
                return Err(Error::invalid("views wider than 65535 pixels are not supported"));
            }
            for y in 0..v.camera.height {
                for x in 0..v.camera.width {
                    if !v.is_masked(x, y) {
                        pool.push(PoolEntry { view: vi as u32, x: x as u16, y: y as u16 });
                    }
                }
            }
        }
        if pool.is_empty() {
            return Err(Error::NoSupervision);
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let sampling = config.sampling(&views);
        let scale = config.s_scale.unwrap_or(1.0 / views.len() as f64);
        let grads = ModelGrads::new(&model);
        Ok(Trainer {
            config,
            model,
            adam,
            iteration,
            log: Vec::new(),
            views,
            pool,
            sampling,
            scale,
            extractor: Box::new(FilterBank::default()),
            grads,
            out_dir: None,
            audited_epoch: None,
        })
    }

    pub fn with_extractor(mut self, extractor: Box<dyn FeatureExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    /// Directory for checkpoints, the CSV log and non-finite dumps.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("loss.csv");
        if self.iteration > 0 && log_path.is_file() {
            let mut r = csv::Reader::from_path(&log_path).map_err(|e| Error::Serde(e.to_string()))?;
            for row in r.deserialize::<LogRow>() {
                let row = row.map_err(|e| Error::Serde(e.to_string()))?;
                if row.iteration < self.iteration {
                    self.log.push(row);
                }
            }
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn views(&self) -> &[ViewRecord] {
        &self.views
    }

    pub fn sampling(&self) -> &SamplingConfig {
        &self.sampling
    }

    pub fn supervised_pixels(&self) -> usize {
        self.pool.len()
    }

    /// Pool indices of the rays used at `iteration`.
    fn batch_entries(&self, iteration: usize) -> Vec<PoolEntry> {
        let n = self.pool.len();
        let start = (iteration as u128 * self.config.batch_rays as u128 % n as u128) as usize;
        (0..self.config.batch_rays).map(|j| self.pool[(start + j) % n]).collect()
    }

    /// Re-checks that no pool entry lies in a box; run once per pass over the pool.
    fn audit(&mut self, iteration: usize) -> Result<()> {
        let epoch = iteration * self.config.batch_rays / self.pool.len();
        if self.audited_epoch == Some(epoch) {
            return Ok(());
        }
        for e in &self.pool {
            if self.views[e.view as usize].is_masked(e.x as usize, e.y as usize) {
                return Err(Error::invalid(format!("ray pool contains masked pixel ({}, {}) of view {}", e.x, e.y, e.view)));
            }
        }
        self.audited_epoch = Some(epoch);
        Ok(())
    }

    /// Patches for `iteration`: centered on a random box of a random view, or anywhere if the view has none.
    pub fn patch_plans(&self, iteration: usize) -> Vec<PatchPlan> {
        if !self.config.variant.uses_perceptual() {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, PATCH_SALT, iteration));
        let size = self.config.patch_size;
        (0..self.config.patches_per_step)
            .map(|_| {
                let view = rng.gen_range(0..self.views.len());
                let v = &self.views[view];
                let (w, h) = (v.camera.width, v.camera.height);
                let (cx, cy) = if v.boxes.is_empty() {
                    (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64))
                } else {
                    v.boxes[rng.gen_range(0..v.boxes.len())].center()
                };
                let clamp = |c: f64, extent: usize| ((c - size as f64 / 2.0).round().max(0.0) as usize).min(extent - size);
                let origin = (clamp(cx, w), clamp(cy, h));
                let boxed = (0..size * size)
                    .map(|i| pixel_in_boxes((origin.0 + i % size) as f64, (origin.1 + i / size) as f64, &v.boxes))
                    .collect();
                PatchPlan { view, origin, size, boxed }
            })
            .collect()
    }

    fn workers(&self) -> usize {
        match self.config.workers {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            n => n,
        }
    }

    fn forward_segments(&self, rays: &[Ray], seeds: &[u64]) -> Result<Vec<RayBatchTape<f32>>> {
        let segs: Vec<(&[Ray], &[u64])> = rays.chunks(SEGMENT).zip(seeds.chunks(SEGMENT)).collect();
        let workers = self.workers().min(segs.len()).max(1);
        if workers == 1 {
            return segs.iter().map(|(r, s)| self.model.forward_rays(r, &self.sampling, s)).collect();
        }
        let per = segs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = segs
                .chunks(per)
                .map(|group| {
                    scope.spawn(move || group.iter().map(|(r, s)| self.model.forward_rays(r, &self.sampling, s)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("forward worker panicked")).collect()
        })
    }

    fn backward_segments(&mut self, tapes: &[RayBatchTape<f32>], grad_colors: &[[f64; 3]]) {
        let bg = self.sampling.background;
        let model = &self.model;
        let grads: Vec<&[[f64; 3]]> = grad_colors.chunks(SEGMENT).collect();
        let work = |i: usize| {
            let mut g = model.net.zeros_like();
            let fg = model.backward_field(&tapes[i], grads[i], bg, &mut g);
            (g, fg)
        };
        let workers = self.workers().min(tapes.len()).max(1);
        let results: Vec<(FieldGrads<f32>, Vec<f32>)> = if workers == 1 {
            (0..tapes.len()).map(work).collect()
        } else {
            let idx: Vec<usize> = (0..tapes.len()).collect();
            let per = idx.len().div_ceil(workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> =
                    idx.chunks(per).map(|group| scope.spawn(move || group.iter().map(|&i| work(i)).collect::<Vec<_>>())).collect();
                handles.into_iter().flat_map(|h| h.join().expect("backward worker panicked")).collect()
            })
        };
        // Fixed segment order keeps the reduction bitwise reproducible.
        for (tape, (g, fg)) in tapes.iter().zip(&results) {
            for (acc, part) in self.grads.net.param_slices_mut().into_iter().zip(g.param_slices()) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += *p;
                }
            }
            self.model.scatter_features(tape, fg, &mut self.grads.grid);
        }
    }

    fn dump_nonfinite(&self, iteration: usize, what: &str, rays: &[Ray], rendered: &[[f64; 3]]) -> Error {
        if let Some(dir) = &self.out_dir {
            let dump = serde_json::json!({
                "iteration": iteration,
                "what": what,
                "rays": rays,
                "rendered": rendered,
            });
            let path = dir.join(format!("nonfinite_{iteration}.json"));
            if let Ok(text) = serde_json::to_string_pretty(&dump) {
                let _ = fs::write(&path, text);
            }
        }
        Error::NonFinite { iteration, what: what.to_string() }
    }

    /// Runs iteration `self.iteration` and applies one Adam update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let it = self.iteration;
        self.audit(it)?;
        let step_seed = self.config.seed ^ (it as u64).wrapping_mul(STEP_SALT);

        let entries = self.batch_entries(it);
        let mut rays = Vec::with_capacity(entries.len());
        let mut targets = Vec::with_capacity(entries.len());
        for e in &entries {
            let v = &self.views[e.view as usize];
            let px = (e.x as usize, e.y as usize);
            rays.push(camera_ray(&v.camera, &v.pose, px, v.view_id, &v.boxes));
            targets.push(v.image.get(px.0, px.1));
        }
        let n_sup = rays.len();

        // Patch rays follow the supervised rays; box pixels are not rendered at all.
        let plans = self.patch_plans(it);
        let mut patch_rays: Vec<Vec<Option<usize>>> = Vec::with_capacity(plans.len());
        for p in &plans {
            let v = &self.views[p.view];
            let mut slots = Vec::with_capacity(p.size * p.size);
            for i in 0..p.size * p.size {
                if p.boxed[i] {
                    slots.push(None);
                } else {
                    slots.push(Some(rays.len()));
                    rays.push(camera_ray(&v.camera, &v.pose, (p.origin.0 + i % p.size, p.origin.1 + i / p.size), v.view_id, &v.boxes));
                }
            }
            patch_rays.push(slots);
        }
        let seeds: Vec<u64> = rays.iter().map(|r| ray_seed(step_seed, r.view_id, r.pixel)).collect();

        let tapes = self.forward_segments(&rays, &seeds)?;
        let bg = self.sampling.background;
        let rendered: Vec<[f64; 3]> = tapes.iter().flat_map(|t| t.colors(bg)).collect();
        let depths: Vec<f64> = tapes.iter().flat_map(|t| t.results.iter().map(|r| r.expected_depth)).collect();

        let counts = if self.config.variant.uses_mvcl() {
            rays[..n_sup].iter().zip(&depths).map(|(r, d)| mvcl_count(r, &self.views, *d)).collect()
        } else {
            Vec::new()
        };
        let sup = RayBatchSupervision {
            rays: rays[..n_sup].to_vec(),
            rendered: rendered[..n_sup].to_vec(),
            target: targets,
            mvcl_counts: counts,
            scale: self.scale,
        };
        let rgb = photometric_loss(&sup)?;
        let mvcl = if self.config.variant.uses_mvcl() { Some(mvcl_loss(&sup)?) } else { None };
        let (lambda1, lambda2) = self.config.lambda.at(it);

        let mut grad_colors = vec![[0.0; 3]; rays.len()];
        for (i, g) in rgb.grads.iter().enumerate() {
            grad_colors[i] = *g;
        }
        if let Some(m) = &mvcl {
            for (i, g) in m.grads.iter().enumerate() {
                for c in 0..3 {
                    grad_colors[i][c] += lambda1 * g[c];
                }
            }
        }

        let gray = MASK_VALUE as f64 / 255.0;
        let mut lpips_sum = 0.0;
        for (p, slots) in plans.iter().zip(&patch_rays) {
            let v = &self.views[p.view];
            let rend = Patch::from_fn(p.size, |x, y, c| slots[y * p.size + x].map_or(gray, |r| rendered[r][c]));
            let targ = Patch::from_fn(p.size, |x, y, c| {
                if p.boxed[y * p.size + x] {
                    gray
                } else {
                    v.image.get(p.origin.0 + x, p.origin.1 + y)[c]
                }
            });
            let pair = PatchPair { rendered: rend, target: targ, origin: p.origin, view_id: v.view_id };
            let (value, grad) = perceptual_loss(&pair, self.extractor.as_ref())?;
            lpips_sum += value;
            let w = lambda2 / plans.len() as f64;
            for (i, slot) in slots.iter().enumerate() {
                if let Some(r) = slot {
                    for c in 0..3 {
                        grad_colors[*r][c] += w * grad[i * 3 + c];
                    }
                }
            }
        }
        let lpips = if plans.is_empty() { 0.0 } else { lpips_sum / plans.len() as f64 };

        let mut breakdown = total_loss(rgb.value, mvcl.as_ref().map_or(0.0, |m| m.value), lpips, it, &self.config.lambda);
        if !breakdown.total.is_finite() {
            return Err(self.dump_nonfinite(it, &format!("loss {:?}", breakdown), &rays, &rendered));
        }

        self.grads.clear();
        self.backward_segments(&tapes, &grad_colors);
        breakdown.grad_norm = self.grads.norm();
        if !breakdown.grad_norm.is_finite() {
            return Err(self.dump_nonfinite(it, "gradient norm", &rays, &rendered));
        }

        let lr = lr_at(&self.config, it);
        let hp = AdamParams { beta1: self.config.adam_beta1, beta2: self.config.adam_beta2, eps: self.config.adam_eps };
        self.adam.apply(&mut self.model, &self.grads, lr, &hp);
        self.log.push(LogRow {
            iteration: it,
            lr,
            rgb: breakdown.rgb,
            mvcl: breakdown.mvcl,
            lpips: breakdown.lpips,
            total: breakdown.total,
            lambda1,
            lambda2,
            grad_norm: breakdown.grad_norm,
            rays: n_sup,
            touched_rows: self.grads.grid.touched_count(),
        });
        self.iteration += 1;
        Ok(breakdown)
    }

    /// Gradient accumulated by the most recent step.
    pub fn last_grads(&self) -> &ModelGrads<f32> {
        &self.grads
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            model: self.model.clone(),
            adam: self.adam.clone(),
            config_json: serde_json::to_string(&self.config).unwrap_or_default(),
        }
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        for row in &self.log {
            w.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn save_outputs(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(&dir.join(checkpoint_name(self.iteration)))?;
            self.write_log(&dir.join("loss.csv"))?;
        }
        Ok(())
    }

    /// Runs until `config.iterations`, saving checkpoints and the log if an output directory is set.
    pub fn run(&mut self, mut progress: impl FnMut(&LogRow)) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
            progress(self.log.last().expect("step logs a row"));
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration % every == 0 && self.iteration < self.config.iterations {
                self.save_outputs()?;
            }
        }
        self.save_outputs()
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration}.bin")
}

/// Trains from scratch and returns the final trainer state.
pub fn train(views: Vec<ViewRecord>, config: TrainConfig, out_dir: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(views, config)?;
    if let Some(d) = out_dir {
        t = t.with_output(d)?;
    }
    t.run(|_| {})?;
    Ok(t)
}
