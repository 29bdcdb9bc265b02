//! Photometric, multi-view compensation, and perceptual losses plus the
//! scheduled total objective. All losses return gradients with respect to the
//! rendered colors so the caller can push them through the renderer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::{pixel_in_boxes, ViewRecord};
use crate::volume_renderer::Ray;

const ZERO_NORM: f64 = 1e-12;

/// Compensated (Neumaier) summation; the result does not depend on input order beyond rounding of the final sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatchSupervision {
    pub rays: Vec<Ray>,
    pub rendered: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
    pub mvcl_counts: Vec<usize>,
    pub scale: f64,
}

impl RayBatchSupervision {
    pub fn validate(&self) -> Result<()> {
        let n = self.rays.len();
        if self.rendered.len() != n || self.target.len() != n || (!self.mvcl_counts.is_empty() && self.mvcl_counts.len() != n) {
            return Err(Error::invalid("ray batch fields have mismatched lengths"));
        }
        if self.rays.iter().any(|r| r.masked) {
            return Err(Error::invalid("supervision batch contains a masked ray"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid(format!("scale factor must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// A loss value with its gradient on each rendered color.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<[f64; 3]>,
}

fn residual(a: &[f64; 3], b: &[f64; 3]) -> ([f64; 3], f64) {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d, (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
}

fn weighted_norm_loss(batch: &RayBatchSupervision, weight: impl Fn(usize) -> f64) -> LossValue {
    let n = batch.rays.len() as f64;
    let mut terms = Vec::with_capacity(batch.rays.len());
    let mut grads = Vec::with_capacity(batch.rays.len());
    for (i, (r, t)) in batch.rendered.iter().zip(&batch.target).enumerate() {
        let (d, norm) = residual(r, t);
        let w = weight(i);
        terms.push(w * norm);
        grads.push(if norm < ZERO_NORM || w == 0.0 {
            [0.0; 3]
        } else {
            let s = w / (norm * n);
            [d[0] * s, d[1] * s, d[2] * s]
        });
    }
    LossValue { value: stable_sum(terms) / n, grads }
}

/// Mean Euclidean color error over the (unmasked) rays of the batch.
pub fn photometric_loss(batch: &RayBatchSupervision) -> Result<LossValue> {
    if batch.rays.is_empty() {
        return Err(Error::invalid("photometric loss over an empty batch"));
    }
    batch.validate()?;
    Ok(weighted_norm_loss(batch, |_| 1.0))
}

/// Number of views in which `origin + depth·direction` lands on-screen and outside every box.
pub fn mvcl_count(ray: &Ray, views: &[ViewRecord], depth: f64) -> usize {
    let point = ray.at(depth);
    views
        .iter()
        .filter(|v| match v.camera.project_to_pixel(&v.pose.world_to_camera(&point)) {
            Some((x, y)) => !pixel_in_boxes(x as f64, y as f64, &v.boxes),
            None => false,
        })
        .count()
}

/// Photometric error reweighted by `s·n_r` per ray.
pub fn mvcl_loss(batch: &RayBatchSupervision) -> Result<LossValue> {
    if batch.rays.is_empty() {
        return Ok(LossValue { value: 0.0, grads: Vec::new() });
    }
    batch.validate()?;
    if batch.mvcl_counts.len() != batch.rays.len() {
        return Err(Error::invalid("mvcl loss needs one view count per ray"));
    }
    Ok(weighted_norm_loss(batch, |i| batch.scale * batch.mvcl_counts[i] as f64))
}

/// Square RGB patch, row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize) -> Self {
        Patch { size, data: vec![0.0; size * size * 3] }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut p = Patch::new(size);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    p.data[(y * size + x) * 3 + c] = f(x, y, c);
                }
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub rendered: Patch,
    pub target: Patch,
    pub origin: (usize, usize),
    pub view_id: usize,
}

/// A fixed differentiable map from a patch to a feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn min_size(&self) -> usize;

    fn features(&self, patch: &Patch) -> Result<Vec<f64>>;

    /// Vector-Jacobian product: gradient on the patch for a gradient on the features.
    fn backward(&self, patch: &Patch, feature_grad: &[f64]) -> Result<Vec<f64>>;
}

/// How filter responses are normalized before the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureNorm {
    /// Each channel divided by its kernel's L2 norm; the extractor stays linear.
    #[default]
    Channel,
    /// Responses at each position scaled to unit length across channels.
    UnitPerPosition,
}

/// Multi-scale bank of 3×3 filters applied per color channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub kernels: Vec<[f64; 9]>,
    pub scales: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub normalization: FeatureNorm,
}

fn default_eps() -> f64 {
    1e-10
}

impl Default for FilterBank {
    fn default() -> Self {
        FilterBank {
            kernels: vec![
                [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0, 2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
                [-1.0 / 8.0, 0.0, 1.0 / 8.0, -2.0 / 8.0, 0.0, 2.0 / 8.0, -1.0 / 8.0, 0.0, 1.0 / 8.0],
                [-1.0 / 8.0, -2.0 / 8.0, -1.0 / 8.0, 0.0, 0.0, 0.0, 1.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0],
                [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
            ],
            scales: 3,
            eps: default_eps(),
            normalization: FeatureNorm::Channel,
        }
    }
}

/// 2×2 box downsample; odd trailing rows/columns are dropped.
pub fn downsample(img: &[f64], size: usize) -> (Vec<f64>, usize) {
    let half = size / 2;
    let mut out = vec![0.0; half * half * 3];
    for y in 0..half {
        for x in 0..half {
            for c in 0..3 {
                let at = |xx: usize, yy: usize| img[(yy * size + xx) * 3 + c];
                out[(y * half + x) * 3 + c] =
                    0.25 * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
            }
        }
    }
    (out, half)
}

impl FilterBank {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: FilterBank = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if bank.kernels.is_empty() || bank.scales == 0 {
            return Err(Error::invalid("filter bank needs at least one kernel and one scale"));
        }
        Ok(bank)
    }

    fn channels(&self) -> usize {
        3 * self.kernels.len()
    }

    /// Per-kernel divisor used by [`FeatureNorm::Channel`].
    fn gains(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.iter().map(|v| v * v).sum::<f64>().sqrt().max(self.eps)).collect()
    }

    fn pyramid(&self, patch: &Patch) -> Vec<(Vec<f64>, usize)> {
        let mut levels = vec![(patch.data.clone(), patch.size)];
        for _ in 1..self.scales {
            let (img, size) = levels.last().unwrap();
            let next = downsample(img, *size);
            levels.push(next);
        }
        levels
    }

    /// Raw responses at one scale: `(size−2)²` positions × `3·K` channels.
    fn responses(&self, img: &[f64], size: usize) -> Vec<f64> {
        let m = size - 2;
        let ch = self.channels();
        let mut out = vec![0.0; m * m * ch];
        for y in 0..m {
            for x in 0..m {
                let o = (y * m + x) * ch;
                for c in 0..3 {
                    for (k, kern) in self.kernels.iter().enumerate() {
                        let mut acc = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += kern[dy * 3 + dx] * img[((y + dy) * size + x + dx) * 3 + c];
                            }
                        }
                        out[o + c * self.kernels.len() + k] = acc;
                    }
                }
            }
        }
        out
    }

    fn check(&self, patch: &Patch) -> Result<()> {
        if patch.data.len() != patch.size * patch.size * 3 {
            return Err(Error::invalid("patch data does not match its size"));
        }
        if patch.size < self.min_size() {
            return Err(Error::invalid(format!(
                "patch of size {} is smaller than the extractor minimum {}",
                patch.size,
                self.min_size()
            )));
        }
        Ok(())
    }
}

impl FeatureExtractor for FilterBank {
    fn min_size(&self) -> usize {
        3 << (self.scales - 1)
    }

    fn features(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.check(patch)?;
        let ch = self.channels();
        let mut out = Vec::new();
        for (img, size) in self.pyramid(patch) {
            let raw = self.responses(&img, size);
            let positions = raw.len() / ch;
            let scale_w = 1.0 / (positions as f64).sqrt();
            match self.normalization {
                FeatureNorm::Channel => {
                    let gains = self.gains();
                    let kn = gains.len();
                    out.extend(raw.iter().enumerate().map(|(j, a)| scale_w * a / gains[j % kn]));
                }
                FeatureNorm::UnitPerPosition => {
                    for v in raw.chunks_exact(ch) {
                        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                        out.extend(v.iter().map(|a| scale_w * a / (norm + self.eps)));
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, patch: &Patch, feature_grad: &[f64]) -> Result<Vec<f64>> {
        self.check(patch)?;
        let ch = self.channels();
        let kn = self.kernels.len();
        let gains = self.gains();
        let pyramid = self.pyramid(patch);
        let mut offset = 0;
        let mut level_grads: Vec<Vec<f64>> = Vec::with_capacity(pyramid.len());
        for (img, size) in &pyramid {
            let raw = self.responses(img, *size);
            let positions = raw.len() / ch;
            let scale_w = 1.0 / (positions as f64).sqrt();
            let m = size - 2;
            let mut g_img = vec![0.0; size * size * 3];
            for (p, v) in raw.chunks_exact(ch).enumerate() {
                let g = &feature_grad[offset + p * ch..offset + (p + 1) * ch];
                // gradient on the raw responses at this position
                let graw: Vec<f64> = match self.normalization {
                    FeatureNorm::Channel => g.iter().enumerate().map(|(j, gj)| scale_w * gj / gains[j % kn]).collect(),
                    FeatureNorm::UnitPerPosition => {
                        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let denom = norm + self.eps;
                        // d(v/(|v|+eps))ᵀ·g = g/denom − v (v·g) / (|v| denom²)
                        let vg: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
                        let coef = if norm > 0.0 { vg / (norm * denom * denom) } else { 0.0 };
                        g.iter().zip(v).map(|(gj, vj)| scale_w * (gj / denom - vj * coef)).collect()
                    }
                };
                let (y, x) = (p / m, p % m);
                for c in 0..3 {
                    for (k, kern) in self.kernels.iter().enumerate() {
                        let gr = graw[c * kn + k];
                        if gr == 0.0 {
                            continue;
                        }
                        for dy in 0..3 {
                            for dx in 0..3 {
                                g_img[((y + dy) * size + x + dx) * 3 + c] += kern[dy * 3 + dx] * gr;
                            }
                        }
                    }
                }
            }
            offset += raw.len();
            level_grads.push(g_img);
        }
        if offset != feature_grad.len() {
            return Err(Error::invalid("feature gradient length does not match the extractor output"));
        }
        // fold coarse-level gradients back through the 2×2 averages
        for s in (1..pyramid.len()).rev() {
            let (fine_size, coarse_size) = (pyramid[s - 1].1, pyramid[s].1);
            let coarse = std::mem::take(&mut level_grads[s]);
            let fine = &mut level_grads[s - 1];
            for y in 0..coarse_size {
                for x in 0..coarse_size {
                    for c in 0..3 {
                        let g = 0.25 * coarse[(y * coarse_size + x) * 3 + c];
                        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            fine[((2 * y + dy) * fine_size + 2 * x + dx) * 3 + c] += g;
                        }
                    }
                }
            }
        }
        Ok(level_grads.swap_remove(0))
    }
}

/// `‖F(rendered) − F(target)‖₂` and its gradient on the rendered patch.
pub fn perceptual_loss(pair: &PatchPair, extractor: &dyn FeatureExtractor) -> Result<(f64, Vec<f64>)> {
    if pair.rendered.size != pair.target.size {
        return Err(Error::invalid("perceptual loss: patch sizes differ"));
    }
    let fr = extractor.features(&pair.rendered)?;
    let ft = extractor.features(&pair.target)?;
    let diff: Vec<f64> = fr.iter().zip(&ft).map(|(a, b)| a - b).collect();
    let value = stable_sum(diff.iter().map(|d| d * d)).sqrt();
    if value < ZERO_NORM {
        return Ok((value, vec![0.0; pair.rendered.data.len()]));
    }
    let g: Vec<f64> = diff.iter().map(|d| d / value).collect();
    Ok((value, extractor.backward(&pair.rendered, &g)?))
}

/// Step schedule for the MVCL and perceptual weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub warmup_iterations: usize,
    pub warmup: (f64, f64),
    pub post: (f64, f64),
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule { warmup_iterations: 400, warmup: (0.01, 0.1), post: (0.1, 0.5) }
    }
}

impl LambdaSchedule {
    pub fn at(&self, iteration: usize) -> (f64, f64) {
        if iteration < self.warmup_iterations {
            self.warmup
        } else {
            self.post
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub mvcl: f64,
    pub lpips: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Norm of the full parameter gradient, filled in by the trainer.
    pub grad_norm: f64,
}

pub fn total_loss(rgb: f64, mvcl: f64, lpips: f64, iteration: usize, schedule: &LambdaSchedule) -> LossBreakdown {
    let (lambda1, lambda2) = schedule.at(iteration);
    LossBreakdown { rgb, mvcl, lpips, total: rgb + lambda1 * mvcl + lambda2 * lpips, lambda1, lambda2, grad_norm: 0.0 }
}
