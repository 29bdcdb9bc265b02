//! Ray generation, stratified sampling, alpha compositing, and batched evaluation
//! of the radiance model along rays (forward and reverse).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::hash_encoding::{GridGradient, HashGrid, LevelSample};
use crate::image::Image;
use crate::radiance_field::{sh_encode, FieldGrads, FieldNetwork, FieldTape};
use crate::real::Real;
use crate::scene_io::{pixel_in_boxes, BBox, CameraModel, Pose, ViewRecord};

const DEPTH_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (usize, usize),
    pub view_id: usize,
    /// Pixel lies inside a box of its own view.
    pub masked: bool,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub position: Vec3,
    pub t: f64,
    pub delta: f64,
}

/// Density and color of one sample, ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadedSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub t: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    /// `Σ wᵢ·cᵢ`, without the background term.
    pub color: [f64; 3],
    pub transmittance_remainder: f64,
    pub expected_depth: f64,
    pub per_sample_weights: Vec<f64>,
}

impl RenderResult {
    pub fn with_background(&self, bg: [f64; 3]) -> [f64; 3] {
        let t = self.transmittance_remainder;
        [self.color[0] + t * bg[0], self.color[1] + t * bg[1], self.color[2] + t * bg[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RenderOutcome {
    Rendered(RenderResult),
    MaskedSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    pub jitter: bool,
    pub seed: u64,
    pub background: [f64; 3],
}

impl SamplingConfig {
    /// Near/far bracketing `aabb` as seen from every camera center.
    pub fn bracketing(aabb: &Aabb, centers: impl IntoIterator<Item = Vec3>, n_samples: usize) -> Self {
        let half = aabb.diagonal() / 2.0;
        let c = aabb.center();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for p in centers {
            let d = (p - c).norm();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if !lo.is_finite() {
            lo = half;
            hi = half;
        }
        SamplingConfig {
            near: (lo - half).max(1e-3),
            far: hi + half,
            n_samples,
            jitter: false,
            seed: 0,
            background: [1.0; 3],
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-ray jitter seed derived from the run seed, the view and the pixel.
pub fn ray_seed(seed: u64, view_id: usize, pixel: (usize, usize)) -> u64 {
    let mut h = splitmix(seed);
    for v in [view_id as u64, pixel.0 as u64, pixel.1 as u64] {
        h = splitmix(h ^ v);
    }
    h
}

pub fn camera_ray(camera: &CameraModel, pose: &Pose, pixel: (usize, usize), view_id: usize, boxes: &[BBox]) -> Ray {
    let d_cam = camera.back_project(pixel.0 as f64, pixel.1 as f64);
    let direction = pose.rotation.mul_vec(&d_cam).normalized();
    Ray {
        origin: pose.translation,
        direction,
        pixel,
        view_id,
        masked: pixel_in_boxes(pixel.0 as f64, pixel.1 as f64, boxes),
    }
}

pub fn generate_ray(view: &ViewRecord, pixel: (usize, usize)) -> Ray {
    camera_ray(&view.camera, &view.pose, pixel, view.view_id, &view.boxes)
}

/// `n` stratified samples over `[near, far]`: one per equal bin, at the bin midpoint unless jittered.
pub fn sample_ray(ray: &Ray, near: f64, far: f64, n: usize, jitter: bool, seed: u64) -> Vec<SamplePoint> {
    let width = (far - near) / n as f64;
    let mut rng = jitter.then(|| ChaCha8Rng::seed_from_u64(seed));
    let ts: Vec<f64> = (0..n)
        .map(|i| {
            let u = match rng.as_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            near + (i as f64 + u) * width
        })
        .collect();
    (0..n)
        .map(|i| SamplePoint {
            position: ray.at(ts[i]),
            t: ts[i],
            delta: if i + 1 < n { ts[i + 1] - ts[i] } else { width },
        })
        .collect()
}

/// Alpha compositing front to back.
pub fn composite(samples: &[ShadedSample]) -> Result<RenderResult> {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(samples.len());
    let mut depth_acc = 0.0;
    for s in samples {
        if !s.sigma.is_finite() {
            return Err(Error::NonFinite { iteration: 0, what: format!("density {} in composite", s.sigma) });
        }
        if s.sigma < 0.0 || !(s.delta > 0.0) {
            return Err(Error::invalid(format!("composite: sigma {} / delta {} out of domain", s.sigma, s.delta)));
        }
        let alpha = 1.0 - (-s.sigma * s.delta).exp();
        let w = alpha * trans;
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        depth_acc += w * s.t;
        weights.push(w);
        trans *= 1.0 - alpha;
    }
    let total: f64 = weights.iter().sum();
    Ok(RenderResult {
        color,
        transmittance_remainder: trans,
        expected_depth: depth_acc / total.max(DEPTH_EPS),
        per_sample_weights: weights,
    })
}

/// Gradients of `C + T·bg` with respect to each sample's density and color,
/// given the upstream gradient `grad` on that composited color.
pub fn composite_backward(samples: &[ShadedSample], background: [f64; 3], grad: [f64; 3]) -> Vec<(f64, [f64; 3])> {
    let n = samples.len();
    let mut after = Vec::with_capacity(n); // transmittance just past sample i
    let mut weights = Vec::with_capacity(n);
    let mut trans = 1.0;
    for s in samples {
        let keep = (-s.sigma * s.delta).exp();
        weights.push(trans * (1.0 - keep));
        trans *= keep;
        after.push(trans);
    }
    let remainder = trans;
    // suffix[c] = Σ_{k>i} w_k c_k + T·bg, projected on grad
    let mut suffix = (0..3).map(|c| remainder * background[c] * grad[c]).sum::<f64>();
    let mut out = vec![(0.0, [0.0; 3]); n];
    for i in (0..n).rev() {
        let s = &samples[i];
        let own = (0..3).map(|c| s.color[c] * grad[c]).sum::<f64>();
        out[i] = (s.delta * (after[i] * own - suffix), [weights[i] * grad[0], weights[i] * grad[1], weights[i] * grad[2]]);
        suffix += weights[i] * own;
    }
    out
}

/// Hash grid plus field network plus the box that maps world space into the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceModel<T> {
    pub grid: HashGrid<T>,
    pub net: FieldNetwork<T>,
    pub aabb: Aabb,
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub grid: GridGradient<T>,
    pub net: FieldGrads<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn new(model: &RadianceModel<T>) -> Self {
        ModelGrads { grid: GridGradient::new(&model.grid.config), net: model.net.zeros_like() }
    }

    pub fn clear(&mut self) {
        self.grid.clear();
        self.net.fill_zero();
    }

    pub fn norm(&self) -> f64 {
        (self.grid.squared_norm() + self.net.squared_norm()).sqrt()
    }
}

/// Everything a batched forward pass over rays keeps for the reverse pass.
#[derive(Debug, Clone)]
pub struct RayBatchTape<T> {
    pub rays: Vec<Ray>,
    /// Shaded samples of every ray; samples outside the scene box carry zero density.
    pub shaded: Vec<Vec<ShadedSample>>,
    pub results: Vec<RenderResult>,
    /// `(ray, sample)` of each evaluated point, in tape row order.
    point_origin: Vec<(u32, u32)>,
    records: Vec<LevelSample<T>>,
    field: FieldTape<T>,
}

impl<T: Real> RayBatchTape<T> {
    pub fn colors(&self, background: [f64; 3]) -> Vec<[f64; 3]> {
        self.results.iter().map(|r| r.with_background(background)).collect()
    }

    pub fn evaluated_points(&self) -> usize {
        self.point_origin.len()
    }
}

impl<T: Real> RadianceModel<T> {
    pub fn new(grid: HashGrid<T>, net: FieldNetwork<T>, aabb: Aabb) -> Result<Self> {
        if grid.feature_dim() != net.feature_dim {
            return Err(Error::invalid("grid feature width does not match the network input"));
        }
        Ok(RadianceModel { grid, net, aabb })
    }

    /// Renders a batch of rays. `seeds[i]` drives the jitter of ray `i`.
    pub fn forward_rays(&self, rays: &[Ray], cfg: &SamplingConfig, seeds: &[u64]) -> Result<RayBatchTape<T>> {
        let levels = self.grid.config.levels;
        let dim = self.grid.feature_dim();
        let mut samples_per_ray = Vec::with_capacity(rays.len());
        let mut point_origin = Vec::new();
        let mut features = Vec::new();
        let mut records = Vec::new();
        let mut sh = Vec::new();
        let mut mask = Vec::new();
        for (ri, ray) in rays.iter().enumerate() {
            let samples = sample_ray(ray, cfg.near, cfg.far, cfg.n_samples, cfg.jitter, seeds[ri]);
            let dir_sh = sh_encode(ray.direction.0);
            let w = if ray.masked { T::zero() } else { T::one() };
            for (si, s) in samples.iter().enumerate() {
                if let Some(x) = self.aabb.normalize(&s.position) {
                    point_origin.push((ri as u32, si as u32));
                    let f0 = features.len();
                    features.resize(f0 + dim, T::zero());
                    let r0 = records.len();
                    records.resize(r0 + levels, LevelSample::default());
                    self.grid.encode_into(x, &mut features[f0..], &mut records[r0..]);
                    sh.extend(dir_sh.iter().map(|&v| T::of(v)));
                    mask.push(w);
                }
            }
            samples_per_ray.push(samples);
        }
        let field = self.net.forward_batch(&features, &sh, &mask);

        let mut shaded: Vec<Vec<ShadedSample>> = samples_per_ray
            .iter()
            .map(|ss| ss.iter().map(|s| ShadedSample { sigma: 0.0, color: [0.0; 3], t: s.t, delta: s.delta }).collect())
            .collect();
        for (p, &(ri, si)) in point_origin.iter().enumerate() {
            let s = &mut shaded[ri as usize][si as usize];
            s.sigma = field.sigma[p].to_f64();
            s.color = [field.color[3 * p].to_f64(), field.color[3 * p + 1].to_f64(), field.color[3 * p + 2].to_f64()];
        }
        let results = shaded.iter().map(|s| composite(s)).collect::<Result<Vec<_>>>()?;
        Ok(RayBatchTape { rays: rays.to_vec(), shaded, results, point_origin, records, field })
    }

    /// Accumulates parameter gradients for upstream gradients on each ray's composited color (background included).
    pub fn backward_rays(&self, tape: &RayBatchTape<T>, grad_colors: &[[f64; 3]], background: [f64; 3], grads: &mut ModelGrads<T>) {
        let feature_grad = self.backward_field(tape, grad_colors, background, &mut grads.net);
        self.scatter_features(tape, &feature_grad, &mut grads.grid);
    }

    /// Network half of [`Self::backward_rays`]: accumulates MLP gradients and returns the
    /// gradient on every evaluated point's encoded features.
    pub fn backward_field(&self, tape: &RayBatchTape<T>, grad_colors: &[[f64; 3]], background: [f64; 3], net_grads: &mut FieldGrads<T>) -> Vec<T> {
        assert_eq!(grad_colors.len(), tape.rays.len());
        let per_ray: Vec<Vec<(f64, [f64; 3])>> = tape
            .shaded
            .iter()
            .zip(grad_colors)
            .map(|(s, g)| {
                if g.iter().all(|v| *v == 0.0) {
                    Vec::new()
                } else {
                    composite_backward(s, background, *g)
                }
            })
            .collect();
        let n = tape.point_origin.len();
        let mut gs = vec![T::zero(); n];
        let mut gc = vec![T::zero(); 3 * n];
        for (p, &(ri, si)) in tape.point_origin.iter().enumerate() {
            if let Some(&(ds, dc)) = per_ray[ri as usize].get(si as usize) {
                gs[p] = T::of(ds);
                for c in 0..3 {
                    gc[3 * p + c] = T::of(dc[c]);
                }
            }
        }
        self.net.backward_batch(&tape.field, &gs, &gc, net_grads)
    }

    /// Grid half of [`Self::backward_rays`].
    pub fn scatter_features(&self, tape: &RayBatchTape<T>, feature_grad: &[T], grid_grads: &mut GridGradient<T>) {
        let dim = self.grid.feature_dim();
        let levels = self.grid.config.levels;
        for p in 0..tape.point_origin.len() {
            self.grid.backward_into(
                &feature_grad[p * dim..(p + 1) * dim],
                &tape.records[p * levels..(p + 1) * levels],
                grid_grads,
            );
        }
    }

    /// Rendering of one training pixel; rays inside the view's own boxes are skipped.
    pub fn render_pixel_masked(&self, view: &ViewRecord, pixel: (usize, usize), cfg: &SamplingConfig) -> Result<RenderOutcome> {
        let ray = generate_ray(view, pixel);
        if ray.masked {
            return Ok(RenderOutcome::MaskedSkip);
        }
        let tape = self.forward_rays(&[ray], cfg, &[ray_seed(cfg.seed, view.view_id, pixel)])?;
        Ok(RenderOutcome::Rendered(tape.results.into_iter().next().unwrap()))
    }

    /// Full-frame render from an arbitrary pose (no boxes apply). Returns the image and the expected-depth map.
    pub fn render_image(&self, camera: &CameraModel, pose: &Pose, cfg: &SamplingConfig) -> Result<(Image, Vec<f64>)> {
        const CHUNK: usize = 256;
        let (w, h) = (camera.width, camera.height);
        let mut image = Image::new(w, h);
        let mut depth = vec![0.0; w * h];
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        for chunk in pixels.chunks(CHUNK) {
            let rays: Vec<Ray> = chunk.iter().map(|&p| camera_ray(camera, pose, p, usize::MAX, &[])).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&p| ray_seed(cfg.seed, usize::MAX, p)).collect();
            let tape = self.forward_rays(&rays, cfg, &seeds)?;
            for (&(x, y), r) in chunk.iter().zip(&tape.results) {
                image.set(x, y, r.with_background(cfg.background));
                depth[y * w + x] = r.expected_depth;
            }
        }
        Ok((image, depth))
    }
}

/// Quantizes a depth map to 16 bits; returns the values and the world units per level.
pub fn quantize_depth(depth: &[f64], far: f64) -> (Vec<u16>, f64) {
    let scale = far.max(1e-9) / 65535.0;
    (depth.iter().map(|d| (d / scale).round().clamp(0.0, 65535.0) as u16).collect(), scale)
}
