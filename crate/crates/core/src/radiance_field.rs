//! Tiny fully-connected radiance field with hand-written reverse mode.
//!
//! The density head maps the (mask-weighted) hash features to a raw density and
//! a block of geometry features; the color head consumes those geometry
//! features together with a spherical-harmonics encoding of the view direction.
//! Everything is evaluated in row-major batches so the dense layers reduce to
//! matrix products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene_io::BBox;

pub const SH_DIM: usize = 16;
/// Raw density is clamped here before exponentiation.
pub const SIGMA_RAW_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub geo_features: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { hidden: 64, hidden_layers: 2, geo_features: 15 }
    }
}

/// Per-ray feature multiplier: 0 inside a box of the ray's own view, 1 elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskWeight(u8);

impl MaskWeight {
    pub const MASKED: MaskWeight = MaskWeight(0);
    pub const OPEN: MaskWeight = MaskWeight(1);

    pub fn value(self) -> f64 {
        self.0 as f64
    }
}

pub fn mask_weight(pixel: (f64, f64), boxes: &[BBox]) -> MaskWeight {
    if crate::scene_io::pixel_in_boxes(pixel.0, pixel.1, boxes) {
        MaskWeight::MASKED
    } else {
        MaskWeight::OPEN
    }
}

/// Real spherical harmonics up to degree 4 of a unit direction.
pub fn sh_encode(d: [f64; 3]) -> [f64; SH_DIM] {
    let [x, y, z] = d;
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        0.28209479177387814,
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * xy,
        -1.0925484305920792 * yz,
        0.94617469575755997 * z2 - 0.31539156525251999,
        -1.0925484305920792 * xz,
        0.54627421529603959 * x2 - 0.54627421529603959 * y2,
        0.59004358992664352 * y * (-3.0 * x2 + y2),
        2.8906114426405538 * xy * z,
        0.45704579946446572 * y * (1.0 - 5.0 * z2),
        0.3731763325901154 * z * (5.0 * z2 - 3.0),
        0.45704579946446572 * x * (1.0 - 5.0 * z2),
        1.4453057213202769 * z * (x2 - y2),
        0.59004358992664352 * x * (-x2 + 3.0 * y2),
    ]
}

/// Fully-connected layer `y = x·W + b` with `W` stored `inputs × outputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weight: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    fn forward(&self, x: &[T], n: usize, y: &mut Vec<T>) {
        y.clear();
        y.reserve(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(&self.bias);
        }
        T::gemm(
            n,
            self.inputs,
            self.outputs,
            T::one(),
            x,
            self.inputs as isize,
            1,
            &self.weight,
            self.outputs as isize,
            1,
            T::one(),
            y,
            self.outputs as isize,
            1,
        );
    }

    /// Accumulates parameter gradients into `grad` and writes `dL/dx` into `dx` (if requested).
    fn backward(&self, x: &[T], dy: &[T], n: usize, grad: &mut Dense<T>, dx: Option<&mut Vec<T>>) {
        // dW += xᵀ·dy
        T::gemm(
            self.inputs,
            n,
            self.outputs,
            T::one(),
            x,
            1,
            self.inputs as isize,
            dy,
            self.outputs as isize,
            1,
            T::one(),
            &mut grad.weight,
            self.outputs as isize,
            1,
        );
        for row in dy.chunks_exact(self.outputs) {
            for (b, &g) in grad.bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        if let Some(dx) = dx {
            dx.clear();
            dx.resize(n * self.inputs, T::zero());
            // dx = dy·Wᵀ
            T::gemm(
                n,
                self.outputs,
                self.inputs,
                T::one(),
                dy,
                self.outputs as isize,
                1,
                &self.weight,
                1,
                self.outputs as isize,
                T::zero(),
                dx,
                self.inputs as isize,
                1,
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetwork<T> {
    pub config: FieldConfig,
    pub feature_dim: usize,
    pub density: Vec<Dense<T>>,
    pub color: Vec<Dense<T>>,
}

/// Gradients share the network's layout.
pub type FieldGrads<T> = FieldNetwork<T>;

/// Activations retained by a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct FieldTape<T> {
    pub n: usize,
    pub mask: Vec<T>,
    /// Input of every density layer; entry 0 is the mask-scaled feature matrix.
    density_inputs: Vec<Vec<T>>,
    /// Input of every color layer; entry 0 is `[geometry | sh]`.
    color_inputs: Vec<Vec<T>>,
    sigma_raw: Vec<T>,
    pub sigma: Vec<T>,
    /// Squashed colors, `n × 3`.
    pub color: Vec<T>,
}

impl<T: Real> FieldNetwork<T> {
    pub fn zeros(feature_dim: usize, config: FieldConfig) -> Self {
        let FieldConfig { hidden, hidden_layers, geo_features } = config;
        let mut density = vec![Dense::zeros(feature_dim, hidden)];
        let mut color = vec![Dense::zeros(geo_features + SH_DIM, hidden)];
        for _ in 1..hidden_layers {
            density.push(Dense::zeros(hidden, hidden));
            color.push(Dense::zeros(hidden, hidden));
        }
        density.push(Dense::zeros(hidden, 1 + geo_features));
        color.push(Dense::zeros(hidden, 3));
        FieldNetwork { config, feature_dim, density, color }
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(feature_dim: usize, config: FieldConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.hidden_layers == 0 {
            return Err(Error::invalid("field network needs at least one hidden layer of nonzero width"));
        }
        let mut net = Self::zeros(feature_dim, config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.density.iter_mut().chain(net.color.iter_mut()) {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim, self.config)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.density.iter().chain(self.color.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.density.iter_mut().chain(self.color.iter_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weight and bias slices in a fixed order (density layers, then color layers).
    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.param_slices().iter().flat_map(|s| s.iter()).map(|v| Real::to_f64(*v).powi(2)).sum()
    }

    /// Evaluates `n` points. `features` is `n × feature_dim`, `sh` is `n × 16`, `mask` has one weight per row.
    pub fn forward_batch(&self, features: &[T], sh: &[T], mask: &[T]) -> FieldTape<T> {
        let n = mask.len();
        assert_eq!(features.len(), n * self.feature_dim, "forward_batch: feature shape");
        assert_eq!(sh.len(), n * SH_DIM, "forward_batch: direction shape");
        let geo = self.config.geo_features;

        let mut x0 = Vec::with_capacity(features.len());
        for (row, &w) in features.chunks_exact(self.feature_dim).zip(mask) {
            x0.extend(row.iter().map(|&v| v * w));
        }
        let mut density_inputs = vec![x0];
        let last_d = self.density.len() - 1;
        let mut out = Vec::new();
        for (i, layer) in self.density.iter().enumerate() {
            let mut y = Vec::new();
            layer.forward(density_inputs.last().unwrap(), n, &mut y);
            if i < last_d {
                relu(&mut y);
                density_inputs.push(y);
            } else {
                out = y;
            }
        }

        let clamp = T::of(SIGMA_RAW_CLAMP);
        let mut sigma_raw = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        let mut cx0 = Vec::with_capacity(n * (geo + SH_DIM));
        for (row, sh_row) in out.chunks_exact(1 + geo).zip(sh.chunks_exact(SH_DIM)) {
            sigma_raw.push(row[0]);
            sigma.push(row[0].min(clamp).exp());
            cx0.extend_from_slice(&row[1..]);
            cx0.extend_from_slice(sh_row);
        }

        let mut color_inputs = vec![cx0];
        let last_c = self.color.len() - 1;
        let mut color = Vec::new();
        for (i, layer) in self.color.iter().enumerate() {
            let mut y = Vec::new();
            layer.forward(color_inputs.last().unwrap(), n, &mut y);
            if i < last_c {
                relu(&mut y);
                color_inputs.push(y);
            } else {
                y.iter_mut().for_each(|v| *v = sigmoid(*v));
                color = y;
            }
        }

        FieldTape { n, mask: mask.to_vec(), density_inputs, color_inputs, sigma_raw, sigma, color }
    }

    /// Reverse pass for a batch. Parameter gradients are added into `grads`; the
    /// returned vector is `dL/d(features)` (`n × feature_dim`, already multiplied by the mask).
    pub fn backward_batch(&self, tape: &FieldTape<T>, grad_sigma: &[T], grad_color: &[T], grads: &mut FieldGrads<T>) -> Vec<T> {
        let n = tape.n;
        assert_eq!(grad_sigma.len(), n, "backward_batch: sigma gradient shape");
        assert_eq!(grad_color.len(), n * 3, "backward_batch: color gradient shape");
        let geo = self.config.geo_features;

        let mut dy: Vec<T> = tape
            .color
            .iter()
            .zip(grad_color)
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect();
        let mut dx = Vec::new();
        for i in (0..self.color.len()).rev() {
            let x = &tape.color_inputs[i];
            self.color[i].backward(x, &dy, n, &mut grads.color[i], Some(&mut dx));
            if i > 0 {
                relu_backward(&mut dx, x);
            }
            std::mem::swap(&mut dy, &mut dx);
        }
        // dy now holds dL/d[geometry | sh]
        let clamp = T::of(SIGMA_RAW_CLAMP);
        let mut d_out = Vec::with_capacity(n * (1 + geo));
        for r in 0..n {
            let ds = if tape.sigma_raw[r] < clamp { grad_sigma[r] * tape.sigma[r] } else { T::zero() };
            d_out.push(ds);
            d_out.extend_from_slice(&dy[r * (geo + SH_DIM)..r * (geo + SH_DIM) + geo]);
        }

        let mut dy = d_out;
        for i in (0..self.density.len()).rev() {
            let x = &tape.density_inputs[i];
            self.density[i].backward(x, &dy, n, &mut grads.density[i], Some(&mut dx));
            if i > 0 {
                relu_backward(&mut dx, x);
            }
            std::mem::swap(&mut dy, &mut dx);
        }
        for (row, &w) in dy.chunks_exact_mut(self.feature_dim).zip(&tape.mask) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        dy
    }
}

fn relu<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn relu_backward<T: Real>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Output of a single-point evaluation.
#[derive(Debug, Clone)]
pub struct FieldSample<T> {
    pub sigma: T,
    pub color: [T; 3],
    pub tape: FieldTape<T>,
}

/// Evaluates one point: features are scaled by `w` before entering the network.
pub fn field_forward<T: Real>(net: &FieldNetwork<T>, encoded: &[T], view_dir: [f64; 3], w: MaskWeight) -> Result<FieldSample<T>> {
    if encoded.len() != net.feature_dim {
        return Err(Error::invalid(format!(
            "field_forward: expected {} features, got {}",
            net.feature_dim,
            encoded.len()
        )));
    }
    if !encoded.iter().all(|v| v.is_finite()) || !view_dir.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("field_forward: non-finite input"));
    }
    let len = view_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("field_forward: view direction has length {len}")));
    }
    let sh: Vec<T> = sh_encode(view_dir).iter().map(|&v| T::of(v)).collect();
    let tape = net.forward_batch(encoded, &sh, &[T::of(w.value())]);
    Ok(FieldSample { sigma: tape.sigma[0], color: [tape.color[0], tape.color[1], tape.color[2]], tape })
}

/// Reverse pass of [`field_forward`]: returns fresh parameter gradients and `dL/d(encoded)`.
pub fn field_backward<T: Real>(
    net: &FieldNetwork<T>,
    tape: &FieldTape<T>,
    grad_sigma: T,
    grad_color: [T; 3],
) -> Result<(FieldGrads<T>, Vec<T>)> {
    if tape.n != 1 || tape.density_inputs.len() != net.density.len() || tape.color_inputs.len() != net.color.len() {
        return Err(Error::invalid("field_backward: tape does not match this network"));
    }
    let mut grads = net.zeros_like();
    let feature_grad = net.backward_batch(tape, &[grad_sigma], &grad_color, &mut grads);
    Ok((grads, feature_grad))
}
