//! Checks shared by the detailed suites and the acceptance target. Each returns a
//! short description on success and the first violation on failure.
#![allow(dead_code)]

use declutter::detector_math::{fcos_centerness, fcos_targets, focal_loss, iou_loss};
use declutter::geometry::{Aabb, Vec3};
use declutter::hash_encoding::{is_dense, level_resolution, spatial_hash, vertex_index, GridGradient, HashGrid, HashGridConfig, Indexing};
use declutter::image::Image;
use declutter::losses::{
    mvcl_loss, perceptual_loss, photometric_loss, FeatureExtractor, FeatureNorm, FilterBank, LambdaSchedule, Patch, PatchPair,
    RayBatchSupervision,
};
use declutter::metrics::psnr;
use declutter::radiance_field::{field_backward, field_forward, FieldConfig, FieldNetwork, MaskWeight};
use declutter::scene_io::{BBox, CameraModel, Pose};
use declutter::synthbench::look_at;
use declutter::volume_renderer::{composite, composite_backward, ModelGrads, RadianceModel, Ray, SamplingConfig, ShadedSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_CASES: usize = 60;
const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both are tiny.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn worst(label: &str, errs: &[f64]) -> Check {
    let w = errs.iter().cloned().fold(0.0, f64::max);
    if errs.len() >= 50 && w <= GRAD_TOL {
        Ok(format!("{label}: {} cases, worst relative error {w:.2e}", errs.len()))
    } else {
        Err(format!("{label}: {} cases, worst relative error {w:.2e} (tolerance {GRAD_TOL:.0e})", errs.len()))
    }
}

// ---------------------------------------------------------------- gradients

pub fn random_grid_config(r: &mut ChaCha8Rng) -> HashGridConfig {
    let coarsest = r.gen_range(2..6);
    HashGridConfig { levels: r.gen_range(2..5), log2_table_size: r.gen_range(6..10), features: r.gen_range(1..3), coarsest, finest: coarsest + r.gen_range(3..20) }
}

/// `L = u · enc(x)`; gradient with respect to the table entries under the eight corners of every level.
pub fn encoding_gradients() -> Check {
    let mut errs = Vec::new();
    for case in 0..GRAD_CASES {
        let mut r = rng(1000 + case as u64);
        let cfg = random_grid_config(&mut r);
        let mut grid = HashGrid::<f64>::new(cfg, case as u64).map_err(|e| e.to_string())?;
        if case % 2 == 1 {
            grid = grid.with_indexing(Indexing::Hashed);
        }
        for t in &mut grid.tables {
            t.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
        let x = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let u: Vec<f64> = (0..cfg.feature_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let enc = grid.encode(x).map_err(|e| e.to_string())?;
        let mut acc = GridGradient::new(&cfg);
        grid.encode_backward(&u, &enc.record, &mut acc).map_err(|e| e.to_string())?;
        let mut a = Vec::new();
        let mut n = Vec::new();
        for level in 0..cfg.levels {
            for &row in &enc.record[level].indices {
                for f in 0..cfg.features {
                    let k = row as usize * cfg.features + f;
                    a.push(acc.tables[level][k]);
                    let base = grid.tables[level][k];
                    n.push(central(
                        |v| {
                            grid.tables[level][k] = v;
                            let out = grid.encode(x).unwrap().vector;
                            grid.tables[level][k] = base;
                            out.iter().zip(&u).map(|(o, w)| o * w).sum()
                        },
                        base,
                    ));
                }
            }
        }
        errs.push(rel_error(&a, &n));
    }
    worst("encoding", &errs)
}

fn small_net(r: &mut ChaCha8Rng, dim: usize, seed: u64) -> FieldNetwork<f64> {
    let cfg = FieldConfig { hidden: r.gen_range(4..12), hidden_layers: r.gen_range(1..3), geo_features: r.gen_range(2..6) };
    let mut net = FieldNetwork::<f64>::new(dim, cfg, seed).unwrap();
    for l in net.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.3..0.3));
    }
    net
}

fn unit_dir(r: &mut ChaCha8Rng) -> [f64; 3] {
    let v = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)).normalized();
    v.0
}

/// `L = a·σ + b·c`; gradients with respect to every parameter and every input feature.
pub fn field_gradients() -> Check {
    let mut errs = Vec::new();
    for case in 0..GRAD_CASES {
        let mut r = rng(2000 + case as u64);
        let dim = r.gen_range(2..10);
        let mut net = small_net(&mut r, dim, case as u64);
        let feats: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dir = unit_dir(&mut r);
        let gs = r.gen_range(-1.0..1.0);
        let gc = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let loss = |net: &FieldNetwork<f64>, f: &[f64]| {
            let s = field_forward(net, f, dir, MaskWeight::OPEN).unwrap();
            gs * s.sigma + gc[0] * s.color[0] + gc[1] * s.color[1] + gc[2] * s.color[2]
        };
        let sample = field_forward(&net, &feats, dir, MaskWeight::OPEN).map_err(|e| e.to_string())?;
        let (grads, fgrad) = field_backward(&net, &sample.tape, gs, gc).map_err(|e| e.to_string())?;
        let mut a: Vec<f64> = grads.param_slices().iter().flat_map(|s| s.iter().copied()).collect();
        a.extend(&fgrad);
        let mut n = Vec::with_capacity(a.len());
        let count = net.parameter_count();
        for i in 0..count {
            let base = {
                let mut k = i;
                let mut found = 0.0;
                for s in net.param_slices() {
                    if k < s.len() {
                        found = s[k];
                        break;
                    }
                    k -= s.len();
                }
                found
            };
            n.push(central(
                |v| {
                    set_param(&mut net, i, v);
                    let out = loss(&net, &feats);
                    set_param(&mut net, i, base);
                    out
                },
                base,
            ));
        }
        for j in 0..dim {
            let mut f = feats.clone();
            n.push(central(
                |v| {
                    f[j] = v;
                    loss(&net, &f)
                },
                feats[j],
            ));
        }
        errs.push(rel_error(&a, &n));
    }
    worst("field network", &errs)
}

fn set_param(net: &mut FieldNetwork<f64>, mut i: usize, v: f64) {
    for s in net.param_slices_mut() {
        if i < s.len() {
            s[i] = v;
            return;
        }
        i -= s.len();
    }
}

fn dummy_ray() -> Ray {
    Ray { origin: Vec3::ZERO, direction: Vec3::new(0.0, 0.0, -1.0), pixel: (0, 0), view_id: 0, masked: false }
}

fn random_batch(r: &mut ChaCha8Rng) -> RayBatchSupervision {
    let n = r.gen_range(1..12);
    let col = |r: &mut ChaCha8Rng| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
    RayBatchSupervision {
        rays: vec![dummy_ray(); n],
        rendered: (0..n).map(|_| col(r)).collect(),
        target: (0..n).map(|_| col(r)).collect(),
        mvcl_counts: (0..n).map(|_| r.gen_range(0..6)).collect(),
        scale: r.gen_range(0.05..1.0),
    }
}

fn batch_fd(batch: &RayBatchSupervision, f: impl Fn(&RayBatchSupervision) -> f64) -> Vec<f64> {
    let mut b = batch.clone();
    let mut out = Vec::new();
    for i in 0..b.rendered.len() {
        for c in 0..3 {
            let base = b.rendered[i][c];
            out.push(central(
                |v| {
                    b.rendered[i][c] = v;
                    let val = f(&b);
                    b.rendered[i][c] = base;
                    val
                },
                base,
            ));
        }
    }
    out
}

pub fn photometric_gradients() -> Check {
    let errs: Vec<f64> = (0..GRAD_CASES)
        .map(|case| {
            let batch = random_batch(&mut rng(3000 + case as u64));
            let a: Vec<f64> = photometric_loss(&batch).unwrap().grads.concat();
            rel_error(&a, &batch_fd(&batch, |b| photometric_loss(b).unwrap().value))
        })
        .collect();
    worst("photometric loss", &errs)
}

pub fn mvcl_gradients() -> Check {
    let errs: Vec<f64> = (0..GRAD_CASES)
        .map(|case| {
            let batch = random_batch(&mut rng(4000 + case as u64));
            let a: Vec<f64> = mvcl_loss(&batch).unwrap().grads.concat();
            rel_error(&a, &batch_fd(&batch, |b| mvcl_loss(b).unwrap().value))
        })
        .collect();
    worst("MVCL loss", &errs)
}

pub fn perceptual_gradients() -> Check {
    let mut errs = Vec::new();
    for case in 0..GRAD_CASES {
        let mut r = rng(5000 + case as u64);
        let mut bank = FilterBank::default();
        if case % 2 == 1 {
            bank.normalization = FeatureNorm::UnitPerPosition;
        }
        let size = r.gen_range(12..17);
        let rend = Patch::from_fn(size, |_, _, _| 0.0);
        let mut pair = PatchPair { rendered: rend, target: Patch::new(size), origin: (0, 0), view_id: 0 };
        pair.rendered.data.iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0));
        pair.target.data.iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0));
        let (_, grad) = perceptual_loss(&pair, &bank).map_err(|e| e.to_string())?;
        let picks: Vec<usize> = (0..40).map(|_| r.gen_range(0..pair.rendered.data.len())).collect();
        let a: Vec<f64> = picks.iter().map(|&k| grad[k]).collect();
        let n: Vec<f64> = picks
            .iter()
            .map(|&k| {
                let base = pair.rendered.data[k];
                central(
                    |v| {
                        pair.rendered.data[k] = v;
                        let out = perceptual_loss(&pair, &bank).unwrap().0;
                        pair.rendered.data[k] = base;
                        out
                    },
                    base,
                )
            })
            .collect();
        errs.push(rel_error(&a, &n));
    }
    worst("perceptual loss", &errs)
}

pub fn composite_gradients() -> Check {
    let mut errs = Vec::new();
    for case in 0..GRAD_CASES {
        let mut r = rng(6000 + case as u64);
        let n = r.gen_range(1..10);
        let mut samples: Vec<ShadedSample> = (0..n)
            .map(|i| ShadedSample {
                sigma: r.gen_range(0.0..5.0),
                color: [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
                t: 1.0 + i as f64 * 0.1,
                delta: 0.1,
            })
            .collect();
        let bg = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let g = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let loss = |s: &[ShadedSample]| {
            let c = composite(s).unwrap().with_background(bg);
            c[0] * g[0] + c[1] * g[1] + c[2] * g[2]
        };
        let back = composite_backward(&samples, bg, g);
        let a: Vec<f64> = back.iter().flat_map(|(ds, dc)| [*ds, dc[0], dc[1], dc[2]]).collect();
        let mut num = Vec::new();
        for i in 0..n {
            let base = samples[i].sigma;
            num.push(central(
                |v| {
                    samples[i].sigma = v;
                    let out = loss(&samples);
                    samples[i].sigma = base;
                    out
                },
                base,
            ));
            for c in 0..3 {
                let base = samples[i].color[c];
                num.push(central(
                    |v| {
                        samples[i].color[c] = v;
                        let out = loss(&samples);
                        samples[i].color[c] = base;
                        out
                    },
                    base,
                ));
            }
        }
        errs.push(rel_error(&a, &num));
    }
    worst("compositing", &errs)
}

/// Whole-model check: `L = Σ g_r · C(r)` through sampling, grid, network and compositing.
pub fn model_gradients() -> Check {
    let mut errs = Vec::new();
    for case in 0..GRAD_CASES {
        let mut r = rng(6500 + case as u64);
        let cfg = HashGridConfig { levels: 2, log2_table_size: 8, features: 2, coarsest: 3, finest: 9 };
        let mut grid = HashGrid::<f64>::new(cfg, case as u64).map_err(|e| e.to_string())?;
        for t in &mut grid.tables {
            t.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
        let net = small_net(&mut r, cfg.feature_dim(), case as u64);
        let mut model = RadianceModel::new(grid, net, Aabb::UNIT).map_err(|e| e.to_string())?;
        let camera = CameraModel::from_fov_x(0.8, 8, 8).map_err(|e| e.to_string())?;
        let eye = Vec3::new(r.gen_range(1.8..2.4), r.gen_range(-0.5..1.5), r.gen_range(0.2..1.2));
        let pose = look_at(eye, Vec3::splat(0.5)).map_err(|e| e.to_string())?;
        let rays: Vec<Ray> = (0..3).map(|_| declutter::volume_renderer::camera_ray(&camera, &pose, (r.gen_range(0..8), r.gen_range(0..8)), 0, &[])).collect();
        let sampling = SamplingConfig { near: 1.0, far: 2.8, n_samples: 8, jitter: true, seed: case as u64, background: [1.0; 3] };
        let seeds: Vec<u64> = (0..rays.len() as u64).collect();
        let g: Vec<[f64; 3]> = rays.iter().map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
        let loss = |m: &RadianceModel<f64>| -> f64 {
            let tape = m.forward_rays(&rays, &sampling, &seeds).unwrap();
            tape.colors(sampling.background).iter().zip(&g).map(|(c, w)| c[0] * w[0] + c[1] * w[1] + c[2] * w[2]).sum()
        };
        let tape = model.forward_rays(&rays, &sampling, &seeds).map_err(|e| e.to_string())?;
        let mut grads = ModelGrads::new(&model);
        model.backward_rays(&tape, &g, sampling.background, &mut grads);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for level in 0..cfg.levels {
            for &row in grads.grid.touched_rows(level).iter().take(6) {
                for f in 0..cfg.features {
                    let k = row as usize * cfg.features + f;
                    a.push(grads.grid.tables[level][k]);
                    let base = model.grid.tables[level][k];
                    n.push(central(
                        |v| {
                            model.grid.tables[level][k] = v;
                            let out = loss(&model);
                            model.grid.tables[level][k] = base;
                            out
                        },
                        base,
                    ));
                }
            }
        }
        let flat: Vec<f64> = grads.net.param_slices().iter().flat_map(|s| s.iter().copied()).collect();
        for _ in 0..12 {
            let i = r.gen_range(0..flat.len());
            a.push(flat[i]);
            let base = model.net.param_slices().iter().flat_map(|s| s.iter().copied()).nth(i).unwrap();
            n.push(central(
                |v| {
                    set_param(&mut model.net, i, v);
                    let out = loss(&model);
                    set_param(&mut model.net, i, base);
                    out
                },
                base,
            ));
        }
        errs.push(rel_error(&a, &n));
    }
    worst("full model along rays", &errs)
}

// ---------------------------------------------------------------- properties

/// Tables filled with a trilinear function of the vertex position reproduce it exactly.
pub fn trilinear_exactness() -> Check {
    let mut worst_err = 0.0f64;
    for case in 0..200u64 {
        let mut r = rng(7000 + case);
        let cfg = HashGridConfig { levels: 3, log2_table_size: 14, features: 1, coarsest: r.gen_range(2..6), finest: 20 };
        let mut grid = HashGrid::<f64>::zeros(cfg).map_err(|e| e.to_string())?;
        let k: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = |p: [f64; 3]| k[0] + k[1] * p[0] + k[2] * p[1] + k[3] * p[2] + k[4] * p[0] * p[1] + k[5] * p[1] * p[2] + k[6] * p[0] * p[2] + k[7] * p[0] * p[1] * p[2];
        for l in 0..cfg.levels {
            let n = grid.level_resolutions[l];
            if !is_dense(n, cfg.table_size()) {
                return Err(format!("level {l} unexpectedly hashed"));
            }
            for z in 0..=n {
                for y in 0..=n {
                    for x in 0..=n {
                        let row = grid.index_of(l, [x, y, z]);
                        let p = [x as f64 / n as f64, y as f64 / n as f64, z as f64 / n as f64];
                        grid.tables[l][row] = f(p);
                    }
                }
            }
        }
        let x = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let enc = grid.encode(x).map_err(|e| e.to_string())?;
        let expect = f(x);
        for v in &enc.vector {
            worst_err = worst_err.max((v - expect).abs() / expect.abs().max(1e-3));
        }
    }
    if worst_err <= 1e-6 {
        Ok(format!("trilinear exactness: 200 cases, worst relative error {worst_err:.1e}"))
    } else {
        Err(format!("trilinear exactness: worst relative error {worst_err:.2e}"))
    }
}

/// Weights plus the transmittance remainder sum to one.
pub fn compositing_conservation() -> Check {
    let mut w = 0.0f64;
    for case in 0..500u64 {
        let mut r = rng(8000 + case);
        let n = r.gen_range(1..64);
        let samples: Vec<ShadedSample> = (0..n)
            .map(|i| ShadedSample { sigma: r.gen_range(0.0..50.0), color: [0.5; 3], t: i as f64, delta: r.gen_range(0.001..0.5) })
            .collect();
        let res = composite(&samples).map_err(|e| e.to_string())?;
        let total: f64 = res.per_sample_weights.iter().sum::<f64>() + res.transmittance_remainder;
        w = w.max((total - 1.0).abs());
    }
    if w <= 1e-6 {
        Ok(format!("compositing conservation: 500 cases, worst deviation {w:.1e}"))
    } else {
        Err(format!("compositing conservation: deviation {w:.2e}"))
    }
}

/// Hashing is a pure function; dense levels index one-to-one.
pub fn hash_indexing() -> Check {
    for case in 0..1000u64 {
        let mut r = rng(9000 + case);
        let v = [r.gen::<u32>() >> 8, r.gen::<u32>() >> 8, r.gen::<u32>() >> 8];
        let t = 1usize << r.gen_range(4..20);
        let h = spatial_hash(v, t);
        if h != spatial_hash(v, t) || h >= t {
            return Err(format!("hash of {v:?} unstable or out of range"));
        }
    }
    let cfg = HashGridConfig { levels: 6, log2_table_size: 12, features: 1, coarsest: 2, finest: 40 };
    let mut dense_levels = 0;
    for l in 0..cfg.levels {
        let n = level_resolution(&cfg, l).map_err(|e| e.to_string())?;
        if !is_dense(n, cfg.table_size()) {
            continue;
        }
        dense_levels += 1;
        let mut seen = vec![false; cfg.table_size()];
        for z in 0..=n {
            for y in 0..=n {
                for x in 0..=n {
                    let i = vertex_index([x, y, z], n, cfg.table_size());
                    if seen[i] {
                        return Err(format!("dense level {l} (N={n}) maps two vertices to row {i}"));
                    }
                    seen[i] = true;
                }
            }
        }
    }
    Ok(format!("hash determinism over 1000 vertices; {dense_levels} dense levels one-to-one"))
}

pub fn centerness_properties() -> Check {
    for case in 0..2000u64 {
        let mut r = rng(10_000 + case);
        let b = BBox::new(r.gen_range(0.0..50.0), r.gen_range(0.0..50.0), 0.0, 0.0, 0);
        let b = BBox { x1: b.x0 + r.gen_range(0.5..40.0), y1: b.y0 + r.gen_range(0.5..40.0), ..b };
        let loc = (r.gen_range(b.x0..b.x1), r.gen_range(b.y0..b.y1));
        let t = fcos_targets(loc, &b);
        let c = fcos_centerness(&t).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&c) {
            return Err(format!("centerness {c} outside [0,1]"));
        }
        let mut sw = t;
        std::mem::swap(&mut sw.x0s, &mut sw.x1s);
        std::mem::swap(&mut sw.y0s, &mut sw.y1s);
        if (fcos_centerness(&sw).unwrap() - c).abs() > 1e-15 {
            return Err("centerness changed under offset swap".into());
        }
        let rec = t.reconstruct(loc);
        let orig = [b.x0, b.y0, b.x1, b.y1];
        if rec.iter().zip(orig).any(|(a, o)| (a - o).abs() > 1e-9) {
            return Err(format!("box round trip {rec:?} != {orig:?}"));
        }
    }
    let mid = fcos_targets((5.0, 3.0), &BBox::new(0.0, 0.0, 10.0, 6.0, 0));
    if (fcos_centerness(&mid).unwrap() - 1.0).abs() > 1e-15 {
        return Err("centered location does not score 1".into());
    }
    Ok("centerness bounds, swap symmetry and box round trip over 2000 cases".into())
}

/// A tiny f64 model with a ray batch whose masked rays receive gradient but must not move anything.
pub fn masked_rays_zero_gradient() -> Check {
    let cfg = HashGridConfig { levels: 3, log2_table_size: 10, features: 2, coarsest: 4, finest: 16 };
    let grid = HashGrid::<f64>::new(cfg, 3).map_err(|e| e.to_string())?;
    let net = FieldNetwork::<f64>::new(cfg.feature_dim(), FieldConfig { hidden: 8, hidden_layers: 1, geo_features: 3 }, 4).map_err(|e| e.to_string())?;
    let model = RadianceModel::new(grid, net, Aabb::UNIT).map_err(|e| e.to_string())?;
    let camera = CameraModel::from_fov_x(0.8, 16, 16).map_err(|e| e.to_string())?;
    let pose: Pose = look_at(Vec3::new(2.0, 0.5, 0.6), Vec3::splat(0.5)).map_err(|e| e.to_string())?;
    let boxes = [BBox::new(0.0, 0.0, 16.0, 16.0, 0)];
    let rays: Vec<Ray> = (0..16).map(|i| declutter::volume_renderer::camera_ray(&camera, &pose, (i, 8), 0, &boxes)).collect();
    if !rays.iter().all(|r| r.masked) {
        return Err("rays inside a box are not flagged masked".into());
    }
    let sampling = SamplingConfig { near: 1.0, far: 2.5, n_samples: 24, jitter: false, seed: 0, background: [1.0; 3] };
    let tape = model.forward_rays(&rays, &sampling, &vec![0; rays.len()]).map_err(|e| e.to_string())?;
    let mut grads = ModelGrads::new(&model);
    model.backward_rays(&tape, &vec![[1.0, -1.0, 0.5]; rays.len()], [1.0; 3], &mut grads);
    if grads.grid.touched_count() != 0 || grads.grid.squared_norm() != 0.0 {
        return Err(format!("{} hash rows touched by masked rays", grads.grid.touched_count()));
    }
    let first = &grads.net.density[0].weight;
    if first.iter().any(|v| *v != 0.0) {
        return Err("masked rays reached the first density layer's weights".into());
    }
    Ok(format!("{} masked rays, {} points: zero hash-table and input-layer gradient", rays.len(), tape.evaluated_points()))
}

// ---------------------------------------------------------------- hand oracles

fn within(label: &str, got: f64, want: f64, tol: f64) -> Check {
    if (got - want).abs() <= tol {
        Ok(format!("{label} = {got:.6} (expected {want:.6})"))
    } else {
        Err(format!("{label} = {got:.9}, expected {want:.9}"))
    }
}

/// Two samples: opaque-ish red at α = 0.5, then green at α = 0.5 → (0.5, 0.25, 0).
pub fn oracle_composite() -> Check {
    let d = std::f64::consts::LN_2;
    let s = [
        ShadedSample { sigma: 1.0, color: [1.0, 0.0, 0.0], t: 1.0, delta: d },
        ShadedSample { sigma: 1.0, color: [0.0, 1.0, 0.0], t: 2.0, delta: d },
    ];
    let c = composite(&s).map_err(|e| e.to_string())?.color;
    let err = (c[0] - 0.5).abs().max((c[1] - 0.25).abs()).max(c[2].abs());
    if err <= 1e-6 {
        Ok(format!("composite two-sample C = ({:.6}, {:.6}, {:.6})", c[0], c[1], c[2]))
    } else {
        Err(format!("composite two-sample C = {c:?}"))
    }
}

/// Counts (0, 1, 3) at s = 2 with every residual norm 0.5 → 2·(0 + 0.5 + 1.5)/3 = 4/3.
pub fn oracle_mvcl() -> Check {
    let batch = RayBatchSupervision {
        rays: vec![dummy_ray(); 3],
        rendered: vec![[0.5, 0.0, 0.0], [0.0, 0.3, 0.4], [0.0, 0.0, 0.5]],
        target: vec![[0.0; 3]; 3],
        mvcl_counts: vec![0, 1, 3],
        scale: 2.0,
    };
    within("MVCL mixed counts", mvcl_loss(&batch).map_err(|e| e.to_string())?.value, 4.0 / 3.0, 1e-6)
}

pub fn oracle_focal() -> Check {
    within("focal p=0.5", focal_loss(0.5, true, 0.25, 2.0), 0.25 * 0.25 * std::f64::consts::LN_2, 1e-6)
        .and_then(|m| if (focal_loss(0.5, true, 0.25, 2.0) - 0.0433).abs() < 5e-5 { Ok(m) } else { Err("focal does not round to 0.0433".into()) })
}

/// 2×2 box against a 2×3 box sharing its anchor: IoU 4/6.
pub fn oracle_iou() -> Check {
    within("IoU loss 2x2 vs 2x3", iou_loss(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 2.0]).map_err(|e| e.to_string())?, 1.5f64.ln(), 1e-6)
}

pub fn oracle_psnr() -> Check {
    let a = Image::filled(8, 8, [0.5; 3]);
    let b = Image::filled(8, 8, [0.5 + 10.0 / 255.0; 3]);
    let p1 = psnr(&a, &b, None).map_err(|e| e.to_string())?;
    let c = Image::filled(8, 8, [0.0; 3]);
    let p2 = psnr(&a, &c, None).map_err(|e| e.to_string())?;
    let m1 = within("PSNR 8-bit MSE 100", p1, 10.0 * (255.0f64 * 255.0 / 100.0).log10(), 1e-6)?;
    let m2 = within("PSNR MSE 0.25", p2, 10.0 * 4f64.log10(), 1e-6)?;
    if (p1 - 28.13).abs() < 5e-3 && (p2 - 6.02).abs() < 5e-3 {
        Ok(format!("{m1}; {m2}"))
    } else {
        Err(format!("PSNR values {p1} / {p2} do not round to 28.13 / 6.02"))
    }
}

pub fn oracle_schedule() -> Check {
    let s = LambdaSchedule::default();
    let got = [s.at(0), s.at(399), s.at(400), s.at(9999)];
    if got == [(0.01, 0.1), (0.01, 0.1), (0.1, 0.5), (0.1, 0.5)] {
        Ok("lambda (0.01, 0.1) through iteration 399, (0.1, 0.5) from 400".into())
    } else {
        Err(format!("lambda schedule {got:?}"))
    }
}

/// Brute-force evaluation of a linear filter bank on a constant image.
pub fn brute_constant_response(bank: &FilterBank, size: usize, value: f64) -> f64 {
    // constant images stay constant through 2×2 averaging, so every scale sees `value`
    let mut sq = 0.0;
    let mut s = size;
    for _ in 0..bank.scales {
        let m = s - 2;
        for k in &bank.kernels {
            let gain = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            let resp: f64 = k.iter().map(|w| w * value).sum::<f64>() / gain;
            sq += 3.0 * (m * m) as f64 * resp * resp / (m * m) as f64;
        }
        s /= 2;
    }
    sq.sqrt()
}

pub fn oracle_constant_shift() -> Check {
    let bank = FilterBank::default();
    let size = 32;
    let mut r = rng(11);
    let base = Patch::from_fn(size, |_, _, _| 0.0);
    let mut target = base.clone();
    target.data.iter_mut().for_each(|v| *v = r.gen_range(0.0..0.8));
    let mut rendered = target.clone();
    rendered.data.iter_mut().for_each(|v| *v += 0.1);
    let pair = PatchPair { rendered, target, origin: (0, 0), view_id: 0 };
    let (got, _) = perceptual_loss(&pair, &bank).map_err(|e| e.to_string())?;
    within("perceptual constant shift", got, brute_constant_response(&bank, size, 0.1), 1e-6)
}

pub fn all_gradient_checks() -> Vec<Check> {
    vec![encoding_gradients(), field_gradients(), photometric_gradients(), mvcl_gradients(), perceptual_gradients(), composite_gradients(), model_gradients()]
}

pub fn all_property_checks() -> Vec<Check> {
    vec![trilinear_exactness(), compositing_conservation(), hash_indexing(), centerness_properties(), masked_rays_zero_gradient()]
}

pub fn all_oracle_checks() -> Vec<Check> {
    vec![oracle_composite(), oracle_mvcl(), oracle_focal(), oracle_iou(), oracle_psnr(), oracle_constant_shift()]
}

pub fn feature_count(bank: &FilterBank, size: usize) -> usize {
    bank.features(&Patch::new(size)).map(|f| f.len()).unwrap_or(0)
}
