//! Anchor-free detector target math: regression offsets, centerness, focal and IoU losses.
//!
//! Nothing here trains a detector; these are the pure functions a detector's
//! training loop would call, kept so label files can be sanity-checked.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene_io::BBox;

pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_FLOOR: f64 = 1e-7;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Offsets from a feature-map location to the four sides of its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FcosTargets {
    pub x0s: f64,
    pub x1s: f64,
    pub y0s: f64,
    pub y1s: f64,
    pub centerness: f64,
    pub class_label: u32,
    pub positive: bool,
}

impl FcosTargets {
    pub fn offsets(&self) -> [f64; 4] {
        [self.x0s, self.x1s, self.y0s, self.y1s]
    }

    /// The box `(x − x₀*, y − y₀*, x + x₁*, y + y₁*)` around `location`.
    pub fn reconstruct(&self, location: (f64, f64)) -> [f64; 4] {
        let (x, y) = location;
        [x - self.x0s, y - self.y0s, x + self.x1s, y + self.y1s]
    }
}

pub fn fcos_targets(location: (f64, f64), bbox: &BBox) -> FcosTargets {
    let (x, y) = location;
    let mut t = FcosTargets {
        x0s: x - bbox.x0,
        x1s: bbox.x1 - x,
        y0s: y - bbox.y0,
        y1s: bbox.y1 - y,
        centerness: 0.0,
        class_label: bbox.class_id,
        positive: false,
    };
    t.positive = t.x0s >= 0.0 && t.x1s >= 0.0 && t.y0s >= 0.0 && t.y1s >= 0.0;
    if t.positive {
        // A zero-extent box has no meaningful center; leave it at 0.
        t.centerness = fcos_centerness(&t).unwrap_or(0.0);
    }
    t
}

/// `sqrt(min(x₀*,x₁*)/max(x₀*,x₁*) · min(y₀*,y₁*)/max(y₀*,y₁*))`.
pub fn fcos_centerness(t: &FcosTargets) -> Result<f64> {
    if t.offsets().iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("centerness needs a positive location"));
    }
    let (mx, my) = (t.x0s.max(t.x1s), t.y0s.max(t.y1s));
    if mx == 0.0 || my == 0.0 {
        return Err(Error::invalid("centerness of a degenerate box"));
    }
    Ok((t.x0s.min(t.x1s) / mx * (t.y0s.min(t.y1s) / my)).sqrt())
}

/// `−α_t (1 − p_t)^γ ln p_t`, with `p` clamped away from 0 and 1.
pub fn focal_loss(p: f64, p_star: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (pt, at) = if p_star { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

fn box_area(o: &[f64; 4]) -> f64 {
    (o[0] + o[1]) * (o[2] + o[3])
}

/// `−ln IoU` of two boxes that share their anchor location; offsets are `(x₀*, x₁*, y₀*, y₁*)`.
pub fn iou_loss(pred: &[f64; 4], target: &[f64; 4]) -> Result<f64> {
    if pred.iter().chain(target).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("IoU offsets must be finite and non-negative"));
    }
    let at = box_area(target);
    if at <= 0.0 {
        return Err(Error::invalid("IoU target has zero area"));
    }
    let iw = pred[0].min(target[0]) + pred[1].min(target[1]);
    let ih = pred[2].min(target[2]) + pred[3].min(target[3]);
    let inter = iw * ih;
    let union = box_area(pred) + at - inter;
    Ok(-(inter / union).max(IOU_FLOOR).ln())
}

/// Binary cross-entropy, clamped like [`focal_loss`].
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// One location's network output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionPrediction {
    pub class_prob: f64,
    pub offsets: [f64; 4],
    pub centerness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionLossTerms {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub n_pos: usize,
    pub lambda: f64,
}

impl DetectionLossTerms {
    /// `(Σcls + λ·Σreg + Σctr) / N_pos`, with `N_pos` floored at 1.
    pub fn total(&self) -> f64 {
        (self.cls + self.lambda * self.reg + self.ctr) / self.n_pos.max(1) as f64
    }
}

/// Sums the three terms over every location of a feature map.
pub fn detection_loss(preds: &[DetectionPrediction], targets: &[FcosTargets], lambda: f64) -> Result<DetectionLossTerms> {
    if preds.len() != targets.len() {
        return Err(Error::invalid(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut terms = DetectionLossTerms { cls: 0.0, reg: 0.0, ctr: 0.0, n_pos: 0, lambda };
    for (p, t) in preds.iter().zip(targets) {
        terms.cls += focal_loss(p.class_prob, t.positive, FOCAL_ALPHA, FOCAL_GAMMA);
        if t.positive {
            terms.n_pos += 1;
            terms.reg += iou_loss(&p.offsets, &t.offsets())?;
            terms.ctr += bce(p.centerness, t.centerness);
        }
    }
    Ok(terms)
}
