//! Builds anchor-free regression targets for a box and evaluates the detector loss terms.

use declutter::detector_math::{detection_loss, fcos_centerness, fcos_targets, focal_loss, iou_loss, DetectionPrediction, FOCAL_ALPHA, FOCAL_GAMMA};
use declutter::BBox;

fn main() -> declutter::Result<()> {
    let bbox = BBox::new(10.0, 20.0, 50.0, 44.0, 0);
    let mut targets = Vec::new();
    for loc in [(30.0, 32.0), (12.0, 22.0), (60.0, 30.0)] {
        let t = fcos_targets(loc, &bbox);
        let c = if t.positive { fcos_centerness(&t)? } else { 0.0 };
        println!("location {loc:?}: offsets {:?}, positive {}, centerness {c:.4}", t.offsets(), t.positive);
        targets.push(t);
    }
    println!("focal loss at p = 0.5 (positive): {:.4}", focal_loss(0.5, true, FOCAL_ALPHA, FOCAL_GAMMA));
    println!("IoU loss, 2x2 box vs 2x3 box: {:.4}", iou_loss(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 2.0])?);
    let preds: Vec<DetectionPrediction> = targets
        .iter()
        .map(|t| DetectionPrediction { class_prob: 0.7, offsets: t.offsets().map(|o| o * 0.9), centerness: 0.5 })
        .collect();
    let terms = detection_loss(&preds, &targets, 1.0)?;
    println!("detection loss: cls {:.4}, reg {:.4}, ctr {:.4}, total {:.4} over {} positives", terms.cls, terms.reg, terms.ctr, terms.total(), terms.n_pos);
    Ok(())
}
