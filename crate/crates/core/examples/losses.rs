//! Evaluates the photometric, multi-view compensation and perceptual-proxy losses on toy inputs.

use declutter::geometry::Vec3;
use declutter::losses::{mvcl_loss, perceptual_loss, photometric_loss, total_loss, FilterBank, LambdaSchedule, Patch, PatchPair, RayBatchSupervision};
use declutter::volume_renderer::Ray;

fn main() -> declutter::Result<()> {
    let ray = Ray { origin: Vec3::ZERO, direction: Vec3::new(0.0, 0.0, -1.0), pixel: (0, 0), view_id: 0, masked: false };
    let batch = RayBatchSupervision {
        rays: vec![ray; 2],
        rendered: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        target: vec![[0.0; 3]; 2],
        mvcl_counts: vec![1, 3],
        scale: 2.0 / 3.0,
    };
    let rgb = photometric_loss(&batch)?;
    let mvcl = mvcl_loss(&batch)?;
    println!("photometric {:.4}, MVCL {:.4} (counts 1 and 3, s = 2/3)", rgb.value, mvcl.value);

    let target = Patch::from_fn(32, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 11.0);
    let mut rendered = target.clone();
    rendered.data.iter_mut().for_each(|v| *v += 0.1);
    let (lp, grad) = perceptual_loss(&PatchPair { rendered, target, origin: (0, 0), view_id: 0 }, &FilterBank::default())?;
    println!("perceptual proxy for a +0.1 shift: {lp:.5} (gradient over {} values)", grad.len());

    let schedule = LambdaSchedule::default();
    for it in [0, 399, 400] {
        let b = total_loss(rgb.value, mvcl.value, lp, it, &schedule);
        println!("iteration {it:>3}: λ = ({}, {}), total {:.4}", b.lambda1, b.lambda2, b.total);
    }
    Ok(())
}
