//! Renders the analytic scene and an untrained radiance model from the same camera, writing PNGs.
//!
//! cargo run --example render_views -- /tmp/renders

use std::path::PathBuf;

use declutter::geometry::Vec3;
use declutter::image::write_png;
use declutter::synthbench::{look_at, render_oracle, SyntheticScene};
use declutter::trainer::Trainer;
use declutter::volume_renderer::{composite, ShadedSample};
use declutter::{CameraModel, TrainConfig};

fn main() -> declutter::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "renders".into()));
    std::fs::create_dir_all(&out).map_err(|e| declutter::Error::io(&out, e))?;
    let camera = CameraModel::from_fov_x(0.8, 64, 64)?;
    let pose = look_at(Vec3::new(2.0, 1.2, 1.4), Vec3::splat(0.5))?;

    let (clean, depth) = render_oracle(&SyntheticScene::default(), &camera, &pose);
    write_png(&out.join("oracle.png"), &clean)?;
    let hits = depth.iter().filter(|d| d.is_finite()).count();
    println!("oracle: {hits} of {} pixels hit geometry", depth.len());

    // two-sample compositing by hand: red at alpha 0.5, then green at alpha 0.5
    let d = std::f64::consts::LN_2;
    let r = composite(&[
        ShadedSample { sigma: 1.0, color: [1.0, 0.0, 0.0], t: 1.0, delta: d },
        ShadedSample { sigma: 1.0, color: [0.0, 1.0, 0.0], t: 2.0, delta: d },
    ])?;
    println!("composite: {:?}, remainder {:.3}", r.color, r.transmittance_remainder);

    let view = declutter::ViewRecord { view_id: 0, name: "v".into(), image: clean.clone(), camera, pose, boxes: vec![] };
    let t = Trainer::new(vec![view.clone(), view], TrainConfig { n_samples: 32, ..TrainConfig::default() })?;
    let (img, _) = t.model.render_image(&camera, &pose, t.sampling())?;
    write_png(&out.join("untrained.png"), &img)?;
    println!("wrote oracle.png and untrained.png to {}", out.display());
    Ok(())
}
