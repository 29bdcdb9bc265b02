//! Scores corrupted views against the clean ones inside the label boxes and over the full frame.

use declutter::losses::FilterBank;
use declutter::metrics::{masked_eval, Region};
use declutter::synthbench::{generate, GenConfig};

fn main() -> declutter::Result<()> {
    let bench = generate(&GenConfig { n_views: 5, ..GenConfig::default() })?;
    let corrupted: Vec<_> = bench.corrupted.iter().map(|c| c.image.clone()).collect();
    let boxes: Vec<_> = bench.corrupted.iter().map(|c| c.boxes.clone()).collect();
    for region in [Region::BoxInterior, Region::FullImage] {
        let r = masked_eval(&corrupted, &bench.clean, &boxes, region, &FilterBank::default())?;
        println!("{:>12}: PSNR {:.2} dB, SSIM {:.4}, LPIPS-proxy {:.4}", region.label(), r.mean_psnr, r.mean_ssim, r.mean_lpips_proxy);
        for v in &r.views {
            println!("    view {}: {:.2} dB over {} pixels", v.view_id, v.psnr, v.pixels);
        }
    }
    let clean_vs_clean = masked_eval(&bench.clean, &bench.clean, &boxes, Region::BoxInterior, &FilterBank::default())?;
    println!("clean vs clean: PSNR {} (sentinel), SSIM {}", clean_vs_clean.mean_psnr, clean_vs_clean.mean_ssim);
    Ok(())
}
