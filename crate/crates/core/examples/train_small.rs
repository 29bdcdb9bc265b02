//! Trains the full loss on a small benchmark and reports box-interior PSNR against the clean views.
//!
//! cargo run --release --example train_small -- 300

use declutter::hash_encoding::HashGridConfig;
use declutter::pipeline::{desk_train_config, run_experiment};
use declutter::synthbench::{generate, GenConfig};
use declutter::trainer::LossVariant;
use declutter::TrainConfig;

fn main() -> declutter::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let bench = generate(&GenConfig { n_views: 12, resolution: 64, ..GenConfig::default() })?;
    let config = TrainConfig {
        iterations,
        grid: HashGridConfig { finest: 64, ..HashGridConfig::default() },
        ..desk_train_config(0, LossVariant::Full)
    };
    for masked in [true, false] {
        let (summary, trainer) = run_experiment(&bench, &config, masked, None)?;
        let last = trainer.log.last().expect("trained");
        println!(
            "{}: {} iterations, final loss {:.4}, box PSNR {:.2} dB, full PSNR {:.2} dB ({:.0} s)",
            if masked { "masked  " } else { "unmasked" },
            last.iteration + 1,
            last.total,
            summary.box_psnr,
            summary.full_psnr,
            summary.seconds
        );
    }
    Ok(())
}
