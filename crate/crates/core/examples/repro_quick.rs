//! A shortened version of the desk-scale reproduction: all four loss variants plus the
//! unmasked baseline, trained for a few hundred iterations each.
//!
//! cargo run --release --example repro_quick -- /tmp/repro 200

use declutter::pipeline::{desk_train_config, repro, ReproConfig};
use declutter::synthbench::GenConfig;
use declutter::trainer::LossVariant;
use declutter::TrainConfig;

fn main() -> declutter::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "repro_quick".into());
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = ReproConfig {
        gen: GenConfig { n_views: 10, resolution: 64, ..GenConfig::default() },
        variants: LossVariant::ALL.to_vec(),
        seeds: vec![0],
        baseline: true,
        train: TrainConfig { iterations, ..desk_train_config(0, LossVariant::Full) },
        out_dir: out.into(),
        force: true,
    };
    let report = repro(&cfg, |msg| eprintln!("{msg}"))?;
    print!("{}", report.table());
    Ok(())
}
