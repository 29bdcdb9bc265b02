//! Trains a few steps, saves a checkpoint, reloads it and resumes to the same result.

use declutter::checkpoint::Checkpoint;
use declutter::pipeline::{benchmark_views, desk_train_config};
use declutter::synthbench::{generate, GenConfig};
use declutter::trainer::{LossVariant, Trainer};
use declutter::TrainConfig;

fn main() -> declutter::Result<()> {
    let bench = generate(&GenConfig { n_views: 4, resolution: 32, ..GenConfig::default() })?;
    let config = TrainConfig { iterations: 10, batch_rays: 64, n_samples: 16, patch_size: 12, ..desk_train_config(3, LossVariant::Full) };
    let dir = std::env::temp_dir().join("declutter_checkpoint_example");
    std::fs::create_dir_all(&dir).map_err(|e| declutter::Error::io(&dir, e))?;

    let mut straight = Trainer::new(benchmark_views(&bench, true), config.clone())?;
    straight.run(|_| {})?;

    // stop halfway through the same schedule
    let mut first = Trainer::new(benchmark_views(&bench, true), config.clone())?;
    for _ in 0..5 {
        first.step()?;
    }
    let path = dir.join("ckpt_5.bin");
    first.checkpoint().save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!("saved {} ({} bytes) at iteration {}", path.display(), std::fs::metadata(&path).map_or(0, |m| m.len()), loaded.iteration);

    let mut resumed = Trainer::resume(benchmark_views(&bench, true), config, loaded)?;
    resumed.run(|_| {})?;
    println!("resumed run identical to uninterrupted run: {}", resumed.checkpoint().to_bytes() == straight.checkpoint().to_bytes());
    Ok(())
}
