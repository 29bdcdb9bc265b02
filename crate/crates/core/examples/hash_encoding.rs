//! Encodes a few points with the multiresolution hash grid and shows dense vs hashed levels.

use declutter::hash_encoding::{is_dense, HashGrid, HashGridConfig};

fn main() -> declutter::Result<()> {
    let config = HashGridConfig::default();
    let grid = HashGrid::<f32>::new(config, 0)?;
    println!("growth factor b = {:.4}, {} parameters", grid.growth_factor, grid.parameter_count());
    for (l, n) in grid.level_resolutions.iter().enumerate() {
        println!("level {l:>2}: N = {n:>3} ({})", if is_dense(*n, config.table_size()) { "dense" } else { "hashed" });
    }
    for x in [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.05, 0.7]] {
        let enc = grid.encode(x)?;
        println!("{x:?} → {} features, first four {:?}", enc.vector.len(), &enc.vector[..4]);
    }
    Ok(())
}
