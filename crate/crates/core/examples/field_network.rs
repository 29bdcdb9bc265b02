//! Queries the density/color network on an encoded point, open and masked.

use declutter::hash_encoding::{HashGrid, HashGridConfig};
use declutter::radiance_field::{field_backward, field_forward, FieldConfig, FieldNetwork, MaskWeight};

fn main() -> declutter::Result<()> {
    let grid = HashGrid::<f64>::new(HashGridConfig::default(), 1)?;
    let net = FieldNetwork::<f64>::new(grid.feature_dim(), FieldConfig::default(), 2)?;
    let enc = grid.encode([0.4, 0.5, 0.6])?;
    for (label, w) in [("open", MaskWeight::OPEN), ("masked", MaskWeight::MASKED)] {
        let s = field_forward(&net, &enc.vector, [0.0, 0.0, -1.0], w)?;
        println!("{label:>6}: sigma = {:.5}, color = [{:.4}, {:.4}, {:.4}]", s.sigma, s.color[0], s.color[1], s.color[2]);
        let (grads, feature_grad) = field_backward(&net, &s.tape, 1.0, [0.0; 3])?;
        let first = feature_grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        println!("        |dσ/dθ|² = {:.3e}, max |dσ/dfeature| = {first:.3e}", grads.squared_norm());
    }
    Ok(())
}
