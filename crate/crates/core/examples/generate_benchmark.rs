//! Writes the synthetic benchmark (clean and corrupted views, YOLO labels, sprite masks).
//!
//! cargo run --example generate_benchmark -- /tmp/bench

use declutter::synthbench::{write_dataset, GenConfig};

fn main() -> declutter::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "bench_data".into());
    let bench = write_dataset(out.as_ref(), &GenConfig::default(), true)?;
    println!(
        "{} views at {}x{} in {out}: sprites cover {:.1}% of pixels, boxes {:.1}%",
        bench.poses.len(),
        bench.camera.width,
        bench.camera.height,
        100.0 * bench.sprite_coverage(),
        100.0 * bench.box_coverage()
    );
    for (i, cv) in bench.corrupted.iter().take(3).enumerate() {
        println!("view {i}: {} boxes, first {:?}", cv.boxes.len(), cv.boxes.first().map(|b| (b.x0, b.y0, b.x1, b.y1)));
    }
    Ok(())
}
