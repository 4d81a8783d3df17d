//! Desk-scale right tiling of a procedural exemplar with random weights.

use deeptile::image::TextureImage;
use deeptile::{random_weights, tile, Alpha, Direction, LossConfig, OptimConfig, TileRequest};

fn exemplar() -> TextureImage {
    TextureImage::from_fn(64, 64, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let stripes = ((x * 0.7 + y * 0.3).sin() * 0.5 + 0.5) * 200.0;
        let blobs = ((x * 0.25).sin() * (y * 0.31).cos() * 0.5 + 0.5) * 255.0;
        [stripes, blobs, 0.5 * stripes + 0.3 * blobs]
    })
    .unwrap()
}

fn main() {
    let seam: bool = std::env::args().nth(1).is_none_or(|a| a == "seam");
    let iters: usize = std::env::args().nth(2).map_or(1000, |a| a.parse().unwrap());
    let lr: f64 = std::env::args().nth(3).map_or(0.01, |a| a.parse().unwrap());
    let req = TileRequest {
        seam_removal: seam,
        alpha: Alpha::Auto,
        ..TileRequest::new(Direction::Right)
    };
    let cfg = OptimConfig { iterations: iters, learning_rate: lr, log_every: 50, ..OptimConfig::desk() };
    let out = tile(&exemplar(), &req, &random_weights(0), &LossConfig::default(), &cfg).unwrap();
    let first = out.trace.initial_loss().unwrap();
    for r in &out.trace.records {
        println!("{:5} {:.4e} ratio {:.4} {:?}", r.iteration, r.total_loss, r.total_loss / first, r.ms);
    }
}
