//! Procedural toy images and datasets used by tests and examples.
//!
//! Content is a mix of oriented gradients, soft blobs, and a ringed disc;
//! smooth enough to learn from, structured enough that interpolation
//! leaves something on the table. Deterministic per (size, seed).

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::io::write_ppm;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One synthetic RGB image in [0.08, 0.92].
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor {
    let s = RngStream::new(seed, "fixture.image");
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];

    // Per-channel oriented gradient.
    let theta = s.range_at(0, 0.0, std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let phase = [s.uniform_at(1), s.uniform_at(2), s.uniform_at(3)];

    // Soft blobs shared across channels with per-channel gains.
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|b| {
            let base = 10 + 8 * b as u64;
            (
                s.range_at(base, 0.15, 0.85) * w as f64,
                s.range_at(base + 1, 0.15, 0.85) * h as f64,
                s.range_at(base + 2, 0.08, 0.25) * w.min(h) as f64,
                [
                    s.range_at(base + 3, -0.45, 0.45),
                    s.range_at(base + 4, -0.45, 0.45),
                    s.range_at(base + 5, -0.45, 0.45),
                ],
            )
        })
        .collect();

    // A ringed disc gives radial edges.
    let cx = s.range_at(40, 0.3, 0.7) * w as f64;
    let cy = s.range_at(41, 0.3, 0.7) * h as f64;
    let radius = s.range_at(42, 0.18, 0.32) * w.min(h) as f64;
    let ring_freq = s.range_at(43, 1.5, 3.5);

    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            let grad = 0.5 + 0.35 * (dx * u + dy * v);
            let rr = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let disc = 0.5 * (1.0 + ((radius - rr) * 0.8).tanh());
            let rings = 0.1 * (ring_freq * rr / radius * std::f64::consts::PI).sin() * disc;
            for c in 0..3 {
                let mut val = grad + 0.2 * (phase[c] - 0.5) + 0.25 * disc + rings;
                for (bx, by, br, gain) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    val += gain[c] * (-d2 / (2.0 * br * br)).exp();
                }
                data[c * hw + y * w + x] = 0.08 + 0.84 * val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).unwrap()
}

/// Write `count` procedural images as PPM files named `img_<i>.ppm`,
/// returning the paths in index order.
pub fn write_toy_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = procedural_image(size, size, seed.wrapping_add(i as u64));
        let path = dir.join(format!("img_{i:02}.ppm"));
        write_ppm(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}
