use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Example, Origin};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Radius of the circle around `(0.5, 0.5)` holding the blob centers.
pub const BLOB_RADIUS: f64 = 0.35;

/// Distance from a blob center to the bisector with its neighbour.
pub fn blob_separation(num_classes: usize) -> f64 {
    BLOB_RADIUS * (PI / num_classes as f64).sin()
}

pub fn blob_center(class: usize, num_classes: usize) -> [f64; 2] {
    let a = 2.0 * PI * class as f64 / num_classes as f64;
    [0.5 + BLOB_RADIUS * a.cos(), 0.5 + BLOB_RADIUS * a.sin()]
}

fn normal(spread: f64) -> Result<Option<Normal<f64>>> {
    if !(spread >= 0.0) {
        return config_err(format!("spread must be nonnegative, got {spread}"));
    }
    if spread == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, spread)
        .map(Some)
        .map_err(|e| Error::Config(e.to_string()))
}

/// Isotropic Gaussian clusters in `[0,1]²`, `per_class` points per class,
/// with centers evenly spaced on a circle. Points are clamped to the square.
pub fn gen_blobs(num_classes: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return config_err("blobs need at least two classes");
    }
    let noise = normal(spread)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new("blobs", num_classes, vec![2]);
    for i in 0..per_class {
        for c in 0..num_classes {
            let center = blob_center(c, num_classes);
            let mut p = center;
            if let Some(n) = &noise {
                for v in &mut p {
                    *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            ds.examples.push(Example {
                id: format!("blob-{c}-{i}"),
                image: Tensor::from_vec(p.to_vec()),
                label: c,
                origin: Origin::Base,
            });
        }
    }
    Ok(ds)
}

const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
];

/// 8×8 single-channel digit glyphs (`[1,8,8]`), randomly shifted, with
/// random stroke intensity and additive Gaussian pixel noise.
pub fn gen_digits(per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let pixel_noise = normal(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new("digits", 10, vec![1, 8, 8]);
    for i in 0..per_class {
        for (c, glyph) in GLYPHS.iter().enumerate() {
            let (dx, dy) = (rng.random_range(0..=3usize), rng.random_range(0..=1usize));
            let ink = rng.random_range(0.7..1.0);
            let mut img = vec![0.0; 64];
            for (r, row) in glyph.iter().enumerate() {
                for (col, ch) in row.bytes().enumerate() {
                    if ch == b'#' {
                        img[(r + dy) * 8 + col + dx] = ink;
                    }
                }
            }
            if let Some(n) = &pixel_noise {
                for v in &mut img {
                    *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            ds.examples.push(Example {
                id: format!("digit-{c}-{i}"),
                image: Tensor::new(vec![1, 8, 8], img)?,
                label: c,
                origin: Origin::Base,
            });
        }
    }
    Ok(ds)
}
