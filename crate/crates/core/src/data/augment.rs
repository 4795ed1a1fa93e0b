use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Reflection padding before the random crop.
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            flip_prob: 0.5,
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Crop an `[C,H,W]` image at offset `(oy, ox)` from its reflection-padded
/// version, optionally mirrored left to right.
pub fn crop_reflect(x: &Tensor, pad: usize, oy: usize, ox: usize, flip: bool) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape(format!("augmentation expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if pad >= h || pad >= w {
        return config_err(format!("pad {pad} too large for {h}x{w} images"));
    }
    if oy > 2 * pad || ox > 2 * pad {
        return config_err("crop offset outside the padded image");
    }
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for ch in 0..c {
        for r in 0..h {
            let sr = reflect(r as isize + oy as isize - pad as isize, h);
            for col in 0..w {
                let col = if flip { w - 1 - col } else { col };
                let sc = reflect(col as isize + ox as isize - pad as isize, w);
                out.push(src[(ch * h + sr) * w + sc]);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Reflect-pad by `cfg.pad`, take a random crop of the original size, and
/// mirror horizontally with probability `cfg.flip_prob`.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&cfg.flip_prob) {
        return config_err(format!("flip_prob must lie in [0,1], got {}", cfg.flip_prob));
    }
    let oy = rng.random_range(0..=2 * cfg.pad);
    let ox = rng.random_range(0..=2 * cfg.pad);
    let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
    crop_reflect(x, cfg.pad, oy, ox, flip)
}
