//! Half-Huber ReLU.
//!
//! `f(x) = 0` for `x < 0`, `d x^2` for `0 <= x < 1/(2d)`, and `x - 1/(4d)`
//! above the knee. Value and first derivative are continuous; the second
//! derivative jumps at both breakpoints.

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_D: f64 = 1.0;

#[inline]
pub fn hhrelu_scalar(x: f64, d: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else if x < 1.0 / (2.0 * d) {
        d * x * x
    } else {
        x - 1.0 / (4.0 * d)
    }
}

/// Analytic derivative of [`hhrelu_scalar`].
#[inline]
pub fn hhrelu_slope(x: f64, d: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else if x < 1.0 / (2.0 * d) {
        2.0 * d * x
    } else {
        1.0
    }
}

pub fn hhrelu(x: &Tensor, d: f64) -> Result<Tensor> {
    if !(d > 0.0) {
        return config_err(format!("HHReLU requires d > 0, got {d}"));
    }
    Ok(x.map(|v| hhrelu_scalar(v, d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn branch_values() {
        assert_eq!(hhrelu_scalar(-1.0, 1.0), 0.0);
        assert!((hhrelu_scalar(0.25, 1.0) - 0.0625).abs() < 1e-15);
        assert!((hhrelu_scalar(2.0, 1.0) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_d() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(hhrelu(&x, 0.0).is_err());
        assert!(hhrelu(&x, -2.0).is_err());
        assert!(hhrelu(&x, f64::NAN).is_err());
    }

    #[test]
    fn continuity_at_breakpoints() {
        // Across [-eps, eps] a continuous function with slope at most 1 moves
        // by at most 2 eps; a jump would show up as an O(1) difference.
        let eps = 1e-9;
        for d in [0.5, 1.0, 3.0] {
            let knee = 1.0 / (2.0 * d);
            for x0 in [0.0, knee] {
                let jump = (hhrelu_scalar(x0 + eps, d) - hhrelu_scalar(x0 - eps, d)).abs();
                assert!(jump <= 2.0 * eps + 1e-15, "value jump {jump} at {x0}");
                let slope_jump = (hhrelu_slope(x0 + eps, d) - hhrelu_slope(x0 - eps, d)).abs();
                assert!(slope_jump <= 2.0 * d * eps + 1e-15, "slope jump {slope_jump} at {x0}");
            }
            assert_eq!(hhrelu_scalar(knee, d), 1.0 / (4.0 * d));
        }
    }

    proptest! {
        #[test]
        fn sandwiched_by_shifted_relu(x in -10.0f64..10.0, d in 0.1f64..5.0) {
            let f = hhrelu_scalar(x, d);
            let relu = x.max(0.0);
            prop_assert!(f >= 0.0);
            prop_assert!(f <= relu + 1e-15);
            prop_assert!(relu - 1.0 / (4.0 * d) <= f + 1e-15);
        }
    }
}
