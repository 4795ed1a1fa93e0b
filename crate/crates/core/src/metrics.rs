//! Accuracy-versus-perturbation curves and the area above a naive baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_many, AttackConfig, Goal};
use crate::error::{config_err, Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Default upper integration bound on the RMSE axis.
pub const DEFAULT_CAP: f64 = 0.2;

/// `‖δ‖₂ / sqrt(numel)`.
pub fn rmse(delta: &Tensor) -> f64 {
    delta.norm_l2() / (delta.numel() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Majority-class frequency.
    #[default]
    Naive,
    /// `1 / V`.
    Random,
}

pub fn naive_baseline(labels: &[usize], num_classes: usize, mode: BaselineMode) -> Result<f64> {
    if labels.is_empty() || num_classes == 0 {
        return config_err("baseline of an empty dataset");
    }
    match mode {
        BaselineMode::Random => Ok(1.0 / num_classes as f64),
        BaselineMode::Naive => {
            let mut counts = vec![0usize; num_classes];
            for &l in labels {
                *counts
                    .get_mut(l)
                    .ok_or_else(|| Error::Config(format!("label {l} out of range")))? += 1;
            }
            Ok(*counts.iter().max().unwrap() as f64 / labels.len() as f64)
        }
    }
}

/// Exact integral over `r ∈ [0, cap]` of `max(acc(r) - naive, 0)`, where
/// `acc(r)` is the fraction of radii strictly above `r`.
pub fn ara(radii: &[f64], cap: f64, naive: f64) -> f64 {
    if radii.is_empty() || !(cap > 0.0) {
        return 0.0;
    }
    let n = radii.len() as f64;
    let mut sorted: Vec<f64> = radii.iter().map(|r| r.clamp(0.0, cap)).collect();
    sorted.sort_by(f64::total_cmp);
    let mut above = sorted.iter().filter(|&&r| r > 0.0).count();
    let mut x0 = 0.0;
    let mut area = 0.0;
    for &r in sorted.iter().filter(|&&r| r > 0.0) {
        area += (above as f64 / n - naive).max(0.0) * (r - x0);
        x0 = r;
        above -= 1;
    }
    area + (above as f64 / n - naive).max(0.0) * (cap - x0)
}

/// Per-example robustness radii with the derived area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AraCurve {
    pub radii: Vec<f64>,
    pub cap: f64,
    pub naive_accuracy: f64,
    pub clean_accuracy: f64,
    pub area: f64,
    pub quota: usize,
    pub censored: usize,
    /// The dataset ran out before the quota was reached.
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AraSummary {
    pub clean_accuracy: f64,
    pub naive: f64,
    pub cap: f64,
    pub area: f64,
    pub quota: usize,
    pub censored_count: usize,
    pub evaluated: usize,
    pub partial: bool,
}

impl AraCurve {
    pub fn from_radii(radii: Vec<f64>, cap: f64, naive: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return config_err(format!("cap must be positive, got {cap}"));
        }
        if radii.iter().any(|r| !(0.0..=cap).contains(r)) {
            return config_err("radii must lie in [0, cap]");
        }
        let n = radii.len().max(1) as f64;
        Ok(Self {
            clean_accuracy: radii.iter().filter(|&&r| r > 0.0).count() as f64 / n,
            area: ara(&radii, cap, naive),
            quota: radii.iter().filter(|&&r| r > 0.0).count(),
            censored: 0,
            partial: false,
            naive_accuracy: naive,
            cap,
            radii,
        })
    }

    pub fn accuracy_at(&self, r: f64) -> f64 {
        if self.radii.is_empty() {
            return 0.0;
        }
        self.radii.iter().filter(|&&x| x > r).count() as f64 / self.radii.len() as f64
    }

    /// Breakpoints `(r, accuracy)` of the step curve on `[0, cap]`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut rs: Vec<f64> = self.radii.iter().cloned().filter(|&r| r < self.cap).collect();
        rs.push(0.0);
        rs.sort_by(f64::total_cmp);
        rs.dedup();
        let mut pts: Vec<(f64, f64)> = rs.into_iter().map(|r| (r, self.accuracy_at(r))).collect();
        pts.push((self.cap, self.accuracy_at(self.cap)));
        pts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,accuracy\n");
        for (r, a) in self.points() {
            let _ = writeln!(out, "{r},{a}");
        }
        out
    }

    pub fn summary(&self) -> AraSummary {
        AraSummary {
            clean_accuracy: self.clean_accuracy,
            naive: self.naive_accuracy,
            cap: self.cap,
            area: self.area,
            quota: self.quota,
            censored_count: self.censored,
            evaluated: self.radii.len(),
            partial: self.partial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveOptions {
    pub goal: Goal,
    pub quota: usize,
    pub cap: f64,
    pub seed: u64,
    /// Examples attacked together per worker.
    pub chunk: usize,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            goal: Goal::Adv,
            quota: 200,
            cap: DEFAULT_CAP,
            seed: 0,
            chunk: 32,
        }
    }
}

/// Visit examples in a seeded random order until `quota` correctly
/// classified ones have been attacked. Misclassified examples met on the
/// way get radius 0; attacks that never succeed are censored at the cap.
pub fn build_curve(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    opts: &CurveOptions,
    attack_cfg: &AttackConfig,
) -> Result<AraCurve> {
    if opts.quota == 0 {
        return config_err("quota must be at least 1");
    }
    if !matches!(opts.goal, Goal::Adv | Goal::Btr) {
        return config_err("curves use the adv or btr goal");
    }
    if !(opts.cap > 0.0) {
        return config_err(format!("cap must be positive, got {}", opts.cap));
    }
    if images.batch_len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} images with {} labels",
            images.batch_len(),
            labels.len()
        )));
    }
    let naive = naive_baseline(labels, net.num_classes, BaselineMode::Naive)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut radii = Vec::new();
    let mut to_attack = Vec::new();
    for block in order.chunks(256) {
        let pred = net.predict(&images.select0(block)?)?;
        for (&i, p) in block.iter().zip(pred) {
            if to_attack.len() == opts.quota {
                break;
            }
            if p == labels[i] {
                to_attack.push(i);
            } else {
                radii.push(0.0);
            }
        }
        if to_attack.len() == opts.quota {
            break;
        }
    }
    let partial = to_attack.len() < opts.quota;
    if partial {
        log::warn!(
            "dataset exhausted after {} of {} correctly classified examples",
            to_attack.len(),
            opts.quota
        );
    }
    let mut censored = 0;
    if !to_attack.is_empty() {
        let cfg = AttackConfig {
            goal: opts.goal,
            ..attack_cfg.clone()
        };
        let targets: Vec<usize> = to_attack.iter().map(|&i| labels[i]).collect();
        let outs = attack_many(net, &images.select0(&to_attack)?, &targets, &cfg, opts.chunk)?;
        for o in outs {
            match o.rmse {
                Some(r) => radii.push(r.min(opts.cap)),
                None => {
                    censored += 1;
                    radii.push(opts.cap);
                }
            }
        }
    }
    let n = radii.len() as f64;
    Ok(AraCurve {
        clean_accuracy: to_attack.len() as f64 / n,
        area: ara(&radii, opts.cap, naive),
        radii,
        cap: opts.cap,
        naive_accuracy: naive,
        quota: opts.quota,
        censored,
        partial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Radii whose accuracy curve falls linearly from `top` at 0 to `naive`
    /// at `span`, then stays at `naive` (censored at the cap).
    fn linear_curve(top: f64, naive: f64, span: f64, cap: f64, n: usize) -> Vec<f64> {
        let nf = n as f64;
        let zeros = ((1.0 - top) * nf).round() as usize;
        let falling = ((top - naive) * nf).round() as usize;
        let mut r = vec![0.0; zeros];
        for i in 0..falling {
            r.push(span * (i as f64 + 0.5) / falling as f64);
        }
        r.resize(n, cap);
        r
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&Tensor::zeros(&[3, 4])), 0.0);
        assert_eq!(rmse(&Tensor::full(&[3, 8, 8], 1.0)), 1.0);
        let half = Tensor::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
        assert!((rmse(&half) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn triangle_areas() {
        let a = ara(&linear_curve(0.909, 0.1, 0.03, 0.2, 100_000), 0.2, 0.1);
        assert!((a - 0.0121).abs() / 0.0121 < 0.02, "{a}");
        let b = ara(&linear_curve(0.684, 0.1, 0.07, 0.2, 100_000), 0.2, 0.1);
        assert!((b - 0.0204).abs() / 0.0204 < 0.02, "{b}");
    }

    #[test]
    fn degenerate_areas() {
        assert_eq!(ara(&[0.0; 10], 0.2, 0.1), 0.0);
        assert_eq!(ara(&[0.2; 10], 0.2, 1.0), 0.0);
        // All examples robust to the cap: (1 - naive) * cap.
        assert!((ara(&[0.2; 10], 0.2, 0.5) - 0.1).abs() < 1e-15);
        // Step integral: half the examples survive to 0.1.
        assert!((ara(&[0.1, 0.1, 0.0, 0.0], 0.2, 0.0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn baselines() {
        let balanced: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert!((naive_baseline(&balanced, 10, BaselineMode::Naive).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(naive_baseline(&balanced, 10, BaselineMode::Random).unwrap(), 0.1);
        let mut skewed = vec![0usize; 314];
        skewed.extend((0..686).map(|i| 1 + i % 5));
        assert!((naive_baseline(&skewed, 6, BaselineMode::Naive).unwrap() - 0.314).abs() < 1e-12);
        assert!(naive_baseline(&[], 3, BaselineMode::Naive).is_err());
    }

    #[test]
    fn csv_and_summary() {
        let c = AraCurve::from_radii(vec![0.0, 0.05, 0.2], 0.2, 1.0 / 3.0).unwrap();
        let csv = c.to_csv();
        assert!(csv.starts_with("r,accuracy\n0,"));
        assert_eq!(c.points().last().unwrap().0, 0.2);
        let s = serde_json::to_value(c.summary()).unwrap();
        assert!(s.get("area").is_some() && s.get("censored_count").is_some());
        assert!(AraCurve::from_radii(vec![0.3], 0.2, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut r in prop::collection::vec(0.0f64..0.2, 1..50), seed in 0u64..1000) {
            let a = ara(&r, 0.2, 0.1);
            r.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, ara(&r, 0.2, 0.1));
        }

        #[test]
        fn dominance_orders_area(r in prop::collection::vec(0.0f64..0.15, 2..40), bump in 0.001f64..0.05) {
            // Raising one radius raises accuracy on an interval; with a
            // zero baseline the area must strictly grow.
            let mut s = r.clone();
            s[0] += bump;
            prop_assert!(ara(&s, 0.2, 0.0) > ara(&r, 0.2, 0.0));
        }
    }
}
