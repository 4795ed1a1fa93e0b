//! Synthesis of adversarial and noisy training examples.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::loss::{cross_entropy_per_example, softmax_var};
use crate::nn::{argmax, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    #[default]
    None,
    L2,
    L2min,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvTrainConfig {
    pub mode: AdvMode,
    /// Raw L2 radius (not RMSE).
    pub epsilon: f64,
    pub steps: usize,
    pub half_half: bool,
    pub gaussian_scale: f64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            mode: AdvMode::None,
            epsilon: 0.01,
            steps: 7,
            half_half: false,
            gaussian_scale: 0.05,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return config_err(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return config_err("steps must be at least 1");
        }
        if !(self.gaussian_scale >= 0.0) {
            return config_err(format!(
                "gaussian_scale must be nonnegative, got {}",
                self.gaussian_scale
            ));
        }
        Ok(())
    }
}

/// Decreasing step weights `2(k-n) / (k(k+1))` for `n = 0..k`; they sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub k: usize,
    pub weights: Vec<f64>,
}

impl StepSchedule {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return config_err("a step schedule needs at least one step");
        }
        let kf = k as f64;
        let weights = (0..k)
            .map(|n| 2.0 * (k - n) as f64 / (kf * (kf + 1.0)))
            .collect();
        Ok(Self { k, weights })
    }

    /// Weight `n` as an exact fraction `(numerator, denominator)`.
    pub fn ratio(&self, n: usize) -> (u64, u64) {
        (2 * (self.k - n) as u64, (self.k * (self.k + 1)) as u64)
    }
}

fn check_batch(net: &Network, x: &Tensor, targets: &[usize]) -> Result<()> {
    if x.batch_len() != targets.len() || x.item_shape() != net.input_shape.as_slice() {
        return Err(Error::InvalidShape(format!(
            "batch {:?} with {} targets for input shape {:?}",
            x.shape(),
            targets.len(),
            net.input_shape
        )));
    }
    Ok(())
}

/// Per-example gradient of the cross-entropy with respect to the input, and
/// the predicted classes at `x`.
fn loss_gradient(net: &Network, x: &Tensor, targets: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let (g, logits) = net.input_gradient(x, |y| {
        Ok(cross_entropy_per_example(&softmax_var(y)?, targets)?.sum())
    })?;
    if !g.is_finite() {
        return Err(Error::NonFinite("cross-entropy input gradient".into()));
    }
    let pred = logits.data().chunks(net.num_classes).map(argmax).collect();
    Ok((g, pred))
}

/// Move each row of `x` by `dir_row * (len_row / |dir_row|)`; rows with a
/// zero direction or zero length stay put. Clamps to `[0,1]`.
fn step_rows(x: &mut Tensor, dir: &Tensor, lens: &[f64]) {
    let norms = dir.row_norms();
    let inner = x.numel() / x.batch_len();
    let data = x.data_mut();
    for (row, (&n, &len)) in norms.iter().zip(lens).enumerate() {
        if n == 0.0 || len == 0.0 {
            continue;
        }
        let c = len / n;
        let span = row * inner..(row + 1) * inner;
        for (xi, &di) in data[span.clone()].iter_mut().zip(&dir.data()[span]) {
            *xi = (*xi + c * di).clamp(0.0, 1.0);
        }
    }
}

/// Fixed-budget ascent on the cross-entropy: `steps` steps, each of L2
/// length `epsilon / steps`, clamped to `[0,1]` after every step. A step
/// with a zero gradient is skipped.
pub fn perturb_l2(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    cfg: &AdvTrainConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(net, x, targets)?;
    let mut adv = x.clone();
    if cfg.epsilon == 0.0 {
        return Ok(adv);
    }
    let lens = vec![cfg.epsilon / cfg.steps as f64; targets.len()];
    for _ in 0..cfg.steps {
        let (g, _) = loss_gradient(net, &adv, targets)?;
        step_rows(&mut adv, &g, &lens);
    }
    Ok(adv)
}

/// Boundary-seeking ascent with decreasing step lengths. While an example
/// is still classified correctly it follows the loss gradient; once it is
/// misclassified it steps back along the negated perturbation.
pub fn perturb_l2min(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    cfg: &AdvTrainConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(net, x, targets)?;
    let mut adv = x.clone();
    if cfg.epsilon == 0.0 {
        return Ok(adv);
    }
    let sched = StepSchedule::new(cfg.steps)?;
    let inner = x.numel() / x.batch_len();
    for w in &sched.weights {
        let (g, pred) = loss_gradient(net, &adv, targets)?;
        let mut dir = g;
        let back = adv.zip_map(x, |a, b| b - a)?;
        for (row, (&p, &t)) in pred.iter().zip(targets).enumerate() {
            if p != t {
                let span = row * inner..(row + 1) * inner;
                dir.data_mut()[span.clone()].copy_from_slice(&back.data()[span]);
            }
        }
        step_rows(&mut adv, &dir, &vec![w * cfg.epsilon; targets.len()]);
    }
    Ok(adv)
}

/// First half of the rows from `clean`, the rest from `adversarial`
/// (`half_half`), or all of `adversarial`.
pub fn compose_batch(clean: &Tensor, adversarial: &Tensor, half_half: bool) -> Result<Tensor> {
    if clean.shape() != adversarial.shape() {
        return Err(Error::ShapeMismatch {
            op: "compose_batch",
            lhs: clean.shape().to_vec(),
            rhs: adversarial.shape().to_vec(),
        });
    }
    if !half_half {
        return Ok(adversarial.clone());
    }
    let split = clean.numel() / clean.batch_len() * (clean.batch_len() / 2);
    let mut out = adversarial.clone();
    out.data_mut()[..split].copy_from_slice(&clean.data()[..split]);
    Ok(out)
}

/// Number of leading rows kept clean by [`compose_batch`].
pub fn clean_rows(batch: usize, half_half: bool) -> usize {
    if half_half {
        batch / 2
    } else {
        0
    }
}

/// I.i.d. zero-mean Gaussian noise per element, then clamped to `[0,1]`.
pub fn perturb_gaussian<R: Rng + ?Sized>(x: &Tensor, scale: f64, rng: &mut R) -> Result<Tensor> {
    if !(scale >= 0.0) {
        return config_err(format!("noise scale must be nonnegative, got {scale}"));
    }
    if scale == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Synthesize the training inputs for one batch according to `cfg`.
pub fn synthesize<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    cfg: &AdvTrainConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let keep = clean_rows(targets.len(), cfg.half_half);
    let rest: Vec<usize> = (keep..targets.len()).collect();
    if cfg.mode == AdvMode::None || rest.is_empty() {
        return Ok(x.clone());
    }
    let sub = x.select0(&rest)?;
    let sub_t = &targets[keep..];
    let perturbed = match cfg.mode {
        AdvMode::None => unreachable!(),
        AdvMode::L2 => perturb_l2(net, &sub, sub_t, cfg)?,
        AdvMode::L2min => perturb_l2min(net, &sub, sub_t, cfg)?,
        AdvMode::Gaussian => perturb_gaussian(&sub, cfg.gaussian_scale, rng)?,
    };
    let mut out = x.clone();
    let inner = x.numel() / x.batch_len();
    out.data_mut()[keep * inner..].copy_from_slice(perturbed.data());
    Ok(out)
}
