//! Tick-tock minimal-perturbation attack.
//!
//! Each iteration evaluates the clipped point `c(x + δ)`. While the goal is
//! unmet, `δ` follows the normalized gradient of the selected class
//! probability; once the goal holds, `δ` descends `‖δ‖²` instead. A single
//! momentum optimizer is shared by both phases. The smallest perturbation
//! that satisfied the goal is returned.

use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_values, Graph};
use crate::error::{config_err, Error, Result};
use crate::metrics::rmse;
use crate::nn::loss::softmax_var;
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Goal {
    #[default]
    Adv,
    Btr,
    ExplainPlus,
    ExplainMinus,
    HighConfidence,
}

impl Goal {
    pub fn name(self) -> &'static str {
        match self {
            Goal::Adv => "adv",
            Goal::Btr => "btr",
            Goal::ExplainPlus => "explain-plus",
            Goal::ExplainMinus => "explain-minus",
            Goal::HighConfidence => "high-confidence",
        }
    }

    pub fn is_explain(self) -> bool {
        matches!(self, Goal::ExplainPlus | Goal::ExplainMinus)
    }
}

impl std::str::FromStr for Goal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "adv" => Goal::Adv,
            "btr" => Goal::Btr,
            "explain-plus" => Goal::ExplainPlus,
            "explain-minus" => Goal::ExplainMinus,
            "high-confidence" => Goal::HighConfidence,
            other => return config_err(format!("unknown goal '{other}'")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub steps: usize,
    pub eta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub goal: Goal,
    /// Perceptual budget on the RMSE scale (explain goals).
    pub rho: f64,
    /// Confidence lead required by the high-confidence goal.
    pub margin: f64,
    /// Class whose probability an explanation drives (explain goals).
    pub target_class: Option<usize>,
    pub record_trace: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 450,
            eta: 0.55,
            lr: 0.01,
            momentum: 0.9,
            goal: Goal::Adv,
            rho: 0.0,
            margin: 0.5,
            target_class: None,
            record_trace: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.steps == 0 {
            return config_err("attack needs at least one step");
        }
        if !(self.eta > 0.0) || !(self.lr > 0.0) {
            return config_err("eta and lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.goal.is_explain() {
            if !(self.rho > 0.0) {
                return config_err("explain goals need rho > 0");
            }
            match self.target_class {
                Some(c) if c < num_classes => {}
                Some(c) => return config_err(format!("target class {c} out of range")),
                None => return config_err("explain goals need a target class"),
            }
        }
        if self.goal == Goal::HighConfidence && !(self.margin >= 0.0) {
            return config_err("margin must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub goal_met: bool,
    /// L2 norm of the effective perturbation `c(x+δ) - x`.
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    /// Effective perturbation: `c(x + δ_best) - x`.
    pub delta_best: Option<Tensor>,
    pub m_best: Option<f64>,
    pub rmse: Option<f64>,
    pub success: bool,
    pub steps_to_first_success: Option<usize>,
    /// Probabilities at the best point, or at the last iterate on failure.
    pub final_prediction: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

impl AttackOutcome {
    /// `x + delta_best`, when the attack succeeded.
    pub fn adversarial(&self, x: &Tensor) -> Option<Tensor> {
        let d = self.delta_best.as_ref()?;
        x.zip_map(d, |a, b| (a + b).clamp(0.0, 1.0)).ok()
    }
}

/// `s_t - max_{j != t} s_j < 0`.
pub fn goal_adv(s: &[f64], t: usize) -> bool {
    let other = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    s[t] - other < 0.0
}

/// `s_t < 1/V`.
pub fn goal_btr(s: &[f64], t: usize) -> bool {
    s[t] < 1.0 / s.len() as f64
}

/// `rmse(δ) > ρ`.
pub fn goal_explain(delta: &Tensor, rho: f64) -> bool {
    rmse(delta) > rho
}

/// The strongest wrong class leads every other class (the true class
/// included) by more than `margin`.
pub fn goal_high_confidence(s: &[f64], t: usize, margin: f64) -> bool {
    let Some(j) = (0..s.len())
        .filter(|&j| j != t)
        .max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))
    else {
        return false;
    };
    let next = s
        .iter()
        .enumerate()
        .filter(|&(q, _)| q != j)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    s[j] - next > margin
}

fn goal_met(cfg: &AttackConfig, s: &[f64], t: usize, delta: &Tensor) -> bool {
    match cfg.goal {
        Goal::Adv => goal_adv(s, t),
        Goal::Btr => goal_btr(s, t),
        Goal::HighConfidence => goal_high_confidence(s, t, cfg.margin),
        Goal::ExplainPlus | Goal::ExplainMinus => goal_explain(delta, cfg.rho),
    }
}

/// Run the attack on a batch `[B, ...input_shape]`; examples do not
/// interact, so this equals attacking each one on its own.
pub fn attack_batch(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    let v = net.num_classes;
    cfg.validate(v)?;
    if x.batch_len() != targets.len() || x.item_shape() != net.input_shape.as_slice() {
        return Err(Error::InvalidShape(format!(
            "attack batch {:?} with {} targets for input shape {:?}",
            x.shape(),
            targets.len(),
            net.input_shape
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return config_err(format!("class {t} out of range for {v} classes"));
    }
    let b = targets.len();
    let inner = x.numel() / b;
    // Class whose probability drives the gradient phase, and the sign of
    // the move: +1 descends it, -1 ascends it.
    let (drive, sign): (Vec<usize>, f64) = match cfg.goal {
        Goal::ExplainPlus => (vec![cfg.target_class.unwrap(); b], -1.0),
        Goal::ExplainMinus => (vec![cfg.target_class.unwrap(); b], 1.0),
        _ => (targets.to_vec(), 1.0),
    };
    let drive_idx: Rc<[usize]> = drive.iter().enumerate().map(|(r, &c)| r * v + c).collect();

    let mut delta = Tensor::zeros(x.shape());
    let mut vel = Tensor::zeros(x.shape());
    let mut best: Vec<Option<(f64, Tensor)>> = vec![None; b];
    let mut first: Vec<Option<usize>> = vec![None; b];
    let mut last_probs = vec![Vec::new(); b];
    let mut trace = vec![Vec::new(); if cfg.record_trace { b } else { 0 }];

    for n in 0..cfg.steps {
        let xh = x.zip_map(&delta, |a, d| (a + d).clamp(0.0, 1.0))?;
        let eff = xh.zip_map(x, |a, b| a - b)?;
        let g = Graph::new();
        let params = net.bind_constants(&g);
        let xv = g.leaf(xh);
        let s = softmax_var(&net.forward(&xv, &params)?)?;
        let sval = s.value();
        let mut met = vec![false; b];
        for row in 0..b {
            let probs = &sval.data()[row * v..(row + 1) * v];
            let e = eff.index0(row);
            met[row] = goal_met(cfg, probs, targets[row], &e);
            let norm = e.norm_l2();
            if cfg.record_trace {
                trace[row].push(TraceEntry {
                    goal_met: met[row],
                    norm,
                });
            }
            if met[row] {
                first[row].get_or_insert(n);
                if best[row].as_ref().is_none_or(|(m, _)| norm < *m) {
                    best[row] = Some((norm, e));
                }
            }
            last_probs[row] = probs.to_vec();
        }

        let mut step = Tensor::zeros(x.shape());
        if met.iter().any(|&m| !m) {
            let picked = s.gather(drive_idx.clone(), &[b])?.sum();
            let gx = grad_values(&picked, &[xv])?.remove(0);
            if !gx.is_finite() {
                return Err(Error::NonFinite(format!(
                    "class-probability gradient at attack step {n}"
                )));
            }
            let norms = gx.row_norms();
            for row in (0..b).filter(|&r| !met[r] && norms[r] > 0.0) {
                let c = sign * cfg.eta / norms[row];
                let span = row * inner..(row + 1) * inner;
                for (o, &gi) in step.data_mut()[span.clone()].iter_mut().zip(&gx.data()[span]) {
                    *o = c * gi;
                }
            }
        }
        for row in (0..b).filter(|&r| met[r]) {
            let span = row * inner..(row + 1) * inner;
            for (o, &d) in step.data_mut()[span.clone()].iter_mut().zip(&delta.data()[span]) {
                *o = 2.0 * d;
            }
        }
        for ((vi, di), &si) in vel
            .data_mut()
            .iter_mut()
            .zip(delta.data_mut())
            .zip(step.data())
        {
            *vi = cfg.momentum * *vi + si;
            *di -= cfg.lr * *vi;
        }
    }

    // Re-evaluate the recorded points for the reported prediction.
    let rows: Vec<usize> = (0..b).filter(|&r| best[r].is_some()).collect();
    if !rows.is_empty() {
        let mut pts = Vec::with_capacity(rows.len());
        for &r in &rows {
            let (_, d) = best[r].as_ref().unwrap();
            pts.push(x.index0(r).zip_map(d, |a, b| (a + b).clamp(0.0, 1.0))?);
        }
        let probs = net.probabilities(&Tensor::stack(&pts)?)?;
        for (&r, p) in rows.iter().zip(probs) {
            last_probs[r] = p;
        }
    }

    let mut out = Vec::with_capacity(b);
    let mut trace = trace.into_iter();
    for (row, (bst, fst)) in best.into_iter().zip(first).enumerate() {
        let (m_best, delta_best) = match bst {
            Some((m, d)) => (Some(m), Some(d)),
            None => (None, None),
        };
        out.push(AttackOutcome {
            rmse: m_best.map(|m| m / (inner as f64).sqrt()),
            m_best,
            success: delta_best.is_some(),
            delta_best,
            steps_to_first_success: fst,
            final_prediction: std::mem::take(&mut last_probs[row]),
            trace: trace.next().unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Attack a single example `x` with shape `input_shape`.
pub fn attack(net: &Network, x: &Tensor, t: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xb = x.reshape(&shape)?;
    Ok(attack_batch(net, &xb, &[t], cfg)?.remove(0))
}

/// [`attack_batch`] over chunks of `chunk` examples on the rayon pool.
pub fn attack_many(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<Vec<AttackOutcome>> {
    let chunk = chunk.max(1);
    let n = targets.len();
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Result<Vec<Vec<AttackOutcome>>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(n)).collect();
            attack_batch(net, &x.select0(&idx)?, &targets[s..s + idx.len()], cfg)
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}
