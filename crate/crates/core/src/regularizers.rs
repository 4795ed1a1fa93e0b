//! Input-gradient (Lipschitz) penalty, output zeroing and the adaptive-ψ
//! controller.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var, GATHER_ZERO};
use crate::error::{config_err, Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TandemCombine {
    #[default]
    Subtract,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LipschitzConfig {
    pub psi: f64,
    /// Output indices drawn per example.
    pub k: usize,
    pub z: u32,
    pub q: u32,
    pub zeta: f64,
    /// Dead zone: gradient magnitudes up to `sigma` are not penalized.
    pub sigma: f64,
    pub tandem: bool,
    pub tandem_combine: TandemCombine,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            psi: 0.0,
            k: 1,
            z: 2,
            q: 0,
            zeta: 0.0,
            sigma: 0.0,
            tandem: false,
            tandem_combine: TandemCombine::Subtract,
        }
    }
}

impl LipschitzConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.psi >= 0.0) || !self.psi.is_finite() {
            return config_err(format!("psi must be finite and nonnegative, got {}", self.psi));
        }
        if self.k == 0 || self.k > num_classes {
            return config_err(format!("k must lie in 1..={num_classes}, got {}", self.k));
        }
        if self.z < 1 {
            return config_err("z must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return config_err(format!("zeta must lie in [0,1], got {}", self.zeta));
        }
        if !(self.sigma >= 0.0) {
            return config_err(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if self.tandem && num_classes < 2 {
            return config_err("the tandem penalty needs at least two classes");
        }
        Ok(())
    }
}

/// One selected output for one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Class(usize),
    /// `y_t - max_{i != t} y_i` (or `+` for the add variant).
    Tandem,
}

/// Draw `k` outputs without replacement. With probability `zeta` the first
/// draw becomes the true class (or the tandem quantity). The remaining
/// draws are sorted, so `k == V` always yields the same selection.
pub fn draw_outputs<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: usize,
    target: usize,
    cfg: &LipschitzConfig,
) -> Vec<Selection> {
    let mut idx = sample(rng, num_classes, cfg.k).into_vec();
    let forced = cfg.zeta > 0.0 && rng.random::<f64>() < cfg.zeta;
    if forced {
        if let Some(pos) = idx.iter().position(|&i| i == target) {
            idx.swap(0, pos);
        } else {
            idx[0] = target;
        }
        idx[1..].sort_unstable();
        let mut out = Vec::with_capacity(cfg.k);
        out.push(if cfg.tandem {
            Selection::Tandem
        } else {
            Selection::Class(target)
        });
        out.extend(idx[1..].iter().map(|&i| Selection::Class(i)));
        out
    } else {
        idx.sort_unstable();
        idx.into_iter().map(Selection::Class).collect()
    }
}

fn tandem_margin(y: &Var, targets: &[usize], combine: TandemCombine) -> Result<Var> {
    let shape = y.shape();
    let (b, v) = (shape[0], shape[1]);
    let mut true_idx = Vec::with_capacity(b);
    let mut rest_idx = Vec::with_capacity(b * (v - 1));
    for (row, &t) in targets.iter().enumerate() {
        true_idx.push(row * v + t);
        rest_idx.extend((0..v).filter(|&i| i != t).map(|i| row * v + i));
    }
    let yt = y.gather(Rc::from(true_idx), &[b])?;
    let others = y.gather(Rc::from(rest_idx), &[b, v - 1])?.max_axis(1)?;
    match combine {
        TandemCombine::Subtract => yt.sub(&others),
        TandemCombine::Add => yt.add(&others),
    }
}

/// The Lipschitz penalty for outputs `y = f(x)` already on the graph.
///
/// `x` must be a differentiable leaf `[B, ...]` and `y` the matching `[B,V]`
/// pre-softmax outputs. Returns
/// `psi / (K * N_in * B) * sum_b sum_k (sum_j a_j)^q * sum_j a_j^z` with
/// `a_j = max(|dy_sel/dx_j| - sigma, 0)`, differentiable in the parameters.
pub fn lipschitz_penalty<R: Rng + ?Sized>(
    x: &Var,
    y: &Var,
    targets: &[usize],
    cfg: &LipschitzConfig,
    rng: &mut R,
) -> Result<Var> {
    let ys = y.shape();
    if ys.len() != 2 || ys[0] != targets.len() || x.shape().first() != Some(&ys[0]) {
        return Err(Error::InvalidShape(format!(
            "penalty needs x [B,...] and y [B,V] for {} targets, got {:?} and {ys:?}",
            targets.len(),
            x.shape()
        )));
    }
    let (b, v) = (ys[0], ys[1]);
    cfg.validate(v)?;
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return config_err(format!("class {t} out of range for {v} classes"));
    }
    let graph = y.graph().clone();
    if cfg.psi == 0.0 {
        return Ok(graph.scalar(0.0));
    }
    let n_in = x.numel() / b;

    let draws: Vec<Vec<Selection>> = targets
        .iter()
        .map(|&t| draw_outputs(rng, v, t, cfg))
        .collect();
    let any_tandem = draws.iter().any(|d| d.contains(&Selection::Tandem));
    let margin = if any_tandem {
        Some(tandem_margin(y, targets, cfg.tandem_combine)?)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for k in 0..cfg.k {
        let mut class_idx = vec![GATHER_ZERO; b];
        let mut tandem_idx = vec![GATHER_ZERO; b];
        for (row, d) in draws.iter().enumerate() {
            match d[k] {
                Selection::Class(c) => class_idx[row] = row * v + c,
                Selection::Tandem => tandem_idx[row] = row,
            }
        }
        let mut selected = y.gather(Rc::from(class_idx), &[b])?.sum();
        if let Some(m) = &margin {
            selected = selected.add(&m.gather(Rc::from(tandem_idx), &[b])?.sum())?;
        }
        let g = grad(&selected, std::slice::from_ref(x), true)?.remove(0);
        let g = g.reshape(&[b, n_in])?;
        let a = if cfg.sigma > 0.0 {
            g.abs().add_scalar(-cfg.sigma).relu()
        } else {
            g.abs()
        };
        let mut per_example = a.powi(cfg.z as i32).sum_axis(1)?;
        if cfg.q > 0 {
            per_example = per_example.mul(&a.sum_axis(1)?.powi(cfg.q as i32))?;
        }
        let term = per_example.sum();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("k >= 1 after validation");
    Ok(total.scale(cfg.psi / (cfg.k as f64 * n_in as f64 * b as f64)))
}

/// Builds the forward pass for `x` and returns the penalty.
pub fn lipschitz_loss<R: Rng + ?Sized>(
    net: &Network,
    params: &[Var],
    x: &Tensor,
    targets: &[usize],
    cfg: &LipschitzConfig,
    rng: &mut R,
) -> Result<Var> {
    let graph = params
        .first()
        .map(|p| p.graph().clone())
        .ok_or_else(|| Error::Config("network has no parameters".into()))?;
    let xv = graph.leaf(x.clone());
    let y = net.forward(&xv, params)?;
    lipschitz_penalty(&xv, &y, targets, cfg, rng)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputZeroConfig {
    pub k_out: f64,
}

/// `k_out * mean_b sum_i y_{b,i}^2` over pre-softmax outputs `[B,V]`.
pub fn output_zero_loss(y: &Var, cfg: &OutputZeroConfig) -> Result<Var> {
    if !(cfg.k_out >= 0.0) {
        return config_err(format!("k_out must be nonnegative, got {}", cfg.k_out));
    }
    let b = y.shape().first().copied().unwrap_or(1) as f64;
    Ok(y.square().sum().scale(cfg.k_out / b))
}

/// Output-zeroing strength for which a model at confidence `s_target` with
/// all other logits at zero is in equilibrium with the cross-entropy pull.
pub fn suggest_k_out(s_target: f64, num_classes: usize) -> Result<f64> {
    let v = num_classes as f64;
    if num_classes < 2 || !(s_target > 1.0 / v) || !(s_target < 1.0) {
        return config_err(format!(
            "target confidence must lie in (1/V, 1) = ({}, 1), got {s_target}",
            1.0 / v
        ));
    }
    let rest = 1.0 - s_target;
    let y_t = (s_target * (v - 1.0) / rest).ln();
    Ok(rest / (2.0 * y_t * (1.0 + (v - 1.0) * rest)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptivePsiConfig {
    pub k_psi_0: f64,
    pub k_psi: f64,
    pub eps_better: f64,
    pub eps_worse: f64,
    pub l_target: f64,
}

impl Default for AdaptivePsiConfig {
    fn default() -> Self {
        Self {
            k_psi_0: 220.0,
            k_psi: 0.02,
            eps_better: 1.0,
            eps_worse: 0.01,
            l_target: 1.0,
        }
    }
}

impl AdaptivePsiConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_psi_0", self.k_psi_0),
            ("k_psi", self.k_psi),
            ("eps_better", self.eps_better),
            ("eps_worse", self.eps_worse),
            ("l_target", self.l_target),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return config_err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Integrating controller that holds the training loss near `l_target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptivePsiState {
    pub config: AdaptivePsiConfig,
    pub integral: f64,
}

impl AdaptivePsiState {
    pub fn new(config: AdaptivePsiConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            integral: 0.0,
        })
    }

    pub fn psi(&self) -> f64 {
        self.config.k_psi_0 * (self.config.k_psi * self.integral).exp()
    }

    /// Feed one batch loss; returns the new effective ψ.
    pub fn update(&mut self, batch_loss: f64) -> Result<f64> {
        if !(batch_loss > 0.0) || !batch_loss.is_finite() {
            return config_err(format!("batch loss must be positive, got {batch_loss}"));
        }
        let c = &self.config;
        let step = (-(batch_loss / c.l_target).ln()).clamp(-c.eps_worse, c.eps_better);
        self.integral = (self.integral + step).max(0.0);
        Ok(self.psi())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::{LayerSpec, Preset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_net(a: &[f64], v: usize, n: usize) -> Network {
        Network::build(Preset::Custom, &[n], v, vec![LayerSpec::Dense { inputs: n, outputs: v }], 0)
            .unwrap()
            .with_params(vec![Tensor::new(vec![n, v], a.to_vec()).unwrap(), Tensor::zeros(&[v])])
            .unwrap()
    }

    fn eval(net: &Network, x: &Tensor, t: &[usize], cfg: &LipschitzConfig, seed: u64) -> f64 {
        let g = Graph::new();
        let p = net.bind(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lipschitz_loss(net, &p, x, t, cfg, &mut rng).unwrap().item()
    }

    #[test]
    fn linear_net_matches_weight_penalty() {
        let a = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let net = linear_net(&a, 3, 2);
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.7, 0.4]).unwrap();
        let cfg = LipschitzConfig {
            psi: 3.0,
            k: 3,
            ..Default::default()
        };
        let expect = 3.0 / (3.0 * 2.0) * a.iter().map(|v| v * v).sum::<f64>();
        assert!((eval(&net, &x, &[0, 2], &cfg, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_cases() {
        let net = linear_net(&[0.0; 6], 3, 2);
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
        let cfg = LipschitzConfig {
            psi: 5.0,
            ..Default::default()
        };
        assert_eq!(eval(&net, &x, &[1], &cfg, 0), 0.0);

        let net = linear_net(&[0.5, -1.0, 2.0, 0.25, 1.5, -0.75], 3, 2);
        let dead = LipschitzConfig {
            psi: 5.0,
            k: 3,
            sigma: 2.5,
            ..Default::default()
        };
        assert_eq!(eval(&net, &x, &[1], &dead, 0), 0.0);
    }

    #[test]
    fn full_draw_is_seed_independent() {
        let net = Network::from_preset(Preset::Mlp2d, &[2], 3, Default::default(), 4).unwrap();
        let mut p: Vec<Tensor> = net.params.iter().map(|p| p.value.clone()).collect();
        // The preset zeroes its last layer; give it some weight.
        let last = p.len() - 2;
        p[last] = Tensor::new(p[last].shape().to_vec(), (0..96).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let net = net.with_params(p).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.5, 0.5, 0.8, 0.2]).unwrap();
        let cfg = LipschitzConfig {
            psi: 1.0,
            k: 3,
            ..Default::default()
        };
        let a = eval(&net, &x, &[0, 1, 2], &cfg, 1);
        let b = eval(&net, &x, &[0, 1, 2], &cfg, 99);
        assert!(a > 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn tandem_uses_margin_gradient() {
        // y = A^T x with rows of A^T: class0=(1,0), class1=(0,2), class2=(3,1).
        let a = [1.0, 0.0, 3.0, 0.0, 2.0, 1.0];
        let net = linear_net(&a, 3, 2);
        // At x=(0.5,0.5): y = (0.5, 1.0, 2.0); max over i != 0 is class 2.
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut cfg = LipschitzConfig {
            psi: 1.0,
            zeta: 1.0,
            tandem: true,
            ..Default::default()
        };
        // grad of y0 - y2 = (1-3, 0-1) = (-2,-1): sum of squares 5, / (K*N) = 2.5.
        assert!((eval(&net, &x, &[0], &cfg, 0) - 2.5).abs() < 1e-12);
        cfg.tandem_combine = TandemCombine::Add;
        // grad of y0 + y2 = (4, 1): 17 / 2.
        assert!((eval(&net, &x, &[0], &cfg, 0) - 8.5).abs() < 1e-12);
    }

    #[test]
    fn q_power_multiplies_row_sum() {
        let a = [1.0, 0.0, 2.0, 0.0];
        let net = linear_net(&a, 2, 2);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let cfg = LipschitzConfig {
            psi: 1.0,
            zeta: 1.0,
            q: 1,
            ..Default::default()
        };
        // Class 0 gradient (1, 2): (1+2)^1 * (1+4) / 2.
        assert!((eval(&net, &x, &[0], &cfg, 0) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn zeta_one_forces_true_class_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LipschitzConfig {
            k: 3,
            zeta: 1.0,
            ..Default::default()
        };
        for _ in 0..1000 {
            let d = draw_outputs(&mut rng, 10, 7, &cfg);
            assert_eq!(d[0], Selection::Class(7));
            let mut seen: Vec<_> = d.iter().collect();
            seen.dedup();
            assert_eq!(seen.len(), 3);
        }
    }

    #[test]
    fn draw_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LipschitzConfig::default();
        let (v, n) = (10usize, 100_000usize);
        let mut counts = vec![0usize; v];
        for _ in 0..n {
            if let Selection::Class(c) = draw_outputs(&mut rng, v, 0, &cfg)[0] {
                counts[c] += 1;
            }
        }
        let p = 1.0 / v as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * se + 1e-12, "{c}");
        }
    }

    #[test]
    fn config_errors() {
        let bad_psi = LipschitzConfig {
            psi: -1.0,
            ..Default::default()
        };
        assert!(bad_psi.validate(3).is_err());
        let too_many = LipschitzConfig {
            k: 4,
            ..Default::default()
        };
        assert!(too_many.validate(3).is_err());
        let tandem = LipschitzConfig {
            tandem: true,
            ..Default::default()
        };
        assert!(tandem.validate(1).is_err());
    }

    #[test]
    fn output_zeroing() {
        let g = Graph::new();
        let y = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let l = output_zero_loss(&y, &OutputZeroConfig { k_out: 0.01 }).unwrap();
        assert!((l.item() - 0.05).abs() < 1e-15);
        let gy = crate::autodiff::grad_values(&l, &[y]).unwrap().remove(0);
        assert!((gy.data()[0] - 0.02).abs() < 1e-15);
        assert!((gy.data()[1] - 0.04).abs() < 1e-15);

        let z = g.leaf(Tensor::zeros(&[4, 3]));
        assert_eq!(output_zero_loss(&z, &OutputZeroConfig { k_out: 1.0 }).unwrap().item(), 0.0);
    }

    #[test]
    fn k_out_guideline() {
        let cases = [(10, 0.01), (1000, 6e-5), (80, 1e-3)];
        for (v, expect) in cases {
            let k = suggest_k_out(0.8, v).unwrap();
            assert!(((k - expect) / expect).abs() < 0.15, "V={v}: {k}");
        }
        assert!(suggest_k_out(0.1, 10).is_err());
        assert!(suggest_k_out(1.0, 10).is_err());
    }

    #[test]
    fn adaptive_psi_controller() {
        let mut st = AdaptivePsiState::new(AdaptivePsiConfig {
            l_target: 0.5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(st.update(0.5).unwrap(), 220.0);
        assert_eq!(st.update(50.0).unwrap(), 220.0);
        assert_eq!(st.integral, 0.0);
        // Loss well under target: clipped at eps_better.
        let psi = st.update(0.001).unwrap();
        assert!((psi - 220.0 * 0.02f64.exp()).abs() < 1e-9);
        // Loss above target: clipped at eps_worse.
        st.update(5.0).unwrap();
        assert!((st.integral - 0.99).abs() < 1e-12);
        assert!(st.update(0.0).is_err());
    }
}
