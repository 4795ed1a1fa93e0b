//! Training loop and evaluation.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adv_train::{synthesize, AdvTrainConfig};
use crate::autodiff::{grad_values, Graph};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{config_err, Error, Result};
use crate::nn::loss::{cross_entropy_var, softmax_var};
use crate::nn::{save_checkpoint, Activation, LrSchedule, Network, OptimizerState, ParamKind, Preset, SgdConfig};
use crate::regularizers::{
    lipschitz_penalty, output_zero_loss, AdaptivePsiConfig, AdaptivePsiState, LipschitzConfig,
    OutputZeroConfig,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub sgd: SgdConfig,
    /// `lipschitz.psi` is the fixed ψ; it must stay 0 when `adaptive_psi`
    /// is set.
    pub lipschitz: LipschitzConfig,
    pub output_zero: OutputZeroConfig,
    pub adaptive_psi: Option<AdaptivePsiConfig>,
    pub adv_train: AdvTrainConfig,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Mlp2d,
            activation: Activation::default(),
            epochs: 60,
            batch_size: 32,
            lr: LrSchedule::default(),
            sgd: SgdConfig::default(),
            lipschitz: LipschitzConfig::default(),
            output_zero: OutputZeroConfig::default(),
            adaptive_psi: None,
            adv_train: AdvTrainConfig::default(),
            augment: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch_size must be positive");
        }
        self.sgd.validate()?;
        self.lipschitz.validate(num_classes)?;
        self.adv_train.validate()?;
        if !(self.output_zero.k_out >= 0.0) {
            return config_err("k_out must be nonnegative");
        }
        if let Some(a) = &self.adaptive_psi {
            a.validate()?;
            if self.lipschitz.psi != 0.0 {
                return config_err("set either a fixed psi or adaptive_psi, not both");
            }
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Shuffle = 1,
    Lipschitz = 2,
    Noise = 3,
    Augment = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Batch means of each loss term.
    pub classification: f64,
    pub lipschitz: f64,
    pub output_zero: f64,
    /// `½ Σ λ θ²`, applied by the optimizer.
    pub weight_decay: f64,
    pub total: f64,
    /// ψ in effect for the last batch, and the smallest one used.
    pub psi: f64,
    pub psi_min: f64,
    /// Clean accuracy on the training set after the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn last(&self) -> &EpochReport {
        self.epochs.last().expect("at least one epoch")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub report: TrainReport,
}

fn decay_energy(net: &Network, sgd: &SgdConfig) -> f64 {
    net.params
        .iter()
        .map(|p| {
            let lambda = match p.kind {
                ParamKind::Weight => sgd.weight_decay_weights,
                ParamKind::Bias => sgd.weight_decay_biases,
            };
            0.5 * lambda * p.value.data().iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// Accuracy of `net` on `data`, in forward-only chunks.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(512) {
        let (x, t) = data.batch(chunk)?;
        correct += net.predict(&x)?.iter().zip(&t).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train a freshly initialized network on `data`; the final parameters are
/// the result. Writes a checkpoint when `checkpoint_dir` is given.
pub fn train(cfg: &TrainConfig, data: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let net = Network::from_preset(cfg.preset, &data.image_shape, data.num_classes, cfg.activation, cfg.seed)?;
    train_network(cfg, net, data, checkpoint_dir)
}

/// Train an existing network in place of a fresh one.
pub fn train_network(
    cfg: &TrainConfig,
    mut net: Network,
    data: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate(data.num_classes)?;
    if data.is_empty() {
        return config_err("cannot train on an empty dataset");
    }
    if net.input_shape != data.image_shape || net.num_classes != data.num_classes {
        return config_err("network does not match the dataset");
    }
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut lip_rng = stream_rng(cfg.seed, Stream::Lipschitz);
    let mut noise_rng = stream_rng(cfg.seed, Stream::Noise);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment);
    let mut opt = OptimizerState::new(&net, cfg.sgd.clone(), cfg.lr.rate(0))?;
    let mut controller = cfg.adaptive_psi.clone().map(AdaptivePsiState::new).transpose()?;
    let mut psi = controller.as_ref().map_or(cfg.lipschitz.psi, |c| c.psi());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        opt.learning_rate = cfg.lr.rate(epoch);
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        let mut psi_min = f64::INFINITY;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, t) = data.batch(chunk)?;
            if let Some(aug) = &cfg.augment {
                let items = (0..t.len())
                    .map(|i| augment(&x.index0(i), aug, &mut aug_rng))
                    .collect::<Result<Vec<_>>>()?;
                x = Tensor::stack(&items)?;
            }
            let x = synthesize(&net, &x, &t, &cfg.adv_train, &mut noise_rng)?;

            let g = Graph::new();
            let params = net.bind(&g);
            let penalize = psi > 0.0;
            let xv = if penalize { g.leaf(x) } else { g.constant(x) };
            let y = net.forward(&xv, &params)?;
            let ce = cross_entropy_var(&softmax_var(&y)?, &t)?;
            let mut total = ce.clone();
            let mut lip_value = 0.0;
            if penalize {
                let lc = LipschitzConfig {
                    psi,
                    ..cfg.lipschitz.clone()
                };
                let lip = lipschitz_penalty(&xv, &y, &t, &lc, &mut lip_rng)?;
                lip_value = lip.item();
                total = total.add(&lip)?;
            }
            let mut out_value = 0.0;
            if cfg.output_zero.k_out > 0.0 {
                let out = output_zero_loss(&y, &cfg.output_zero)?;
                out_value = out.item();
                total = total.add(&out)?;
            }
            let ce_value = ce.item();
            if !total.item().is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, batch {bi}"
                )));
            }
            let decay = decay_energy(&net, &cfg.sgd);
            let grads = grad_values(&total, &params)?;
            opt.step(&mut net, &grads)?;

            sums[0] += ce_value;
            sums[1] += lip_value;
            sums[2] += out_value;
            sums[3] += decay;
            batches += 1;
            psi_min = psi_min.min(psi);
            if let Some(c) = controller.as_mut() {
                psi = c.update(ce_value)?;
            }
        }
        let n = batches as f64;
        let [classification, lipschitz, output_zero, weight_decay] = sums.map(|s| s / n);
        epochs.push(EpochReport {
            epoch,
            learning_rate: opt.learning_rate,
            classification,
            lipschitz,
            output_zero,
            weight_decay,
            total: classification + lipschitz + output_zero + weight_decay,
            psi,
            psi_min,
            accuracy: accuracy(&net, data)?,
        });
        log::info!(
            "epoch {epoch}: ce {classification:.4} lip {lipschitz:.4} psi {psi:.3} acc {:.3}",
            epochs.last().unwrap().accuracy
        );
    }

    let checkpoint = match checkpoint_dir {
        Some(dir) => {
            save_checkpoint(&net, dir)?;
            Some(dir.display().to_string())
        }
        None => None,
    };
    Ok(TrainOutcome {
        network: net,
        report: TrainReport { epochs, checkpoint },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `E|∂y_i/∂x_j|` over all outputs, inputs and examples.
    pub mean_abs_grad: f64,
    /// Mean over examples and outputs of `max_j |∂y_i/∂x_j|`.
    pub mean_max_abs_grad: f64,
    pub examples: usize,
}

/// Clean accuracy and input-gradient statistics on (at most `limit`
/// examples of) `data`.
pub fn evaluate(net: &Network, data: &Dataset, limit: Option<usize>) -> Result<EvalReport> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return config_err("cannot evaluate on an empty dataset");
    }
    let v = net.num_classes;
    let idx: Vec<usize> = (0..n).collect();
    let (mut correct, mut abs_sum, mut max_sum) = (0usize, 0.0, 0.0);
    for chunk in idx.chunks(256) {
        let (x, t) = data.batch(chunk)?;
        let b = chunk.len();
        let inner = x.numel() / b;
        let g = Graph::new();
        let params = net.bind_constants(&g);
        let xv = g.leaf(x);
        let y = net.forward(&xv, &params)?;
        let yv = y.value();
        for (row, &label) in t.iter().enumerate() {
            if crate::nn::argmax(&yv.data()[row * v..(row + 1) * v]) == label {
                correct += 1;
            }
        }
        for i in 0..v {
            let cols: Rc<[usize]> = (0..b).map(|r| r * v + i).collect();
            let s = y.gather(cols, &[b])?.sum();
            let gx = grad_values(&s, std::slice::from_ref(&xv))?.remove(0);
            for row in gx.data().chunks(inner) {
                abs_sum += row.iter().map(|a| a.abs()).sum::<f64>();
                max_sum += row.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            }
        }
    }
    let inputs = net.input_numel() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        mean_abs_grad: abs_sum / (n as f64 * v as f64 * inputs),
        mean_max_abs_grad: max_sum / (n as f64 * v as f64),
        examples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: LrSchedule {
                base: 0.1,
                warmup_epochs: 1,
                step_epochs: vec![3],
                step_factor: 0.1,
            },
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn loss_parts_add_up_and_runs_repeat() {
        let data = gen_blobs(3, 30, 0.08, 1).unwrap();
        let cfg = TrainConfig {
            lipschitz: LipschitzConfig {
                psi: 0.5,
                ..Default::default()
            },
            output_zero: OutputZeroConfig { k_out: 0.01 },
            ..small()
        };
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.epochs.len(), 4);
        for e in &a.report.epochs {
            let parts = e.classification + e.lipschitz + e.output_zero + e.weight_decay;
            assert!((e.total - parts).abs() < 1e-9);
            assert!(e.lipschitz > 0.0 && e.output_zero > 0.0);
        }
        assert!(a.report.last().accuracy > 0.9);
    }

    #[test]
    fn adaptive_psi_never_below_floor() {
        let data = gen_blobs(3, 20, 0.08, 1).unwrap();
        let cfg = TrainConfig {
            adaptive_psi: Some(AdaptivePsiConfig {
                k_psi_0: 0.5,
                l_target: 0.3,
                ..Default::default()
            }),
            ..small()
        };
        let out = train(&cfg, &data, None).unwrap();
        assert!(out.report.epochs.iter().all(|e| e.psi_min >= 0.5));
        let both = TrainConfig {
            lipschitz: LipschitzConfig {
                psi: 1.0,
                ..Default::default()
            },
            ..cfg
        };
        assert!(train(&both, &data, None).is_err());
    }

    #[test]
    fn constant_network_has_zero_gradient_statistic() {
        let data = gen_blobs(3, 5, 0.08, 1).unwrap();
        let net = Network::from_preset(Preset::Mlp2d, &[2], 3, Activation::default(), 0).unwrap();
        // The preset starts with a zero output layer.
        let r = evaluate(&net, &data, None).unwrap();
        assert_eq!(r.mean_abs_grad, 0.0);
        assert_eq!(r.mean_max_abs_grad, 0.0);
    }

    #[test]
    fn gradient_statistic_on_linear_model() {
        let data = gen_blobs(2, 4, 0.08, 1).unwrap();
        let net = Network::from_preset(Preset::Linear, &[2], 2, Activation::default(), 0)
            .unwrap()
            .with_params(vec![
                Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
                Tensor::zeros(&[2]),
            ])
            .unwrap();
        let r = evaluate(&net, &data, None).unwrap();
        assert!((r.mean_abs_grad - 6.5 / 4.0).abs() < 1e-12);
        assert!((r.mean_max_abs_grad - 2.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_written() {
        let data = gen_blobs(2, 5, 0.08, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&TrainConfig { epochs: 1, ..small() }, &data, Some(dir.path())).unwrap();
        let back = crate::nn::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, out.network);
    }
}
