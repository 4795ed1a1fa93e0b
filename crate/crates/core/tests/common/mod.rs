//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::rc::Rc;

use advex::attack::{attack_batch, AttackConfig};
use advex::autodiff::{grad, grad_values, Graph, Var};
use advex::nn::loss::{cross_entropy_var, softmax_var};
use advex::nn::{Activation, LayerSpec, Network, Preset};
use advex::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HH: Activation = Activation::HhRelu { d: 1.0 };

pub fn act() -> LayerSpec {
    LayerSpec::Activation { activation: HH }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Every parameter, the last layer and biases included, drawn at random.
pub fn randomized(net: Network, rng: &mut ChaCha8Rng) -> Network {
    let values = net
        .params
        .iter()
        .map(|p| uniform(p.value.shape(), -0.8, 0.8, rng))
        .collect();
    net.with_params(values).unwrap()
}

pub fn dense_net(widths: &[usize], seed: u64) -> Network {
    let mut layers = Vec::new();
    for w in widths.windows(2) {
        if !layers.is_empty() {
            layers.push(act());
        }
        layers.push(LayerSpec::Dense { inputs: w[0], outputs: w[1] });
    }
    let net = Network::build(Preset::Custom, &widths[..1], *widths.last().unwrap(), layers, seed).unwrap();
    randomized(net, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn conv_net(seed: u64) -> Network {
    let layers = vec![
        LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        act(),
        LayerSpec::Conv { in_channels: 3, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
        act(),
        LayerSpec::AvgPool { kernel: 3 },
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 4, outputs: 3 },
    ];
    let net = Network::build(Preset::Custom, &[2, 6, 6], 3, layers, seed).unwrap();
    randomized(net, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn flat_params(net: &Network) -> Vec<f64> {
    net.params.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

pub fn with_flat(net: &Network, flat: &[f64]) -> Network {
    let mut off = 0;
    let values = net
        .params
        .iter()
        .map(|p| {
            let n = p.value.numel();
            off += n;
            Tensor::new(p.value.shape().to_vec(), flat[off - n..off].to_vec()).unwrap()
        })
        .collect();
    net.clone().with_params(values).unwrap()
}

pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Cross-entropy plus a random linear read-out of the logits.
fn scalar_objective(net: &Network, x: &Var, params: &[Var], targets: &[usize], mix: &Tensor) -> Var {
    let y = net.forward(x, params).unwrap();
    let ce = cross_entropy_var(&softmax_var(&y).unwrap(), targets).unwrap();
    let readout = y.mul(&x.graph().constant(mix.clone())).unwrap().sum();
    ce.add(&readout).unwrap()
}

/// Relative error of tape gradients against central differences, for the
/// parameters and the input of `net`. Returns `(params, input)`.
pub fn first_order_error(net: &Network, batch: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend_from_slice(&net.input_shape);
    let x = uniform(&shape, 0.0, 1.0, &mut rng);
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..net.num_classes)).collect();
    let mix = uniform(&[batch, net.num_classes], -1.0, 1.0, &mut rng);

    let g = Graph::new();
    let params = net.bind(&g);
    let xv = g.leaf(x.clone());
    let obj = scalar_objective(net, &xv, &params, &targets, &mix);
    let mut wrt = params.clone();
    wrt.push(xv);
    let grads = grad_values(&obj, &wrt).unwrap();
    let tape_x = grads.last().unwrap().data().to_vec();
    let tape_p: Vec<f64> = grads[..params.len()].iter().flat_map(|t| t.data().to_vec()).collect();

    let eval = |n: &Network, x: &Tensor| {
        let g = Graph::new();
        let p = n.bind_constants(&g);
        scalar_objective(n, &g.constant(x.clone()), &p, &targets, &mix).item()
    };
    let h = 1e-6;
    let fd_p = central_diff(&flat_params(net), h, |f| eval(&with_flat(net, f), &x));
    let fd_x = central_diff(x.data(), h, |f| {
        eval(net, &Tensor::new(shape.clone(), f.to_vec()).unwrap())
    });
    (rel_err(&tape_p, &fd_p), rel_err(&tape_x, &fd_x))
}

/// `Σ_b Σ_j (∂y_c/∂x_j)²` for output `c` over a batch, built so that it can
/// be differentiated again.
fn squared_input_gradient(net: &Network, x: &Tensor, params: &[Var], class: usize) -> Var {
    let g = params[0].graph();
    let xv = g.leaf(x.clone());
    let y = net.forward(&xv, params).unwrap();
    let b = x.batch_len();
    let v = net.num_classes;
    let cols: Rc<[usize]> = (0..b).map(|r| r * v + class).collect();
    let picked = y.gather(cols, &[b]).unwrap().sum();
    let gx = grad(&picked, &[xv], true).unwrap().remove(0);
    gx.square().sum()
}

/// Relative error of the parameter gradient of the squared input gradient
/// against central differences of that scalar.
pub fn second_order_error(net: &Network, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend_from_slice(&net.input_shape);
    let x = uniform(&shape, 0.0, 1.0, &mut rng);
    let class = rng.random_range(0..net.num_classes);

    let g = Graph::new();
    let params = net.bind(&g);
    let s = squared_input_gradient(net, &x, &params, class);
    let tape: Vec<f64> = grad_values(&s, &params)
        .unwrap()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let fd = central_diff(&flat_params(net), 1e-6, |f| {
        let n = with_flat(net, f);
        let g = Graph::new();
        let p = n.bind(&g);
        squared_input_gradient(&n, &x, &p, class).item()
    });
    rel_err(&tape, &fd)
}

/// A two-class linear network `y0 - y1 = w·x + c`.
pub fn binary_linear(w: [f64; 2], c: f64) -> Network {
    let net = Network::from_preset(Preset::Linear, &[2], 2, HH, 0).unwrap();
    net.with_params(vec![
        Tensor::new(vec![2, 2], vec![w[0], 0.0, w[1], 0.0]).unwrap(),
        Tensor::from_vec(vec![c, 0.0]),
    ])
    .unwrap()
}

/// Attack RMSE over the analytic RMSE distance to the decision line, for
/// random linear classifiers and points in the interior of the square.
pub fn linear_attack_ratios(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(count);
    while ratios.len() < count {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let w = [angle.cos() * rng.random_range(1.0..5.0), angle.sin() * rng.random_range(1.0..5.0)];
        let x = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        // Put the line 0.05 to 0.15 away so the crossing stays inside the square.
        let dist = rng.random_range(0.05..0.15);
        let c = dist * norm - (w[0] * x[0] + w[1] * x[1]);
        let foot = [x[0] - dist * w[0] / norm, x[1] - dist * w[1] / norm];
        if !foot.iter().all(|v| (0.02..0.98).contains(v)) {
            continue;
        }
        let net = binary_linear(w, c);
        let out = attack_batch(&net, &Tensor::new(vec![1, 2], x.to_vec()).unwrap(), &[0], &AttackConfig::default())
            .unwrap()
            .remove(0);
        let rmse = out.rmse.unwrap_or(f64::INFINITY);
        ratios.push(rmse / (dist / 2f64.sqrt()));
    }
    ratios
}

/// Cross-entropy-only momentum SGD written directly against the primitives,
/// following the trainer's shuffling and initialization conventions.
pub fn plain_training(
    cfg: &advex::train::TrainConfig,
    data: &advex::data::Dataset,
) -> Network {
    use advex::nn::OptimizerState;
    use advex::train::{stream_rng, Stream};
    use rand::seq::SliceRandom;

    let mut net =
        Network::from_preset(cfg.preset, &data.image_shape, data.num_classes, cfg.activation, cfg.seed).unwrap();
    let mut opt = OptimizerState::new(&net, cfg.sgd.clone(), cfg.lr.rate(0)).unwrap();
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.learning_rate = cfg.lr.rate(epoch);
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t) = data.batch(chunk).unwrap();
            let g = Graph::new();
            let params = net.bind(&g);
            let y = net.forward(&g.constant(x), &params).unwrap();
            let loss = cross_entropy_var(&softmax_var(&y).unwrap(), &t).unwrap();
            let grads = grad_values(&loss, &params).unwrap();
            opt.step(&mut net, &grads).unwrap();
        }
    }
    net
}

pub fn same_bits(a: &Network, b: &Network) -> bool {
    let (fa, fb) = (flat_params(a), flat_params(b));
    fa.len() == fb.len() && fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits())
}
