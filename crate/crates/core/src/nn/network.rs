use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::activation::DEFAULT_D;
use crate::nn::loss::{softmax, softmax_var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    HhRelu { d: f64 },
    Relu,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::HhRelu { d: DEFAULT_D }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        kernel: usize,
    },
    Flatten,
    Activation {
        activation: Activation,
    },
}

impl LayerSpec {
    /// Output shape (per example) for the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| {
            Err(Error::InvalidShape(format!(
                "layer {self:?} cannot accept input {input:?}: {why}"
            )))
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad("dense input width differs");
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad("expected [C,H,W] with matching channels");
                }
                if stride == 0 || input[1] + 2 * padding < kernel || input[2] + 2 * padding < kernel {
                    return bad("kernel does not fit");
                }
                Ok(vec![
                    out_channels,
                    (input[1] + 2 * padding - kernel) / stride + 1,
                    (input[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::AvgPool { kernel } => {
                if input.len() != 3 || kernel == 0 || input[1] < kernel || input[2] < kernel {
                    return bad("expected [C,H,W] at least as large as the window");
                }
                Ok(vec![input[0], input[1] / kernel, input[2] / kernel])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Activation { activation } => {
                if let Activation::HhRelu { d } = activation {
                    if !(d > 0.0) {
                        return config_err(format!("HHReLU requires d > 0, got {d}"));
                    }
                }
                Ok(input.to_vec())
            }
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs], inputs)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Built-in desk-scale architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `in -> 32 -> 32 -> V` dense stack.
    Mlp2d,
    /// Three conv blocks, global average pool, dense head.
    CnnTiny,
    /// Single dense layer, no activation.
    Linear,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-2d" => Ok(Preset::Mlp2d),
            "cnn-tiny" => Ok(Preset::CnnTiny),
            "linear" => Ok(Preset::Linear),
            "custom" => Ok(Preset::Custom),
            other => config_err(format!("unknown architecture preset {other:?}")),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Mlp2d => "mlp-2d",
            Preset::CnnTiny => "cnn-tiny",
            Preset::Linear => "linear",
            Preset::Custom => "custom",
        }
    }

    pub fn layers(
        self,
        input_shape: &[usize],
        num_classes: usize,
        activation: Activation,
    ) -> Result<Vec<LayerSpec>> {
        let act = LayerSpec::Activation { activation };
        let flat: usize = input_shape.iter().product();
        match self {
            Preset::Mlp2d => {
                let mut layers = Vec::new();
                if input_shape.len() != 1 {
                    layers.push(LayerSpec::Flatten);
                }
                layers.extend([
                    LayerSpec::Dense { inputs: flat, outputs: 32 },
                    act.clone(),
                    LayerSpec::Dense { inputs: 32, outputs: 32 },
                    act,
                    LayerSpec::Dense { inputs: 32, outputs: num_classes },
                ]);
                Ok(layers)
            }
            Preset::Linear => {
                let mut layers = Vec::new();
                if input_shape.len() != 1 {
                    layers.push(LayerSpec::Flatten);
                }
                layers.push(LayerSpec::Dense { inputs: flat, outputs: num_classes });
                Ok(layers)
            }
            Preset::CnnTiny => {
                if input_shape.len() != 3 || input_shape[1] < 4 || input_shape[2] < 4 {
                    return config_err(format!(
                        "cnn-tiny expects [C,H,W] inputs of at least 4x4, got {input_shape:?}"
                    ));
                }
                let c = input_shape[0];
                let conv = |i, o, stride| LayerSpec::Conv {
                    in_channels: i,
                    out_channels: o,
                    kernel: 3,
                    stride,
                    padding: 1,
                };
                let mut layers = vec![
                    conv(c, 8, 1),
                    act.clone(),
                    conv(8, 16, 2),
                    act.clone(),
                    conv(16, 16, 2),
                    act,
                ];
                let mut shape = input_shape.to_vec();
                for l in &layers {
                    shape = l.output_shape(&shape)?;
                }
                layers.push(LayerSpec::AvgPool { kernel: shape[1].min(shape[2]) });
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Dense { inputs: 16, outputs: num_classes });
                Ok(layers)
            }
            Preset::Custom => config_err("custom networks are built from explicit layer lists"),
        }
    }
}

/// A feed-forward classifier producing pre-softmax outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub preset: Preset,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Param>,
}

impl Network {
    pub fn from_preset(
        preset: Preset,
        input_shape: &[usize],
        num_classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let layers = preset.layers(input_shape, num_classes, activation)?;
        Self::build(preset, input_shape, num_classes, layers, seed)
    }

    /// Build and initialize a network.
    ///
    /// Weights are uniform in `±sqrt(6 / fan_in)`, biases zero, and the
    /// final parameterized layer starts at zero.
    pub fn build(
        preset: Preset,
        input_shape: &[usize],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let out = check_composition(input_shape, &layers)?;
        if out != [num_classes] {
            return config_err(format!(
                "network output {out:?} does not match {num_classes} classes"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_param_layer = layers.iter().rposition(|l| l.param_shapes().is_some());
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let Some((wshape, bshape, fan_in)) = layer.param_shapes() else {
                continue;
            };
            let numel: usize = wshape.iter().product();
            let weight = if Some(i) == last_param_layer {
                vec![0.0; numel]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.push(Param {
                name: format!("layer{i}.weight"),
                kind: ParamKind::Weight,
                value: Tensor::new(wshape, weight)?,
            });
            params.push(Param {
                name: format!("layer{i}.bias"),
                kind: ParamKind::Bias,
                value: Tensor::zeros(&bshape),
            });
        }
        Ok(Self {
            preset,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            params,
        })
    }

    /// Replace parameter values (checkpoint loading, tests).
    pub fn with_params(mut self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.params.len() {
            return config_err(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            ));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set parameter",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Parameters as differentiable leaves on `graph`.
    pub fn bind(&self, graph: &Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.leaf(p.value.clone())).collect()
    }

    /// Parameters as constants on `graph`.
    pub fn bind_constants(&self, graph: &Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.constant(p.value.clone()))
            .collect()
    }

    /// Pre-softmax outputs `[B,V]` for inputs `[B, ...input_shape]`.
    pub fn forward(&self, x: &Var, params: &[Var]) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: self.input_shape.clone(),
                rhs: xs,
            });
        }
        if params.len() != self.params.len() {
            return config_err("parameter binding does not match network");
        }
        let mut h = x.clone();
        let mut p = params.iter();
        for layer in &self.layers {
            h = match layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    h.matmul(w)?.add(b)?
                }
                LayerSpec::Conv { stride, padding, .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    h.conv2d(w, Some(b), *stride, *padding)?
                }
                LayerSpec::AvgPool { kernel } => h.avg_pool2d(*kernel)?,
                LayerSpec::Flatten => h.flatten_batch()?,
                LayerSpec::Activation { activation } => match activation {
                    Activation::HhRelu { d } => h.hhrelu(*d)?,
                    Activation::Relu => h.relu(),
                },
            };
        }
        Ok(h)
    }

    /// Logits for a batch, without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params = self.bind_constants(&g);
        let y = self.forward(&g.constant(x.clone()), &params)?;
        Ok((*y.value()).clone())
    }

    /// Softmax probabilities per example, `[B][V]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let y = self.logits(x)?;
        Ok(y.data().chunks(self.num_classes).map(softmax).collect())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.probabilities(x)?.iter().map(|p| argmax(p)).collect())
    }

    /// Gradient of a scalar objective of the logits with respect to the
    /// input batch, with parameters held constant. Returns the gradient and
    /// the logits at `x`.
    pub fn input_gradient(
        &self,
        x: &Tensor,
        objective: impl FnOnce(&Var) -> Result<Var>,
    ) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let params = self.bind_constants(&g);
        let xv = g.leaf(x.clone());
        let y = self.forward(&xv, &params)?;
        let obj = objective(&y)?;
        let grad = crate::autodiff::grad_values(&obj, &[xv])?.remove(0);
        Ok((grad, (*y.value()).clone()))
    }

    /// Softmax probabilities as a graph variable.
    pub fn probabilities_var(&self, x: &Var, params: &[Var]) -> Result<Var> {
        softmax_var(&self.forward(x, params)?)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Checks that consecutive layer shapes compose; returns the output shape.
pub fn check_composition(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<usize>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return config_err(format!("invalid input shape {input_shape:?}"));
    }
    let mut shape = input_shape.to_vec();
    for layer in layers {
        shape = layer.output_shape(&shape)?;
    }
    Ok(shape)
}
