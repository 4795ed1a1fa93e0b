//! Checkpoint directories: `manifest.json` plus one AETN file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::network::{Activation, LayerSpec, Network, ParamKind, Preset};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub preset: Preset,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// HHReLU `d` shared by the activation layers, if any.
    pub d: Option<f64>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let d = net.layers.iter().find_map(|l| match l {
        LayerSpec::Activation {
            activation: Activation::HhRelu { d },
        } => Some(*d),
        _ => None,
    });
    let mut params = Vec::with_capacity(net.params.len());
    for p in &net.params {
        let file = format!("{}.aetn", p.name);
        p.value.save(dir.join(&file))?;
        params.push(ParamEntry {
            name: p.name.clone(),
            kind: p.kind,
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        version: 1,
        preset: net.preset,
        input_shape: net.input_shape.clone(),
        num_classes: net.num_classes,
        d,
        layers: net.layers.clone(),
        params,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != 1 {
        return config_err(format!("unsupported checkpoint version {}", manifest.version));
    }
    let net = Network::build(
        manifest.preset,
        &manifest.input_shape,
        manifest.num_classes,
        manifest.layers.clone(),
        0,
    )?;
    if net.params.len() != manifest.params.len() {
        return config_err("checkpoint parameter list does not match its layers");
    }
    let mut values = Vec::with_capacity(net.params.len());
    for (expected, entry) in net.params.iter().zip(&manifest.params) {
        if expected.name != entry.name {
            return config_err(format!(
                "checkpoint parameter {} found where {} was expected",
                entry.name, expected.name
            ));
        }
        values.push(Tensor::load(dir.join(&entry.file))?);
    }
    net.with_params(values)
}
