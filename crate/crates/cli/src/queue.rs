//! Pre-generated queue of high-confidence adversarial examples.

use std::fs;
use std::path::Path;

use advex::attack::{attack_many, goal_high_confidence, AttackConfig, Goal};
use advex::data::Dataset;
use advex::nn::{argmax, Network};
use advex::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const QUEUE_FILE: &str = "queue.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub id: String,
    pub source_example_id: String,
    pub original_label: usize,
    pub predicted_adversarial_class: usize,
    /// Softmax output at the adversarial image.
    pub prediction: Vec<f64>,
    /// Both paths are relative to the state directory.
    pub original_image: String,
    pub adversarial_image: String,
    #[serde(skip)]
    pub original: Option<Tensor>,
    #[serde(skip)]
    pub adversarial: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueManifest {
    pub margin: f64,
    pub items: Vec<QueueItem>,
}

/// Attack correctly classified examples in a seeded order with the
/// high-confidence goal and keep the first `size` successes.
pub fn build_queue(
    net: &Network,
    data: &Dataset,
    size: usize,
    attack_cfg: &AttackConfig,
    seed: u64,
    chunk: usize,
) -> Result<Vec<QueueItem>> {
    let cfg = AttackConfig {
        goal: Goal::HighConfidence,
        ..attack_cfg.clone()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut items = Vec::with_capacity(size);
    for block in order.chunks(chunk.max(1) * 4) {
        if items.len() == size {
            break;
        }
        let (x, y) = data.batch(block)?;
        let pred = net.predict(&x)?;
        let keep: Vec<usize> = (0..block.len()).filter(|&i| pred[i] == y[i]).collect();
        if keep.is_empty() {
            continue;
        }
        let xs = x.select0(&keep)?;
        let ts: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
        let outs = attack_many(net, &xs, &ts, &cfg, chunk)?;
        for (row, ((&i, out), &t)) in keep.iter().zip(&outs).zip(&ts).enumerate() {
            if items.len() == size {
                break;
            }
            let Some(adv) = out.adversarial(&xs.index0(row)) else {
                continue;
            };
            let ex = &data.examples[block[i]];
            let id = format!("q{:04}", items.len());
            items.push(QueueItem {
                original_image: format!("{IMAGE_DIR}/{id}-original.aetn"),
                adversarial_image: format!("{IMAGE_DIR}/{id}.aetn"),
                id,
                source_example_id: ex.id.clone(),
                original_label: t,
                predicted_adversarial_class: argmax(&out.final_prediction),
                prediction: out.final_prediction.clone(),
                original: Some(ex.image.clone()),
                adversarial: Some(adv),
            });
        }
    }
    if items.len() < size {
        log::warn!("queue holds {} of {size} requested items", items.len());
    }
    Ok(items)
}

pub fn save_queue(dir: &Path, margin: f64, items: &[QueueItem]) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for it in items {
        if let (Some(o), Some(a)) = (&it.original, &it.adversarial) {
            o.save(dir.join(&it.original_image))?;
            a.save(dir.join(&it.adversarial_image))?;
        }
    }
    let manifest = QueueManifest {
        margin,
        items: items.to_vec(),
    };
    fs::write(dir.join(QUEUE_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load a queue and its images. Every item must still satisfy the
/// high-confidence goal against `net`.
pub fn load_queue(dir: &Path, net: &Network) -> Result<QueueManifest> {
    let mut manifest: QueueManifest = serde_json::from_slice(&fs::read(dir.join(QUEUE_FILE))?)?;
    for it in &mut manifest.items {
        it.original = Some(Tensor::load(dir.join(&it.original_image))?);
        it.adversarial = Some(Tensor::load(dir.join(&it.adversarial_image))?);
    }
    verify_queue(net, &manifest)?;
    Ok(manifest)
}

pub fn verify_queue(net: &Network, manifest: &QueueManifest) -> Result<()> {
    for it in &manifest.items {
        let adv = it.adversarial.as_ref().expect("image loaded");
        let mut shape = vec![1];
        shape.extend_from_slice(adv.shape());
        let probs = net.probabilities(&adv.reshape(&shape)?)?.remove(0);
        if !goal_high_confidence(&probs, it.original_label, manifest.margin) {
            return Err(CliError::Invalid(format!(
                "queue item {} no longer satisfies the high-confidence goal",
                it.id
            )));
        }
    }
    Ok(())
}
