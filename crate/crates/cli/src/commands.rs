//! Subcommand definitions and their handlers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use advex::adv_train::AdvMode;
use advex::attack::{attack_many, AttackConfig, Goal};
use advex::data::annotation::{load_annotation_images, read_annotation_log};
use advex::data::{gen_blobs, gen_digits, load_cifar_subset, merge_annotations, Dataset, DatasetBundle, Decision};
use advex::metrics::{build_curve, rmse, CurveOptions, DEFAULT_CAP};
use advex::nn::{argmax, load_checkpoint, Network, Preset};
use advex::regularizers::AdaptivePsiConfig;
use advex::tensor::Tensor;
use advex::train::{evaluate, train, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{loading, CliError, Result};
use crate::queue::{build_queue, load_queue, save_queue, QUEUE_FILE};
use crate::service::{AppState, ServiceConfig};

pub const ANNOTATION_LOG: &str = "annotations.jsonl";

#[derive(Debug, Parser)]
#[command(name = "advex", version, about = "Adversarial robustness toolkit")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a train/test dataset directory.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Attack test examples with a chosen goal.
    Attack(AttackArgs),
    /// Perceptually bounded explanation of one example.
    Explain(ExplainArgs),
    /// Accuracy-robustness area on the test split.
    Ara(AraArgs),
    /// Serve the annotation queue over HTTP.
    Serve(ServeArgs),
    /// Merge unchanged annotations into the training split and retrain.
    MergeRetrain(MergeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataKind {
    Blobs,
    Digits,
    Cifar,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: DataKind,
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 300)]
    pub per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    /// Blob standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,
    /// Digit pixel noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// CIFAR binary batches for the train split.
    #[arg(long, num_args = 1..)]
    pub cifar_train: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub cifar_test: Vec<PathBuf>,
    /// Record crop-and-flip augmentation in the dataset manifest.
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub psi: Option<f64>,
    #[arg(long)]
    pub k_out: Option<f64>,
    /// Let ψ follow the loss controller instead of a fixed value.
    #[arg(long)]
    pub adaptive_psi: bool,
    #[arg(long, value_enum)]
    pub adv_mode: Option<AdvModeArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub half_half: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AdvModeArg {
    None,
    L2,
    L2min,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct AttackOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub attack_lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "adv")]
    pub goal: String,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    /// First test example to attack.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Directory for the adversarial images of successful attacks.
    #[arg(long)]
    pub save_images: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackOverrides,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Perceptual budget on the RMSE scale.
    #[arg(long, default_value_t = 0.05)]
    pub rho: f64,
    /// Push the class probability down instead of up.
    #[arg(long)]
    pub minus: bool,
    /// Write the explanation image (AETN) here.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackOverrides,
}

#[derive(Debug, Args)]
pub struct AraArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub quota: usize,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub cap: f64,
    #[arg(long, default_value = "adv")]
    pub goal: String,
    /// Write the accuracy curve as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackOverrides,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Holds the queue, its images and the annotation log.
    #[arg(long)]
    pub state_dir: PathBuf,
    /// Dataset to draw the queue from when the state directory has none.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub queue_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value_t = 600)]
    pub lease_secs: u64,
    #[arg(long)]
    pub allow_overlap: bool,
    /// Build and verify the queue, then exit without serving.
    #[arg(long)]
    pub prepare_only: bool,
    #[command(flatten)]
    pub attack: AttackOverrides,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    /// Directory of the merged dataset.
    #[arg(long)]
    pub out_data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

pub fn run(cli: Cli) -> Result<Value> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(&a, seed),
        Command::Train(a) => train_cmd(&a, seed),
        Command::Attack(a) => attack_cmd(&a, seed),
        Command::Explain(a) => explain_cmd(&a),
        Command::Ara(a) => ara_cmd(&a, seed),
        Command::Serve(a) => serve_cmd(&a, seed),
        Command::MergeRetrain(a) => merge_retrain(&a, seed),
    }
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<Value> {
    let test_seed = seed.wrapping_add(1);
    let (mut tr, mut te) = match a.kind {
        DataKind::Blobs => (
            gen_blobs(a.classes, a.per_class, a.spread, seed)?,
            gen_blobs(a.classes, a.test_per_class, a.spread, test_seed)?,
        ),
        DataKind::Digits => (
            gen_digits(a.per_class, a.noise, seed)?,
            gen_digits(a.test_per_class, a.noise, test_seed)?,
        ),
        DataKind::Cifar => {
            if a.cifar_train.is_empty() || a.cifar_test.is_empty() {
                return Err(CliError::Usage("cifar needs --cifar-train and --cifar-test".into()));
            }
            (
                load_cifar_subset(&a.cifar_train, a.per_class)?,
                load_cifar_subset(&a.cifar_test, a.test_per_class)?,
            )
        }
    };
    for (ds, split) in [(&mut tr, "train"), (&mut te, "test")] {
        for e in &mut ds.examples {
            e.id = format!("{split}:{}", e.id);
        }
    }
    let mut bundle = DatasetBundle::new(tr, te);
    if a.augment {
        bundle.augmentation = Some(Default::default());
    }
    bundle.save(&a.dir)?;
    Ok(json!({
        "dir": a.dir,
        "name": bundle.train.name,
        "num_classes": bundle.train.num_classes,
        "image_shape": bundle.train.image_shape,
        "train": bundle.train.len(),
        "test": bundle.test.len(),
        "seed": seed,
    }))
}

fn train_config(o: &TrainOverrides, bundle: &DatasetBundle, seed: u64) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => TrainConfig {
            preset: if bundle.train.image_shape.len() == 3 { Preset::CnnTiny } else { Preset::Mlp2d },
            ..TrainConfig::default()
        },
    };
    if let Some(p) = &o.preset {
        cfg.preset = p.parse()?;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.lr.base = v;
    }
    if let Some(v) = o.psi {
        cfg.lipschitz.psi = v;
    }
    if let Some(v) = o.k_out {
        cfg.output_zero.k_out = v;
    }
    if o.adaptive_psi {
        cfg.adaptive_psi.get_or_insert_with(AdaptivePsiConfig::default);
        cfg.lipschitz.psi = 0.0;
    }
    if let Some(m) = o.adv_mode {
        cfg.adv_train.mode = match m {
            AdvModeArg::None => AdvMode::None,
            AdvModeArg::L2 => AdvMode::L2,
            AdvModeArg::L2min => AdvMode::L2min,
            AdvModeArg::Gaussian => AdvMode::Gaussian,
        };
    }
    if let Some(v) = o.epsilon {
        cfg.adv_train.epsilon = v;
    }
    if o.half_half {
        cfg.adv_train.half_half = true;
    }
    if bundle.augmentation.is_some() && cfg.augment.is_none() {
        cfg.augment = bundle.augmentation.clone();
    }
    cfg.seed = seed;
    cfg.validate(bundle.train.num_classes)?;
    Ok(cfg)
}

fn fit(cfg: &TrainConfig, bundle: &DatasetBundle, checkpoint: &Path) -> Result<Value> {
    let out = train(cfg, &bundle.train, Some(checkpoint))?;
    let eval = evaluate(&out.network, &bundle.test, None)?;
    let last = out.report.last();
    Ok(json!({
        "checkpoint": checkpoint,
        "config": cfg,
        "epochs": out.report.epochs.len(),
        "final": last,
        "train_examples": bundle.train.len(),
        "test": eval,
    }))
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<Value> {
    let bundle = loading(format!("dataset {}", a.data.display()), DatasetBundle::load(&a.data))?;
    let cfg = train_config(&a.train, &bundle, seed)?;
    fit(&cfg, &bundle, &a.checkpoint)
}

fn attack_config(o: &AttackOverrides) -> AttackConfig {
    let mut cfg = AttackConfig::default();
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.eta {
        cfg.eta = v;
    }
    if let Some(v) = o.attack_lr {
        cfg.lr = v;
    }
    cfg
}

fn load_model(model: &Path, data: &Dataset) -> Result<Network> {
    let net = loading(format!("checkpoint {}", model.display()), load_checkpoint(model))?;
    if net.input_shape != data.image_shape || net.num_classes != data.num_classes {
        return Err(CliError::Invalid("model does not match the dataset".into()));
    }
    Ok(net)
}

fn attack_cmd(a: &AttackArgs, seed: u64) -> Result<Value> {
    let bundle = loading(format!("dataset {}", a.data.display()), DatasetBundle::load(&a.data))?;
    let test = &bundle.test;
    let net = load_model(&a.model, test)?;
    let goal: Goal = a.goal.parse()?;
    if goal.is_explain() {
        return Err(CliError::Usage("use the explain subcommand for explain goals".into()));
    }
    let cfg = AttackConfig {
        goal,
        margin: a.margin,
        ..attack_config(&a.attack)
    };
    let end = (a.start + a.count).min(test.len());
    if a.start >= end {
        return Err(CliError::Invalid(format!("no test examples in {}..{}", a.start, a.start + a.count)));
    }
    let idx: Vec<usize> = (a.start..end).collect();
    let (x, y) = test.batch(&idx)?;
    let outs = attack_many(&net, &x, &y, &cfg, a.attack.chunk)?;
    if let Some(dir) = &a.save_images {
        fs::create_dir_all(dir)?;
    }
    let mut results = Vec::new();
    for (row, (out, &i)) in outs.iter().zip(&idx).enumerate() {
        let ex = &test.examples[i];
        let mut image = Value::Null;
        if let (Some(dir), Some(adv)) = (&a.save_images, out.adversarial(&x.index0(row))) {
            let path = dir.join(format!("{}.aetn", sanitize(&ex.id)));
            adv.save(&path)?;
            image = json!(path);
        }
        results.push(json!({
            "id": ex.id,
            "label": ex.label,
            "success": out.success,
            "rmse": out.rmse,
            "steps_to_first_success": out.steps_to_first_success,
            "predicted": argmax(&out.final_prediction),
            "prediction": out.final_prediction,
            "image": image,
        }));
    }
    let succeeded = outs.iter().filter(|o| o.success).count();
    Ok(json!({
        "goal": goal.name(),
        "seed": seed,
        "attempted": outs.len(),
        "succeeded": succeeded,
        "results": results,
    }))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn explain_cmd(a: &ExplainArgs) -> Result<Value> {
    let bundle = loading(format!("dataset {}", a.data.display()), DatasetBundle::load(&a.data))?;
    let test = &bundle.test;
    let net = load_model(&a.model, test)?;
    let ex = test
        .examples
        .get(a.index)
        .ok_or_else(|| CliError::Invalid(format!("test split has no example {}", a.index)))?;
    let mut shape = vec![1];
    shape.extend_from_slice(ex.image.shape());
    let before = net.probabilities(&ex.image.reshape(&shape)?)?.remove(0);
    let class = a.class.unwrap_or_else(|| argmax(&before));
    let cfg = AttackConfig {
        goal: if a.minus { Goal::ExplainMinus } else { Goal::ExplainPlus },
        rho: a.rho,
        target_class: Some(class),
        ..attack_config(&a.attack)
    };
    let out = advex::attack::attack(&net, &ex.image, ex.label, &cfg)?;
    let delta = out.delta_best.clone().unwrap_or_else(|| Tensor::zeros(ex.image.shape()));
    let explained = ex.image.zip_map(&delta, |x, d| (x + d).clamp(0.0, 1.0))?;
    if let Some(p) = &a.image {
        explained.save(p)?;
    }
    Ok(json!({
        "id": ex.id,
        "label": ex.label,
        "class": class,
        "goal": cfg.goal.name(),
        "rho": a.rho,
        "success": out.success,
        "rmse": rmse(&delta),
        "probability_before": before[class],
        "probability_after": out.final_prediction[class],
        "prediction": out.final_prediction,
        "image": a.image,
    }))
}

fn ara_cmd(a: &AraArgs, seed: u64) -> Result<Value> {
    let bundle = loading(format!("dataset {}", a.data.display()), DatasetBundle::load(&a.data))?;
    let test = &bundle.test;
    let net = load_model(&a.model, test)?;
    let opts = CurveOptions {
        goal: a.goal.parse()?,
        quota: a.quota,
        cap: a.cap,
        seed,
        chunk: a.attack.chunk,
    };
    let curve = build_curve(&net, &test.images()?, &test.labels(), &opts, &attack_config(&a.attack))?;
    if let Some(p) = &a.csv {
        fs::write(p, curve.to_csv())?;
    }
    Ok(json!({ "summary": curve.summary(), "seed": seed }))
}

/// Load the queue in `state_dir`, building it first when absent.
pub fn prepare_queue(a: &ServeArgs, net: &Network, seed: u64) -> Result<crate::queue::QueueManifest> {
    if !a.state_dir.join(QUEUE_FILE).exists() {
        let data = a
            .data
            .as_ref()
            .ok_or_else(|| CliError::Usage("no queue in the state directory; pass --data to build one".into()))?;
        let bundle = loading(format!("dataset {}", data.display()), DatasetBundle::load(data))?;
        let cfg = AttackConfig {
            margin: a.margin,
            ..attack_config(&a.attack)
        };
        let items = build_queue(net, &bundle.test, a.queue_size, &cfg, seed, a.attack.chunk)?;
        save_queue(&a.state_dir, a.margin, &items)?;
    }
    load_queue(&a.state_dir, net)
}

fn serve_cmd(a: &ServeArgs, seed: u64) -> Result<Value> {
    let net = loading(format!("checkpoint {}", a.model.display()), load_checkpoint(&a.model))?;
    let manifest = prepare_queue(a, &net, seed)?;
    let items = manifest.items.len();
    let log_path = a.state_dir.join(ANNOTATION_LOG);
    let state = Arc::new(AppState::new(
        manifest.items,
        ServiceConfig {
            lease: Duration::from_secs(a.lease_secs),
            allow_overlap: a.allow_overlap,
            log_path: log_path.clone(),
        },
    )?);
    if !a.prepare_only {
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(crate::service::serve(&a.addr, state.clone()))?;
    }
    Ok(json!({
        "state_dir": a.state_dir,
        "queue": items,
        "margin": manifest.margin,
        "log": log_path,
        "progress": state.progress(),
    }))
}

/// One record per item for merging. With several annotators an item is
/// kept only when every record says unchanged.
fn consensus(records: Vec<advex::data::AnnotationRecord>) -> (Vec<advex::data::AnnotationRecord>, usize) {
    let mut by_id: BTreeMap<String, Vec<advex::data::AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.id.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    let mut disputed = 0;
    for (_, mut recs) in by_id {
        let all_unchanged = recs.iter().all(|r| r.decision == Decision::Unchanged);
        if recs.len() > 1 && !all_unchanged && recs.iter().any(|r| r.decision == Decision::Unchanged) {
            disputed += 1;
        }
        let mut first = recs.swap_remove(0);
        if !all_unchanged {
            first.decision = Decision::Unsure;
        }
        out.push(first);
    }
    (out, disputed)
}

fn merge_retrain(a: &MergeArgs, seed: u64) -> Result<Value> {
    let mut bundle = loading(format!("dataset {}", a.data.display()), DatasetBundle::load(&a.data))?;
    let (records, disputed) = consensus(loading(format!("annotation log {}", a.log.display()), read_annotation_log(&a.log))?);
    let root = a.log.parent().unwrap_or(Path::new("."));
    let unchanged: Vec<_> = records.into_iter().filter(|r| r.decision == Decision::Unchanged).collect();
    let pairs = load_annotation_images(&unchanged, root)?;
    let before = bundle.train.len();
    bundle.train = merge_annotations(&bundle.train, &pairs)?;
    let added = bundle.train.len() - before;
    for r in &unchanged {
        if !bundle.merged_annotations.contains(&r.id) {
            bundle.merged_annotations.push(r.id.clone());
        }
    }
    bundle.save(&a.out_data)?;
    let cfg = train_config(&a.train, &bundle, seed)?;
    let mut result = fit(&cfg, &bundle, &a.checkpoint)?;
    result["merge"] = json!({
        "unchanged": unchanged.len(),
        "added": added,
        "disputed": disputed,
        "train_before": before,
        "train_after": bundle.train.len(),
        "out_data": a.out_data,
    });
    Ok(result)
}
