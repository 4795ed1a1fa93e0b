//! Datasets: synthetic generators, the CIFAR-10 binary reader,
//! augmentation, annotation records and on-disk persistence.

pub mod annotation;
pub mod augment;
pub mod cifar;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub use annotation::{merge_annotations, AnnotationRecord, Decision};
pub use augment::{augment, AugmentConfig};
pub use cifar::{load_cifar_subset, parse_cifar_records, CIFAR_RECORD_LEN};
pub use synth::{blob_center, blob_separation, gen_blobs, gen_digits, BLOB_RADIUS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Base,
    Annotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub image_shape: Vec<usize>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, image_shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            num_classes,
            image_shape,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Images `idx` stacked into `[len, ...image_shape]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut items = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let e = self
                .examples
                .get(i)
                .ok_or_else(|| Error::Config(format!("example {i} out of range")))?;
            items.push(e.image.clone());
            labels.push(e.label);
        }
        Ok((Tensor::stack(&items)?, labels))
    }

    /// Every image stacked into one tensor.
    pub fn images(&self) -> Result<Tensor> {
        Tensor::stack(&self.examples.iter().map(|e| e.image.clone()).collect::<Vec<_>>())
    }

    /// Image range, label range, shapes and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.examples {
            if e.image.shape() != self.image_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "dataset example",
                    lhs: self.image_shape.clone(),
                    rhs: e.image.shape().to_vec(),
                });
            }
            if e.label >= self.num_classes {
                return config_err(format!("example {} has label {} >= {}", e.id, e.label, self.num_classes));
            }
            if e.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return config_err(format!("example {} has pixels outside [0,1]", e.id));
            }
            if !ids.insert(e.id.as_str()) {
                return config_err(format!("duplicate example id {}", e.id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub origins: Vec<Origin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub image_shape: Vec<usize>,
    pub train: SplitEntry,
    pub test: SplitEntry,
    #[serde(default)]
    pub augmentation: Option<AugmentConfig>,
    #[serde(default)]
    pub merged_annotations: Vec<String>,
}

/// A train/test pair as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub augmentation: Option<AugmentConfig>,
    pub merged_annotations: Vec<String>,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

impl DatasetBundle {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        Self {
            train,
            test,
            augmentation: None,
            merged_annotations: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.test.validate()?;
        if self.train.num_classes != self.test.num_classes
            || self.train.image_shape != self.test.image_shape
        {
            return config_err("train and test splits disagree on classes or image shape");
        }
        let train_ids: HashSet<&str> = self.train.examples.iter().map(|e| e.id.as_str()).collect();
        if let Some(e) = self.test.examples.iter().find(|e| train_ids.contains(e.id.as_str())) {
            return config_err(format!("id {} appears in both splits", e.id));
        }
        Ok(())
    }

    /// Writes `dataset.json` plus one AETN image stack per split.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let entry = |ds: &Dataset, file: &str| -> Result<SplitEntry> {
            if !ds.is_empty() {
                ds.images()?.save(dir.join(file))?;
            }
            Ok(SplitEntry {
                file: file.to_string(),
                ids: ds.examples.iter().map(|e| e.id.clone()).collect(),
                labels: ds.labels(),
                origins: ds.examples.iter().map(|e| e.origin).collect(),
            })
        };
        let manifest = DatasetManifest {
            name: self.train.name.clone(),
            num_classes: self.train.num_classes,
            image_shape: self.train.image_shape.clone(),
            train: entry(&self.train, "train.aetn")?,
            test: entry(&self.test, "test.aetn")?,
            augmentation: self.augmentation.clone(),
            merged_annotations: self.merged_annotations.clone(),
        };
        fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.join(DATASET_MANIFEST))?)?;
        let split = |e: &SplitEntry| -> Result<Dataset> {
            let mut ds = Dataset::new(&manifest.name, manifest.num_classes, manifest.image_shape.clone());
            if e.ids.len() != e.labels.len() || e.ids.len() != e.origins.len() {
                return Err(Error::Format(format!("split {} has ragged metadata", e.file)));
            }
            if e.ids.is_empty() {
                return Ok(ds);
            }
            let images = Tensor::load(dir.join(&e.file))?;
            if images.batch_len() != e.ids.len() || images.item_shape() != manifest.image_shape.as_slice() {
                return Err(Error::Format(format!(
                    "{} holds {:?}, expected {} images of {:?}",
                    e.file,
                    images.shape(),
                    e.ids.len(),
                    manifest.image_shape
                )));
            }
            for (i, ((id, &label), &origin)) in e.ids.iter().zip(&e.labels).zip(&e.origins).enumerate() {
                ds.examples.push(Example {
                    id: id.clone(),
                    image: images.index0(i),
                    label,
                    origin,
                });
            }
            Ok(ds)
        };
        let bundle = Self {
            train: split(&manifest.train)?,
            test: split(&manifest.test)?,
            augmentation: manifest.augmentation.clone(),
            merged_annotations: manifest.merged_annotations.clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }
}
