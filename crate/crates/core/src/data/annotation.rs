use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Origin};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Current annotation log schema version.
pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Still the original class to a human.
    Unchanged,
    Unsure,
    /// No longer the original class.
    Changed,
}

impl Decision {
    pub const ALL: [Decision; 3] = [Decision::Unchanged, Decision::Unsure, Decision::Changed];

    pub fn name(self) -> &'static str {
        match self {
            Decision::Unchanged => "unchanged",
            Decision::Unsure => "unsure",
            Decision::Changed => "changed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub v: u32,
    pub id: String,
    pub source_example_id: String,
    /// AETN file holding the adversarial image.
    pub adversarial_image: String,
    pub original_label: usize,
    pub predicted_adversarial_class: usize,
    pub decision: Decision,
    pub annotator: String,
    /// UTC seconds.
    pub timestamp: u64,
}

/// Parse a JSON-lines annotation log; blank lines are ignored.
pub fn read_annotation_log(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("annotation line {}: {e}", n + 1)))?;
        if rec.v != ANNOTATION_VERSION {
            return Err(Error::Format(format!(
                "annotation line {}: unsupported version {}",
                n + 1,
                rec.v
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Append one record as a single line and flush it to disk.
pub fn append_annotation(path: impl AsRef<Path>, rec: &AnnotationRecord) -> Result<()> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

/// Load each record's image; relative paths resolve against `root`.
pub fn load_annotation_images(
    records: &[AnnotationRecord],
    root: impl AsRef<Path>,
) -> Result<Vec<(AnnotationRecord, Tensor)>> {
    records
        .iter()
        .map(|r| Ok((r.clone(), Tensor::load(root.as_ref().join(&r.adversarial_image))?)))
        .collect()
}

/// Append the records marked unchanged as examples with their original
/// label. Ids repeated within `annotations` are rejected; ids already merged
/// into `base` are skipped, so merging the same list twice changes nothing.
pub fn merge_annotations(base: &Dataset, annotations: &[(AnnotationRecord, Tensor)]) -> Result<Dataset> {
    let mut seen = HashSet::new();
    for (r, _) in annotations {
        if !seen.insert(r.id.as_str()) {
            return config_err(format!("duplicate annotation id {}", r.id));
        }
    }
    let existing: HashSet<&str> = base.examples.iter().map(|e| e.id.as_str()).collect();
    let mut out = base.clone();
    for (r, img) in annotations {
        if r.decision != Decision::Unchanged {
            continue;
        }
        if img.shape() != base.image_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "merge_annotations",
                lhs: base.image_shape.clone(),
                rhs: img.shape().to_vec(),
            });
        }
        if r.original_label >= base.num_classes {
            return config_err(format!("annotation {} has label {}", r.id, r.original_label));
        }
        let id = format!("ann:{}", r.id);
        if existing.contains(id.as_str()) {
            continue;
        }
        out.examples.push(Example {
            id,
            image: img.clamp(0.0, 1.0),
            label: r.original_label,
            origin: Origin::Annotation,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn rec(id: &str, decision: Decision) -> AnnotationRecord {
        AnnotationRecord {
            v: ANNOTATION_VERSION,
            id: id.into(),
            source_example_id: "blob-0-0".into(),
            adversarial_image: format!("{id}.aetn"),
            original_label: 0,
            predicted_adversarial_class: 1,
            decision,
            annotator: "a".into(),
            timestamp: 0,
        }
    }

    #[test]
    fn only_unchanged_records_are_merged() {
        let base = gen_blobs(2, 3, 0.05, 0).unwrap();
        let img = Tensor::from_vec(vec![0.4, 0.6]);
        let items: Vec<_> = [
            ("a", Decision::Unchanged),
            ("b", Decision::Unsure),
            ("c", Decision::Changed),
            ("d", Decision::Unchanged),
        ]
        .into_iter()
        .map(|(id, d)| (rec(id, d), img.clone()))
        .collect();
        let merged = merge_annotations(&base, &items).unwrap();
        assert_eq!(merged.len(), base.len() + 2);
        assert!(merged.examples[base.len()..].iter().all(|e| e.origin == Origin::Annotation));
        assert_eq!(merge_annotations(&merged, &items).unwrap(), merged);
        assert_eq!(merge_annotations(&base, &[]).unwrap(), base);
    }

    #[test]
    fn merge_errors() {
        let base = gen_blobs(2, 1, 0.05, 0).unwrap();
        let dup = vec![
            (rec("a", Decision::Unchanged), Tensor::from_vec(vec![0.5, 0.5])),
            (rec("a", Decision::Unsure), Tensor::from_vec(vec![0.5, 0.5])),
        ];
        assert!(merge_annotations(&base, &dup).is_err());
        let wrong_shape = vec![(rec("x", Decision::Unchanged), Tensor::from_vec(vec![0.5; 3]))];
        assert!(merge_annotations(&base, &wrong_shape).is_err());
    }

    #[test]
    fn log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        append_annotation(&path, &rec("a", Decision::Unchanged)).unwrap();
        append_annotation(&path, &rec("b", Decision::Changed)).unwrap();
        let back = read_annotation_log(&path).unwrap();
        assert_eq!(back, vec![rec("a", Decision::Unchanged), rec("b", Decision::Changed)]);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"v\":1,"));
        assert!(line.contains("\"decision\":\"unchanged\""));
    }
}
