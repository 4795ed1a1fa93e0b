use std::fs;
use std::path::Path;

use super::{Dataset, Example, Origin};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 3×32×32 channel-planar pixel bytes.
pub const CIFAR_RECORD_LEN: usize = 3073;
const CLASSES: usize = 10;

/// Parse CIFAR-10 binary records, keeping the first `per_class` images of
/// each class. `source` prefixes the example ids.
pub fn parse_cifar_records(
    bytes: &[u8],
    source: &str,
    per_class: usize,
    counts: &mut [usize; CLASSES],
    out: &mut Dataset,
) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Format(format!(
            "{source}: truncated record at byte offset {whole} ({} trailing bytes)",
            bytes.len() - whole
        )));
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format(format!(
                "{source}: label {label} at byte offset {}",
                i * CIFAR_RECORD_LEN
            )));
        }
        if counts[label] >= per_class {
            continue;
        }
        counts[label] += 1;
        let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        out.examples.push(Example {
            id: format!("{source}:{i}"),
            image: Tensor::new(vec![3, 32, 32], pixels)?,
            label,
            origin: Origin::Base,
        });
    }
    Ok(())
}

/// Read batch files in order, keeping the first `per_class` images per class.
pub fn load_cifar_subset<P: AsRef<Path>>(paths: &[P], per_class: usize) -> Result<Dataset> {
    let mut ds = Dataset::new("cifar10", CLASSES, vec![3, 32, 32]);
    let mut counts = [0usize; CLASSES];
    for p in paths {
        if counts.iter().all(|&c| c >= per_class) {
            break;
        }
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cifar".into());
        parse_cifar_records(&bytes, &name, per_class, &mut counts, &mut ds)?;
    }
    Ok(ds)
}
