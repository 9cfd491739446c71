//! Final evaluation on the held-out target test set. This is the only code
//! path that reads the target sidecar labels; everything upstream of it sees
//! the target domain as unlabeled.

use crate::data::UnlabeledSet;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub per_class: Vec<ClassStats>,
    /// confusion[true][pred]
    pub confusion: Vec<Vec<usize>>,
    /// SHA-256 of the evaluated image bytes; guards against comparing
    /// accuracies measured on different test sets.
    pub test_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub n: usize,
    pub correct: usize,
}

fn checksum(set: &UnlabeledSet) -> String {
    let mut h = Sha256::new();
    for d in set.images.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for &x in set.images.data() {
        h.update(x.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Main-head accuracy against the sidecar labels. A test set without a
/// sidecar cannot be scored.
pub fn evaluate(model: &ModelParams<f32>, test: &UnlabeledSet) -> Result<EvalReport> {
    let labels = test.sidecar().ok_or_else(|| {
        Error::Usage("test set carries no reference labels; cannot evaluate".into())
    })?;
    if test.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty test set".into()));
    }
    let preds = model.predict(&test.images)?;
    let classes = model.head_cfg(0)?.output_dim;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class = (0..classes)
        .map(|c| ClassStats {
            class: c,
            n: confusion[c].iter().sum(),
            correct: confusion[c][c],
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / preds.len() as f64,
        n: preds.len(),
        per_class,
        confusion,
        test_checksum: checksum(test),
    })
}

/// Accuracy difference `a - b` between two reports on the same test set.
/// Reports with different checksums are not comparable.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<f64> {
    if a.test_checksum != b.test_checksum {
        return Err(Error::Usage(
            "reports were produced on different test sets".into(),
        ));
    }
    Ok(a.accuracy - b.accuracy)
}
