use serde::{Deserialize, Serialize};

use super::{DatasetManifest, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// Per-class counts and inverse-frequency loss weights `N / (8 n_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: [usize; NUM_CLASSES],
    pub weights: [f64; NUM_CLASSES],
}

impl ClassStats {
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut counts = [0usize; NUM_CLASSES];
        for &y in labels {
            if y >= NUM_CLASSES {
                return Err(Error::Label {
                    label: y,
                    classes: NUM_CLASSES,
                });
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass {
                class: c,
                name: CLASS_NAMES[c].to_string(),
            });
        }
        let n = labels.len() as f64;
        let weights = counts.map(|nc| n / (NUM_CLASSES as f64 * nc as f64));
        Ok(Self { counts, weights })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn compute_class_stats(manifest: &DatasetManifest) -> Result<ClassStats> {
    ClassStats::from_labels(&manifest.labels())
}
