//! The interchange unit between a backbone and everything downstream: per-exit
//! features and last-layer weights, labels, split tags and cumulative costs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::ExitShape;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Features and head of one exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitFeatures {
    /// `n × p`.
    pub features: Matrix,
    /// `p × c`.
    pub weight: Matrix,
    /// `c`.
    pub bias: Vec<f64>,
}

impl ExitFeatures {
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows of `features` gathered into a new matrix.
    pub fn gather(&self, rows: &[usize]) -> Matrix {
        let p = self.features.cols();
        let mut data = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        Matrix::from_vec(rows.len(), p, data).expect("gathered shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub n_classes: usize,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub exits: Vec<ExitFeatures>,
    /// Cumulative backbone cost up to each exit (practical FLOPs).
    pub exit_flops: Vec<f64>,
}

impl FeatureBundle {
    pub fn n_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    /// Sample indices belonging to `split`, in ascending order.
    pub fn rows(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn arch(&self) -> Vec<ExitShape> {
        self.exits
            .iter()
            .zip(&self.exit_flops)
            .map(|(e, &w)| ExitShape {
                p: e.feature_dim() as u64,
                c: self.n_classes as u64,
                backbone_flops: w,
            })
            .collect()
    }

    /// Checks shapes, label ranges, finiteness and cost ordering.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let bad = |reason: String| Error::InvalidData {
            file: "bundle".into(),
            reason,
        };
        if self.n_classes < 2 {
            return Err(bad(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.exits.is_empty() {
            return Err(bad("bundle has no exits".into()));
        }
        if self.splits.len() != n {
            return Err(bad("split tags and labels differ in length".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(bad(format!("label {y} out of range")));
        }
        if self.exit_flops.len() != self.exits.len() {
            return Err(bad("one cost per exit required".into()));
        }
        if self.exit_flops.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(bad("exit costs must be positive".into()));
        }
        if self.exit_flops.windows(2).any(|w| w[1] <= w[0]) {
            return Err(bad("cumulative exit costs must be strictly increasing".into()));
        }
        for (k, e) in self.exits.iter().enumerate() {
            let p = e.features.cols();
            if e.features.rows() != n {
                return Err(bad(format!(
                    "exit {k}: {} feature rows for {n} labels",
                    e.features.rows()
                )));
            }
            if e.weight.rows() != p || e.weight.cols() != self.n_classes || e.bias.len() != self.n_classes {
                return Err(bad(format!("exit {k}: head shape disagrees with features")));
            }
            if !e.features.is_finite() || !e.weight.is_finite() || e.bias.iter().any(|b| !b.is_finite()) {
                return Err(bad(format!("exit {k}: non-finite values")));
            }
        }
        Ok(())
    }
}
