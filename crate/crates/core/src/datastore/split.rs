//! Train / validation / test partitions over item indices.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EmbeddingFile;
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("item id {0} listed in more than one split")]
    Overlap(u64),
    #[error("item id {0} is not in the dataset")]
    UnknownId(u64),
    #[error("item id {0} is not assigned to any split")]
    Unassigned(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitRule {
    Fractions {
        train: f64,
        val: f64,
        test: f64,
    },
    Ids {
        train_ids: Vec<u64>,
        val_ids: Vec<u64>,
        test_ids: Vec<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub rule: SplitRule,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            rule: SplitRule::Fractions {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
            seed: 0,
        }
    }
}

/// Item indices (positions in the file) per partition, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        })
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            _ => Err(format!("unknown split {s:?}; expected train, val, test or all")),
        }
    }
}

impl Split {
    pub fn get(&self, name: SplitName, total: usize) -> Vec<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => (0..total).collect(),
        }
    }
}

/// Partitions the file's items. Fractions are applied to a seeded shuffle:
/// train gets `round(n·train)`, val gets `round(n·val)` (capped by what is
/// left) and test takes the remainder.
pub fn split<F: Scalar>(file: &EmbeddingFile<F>, spec: &SplitSpec) -> Result<Split, SplitError> {
    let n = file.items.len();
    let mut out = match &spec.rule {
        SplitRule::Fractions { train, val, test } => {
            let fr = [*train, *val, *test];
            if fr.iter().any(|f| !f.is_finite() || *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(SplitError::BadFractions(fr));
            }
            let mut order: Vec<usize> = (0..n).collect();
            Rng::stream(spec.seed, streams::SPLIT).shuffle(&mut order);
            let n_train = ((n as f64) * train).round() as usize;
            let n_train = n_train.min(n);
            let n_val = (((n as f64) * val).round() as usize).min(n - n_train);
            let test_part = order.split_off(n_train + n_val);
            let val_part = order.split_off(n_train);
            Split {
                train: order,
                val: val_part,
                test: test_part,
            }
        }
        SplitRule::Ids {
            train_ids,
            val_ids,
            test_ids,
        } => {
            let index: HashMap<u64, usize> = file.items.iter().enumerate().map(|(i, it)| (it.id, i)).collect();
            let mut assigned = vec![false; n];
            let mut resolve = |ids: &[u64]| -> Result<Vec<usize>, SplitError> {
                ids.iter()
                    .map(|id| {
                        let &i = index.get(id).ok_or(SplitError::UnknownId(*id))?;
                        if std::mem::replace(&mut assigned[i], true) {
                            return Err(SplitError::Overlap(*id));
                        }
                        Ok(i)
                    })
                    .collect()
            };
            let s = Split {
                train: resolve(train_ids)?,
                val: resolve(val_ids)?,
                test: resolve(test_ids)?,
            };
            if let Some(i) = assigned.iter().position(|a| !a) {
                return Err(SplitError::Unassigned(file.items[i].id));
            }
            s
        }
    };
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
