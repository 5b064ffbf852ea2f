//! Embedding files, dataset splits and synthetic data.
//!
//! An [`EmbeddingFile`] holds the frozen backbone outputs the adapter trains
//! on: one `t×d` text-token matrix per query and one `p×d` patch-token
//! matrix per item, plus the item's target score and optional ordinal bin.
//! The on-disk layout lives in [`format`].

pub mod format;
pub mod split;
pub mod synthetic;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub use format::{
    decode, decode_any, encode, read_any, read_file, write_file, AnyEmbeddingFile, FormatError, Record, FORMAT_VERSION,
    MAGIC,
};
pub use split::{split, Split, SplitError, SplitName, SplitRule, SplitSpec};
pub use synthetic::{generate_synthetic, SignalKind, SyntheticError, SyntheticSpec};

/// Token-matrix dimensions shared by every record in a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Patch tokens per item.
    pub p: usize,
    /// Embedding width.
    pub d: usize,
    /// Text tokens per query.
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query<F> {
    pub id: u32,
    pub prompt: String,
    /// `t×d`.
    pub tokens: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item<F> {
    pub id: u64,
    pub query_id: u32,
    pub target: f64,
    pub bin: Option<u32>,
    /// `p×d`.
    pub patches: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile<F> {
    pub dims: Dims,
    /// Free-form provenance, e.g. backbone name and which layer was exported.
    pub info: String,
    pub queries: Vec<Query<F>>,
    pub items: Vec<Item<F>>,
}

impl<F: Scalar> EmbeddingFile<F> {
    pub fn new(dims: Dims, info: impl Into<String>) -> Self {
        EmbeddingFile {
            dims,
            info: info.into(),
            queries: Vec::new(),
            items: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        F::PRECISION
    }

    pub fn query(&self, id: u32) -> Option<&Query<F>> {
        self.queries.iter().find(|q| q.id == id)
    }

    /// Map from query id to its position in `queries`.
    pub fn query_index(&self) -> HashMap<u32, usize> {
        self.queries.iter().enumerate().map(|(i, q)| (q.id, i)).collect()
    }

    /// Indices of the items belonging to `query_id`, in file order.
    pub fn items_of_query(&self, query_id: u32) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.query_id == query_id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of ordinal bins implied by the labels: largest bin + 1, or
    /// `None` if any item lacks a bin.
    pub fn num_bins(&self) -> Option<u32> {
        if self.items.is_empty() {
            return None;
        }
        self.items
            .iter()
            .map(|it| it.bin)
            .collect::<Option<Vec<_>>>()
            .map(|bins| bins.into_iter().max().unwrap_or(0) + 1)
    }

    /// Checks every invariant the reader enforces.
    pub fn validate(&self) -> Result<(), FormatError> {
        let Dims { p, d, t } = self.dims;
        if p == 0 || d == 0 || t == 0 {
            return Err(FormatError::InvalidHeader {
                offset: 0,
                reason: format!("dimensions must be positive, got p={p} d={d} t={t}"),
            });
        }
        if p > format::MAX_EXTENT || d > format::MAX_EXTENT || t > format::MAX_EXTENT {
            return Err(FormatError::InvalidHeader {
                offset: 0,
                reason: format!("dimension above {}", format::MAX_EXTENT),
            });
        }
        let mut query_ids = HashSet::new();
        for (index, q) in self.queries.iter().enumerate() {
            let record = Record::Query(index as u64);
            if q.tokens.shape() != [t, d] {
                return Err(FormatError::DimMismatch {
                    record,
                    expected: vec![t, d],
                    got: q.tokens.shape().to_vec(),
                });
            }
            if !q.tokens.is_finite() {
                return Err(FormatError::NonFinite { offset: None, record });
            }
            if !query_ids.insert(q.id) {
                return Err(FormatError::DuplicateQueryId { id: q.id, record });
            }
        }
        let mut item_ids = HashSet::new();
        for (index, it) in self.items.iter().enumerate() {
            let record = Record::Item(index as u64);
            if it.patches.shape() != [p, d] {
                return Err(FormatError::DimMismatch {
                    record,
                    expected: vec![p, d],
                    got: it.patches.shape().to_vec(),
                });
            }
            if !it.patches.is_finite() || !it.target.is_finite() {
                return Err(FormatError::NonFinite { offset: None, record });
            }
            if !item_ids.insert(it.id) {
                return Err(FormatError::DuplicateItemId { id: it.id, record });
            }
            if !query_ids.contains(&it.query_id) {
                return Err(FormatError::UnknownQuery {
                    query_id: it.query_id,
                    record,
                });
            }
        }
        Ok(())
    }

    /// Explicit precision conversion; never happens implicitly on read.
    pub fn cast<G: Scalar>(&self) -> EmbeddingFile<G> {
        EmbeddingFile {
            dims: self.dims,
            info: self.info.clone(),
            queries: self
                .queries
                .iter()
                .map(|q| Query {
                    id: q.id,
                    prompt: q.prompt.clone(),
                    tokens: q.tokens.cast(),
                })
                .collect(),
            items: self
                .items
                .iter()
                .map(|it| Item {
                    id: it.id,
                    query_id: it.query_id,
                    target: it.target,
                    bin: it.bin,
                    patches: it.patches.cast(),
                })
                .collect(),
        }
    }
}
