use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::VariantSpec;
use super::eval::evaluate;
use super::trainer::train;
use super::{TrainConfig, TrainError};
use crate::datastore::{EmbeddingFile, Split, SplitName};
use crate::metrics::MetricSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub relational_tokens: usize,
    pub final_loss: Option<f64>,
    pub val: MetricSet,
    pub test: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width text table of the held-out metrics.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>3}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "variant", "M", "loss", "val_srcc", "val_plcc", "tst_srcc", "tst_plcc"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>3}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
                r.variant,
                r.relational_tokens,
                cell(r.final_loss),
                cell(r.val.srcc),
                cell(r.val.plcc),
                cell(r.test.srcc),
                cell(r.test.plcc),
            );
        }
        out
    }
}

/// Trains each (variant, M) combination from the same seed and schedule and
/// evaluates it on the validation and test splits. An empty `m_values` keeps
/// the configured number of relational tokens.
pub fn ablate<F: Scalar>(
    cfg: &TrainConfig,
    file: &EmbeddingFile<F>,
    split: &Split,
    variants: &[VariantSpec],
    m_values: &[usize],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable, TrainError> {
    if variants.is_empty() {
        return Err(TrainError::Config("no ablation variants given".into()));
    }
    let base = cfg.adapter.resolve(file.dims)?;
    let ms: Vec<usize> = if m_values.is_empty() {
        vec![base.relational_tokens]
    } else {
        m_values.to_vec()
    };
    let mut rows = Vec::with_capacity(variants.len() * ms.len());
    for spec in variants {
        for &m in &ms {
            let mut adapter_cfg = base.clone();
            adapter_cfg.relational_tokens = m;
            adapter_cfg.ablation = spec.flags();
            adapter_cfg.validate()?;
            let outcome = train(cfg, adapter_cfg, file, &split.train, None, |_| {})?;
            let row = AblationRow {
                variant: spec.to_string(),
                relational_tokens: m,
                final_loss: outcome.log.last().map(|l| l.total),
                val: evaluate(&outcome.adapter, file, &split.val, SplitName::Val)?.pooled,
                test: evaluate(&outcome.adapter, file, &split.test, SplitName::Test)?.pooled,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}
