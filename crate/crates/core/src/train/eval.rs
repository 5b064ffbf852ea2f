use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trainer::check_dims;
use super::TrainError;
use crate::datastore::{EmbeddingFile, SplitName};
use crate::metrics::MetricSet;
use crate::model::Adapter;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: u32,
    pub prompt: String,
    pub metrics: MetricSet,
}

/// Metrics over one split, pooled and per query (sorted by query id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub pooled: MetricSet,
    pub per_query: Vec<QueryReport>,
}

impl EvalReport {
    /// Pretty JSON; identical inputs give identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores `indices` of `file` with the regression head.
pub fn score_items<F: Scalar>(
    adapter: &Adapter<F>,
    file: &EmbeddingFile<F>,
    indices: &[usize],
) -> Result<Vec<f64>, TrainError> {
    check_dims(&adapter.config, file)?;
    let queries = file.query_index();
    let inputs: Vec<_> = indices
        .iter()
        .map(|&i| {
            let item = &file.items[i];
            (&item.patches, &file.queries[queries[&item.query_id]].tokens)
        })
        .collect();
    Ok(adapter.predict_scores(&inputs)?)
}

pub fn evaluate<F: Scalar>(
    adapter: &Adapter<F>,
    file: &EmbeddingFile<F>,
    indices: &[usize],
    split: SplitName,
) -> Result<EvalReport, TrainError> {
    let scores = score_items(adapter, file, indices)?;
    // bins are numbered over the whole file so every split decodes alike
    let num_bins = file.num_bins();
    let metrics_for = |members: &[usize]| {
        let pred: Vec<f64> = members.iter().map(|&k| scores[k]).collect();
        let targets: Vec<f64> = members.iter().map(|&k| file.items[indices[k]].target).collect();
        let bins: Option<Vec<u32>> = num_bins.map(|_| {
            members
                .iter()
                .map(|&k| file.items[indices[k]].bin.expect("bins present"))
                .collect()
        });
        MetricSet::compute(&pred, &targets, bins.as_deref().zip(num_bins))
    };
    let all: Vec<usize> = (0..indices.len()).collect();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, &i) in indices.iter().enumerate() {
        groups.entry(file.items[i].query_id).or_default().push(k);
    }
    let per_query = groups
        .iter()
        .map(|(&query_id, members)| QueryReport {
            query_id,
            prompt: file.query(query_id).map(|q| q.prompt.clone()).unwrap_or_default(),
            metrics: metrics_for(members),
        })
        .collect();
    Ok(EvalReport {
        split,
        pooled: metrics_for(&all),
        per_query,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: u64,
    pub score: f64,
}

/// Items of `query_id` by descending score; equal scores keep ascending id
/// order.
pub fn rank<F: Scalar>(
    adapter: &Adapter<F>,
    file: &EmbeddingFile<F>,
    query_id: u32,
) -> Result<Vec<RankedItem>, TrainError> {
    if file.query(query_id).is_none() {
        return Err(TrainError::UnknownQuery(query_id));
    }
    let members = file.items_of_query(query_id);
    let scores = score_items(adapter, file, &members)?;
    let mut ranked: Vec<RankedItem> = members
        .iter()
        .zip(scores)
        .map(|(&i, score)| RankedItem {
            item_id: file.items[i].id,
            score,
        })
        .collect();
    ranked.sort_by(order_ranked);
    Ok(ranked)
}

pub(crate) fn order_ranked(a: &RankedItem, b: &RankedItem) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id))
}
