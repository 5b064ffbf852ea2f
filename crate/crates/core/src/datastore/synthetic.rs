//! Synthetic embedding files with a planted, known-recoverable signal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dims, EmbeddingFile, Item, Query};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scores are scaled into `[0, SCORE_MAX]`.
pub const SCORE_MAX: f64 = 10.0;
/// Row-level noise around each item's shared direction in `linear_pool`.
const ROW_NOISE: f64 = 0.5;
/// Spread of planted rows around their query's cluster centre.
const CLUSTER_NOISE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Score is a linear function of the mean-pooled patch matrix.
    LinearPool,
    /// Score counts patch rows drawn from a query-specific cluster.
    PairwiseContrast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub t: usize,
    pub queries: usize,
    pub kind: SignalKind,
    pub sigma: f64,
    pub seed: u64,
    /// Largest planted-row count for `pairwise_contrast`; defaults to `p / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_planted: Option<usize>,
}

impl SyntheticSpec {
    pub fn linear_pool(n: usize, p: usize, d: usize, sigma: f64, seed: u64) -> Self {
        SyntheticSpec {
            n,
            p,
            d,
            t: 4,
            queries: 1,
            kind: SignalKind::LinearPool,
            sigma,
            seed,
            max_planted: None,
        }
    }

    pub fn pairwise_contrast(n: usize, p: usize, d: usize, sigma: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SignalKind::PairwiseContrast,
            ..Self::linear_pool(n, p, d, sigma, seed)
        }
    }

    pub fn planted_cap(&self) -> usize {
        self.max_planted.unwrap_or(self.p / 2)
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.n == 0 || self.p == 0 || self.d == 0 || self.t == 0 || self.queries == 0 {
            return Err(SyntheticError::Invalid(
                "n, p, d, t and queries must be positive".into(),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(SyntheticError::Invalid(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.planted_cap() > self.p {
            return Err(SyntheticError::Invalid(format!(
                "max_planted {} exceeds p = {}",
                self.planted_cap(),
                self.p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn matrix<F: Scalar>(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor<F> {
    Tensor::from_fn(&[rows, cols], |i| F::from_real(f(i / cols, i % cols)))
}

fn bin_of(y: f64) -> u32 {
    y.round().clamp(0.0, SCORE_MAX) as u32
}

/// Builds the dataset described by `spec`. Items are assigned to queries
/// round-robin; item ids are `0..n` and query ids `0..queries`.
pub fn generate_synthetic<F: Scalar>(spec: &SyntheticSpec) -> Result<EmbeddingFile<F>, SyntheticError> {
    spec.validate()?;
    let SyntheticSpec { n, p, d, t, .. } = *spec;
    let mut rng = Rng::stream(spec.seed, streams::SYNTHETIC);
    let info = serde_json::to_string(spec).expect("spec serializes");
    let mut file = EmbeddingFile::new(Dims { p, d, t }, format!("synthetic {info}"));

    // per-query hidden direction: regression weights or cluster centre
    let directions: Vec<Vec<f64>> = (0..spec.queries).map(|_| unit_vector(&mut rng, d)).collect();
    let centre_scale = (d as f64).sqrt();
    for (q, dir) in directions.iter().enumerate() {
        let tokens = match spec.kind {
            SignalKind::LinearPool => matrix(t, d, |_, _| rng.normal()),
            // text tokens point at the cluster the query asks about
            SignalKind::PairwiseContrast => matrix(t, d, |_, c| dir[c] * centre_scale + CLUSTER_NOISE * rng.normal()),
        };
        file.queries.push(Query {
            id: q as u32,
            prompt: format!("synthetic query {q}"),
            tokens,
        });
    }

    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let q = i % spec.queries;
        let dir = &directions[q];
        let (patches, signal) = match spec.kind {
            SignalKind::LinearPool => {
                let shared: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let patches: Tensor<F> = matrix(p, d, |_, c| shared[c] + ROW_NOISE * rng.normal());
                let mut pooled = vec![0.0; d];
                for r in 0..p {
                    for (acc, v) in pooled.iter_mut().zip(patches.row(r)) {
                        *acc += v.to_real();
                    }
                }
                let signal = pooled.iter().zip(dir).map(|(a, u)| a / p as f64 * u).sum::<f64>();
                (patches, signal)
            }
            SignalKind::PairwiseContrast => {
                let cap = spec.planted_cap();
                let k = rng.below(cap + 1);
                let mut planted: Vec<bool> = (0..p).map(|r| r < k).collect();
                rng.shuffle(&mut planted);
                let mut rows = Vec::with_capacity(p * d);
                for &is_signal in &planted {
                    for &u in dir.iter() {
                        rows.push(if is_signal {
                            u * centre_scale + CLUSTER_NOISE * rng.normal()
                        } else {
                            rng.normal()
                        });
                    }
                }
                let patches = Tensor::from_fn(&[p, d], |j| F::from_real(rows[j]));
                let signal = if cap == 0 {
                    0.0
                } else {
                    SCORE_MAX * k as f64 / cap as f64
                };
                (patches, signal)
            }
        };
        let noise = if spec.sigma > 0.0 {
            spec.sigma * rng.normal()
        } else {
            0.0
        };
        raw.push((q, signal + noise));
        file.items.push(Item {
            id: i as u64,
            query_id: q as u32,
            target: 0.0,
            bin: None,
            patches,
        });
    }

    match spec.kind {
        SignalKind::LinearPool => {
            // min-max per query
            for q in 0..spec.queries {
                let vals = raw.iter().filter(|(rq, _)| *rq == q).map(|(_, y)| *y);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
                for ((rq, y), item) in raw.iter().zip(file.items.iter_mut()) {
                    if *rq == q {
                        item.target = if hi > lo { SCORE_MAX * (y - lo) / (hi - lo) } else { 0.0 };
                    }
                }
            }
        }
        SignalKind::PairwiseContrast => {
            for ((_, y), item) in raw.iter().zip(file.items.iter_mut()) {
                item.target = *y;
            }
        }
    }
    for item in &mut file.items {
        item.bin = Some(bin_of(item.target));
    }
    Ok(file)
}
