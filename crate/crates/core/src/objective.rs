//! Pair construction and the regression + pairwise-hinge objective.

use serde::{Deserialize, Serialize};

use crate::graph::{smooth_l1_value, Graph, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::TensorResult;

/// Reference weight of the regression term.
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum PairMode {
    /// Every eligible ordered pair.
    #[default]
    All,
    /// `k` eligible pairs drawn uniformly with replacement.
    Sampled(usize),
}

impl std::fmt::Display for PairMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairMode::All => f.write_str("all"),
            PairMode::Sampled(k) => write!(f, "sampled:{k}"),
        }
    }
}

impl From<PairMode> for String {
    fn from(m: PairMode) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for PairMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl std::str::FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(PairMode::All);
        }
        match s.strip_prefix("sampled:").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Ok(PairMode::Sampled(k)),
            _ => Err(format!("invalid pair mode `{s}` (expected `all` or `sampled:<k>`)")),
        }
    }
}

/// How the hinge terms are reduced before combining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RankReduction {
    /// Average over pairs.
    #[default]
    Mean,
    /// Plain sum over pairs.
    Sum,
}

/// Ordered batch-index pairs `(i, j)` with `y_i > y_j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    /// Set when sampling was requested but no pair was eligible.
    pub no_eligible_pairs: bool,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs over one batch. Ties never form a pair.
pub fn build_pairs(y: &[f64], mode: PairMode, rng: &mut Rng) -> PairSet {
    build_pairs_grouped(y, None, mode, rng)
}

/// Like [`build_pairs`] but only pairs items that share a group (query) id.
pub fn build_pairs_grouped(y: &[f64], groups: Option<&[u32]>, mode: PairMode, rng: &mut Rng) -> PairSet {
    let same_group = |i: usize, j: usize| groups.is_none_or(|g| g[i] == g[j]);
    let eligible: Vec<(usize, usize)> = (0..y.len())
        .flat_map(|i| (0..y.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| y[i] > y[j] && same_group(i, j))
        .collect();
    match mode {
        PairMode::All => PairSet {
            pairs: eligible,
            no_eligible_pairs: false,
        },
        PairMode::Sampled(k) => {
            if eligible.is_empty() {
                return PairSet {
                    pairs: Vec::new(),
                    no_eligible_pairs: true,
                };
            }
            let pairs = (0..k).map(|_| eligible[rng.below(eligible.len())]).collect();
            PairSet {
                pairs,
                no_eligible_pairs: false,
            }
        }
    }
}

/// Smooth-L1 between target `y` and prediction `s`.
pub fn smooth_l1(y: f64, s: f64) -> f64 {
    smooth_l1_value(y - s)
}

/// `max(0, 1 - o)`.
pub fn hinge(o: f64) -> f64 {
    (1.0 - o).max(0.0)
}

/// Sum of hinge terms over pair outputs.
pub fn hinge_rank(pair_outputs: &[f64]) -> f64 {
    pair_outputs.iter().map(|&o| hinge(o)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_rank: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_reg.is_finite() && self.l_rank.is_finite() && self.total.is_finite()
    }
}

/// Scalar form of the combined objective: batch-mean Smooth-L1 plus the hinge
/// term reduced per `reduction` (zero without pairs).
pub fn combined_loss(
    scores: &[f64],
    y: &[f64],
    pair_outputs: &[f64],
    alpha: f64,
    reduction: RankReduction,
) -> LossBreakdown {
    assert_eq!(scores.len(), y.len(), "scores and targets differ in length");
    let l_reg = if scores.is_empty() {
        0.0
    } else {
        scores.iter().zip(y).map(|(&s, &t)| smooth_l1(t, s)).sum::<f64>() / scores.len() as f64
    };
    let sum = hinge_rank(pair_outputs);
    let l_rank = match (reduction, pair_outputs.len()) {
        (_, 0) => 0.0,
        (RankReduction::Mean, n) => sum / n as f64,
        (RankReduction::Sum, _) => sum,
    };
    LossBreakdown {
        l_reg,
        l_rank,
        total: alpha * l_reg + l_rank,
        alpha,
    }
}

/// Differentiable form of [`combined_loss`]. `scores` is B×1, `pair_outputs`
/// P×1. Returns the scalar total together with its numeric breakdown.
pub fn combined_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    scores: Var,
    targets: &[f64],
    pair_outputs: Option<Var>,
    alpha: f64,
    reduction: RankReduction,
) -> TensorResult<(Var, LossBreakdown)> {
    let y: Vec<F> = targets.iter().map(|&v| F::from_real(v)).collect();
    let per_item = g.smooth_l1(scores, &y)?;
    let l_reg = g.mean_all(per_item)?;
    let weighted = g.scale(l_reg, F::from_real(alpha))?;
    let rank = match pair_outputs {
        Some(o) => {
            let h = g.hinge(o)?;
            Some(match reduction {
                RankReduction::Mean => g.mean_all(h)?,
                RankReduction::Sum => g.sum_all(h)?,
            })
        }
        None => None,
    };
    let total = match rank {
        Some(r) => g.add(weighted, r)?,
        None => weighted,
    };
    let value = |v: Var| g.value(v).data()[0].to_real();
    let breakdown = LossBreakdown {
        l_reg: value(l_reg),
        l_rank: rank.map_or(0.0, value),
        total: value(total),
        alpha,
    };
    Ok((total, breakdown))
}
