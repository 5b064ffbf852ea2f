use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::datastore::{Dims, SplitSpec};
use crate::model::{AblationFlags, AdapterConfig};
use crate::objective::{PairMode, RankReduction, DEFAULT_ALPHA};
use crate::scalar::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup then cosine decay to zero at the final step.
    Cosine { warmup_steps: u64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    return (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Adapter settings that are not dictated by the data; `p`, `d` and `t`
/// always come from the embedding file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterOverrides {
    pub t_prime: Option<usize>,
    pub d_prime: Option<usize>,
    pub num_encoder_blocks: Option<usize>,
    pub relational_tokens: Option<usize>,
    pub heads: Option<usize>,
    pub reg_head_blocks: Option<usize>,
    pub rank_head_ffn_blocks: Option<usize>,
    pub ablation: Option<AblationFlags>,
}

impl AdapterOverrides {
    pub fn resolve(&self, dims: Dims) -> Result<AdapterConfig, TrainError> {
        let base = AdapterConfig::default();
        let cfg = AdapterConfig {
            p: dims.p,
            t: dims.t,
            d: dims.d,
            t_prime: self.t_prime.unwrap_or(base.t_prime),
            d_prime: self.d_prime.unwrap_or(base.d_prime),
            num_encoder_blocks: self.num_encoder_blocks.unwrap_or(base.num_encoder_blocks),
            relational_tokens: self.relational_tokens.unwrap_or(base.relational_tokens),
            heads: self.heads.unwrap_or(base.heads),
            reg_head_blocks: self.reg_head_blocks.unwrap_or(base.reg_head_blocks),
            rank_head_ffn_blocks: self.rank_head_ffn_blocks.unwrap_or(base.rank_head_ffn_blocks),
            ablation: self.ablation.unwrap_or(base.ablation),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub alpha: f64,
    pub pairs: PairMode,
    pub rank_reduction: RankReduction,
    pub precision: Precision,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; off when unset.
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub adapter: AdapterOverrides,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 64,
            steps: 2000,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            pairs: PairMode::All,
            rank_reduction: RankReduction::Mean,
            precision: Precision::F32,
            checkpoint_every: 0,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            adapter: AdapterOverrides::default(),
            split: SplitSpec::default(),
        }
    }
}

/// Step count the default learning rate is tuned for.
pub const REFERENCE_STEPS: u64 = 144_000;

impl TrainConfig {
    /// Shortens (or lengthens) the run to `steps`, scaling `lr` so that
    /// `lr * steps` matches the default rate over [`REFERENCE_STEPS`].
    pub fn scaled_to_steps(self, steps: u64) -> Self {
        let lr = if steps == 0 {
            self.lr
        } else {
            self.lr * REFERENCE_STEPS as f64 / steps as f64
        };
        TrainConfig { lr, steps, ..self }
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `lr = 0` is allowed (parameters stay fixed); `steps = 0` returns the
    /// initialization.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Named ablation settings, relative to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Regression head only.
    RegressionOnly,
    /// Rank head on the difference of mean-pooled embeddings.
    RankHead,
    /// Rank head behind relational attention.
    Full,
    Merged,
    Concat,
    SelfAttn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::RegressionOnly,
        Variant::RankHead,
        Variant::Full,
        Variant::Merged,
        Variant::Concat,
        Variant::SelfAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RegressionOnly => "regression-only",
            Variant::RankHead => "rank-head",
            Variant::Full => "full",
            Variant::Merged => "merged",
            Variant::Concat => "concat",
            Variant::SelfAttn => "self-attn",
        }
    }

    pub fn apply(self, flags: &mut AblationFlags) {
        match self {
            Variant::RegressionOnly => flags.use_rank_head = false,
            Variant::RankHead => flags.use_relational_attention = false,
            Variant::Full => {}
            Variant::Merged => flags.merged_dot_product = true,
            Variant::Concat => flags.concat_instead_of_subtract = true,
            Variant::SelfAttn => flags.self_attention_pooling = true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown ablation variant `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// One or more variants joined with `+`, applied in order on top of the full
/// model, e.g. `merged+self-attn`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec(pub Vec<Variant>);

impl VariantSpec {
    pub fn flags(&self) -> AblationFlags {
        let mut flags = AblationFlags::default();
        self.0.iter().for_each(|v| v.apply(&mut flags));
        flags
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|v| v.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for VariantSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split('+')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<_>, _>>()
            .map(VariantSpec)
    }
}
