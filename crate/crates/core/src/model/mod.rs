//! The ranking-aware adapter.
//!
//! Frozen patch tokens `z` (p×d) and text tokens `w` (t×d) pass through a
//! cross-attention encoder to produce the text-conditioned embedding `z'`
//! (p×d'). Two heads read `z'`: a regression MLP over the mean-pooled tokens
//! and, for pairs, relational attention whose output feeds a rank FFN.

mod config;
mod params;

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub use config::{AblationFlags, AdapterConfig};
pub use params::{expected_param_count, param_specs, AdapterParams, Init, ParamSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("pair ({0}, {1}) is out of range for the batch")]
    PairOutOfRange(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Clone, Copy, Debug)]
struct LinearVars {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy, Debug)]
struct AttentionVars {
    q: LinearVars,
    k: LinearVars,
    v: LinearVars,
    o: LinearVars,
}

#[derive(Clone, Copy, Debug)]
struct NormVars {
    gain: Var,
    bias: Var,
}

#[derive(Clone, Copy, Debug)]
struct BlockVars {
    ln1: NormVars,
    self_attn: AttentionVars,
    ln2: NormVars,
    cross_attn: AttentionVars,
}

/// Adapter parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    all: Vec<Var>,
    prompt: Var,
    blocks: Vec<BlockVars>,
    proj: LinearVars,
    relational_tokens: Var,
    reg: Vec<LinearVars>,
    rank: Vec<LinearVars>,
}

impl AdapterVars {
    /// Leaves in parameter layout order.
    pub fn all(&self) -> &[Var] {
        &self.all
    }

    pub fn relational_tokens(&self) -> Var {
        self.relational_tokens
    }

    /// Binds already-registered leaves (layout order) to their roles.
    pub fn from_leaves(cfg: &AdapterConfig, leaves: &[Var]) -> ModelResult<Self> {
        let specs = param_specs(cfg);
        if specs.len() != leaves.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter leaves, got {}",
                specs.len(),
                leaves.len()
            )));
        }
        let by_name: HashMap<&str, Var> = specs
            .iter()
            .map(|s| s.name.as_str())
            .zip(leaves.iter().copied())
            .collect();
        let get = |name: String| by_name[name.as_str()];
        let lin = |prefix: String| LinearVars {
            w: get(format!("{prefix}.weight")),
            b: get(format!("{prefix}.bias")),
        };
        let norm = |prefix: String| NormVars {
            gain: get(format!("{prefix}.gain")),
            bias: get(format!("{prefix}.bias")),
        };
        let attn = |prefix: String| AttentionVars {
            q: lin(format!("{prefix}.q")),
            k: lin(format!("{prefix}.k")),
            v: lin(format!("{prefix}.v")),
            o: lin(format!("{prefix}.o")),
        };
        let mlp = |prefix: &str, blocks: usize| {
            let mut layers: Vec<LinearVars> = (0..blocks).map(|b| lin(format!("{prefix}.{b}"))).collect();
            layers.push(lin(format!("{prefix}.out")));
            layers
        };
        Ok(AdapterVars {
            all: leaves.to_vec(),
            prompt: get("prompt_tokens".into()),
            blocks: (0..cfg.num_encoder_blocks)
                .map(|b| BlockVars {
                    ln1: norm(format!("enc{b}.ln1")),
                    self_attn: attn(format!("enc{b}.self_attn")),
                    ln2: norm(format!("enc{b}.ln2")),
                    cross_attn: attn(format!("enc{b}.cross_attn")),
                })
                .collect(),
            proj: lin("proj".into()),
            relational_tokens: get("relational_tokens".into()),
            reg: mlp("reg", cfg.reg_head_blocks),
            rank: mlp("rank", cfg.rank_head_ffn_blocks),
        })
    }
}

/// Multi-head scaled dot-product attention with input/output projections.
fn attention<F: Scalar>(
    g: &mut Graph<F>,
    queries: Var,
    keys_values: Var,
    w: &AttentionVars,
    heads: usize,
) -> ModelResult<Var> {
    let q = g.linear(queries, w.q.w, w.q.b)?;
    let k = g.linear(keys_values, w.k.w, w.k.b)?;
    let v = g.linear(keys_values, w.v.w, w.v.b)?;
    let d = g.value(q).shape()[1];
    let dh = d / heads;
    let scale = F::from_real(1.0 / (dh as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax_rows(logits)?;
        outputs.push(g.matmul(a, vh)?);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    Ok(g.linear(merged, w.o.w, w.o.b)?)
}

/// MLP: each hidden block is linear + GELU, the last layer is linear to 1.
fn mlp<F: Scalar>(g: &mut Graph<F>, x: Var, layers: &[LinearVars]) -> ModelResult<Var> {
    let (last, hidden) = layers.split_last().expect("mlp has an output layer");
    let mut h = x;
    for l in hidden {
        let y = g.linear(h, l.w, l.b)?;
        h = g.gelu(y)?;
    }
    Ok(g.linear(h, last.w, last.b)?)
}

fn expect_shape<F: Scalar>(g: &Graph<F>, v: Var, what: &'static str, expected: [usize; 2]) -> ModelResult<()> {
    let got = g.value(v).shape();
    if got != expected {
        return Err(ModelError::Shape {
            what,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

/// Text-conditioned visual embedding `z'` (p×d').
pub fn encode<F: Scalar>(
    g: &mut Graph<F>,
    vars: &AdapterVars,
    cfg: &AdapterConfig,
    patches: Var,
    text: Var,
) -> ModelResult<Var> {
    expect_shape(g, patches, "patch tokens", [cfg.p, cfg.d])?;
    expect_shape(g, text, "text tokens", [cfg.t, cfg.d])?;
    let keys_values = g.concat_rows(&[text, vars.prompt])?;
    let mut x = patches;
    for block in &vars.blocks {
        let h = g.layer_norm(x, block.ln1.gain, block.ln1.bias)?;
        let sa = attention(g, h, h, &block.self_attn, cfg.heads)?;
        x = g.add(x, sa)?;
        let h = g.layer_norm(x, block.ln2.gain, block.ln2.bias)?;
        let ca = attention(g, h, keys_values, &block.cross_attn, cfg.heads)?;
        x = g.add(x, ca)?;
    }
    Ok(g.linear(x, vars.proj.w, vars.proj.b)?)
}

/// Regression scores for a set of embeddings, as a B×1 column.
pub fn regression_head<F: Scalar>(g: &mut Graph<F>, vars: &AdapterVars, embeddings: &[Var]) -> ModelResult<Var> {
    if embeddings.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let pooled = embeddings
        .iter()
        .map(|&z| g.mean_rows(z))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = if pooled.len() == 1 {
        pooled[0]
    } else {
        g.concat_rows(&pooled)?
    };
    mlp(g, stacked, &vars.reg)
}

/// Per-item attention logits `q·z'ᵀ/√d'` (M×p). They depend on one item
/// only, so a batch computes them once and reuses them across pairs.
pub fn relational_logits<F: Scalar>(
    g: &mut Graph<F>,
    vars: &AdapterVars,
    cfg: &AdapterConfig,
    embedding: Var,
) -> ModelResult<Var> {
    let s = g.matmul_nt(vars.relational_tokens, embedding)?;
    Ok(g.scale(s, F::from_real(1.0 / (cfg.d_prime as f64).sqrt()))?)
}

/// Pre-FFN pair representation plus the joint attention matrix when one exists.
#[derive(Clone, Copy, Debug)]
pub struct PairRepresentation {
    /// 1×rank_input_dim; the relational-token average of `O_i - O_j` in the
    /// default configuration.
    pub diff: Var,
    /// M×2p attention over the joint keys (cross-attention pooling only).
    pub attention: Option<Var>,
}

/// Builds the rank-FFN input for pair `(i, j)`.
///
/// `logits` are the outputs of [`relational_logits`] for the two items; they
/// are ignored by variants that do not use them.
pub fn pair_representation<F: Scalar>(
    g: &mut Graph<F>,
    vars: &AdapterVars,
    cfg: &AdapterConfig,
    (zi, zj): (Var, Var),
    logits: Option<(Var, Var)>,
) -> ModelResult<PairRepresentation> {
    let flags = cfg.ablation;
    let p = cfg.p;
    let fuse = |g: &mut Graph<F>, oi: Var, oj: Var| -> ModelResult<Var> {
        Ok(if flags.concat_instead_of_subtract {
            g.concat_cols(&[oi, oj])?
        } else {
            g.sub(oi, oj)?
        })
    };

    if !flags.use_relational_attention {
        let mi = g.mean_rows(zi)?;
        let mj = g.mean_rows(zj)?;
        return Ok(PairRepresentation {
            diff: fuse(g, mi, mj)?,
            attention: None,
        });
    }

    // The mean over relational tokens commutes with the value product:
    // mean_m (A_i·V_i)_m = (mean_m A_i)·V_i, so rows of A are averaged first.
    if flags.self_attention_pooling {
        let m = cfg.relational_tokens;
        let tokens = g.concat_rows(&[vars.relational_tokens, zi, zj])?;
        let s = g.matmul_nt(tokens, tokens)?;
        let s = g.scale(s, F::from_real(1.0 / (cfg.d_prime as f64).sqrt()))?;
        let a = g.softmax_rows(s)?;
        let a_query = g.slice_rows(a, 0, m)?;
        let a_bar = g.mean_rows(a_query)?;
        let diff = if flags.merged_dot_product {
            g.matmul(a_bar, tokens)?
        } else {
            let ai = g.slice_cols(a_bar, m, p)?;
            let aj = g.slice_cols(a_bar, m + p, p)?;
            let oi = g.matmul(ai, zi)?;
            let oj = g.matmul(aj, zj)?;
            fuse(g, oi, oj)?
        };
        return Ok(PairRepresentation { diff, attention: None });
    }

    let (li, lj) = match logits {
        Some(l) => l,
        None => (
            relational_logits(g, vars, cfg, zi)?,
            relational_logits(g, vars, cfg, zj)?,
        ),
    };
    let joint = g.concat_cols(&[li, lj])?;
    let a = g.softmax_rows(joint)?;
    let a_bar = g.mean_rows(a)?;
    let diff = if flags.merged_dot_product {
        let values = g.concat_rows(&[zi, zj])?;
        g.matmul(a_bar, values)?
    } else {
        let ai = g.slice_cols(a_bar, 0, p)?;
        let aj = g.slice_cols(a_bar, p, p)?;
        let oi = g.matmul(ai, zi)?;
        let oj = g.matmul(aj, zj)?;
        fuse(g, oi, oj)?
    };
    Ok(PairRepresentation {
        diff,
        attention: Some(a),
    })
}

/// Rank FFN over stacked pair representations (P×in → P×1).
pub fn rank_head<F: Scalar>(g: &mut Graph<F>, vars: &AdapterVars, diffs: Var) -> ModelResult<Var> {
    mlp(g, diffs, &vars.rank)
}

/// Output of [`relational_attention`] for one pair.
#[derive(Clone, Copy, Debug)]
pub struct RelationalOutput {
    pub diff: Var,
    /// Scalar `O_ij` (1×1).
    pub output: Var,
    pub attention: Option<Var>,
}

/// Ranking-aware attention for a single pair of embeddings.
pub fn relational_attention<F: Scalar>(
    g: &mut Graph<F>,
    vars: &AdapterVars,
    cfg: &AdapterConfig,
    zi: Var,
    zj: Var,
) -> ModelResult<RelationalOutput> {
    expect_shape(g, zi, "embedding", [cfg.p, cfg.d_prime])?;
    expect_shape(g, zj, "embedding", [cfg.p, cfg.d_prime])?;
    let repr = pair_representation(g, vars, cfg, (zi, zj), None)?;
    let output = rank_head(g, vars, repr.diff)?;
    Ok(RelationalOutput {
        diff: repr.diff,
        output,
        attention: repr.attention,
    })
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub embeddings: Vec<Var>,
    /// B×1 regression scores.
    pub scores: Var,
    /// P×1 rank outputs `O_ij`, one per requested pair, when the rank head is
    /// enabled and at least one pair was requested.
    pub pair_outputs: Option<Var>,
}

/// Encodes every item once and evaluates both heads.
pub fn forward_batch<F: Scalar>(
    g: &mut Graph<F>,
    vars: &AdapterVars,
    cfg: &AdapterConfig,
    items: &[(Var, Var)],
    pairs: &[(usize, usize)],
) -> ModelResult<BatchOutput> {
    if items.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= items.len() || j >= items.len()) {
        return Err(ModelError::PairOutOfRange(i, j));
    }
    let embeddings = items
        .iter()
        .map(|&(z, w)| encode(g, vars, cfg, z, w))
        .collect::<ModelResult<Vec<_>>>()?;
    let scores = regression_head(g, vars, &embeddings)?;

    let pair_outputs = if cfg.ablation.use_rank_head && !pairs.is_empty() {
        let flags = cfg.ablation;
        let logits = if flags.use_relational_attention && !flags.self_attention_pooling {
            let mut cache = vec![None; embeddings.len()];
            for &(i, j) in pairs {
                for k in [i, j] {
                    if cache[k].is_none() {
                        cache[k] = Some(relational_logits(g, vars, cfg, embeddings[k])?);
                    }
                }
            }
            Some(cache)
        } else {
            None
        };
        let mut diffs = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            let l = logits.as_ref().map(|c| (c[i].expect("cached"), c[j].expect("cached")));
            diffs.push(pair_representation(g, vars, cfg, (embeddings[i], embeddings[j]), l)?.diff);
        }
        let stacked = if diffs.len() == 1 {
            diffs[0]
        } else {
            g.concat_rows(&diffs)?
        };
        Some(rank_head(g, vars, stacked)?)
    } else {
        None
    };

    Ok(BatchOutput {
        embeddings,
        scores,
        pair_outputs,
    })
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<F> {
    pub config: AdapterConfig,
    pub params: AdapterParams<F>,
}

impl<F: Scalar> Adapter<F> {
    pub fn new(config: AdapterConfig, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let params = AdapterParams::init(&config, seed);
        Ok(Adapter { config, params })
    }

    pub fn from_params(config: AdapterConfig, params: AdapterParams<F>) -> ModelResult<Self> {
        config.validate()?;
        if params.specs() != param_specs(&config).as_slice() {
            return Err(ModelError::Config(
                "parameters do not match the configuration layout".into(),
            ));
        }
        Ok(Adapter { config, params })
    }

    /// Registers every parameter in `g`; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> ModelResult<AdapterVars> {
        let leaves: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        AdapterVars::from_leaves(&self.config, &leaves)
    }

    /// Regression scores without gradient tracking.
    ///
    /// Items are independent, so the work is spread over threads sharing a
    /// read-only view of the parameters; results do not depend on the split.
    pub fn predict_scores(&self, items: &[(&Tensor<F>, &Tensor<F>)]) -> ModelResult<Vec<f64>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let workers = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(items.len());
        let chunk = items.len().div_ceil(workers);
        if workers <= 1 {
            return self.predict_chunk(items);
        }
        let results: Vec<ModelResult<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| s.spawn(move || self.predict_chunk(part)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    fn predict_chunk(&self, items: &[(&Tensor<F>, &Tensor<F>)]) -> ModelResult<Vec<f64>> {
        const BATCH: usize = 64;
        let mut out = Vec::with_capacity(items.len());
        for batch in items.chunks(BATCH) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let leaves: Vec<(Var, Var)> = batch
                .iter()
                .map(|(z, w)| (g.constant((*z).clone()), g.constant((*w).clone())))
                .collect();
            let outcome = forward_batch(&mut g, &vars, &self.config, &leaves, &[])?;
            out.extend(g.value(outcome.scores).data().iter().map(|v| v.to_real()));
        }
        Ok(out)
    }

    pub fn cast<G: Scalar>(&self) -> Adapter<G> {
        Adapter {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests;
