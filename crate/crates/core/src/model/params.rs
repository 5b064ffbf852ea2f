//! Parameter layout and initialization.

use std::collections::HashMap;

use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AdapterConfig, ModelError};

const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with variance `2 / (fan_in + fan_out)`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// Normal with std 0.02.
    Token,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    fn weight(name: String, fan_in: usize, fan_out: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![fan_in, fan_out],
            init: Init::Xavier { fan_in, fan_out },
            decay: true,
        }
    }

    fn bias(name: String, n: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![n],
            init: Init::Zeros,
            decay: false,
        }
    }

    fn gain(name: String, n: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![n],
            init: Init::Ones,
            decay: false,
        }
    }

    fn tokens(name: String, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![rows, cols],
            init: Init::Token,
            decay: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize) {
    out.push(ParamSpec::weight(format!("{prefix}.weight"), din, dout));
    out.push(ParamSpec::bias(format!("{prefix}.bias"), dout));
}

fn mlp_specs(out: &mut Vec<ParamSpec>, prefix: &str, blocks: usize, din: usize, hidden: usize) {
    let mut width = din;
    for b in 0..blocks {
        linear_specs(out, &format!("{prefix}.{b}"), width, hidden);
        width = hidden;
    }
    linear_specs(out, &format!("{prefix}.out"), width, 1);
}

/// Full, ordered parameter layout for a configuration.
pub fn param_specs(cfg: &AdapterConfig) -> Vec<ParamSpec> {
    let d = cfg.d;
    let mut specs = vec![ParamSpec::tokens("prompt_tokens".into(), cfg.t_prime, d)];
    for b in 0..cfg.num_encoder_blocks {
        for (ln, attn) in [("ln1", "self_attn"), ("ln2", "cross_attn")] {
            specs.push(ParamSpec::gain(format!("enc{b}.{ln}.gain"), d));
            specs.push(ParamSpec::bias(format!("enc{b}.{ln}.bias"), d));
            for proj in ["q", "k", "v", "o"] {
                linear_specs(&mut specs, &format!("enc{b}.{attn}.{proj}"), d, d);
            }
        }
    }
    linear_specs(&mut specs, "proj", d, cfg.d_prime);
    specs.push(ParamSpec::tokens(
        "relational_tokens".into(),
        cfg.relational_tokens,
        cfg.d_prime,
    ));
    mlp_specs(&mut specs, "reg", cfg.reg_head_blocks, cfg.d_prime, cfg.d_prime);
    mlp_specs(
        &mut specs,
        "rank",
        cfg.rank_head_ffn_blocks,
        cfg.rank_input_dim(),
        cfg.d_prime,
    );
    specs
}

/// Named trainable tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<F> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> AdapterParams<F> {
    pub fn init(cfg: &AdapterConfig, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, streams::PARAM_INIT);
        let specs = param_specs(cfg);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, F::one()),
                Init::Xavier { fan_in, fan_out } => {
                    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| F::from_real(rng.normal() * std))
                }
                Init::Token => Tensor::from_fn(&s.shape, |_| F::from_real(rng.normal() * TOKEN_INIT_STD)),
            })
            .collect();
        Self::assemble(specs, tensors)
    }

    /// Rebuilds from stored tensors, checking names and shapes against `cfg`.
    pub fn from_named(cfg: &AdapterConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        let specs = param_specs(cfg);
        if named.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` {:?} does not match layout entry `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            tensors.push(t);
        }
        Ok(Self::assemble(specs, tensors))
    }

    fn assemble(specs: Vec<ParamSpec>, tensors: Vec<Tensor<F>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        AdapterParams { specs, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<G: Scalar>(&self) -> AdapterParams<G> {
        AdapterParams {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Closed-form parameter count, used to cross-check the layout.
pub fn expected_param_count(cfg: &AdapterConfig) -> usize {
    let (d, dp) = (cfg.d, cfg.d_prime);
    let attn = 4 * (d * d + d);
    let block = 2 * (2 * d + attn);
    let mlp = |blocks: usize, din: usize| {
        if blocks == 0 {
            din + 1
        } else {
            (din * dp + dp) + (blocks - 1) * (dp * dp + dp) + (dp + 1)
        }
    };
    cfg.t_prime * d
        + cfg.num_encoder_blocks * block
        + (d * dp + dp)
        + cfg.relational_tokens * dp
        + mlp(cfg.reg_head_blocks, dp)
        + mlp(cfg.rank_head_ffn_blocks, cfg.rank_input_dim())
}
