use super::*;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::rng::Rng;

fn micro() -> AdapterConfig {
    AdapterConfig {
        p: 5,
        t: 4,
        t_prime: 2,
        d: 8,
        d_prime: 6,
        num_encoder_blocks: 1,
        relational_tokens: 3,
        heads: 1,
        reg_head_blocks: 2,
        rank_head_ffn_blocks: 3,
        ablation: AblationFlags::default(),
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Randomizes every parameter (including zero-initialized biases) so tests
/// do not pass merely because of special initial values.
fn randomized(cfg: &AdapterConfig, seed: u64) -> Adapter<f64> {
    let mut adapter = Adapter::<f64>::new(cfg.clone(), seed).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    for t in adapter.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    }
    adapter
}

#[test]
fn default_embedding_shape() {
    let cfg = AdapterConfig::default();
    let adapter = Adapter::<f32>::new(cfg.clone(), 0).unwrap();
    let mut rng = Rng::new(1);
    let mut g = Graph::<f32>::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let z = g.constant(Tensor::from_fn(&[cfg.p, cfg.d], |_| rng.normal() as f32));
    let w = g.constant(Tensor::from_fn(&[cfg.t, cfg.d], |_| rng.normal() as f32));
    let zp = encode(&mut g, &vars, &cfg, z, w).unwrap();
    assert_eq!(g.value(zp).shape(), &[100, 512]);
}

#[test]
fn encode_rejects_wrong_shapes() {
    let cfg = micro();
    let adapter = Adapter::<f64>::new(cfg.clone(), 0).unwrap();
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let z = g.constant(Tensor::zeros(&[cfg.p + 1, cfg.d]));
    let w = g.constant(Tensor::zeros(&[cfg.t, cfg.d]));
    assert!(matches!(
        encode(&mut g, &vars, &cfg, z, w),
        Err(ModelError::Shape { .. })
    ));
}

#[test]
fn identical_inputs_give_identical_embeddings() {
    let cfg = micro();
    let adapter = randomized(&cfg, 3);
    let mut rng = Rng::new(4);
    let z = random(&[cfg.p, cfg.d], &mut rng);
    let w = random(&[cfg.t, cfg.d], &mut rng);
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let items: Vec<(Var, Var)> = (0..2).map(|_| (g.constant(z.clone()), g.constant(w.clone()))).collect();
    let out = forward_batch(&mut g, &vars, &cfg, &items, &[]).unwrap();
    assert_eq!(g.value(out.embeddings[0]), g.value(out.embeddings[1]));
    let s = g.value(out.scores).data();
    assert_eq!(s[0].to_bits(), s[1].to_bits());
}

#[test]
fn regression_head_zero_embedding_scores_zero() {
    let cfg = micro();
    let adapter = Adapter::<f64>::new(cfg.clone(), 9).unwrap();
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let z = g.constant(Tensor::zeros(&[cfg.p, cfg.d_prime]));
    let s = regression_head(&mut g, &vars, &[z]).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);
}

#[test]
fn regression_head_is_patch_permutation_invariant() {
    let cfg = micro();
    let adapter = randomized(&cfg, 5);
    let mut rng = Rng::new(6);
    let z = random(&[cfg.p, cfg.d_prime], &mut rng);
    let mut order: Vec<usize> = (0..cfg.p).collect();
    rng.shuffle(&mut order);
    let permuted = Tensor::from_fn(&[cfg.p, cfg.d_prime], |k| z.at(order[k / cfg.d_prime], k % cfg.d_prime));
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let a = g.constant(z);
    let b = g.constant(permuted);
    let s = regression_head(&mut g, &vars, &[a, b]).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - v[1]).abs() < 1e-12, "{v:?}");
}

fn embeddings_pair(cfg: &AdapterConfig, rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    (random(&[cfg.p, cfg.d_prime], rng), random(&[cfg.p, cfg.d_prime], rng))
}

#[test]
fn self_pair_diff_is_exactly_zero() {
    let cfg = micro();
    let adapter = randomized(&cfg, 7);
    let mut rng = Rng::new(8);
    let (zi, _) = embeddings_pair(&cfg, &mut rng);
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let a = g.constant(zi.clone());
    let b = g.constant(zi);
    let out = relational_attention(&mut g, &vars, &cfg, a, b).unwrap();
    assert!(g.value(out.diff).data().iter().all(|&v| v == 0.0));

    // O_ii = FFN(0): compare with the head applied to an explicit zero vector.
    let zero = g.constant(Tensor::zeros(&[1, cfg.d_prime]));
    let ffn0 = rank_head(&mut g, &vars, zero).unwrap();
    assert_eq!(g.value(out.output), g.value(ffn0));
}

#[test]
fn swapping_arguments_negates_diff_and_rows_normalize() {
    let cfg = micro();
    let adapter = randomized(&cfg, 10);
    let mut rng = Rng::new(11);
    let (zi, zj) = embeddings_pair(&cfg, &mut rng);
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let a = g.constant(zi);
    let b = g.constant(zj);
    let ij = relational_attention(&mut g, &vars, &cfg, a, b).unwrap();
    let ji = relational_attention(&mut g, &vars, &cfg, b, a).unwrap();
    for (x, y) in g.value(ij.diff).data().iter().zip(g.value(ji.diff).data()) {
        assert!((x + y).abs() < 1e-12);
    }
    let att = g.value(ij.attention.unwrap());
    assert_eq!(att.shape(), &[cfg.relational_tokens, 2 * cfg.p]);
    for r in 0..att.rows() {
        let s: f64 = att.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

/// Unfused reference: full `O_i = A_i·V_i` per relational token, then the
/// token average of the difference.
#[test]
fn matches_unfused_split_product_reference() {
    let cfg = micro();
    let adapter = randomized(&cfg, 12);
    let mut rng = Rng::new(13);
    let (zi, zj) = embeddings_pair(&cfg, &mut rng);
    let q = adapter.params.get("relational_tokens").unwrap().clone();
    let (m, p, dp) = (cfg.relational_tokens, cfg.p, cfg.d_prime);

    let mut reference = vec![0.0; dp];
    for r in 0..m {
        let mut logits: Vec<f64> = (0..2 * p)
            .map(|c| {
                let key = if c < p { zi.row(c) } else { zj.row(c - p) };
                q.row(r).iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (dp as f64).sqrt()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total: f64 = logits.iter().sum();
        for (c, out) in reference.iter_mut().enumerate() {
            let oi: f64 = (0..p).map(|k| logits[k] / total * zi.at(k, c)).sum();
            let oj: f64 = (0..p).map(|k| logits[p + k] / total * zj.at(k, c)).sum();
            *out += (oi - oj) / m as f64;
        }
    }

    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let a = g.constant(zi);
    let b = g.constant(zj);
    let out = relational_attention(&mut g, &vars, &cfg, a, b).unwrap();
    for (x, y) in g.value(out.diff).data().iter().zip(&reference) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

fn batch_inputs(cfg: &AdapterConfig, n: usize, rng: &mut Rng) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    (0..n)
        .map(|_| (random(&[cfg.p, cfg.d], rng), random(&[cfg.t, cfg.d], rng)))
        .collect()
}

fn run_batch(
    adapter: &Adapter<f64>,
    inputs: &[(Tensor<f64>, Tensor<f64>)],
    pairs: &[(usize, usize)],
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    let items: Vec<(Var, Var)> = inputs
        .iter()
        .map(|(z, w)| (g.constant(z.clone()), g.constant(w.clone())))
        .collect();
    let out = forward_batch(&mut g, &vars, &adapter.config, &items, pairs).unwrap();
    (
        g.value(out.scores).data().to_vec(),
        out.pair_outputs.map(|v| g.value(v).data().to_vec()),
    )
}

#[test]
fn forward_batch_counts_and_purity() {
    let cfg = micro();
    let adapter = randomized(&cfg, 14);
    let mut rng = Rng::new(15);
    let one = batch_inputs(&cfg, 1, &mut rng);
    let (scores, pairs) = run_batch(&adapter, &one, &[]);
    assert_eq!(scores.len(), 1);
    assert!(pairs.is_none());

    let four = batch_inputs(&cfg, 4, &mut rng);
    let all_pairs: Vec<(usize, usize)> = (0..4)
        .flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let (with_pairs, outputs) = run_batch(&adapter, &four, &all_pairs);
    let (without, _) = run_batch(&adapter, &four, &[]);
    assert_eq!(outputs.unwrap().len(), 12);
    assert_eq!(with_pairs, without);
}

#[test]
fn forward_batch_errors() {
    let cfg = micro();
    let adapter = randomized(&cfg, 16);
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, false).unwrap();
    assert!(matches!(
        forward_batch(&mut g, &vars, &cfg, &[], &[]),
        Err(ModelError::EmptyBatch)
    ));
    let mut rng = Rng::new(17);
    let inputs = batch_inputs(&cfg, 2, &mut rng);
    let items: Vec<(Var, Var)> = inputs
        .iter()
        .map(|(z, w)| (g.constant(z.clone()), g.constant(w.clone())))
        .collect();
    assert!(matches!(
        forward_batch(&mut g, &vars, &cfg, &items, &[(0, 2)]),
        Err(ModelError::PairOutOfRange(0, 2))
    ));
}

#[test]
fn disabled_rank_head_ignores_its_parameters() {
    let mut cfg = micro();
    cfg.ablation.use_rank_head = false;
    let base = randomized(&cfg, 18);
    let mut perturbed = base.clone();
    let mut rng = Rng::new(19);
    for spec in param_specs(&cfg) {
        if spec.name.starts_with("rank.") || spec.name == "relational_tokens" {
            let t = perturbed.params.get_mut(&spec.name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        }
    }
    let inputs = batch_inputs(&cfg, 3, &mut rng);
    let pairs = [(0, 1), (2, 1)];
    let (a, pa) = run_batch(&base, &inputs, &pairs);
    let (b, pb) = run_batch(&perturbed, &inputs, &pairs);
    assert_eq!(a, b);
    assert!(pa.is_none() && pb.is_none());
}

#[test]
fn shape_contract_for_random_micro_configs() {
    let mut rng = Rng::new(20);
    for _ in 0..3 {
        let heads = 1 + rng.below(2);
        let cfg = AdapterConfig {
            p: 2 + rng.below(5),
            t: 1 + rng.below(4),
            t_prime: 1 + rng.below(3),
            d: heads * (2 + rng.below(4)),
            d_prime: heads * (2 + rng.below(4)),
            num_encoder_blocks: 1 + rng.below(2),
            relational_tokens: 1 + rng.below(4),
            heads,
            reg_head_blocks: rng.below(3),
            rank_head_ffn_blocks: rng.below(4),
            ablation: AblationFlags::default(),
        };
        let adapter = randomized(&cfg, rng.next_u64());
        assert_eq!(adapter.params.numel(), expected_param_count(&cfg));
        let inputs = batch_inputs(&cfg, 3, &mut rng);
        let mut g = Graph::new();
        let vars = adapter.bind(&mut g, false).unwrap();
        let items: Vec<(Var, Var)> = inputs
            .iter()
            .map(|(z, w)| (g.constant(z.clone()), g.constant(w.clone())))
            .collect();
        let out = forward_batch(&mut g, &vars, &cfg, &items, &[(0, 1), (1, 2)]).unwrap();
        for &e in &out.embeddings {
            assert_eq!(g.value(e).shape(), &[cfg.p, cfg.d_prime]);
        }
        assert_eq!(g.value(out.scores).shape(), &[3, 1]);
        assert_eq!(g.value(out.pair_outputs.unwrap()).shape(), &[2, 1]);
    }
}

fn variant_gradcheck(flags: AblationFlags, heads: usize) {
    let mut cfg = micro();
    cfg.ablation = flags;
    cfg.heads = heads;
    cfg.d_prime = 6;
    let adapter = randomized(&cfg, 21);
    let mut rng = Rng::new(22);
    let inputs = batch_inputs(&cfg, 3, &mut rng);
    let named: Vec<(String, Tensor<f64>)> = adapter
        .params
        .named()
        .map(|(n, t)| (n.to_string(), t.map(|v| v * 0.6)))
        .collect();
    let build = |g: &mut Graph<f64>, leaves: &[Var]| -> crate::tensor::TensorResult<Var> {
        let vars = AdapterVars::from_leaves(&cfg, leaves).expect("layout");
        let items: Vec<(Var, Var)> = inputs
            .iter()
            .map(|(z, w)| (g.constant(z.clone()), g.constant(w.clone())))
            .collect();
        let out = match forward_batch(g, &vars, &cfg, &items, &[(0, 1), (2, 0), (2, 1)]) {
            Ok(o) => o,
            Err(ModelError::Tensor(e)) => return Err(e),
            Err(e) => panic!("{e}"),
        };
        let s = g.sum_all(out.scores)?;
        match out.pair_outputs {
            Some(o) => {
                // Smooth nonlinearity keeps the check away from hinge kinks.
                let o = g.gelu(o)?;
                let o = g.sum_all(o)?;
                g.add(s, o)
            }
            None => Ok(s),
        }
    };
    let report = check_gradients(build, &named, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{flags:?}: {:#?}", report.params);
}

#[test]
fn gradients_full_model() {
    variant_gradcheck(AblationFlags::default(), 1);
}

#[test]
fn gradients_two_heads() {
    variant_gradcheck(AblationFlags::default(), 2);
}

#[test]
fn gradients_ablation_variants() {
    let d = AblationFlags::default();
    for flags in [
        AblationFlags {
            use_relational_attention: false,
            ..d
        },
        AblationFlags {
            merged_dot_product: true,
            ..d
        },
        AblationFlags {
            concat_instead_of_subtract: true,
            ..d
        },
        AblationFlags {
            self_attention_pooling: true,
            ..d
        },
    ] {
        variant_gradcheck(flags, 1);
    }
}
