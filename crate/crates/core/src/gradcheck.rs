//! Central finite-difference check of reverse-mode gradients (64-bit only).

use crate::graph::{Graph, Var};
use crate::model::{forward_batch, AblationFlags, Adapter, AdapterConfig, AdapterVars, ModelError};
use crate::objective::{build_pairs, combined_loss_graph, RankReduction, DEFAULT_ALPHA};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum tolerated relative error per parameter tensor.
    pub tol: f64,
    /// Lower bound on a tensor's gradient scale, so tensors whose gradient
    /// is all but zero are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }
}

/// Runs `build` once with backward to get analytic gradients, then perturbs
/// every element of every parameter.
///
/// A tensor's relative error is `max |a - n| / max(|a|, |n|)`, both maxima
/// taken over the tensor's elements. Normalizing per element instead lets
/// difference roundoff (about `ulp(loss) / eps`) dominate near-zero entries.
///
/// `build` receives the graph and one trainable leaf per entry of `params`
/// (same order) and returns the scalar loss.
pub fn check_gradients<B>(
    build: B,
    params: &[(String, Tensor<f64>)],
    opts: GradCheckOptions,
) -> TensorResult<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let analytic = analytic_gradients(&build, params)?;
    compare_gradients(&build, params, &analytic, opts)
}

/// Analytic gradients of `build` at `params`; zero for unreached parameters.
pub fn analytic_gradients<B>(build: &B, params: &[(String, Tensor<f64>)]) -> TensorResult<Vec<Tensor<f64>>>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Compares supplied analytic gradients against central differences.
pub fn compare_gradients<B>(
    build: &B,
    params: &[(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> TensorResult<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let mut work: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = ParamGradError {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        let mut numeric = Vec::with_capacity(work[pi].numel());
        for k in 0..work[pi].numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + opts.eps;
            let up = eval_loss(build, &work)?;
            work[pi].data_mut()[k] = orig - opts.eps;
            let down = eval_loss(build, &work)?;
            work[pi].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * opts.eps));
        }
        let a = analytic[pi].data();
        let scale = a
            .iter()
            .zip(&numeric)
            .fold(opts.floor, |m, (a, n)| m.max(a.abs()).max(n.abs()));
        for (k, (a, n)) in a.iter().zip(&numeric).enumerate() {
            let abs_err = (a - n).abs();
            worst.max_abs_err = worst.max_abs_err.max(abs_err);
            if abs_err / scale > worst.max_rel_err {
                worst.max_rel_err = abs_err / scale;
                worst.worst_index = k;
            }
        }
        report.push(worst);
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}

fn eval_loss<B>(build: &B, params: &[Tensor<f64>]) -> TensorResult<f64>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Smallest configuration exercising every adapter component.
pub fn micro_config() -> AdapterConfig {
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

/// Checks the combined objective's gradient for every adapter parameter on a
/// random batch of `batch` items with distinct targets (so all ordered pairs
/// enter the hinge term). Every parameter, biases included, is randomized so
/// zero initial values cannot hide errors.
pub fn adapter_gradcheck(
    cfg: &AdapterConfig,
    batch: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, ModelError> {
    let mut adapter = Adapter::<f64>::new(cfg.clone(), seed)?;
    let mut rng = Rng::new(seed);
    for t in adapter.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
    }
    let inputs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..batch)
        .map(|_| {
            (
                Tensor::from_fn(&[cfg.p, cfg.d], |_| rng.normal()),
                Tensor::from_fn(&[cfg.t, cfg.d], |_| rng.normal()),
            )
        })
        .collect();
    let targets: Vec<f64> = (0..batch).map(|i| i as f64 * 0.7 + 0.1 * rng.uniform()).collect();
    let pairs = build_pairs(&targets, crate::objective::PairMode::All, &mut rng).pairs;
    let named: Vec<(String, Tensor<f64>)> = adapter
        .params
        .named()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let build = |g: &mut Graph<f64>, leaves: &[Var]| -> TensorResult<Var> {
        let as_tensor = |e: ModelError| match e {
            ModelError::Tensor(t) => t,
            other => panic!("layout fixed by the config: {other}"),
        };
        let vars = AdapterVars::from_leaves(cfg, leaves).map_err(as_tensor)?;
        let items: Vec<(Var, Var)> = inputs
            .iter()
            .map(|(z, w)| (g.constant(z.clone()), g.constant(w.clone())))
            .collect();
        let out = forward_batch(g, &vars, cfg, &items, &pairs).map_err(as_tensor)?;
        let (loss, _) = combined_loss_graph(
            g,
            out.scores,
            &targets,
            out.pair_outputs,
            DEFAULT_ALPHA,
            RankReduction::Mean,
        )?;
        Ok(loss)
    };
    check_gradients(build, &named, opts).map_err(|e: TensorError| ModelError::Tensor(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn linear_loss(g: &mut Graph<f64>, p: &[Var]) -> TensorResult<Var> {
        let y = g.linear(p[0], p[1], p[2])?;
        let y = g.gelu(y)?;
        g.sum_all(y)
    }

    #[test]
    fn linear_layer_micro_case() {
        let mut rng = Rng::new(11);
        let params = vec![
            ("x".to_string(), random(&[3, 4], &mut rng)),
            ("w".to_string(), random(&[4, 2], &mut rng)),
            ("b".to_string(), random(&[2], &mut rng)),
        ];
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let report = check_gradients(linear_loss, &params, opts).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sign_flipped_backward_is_reported() {
        let mut rng = Rng::new(12);
        let params = vec![
            ("x".to_string(), random(&[3, 4], &mut rng)),
            ("w".to_string(), random(&[4, 2], &mut rng)),
            ("b".to_string(), random(&[2], &mut rng)),
        ];
        let flipped: Vec<Tensor<f64>> = analytic_gradients(&linear_loss, &params)
            .unwrap()
            .into_iter()
            .map(|t| t.map(|v| -v))
            .collect();
        let report = compare_gradients(&linear_loss, &params, &flipped, GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_err() - 2.0).abs() < 1e-3, "{}", report.max_rel_err());
    }

    #[test]
    fn single_wrong_element_is_reported() {
        let mut rng = Rng::new(13);
        let params = vec![
            ("x".to_string(), random(&[3, 4], &mut rng)),
            ("w".to_string(), random(&[4, 2], &mut rng)),
            ("b".to_string(), random(&[2], &mut rng)),
        ];
        let mut grads = analytic_gradients(&linear_loss, &params).unwrap();
        let scale = grads[1].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        grads[1].data_mut()[5] += 1e-4 * scale;
        let report = compare_gradients(&linear_loss, &params, &grads, GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[1].worst_index, 5);
    }
}
