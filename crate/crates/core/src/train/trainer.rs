use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW};
use super::{TrainConfig, TrainError};
use crate::checkpoint::Checkpoint;
use crate::datastore::EmbeddingFile;
use crate::graph::{Graph, Var};
use crate::model::{forward_batch, Adapter, AdapterConfig};
use crate::objective::{build_pairs_grouped, combined_loss_graph, LossBreakdown};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One optional gradient per parameter, in layout order.
type Gradients<F> = Vec<Option<Tensor<F>>>;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_reg: f64,
    pub l_rank: f64,
    pub total: f64,
}

impl StepLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Seeded epoch-wise shuffling over the training indices.
#[derive(Clone, Debug)]
struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        BatchSampler {
            order: Vec::new(),
            cursor: 0,
            batch_size: batch_size.min(pool.len()),
            pool,
            rng: Rng::stream(seed, streams::BATCH_ORDER),
        }
    }

    /// Next mini-batch; the final batch of an epoch may be short.
    fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.clone_from(&self.pool);
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = &self.order[self.cursor..end];
        self.cursor = end;
        batch
    }
}

/// Stateful training run over a fixed set of item indices.
pub struct Trainer<'a, F: Scalar> {
    cfg: &'a TrainConfig,
    file: &'a EmbeddingFile<F>,
    adapter: Adapter<F>,
    optimizer: AdamW<F>,
    sampler: BatchSampler,
    pair_rng: Rng,
    query_pos: HashMap<u32, usize>,
    step: u64,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(
        cfg: &'a TrainConfig,
        adapter_cfg: AdapterConfig,
        file: &'a EmbeddingFile<F>,
        train_items: &[usize],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_dims(&adapter_cfg, file)?;
        if train_items.is_empty() {
            return Err(TrainError::Config("the training split is empty".into()));
        }
        if let Some(&bad) = train_items.iter().find(|&&i| i >= file.items.len()) {
            return Err(TrainError::Config(format!("item index {bad} out of range")));
        }
        let adapter = Adapter::new(adapter_cfg, cfg.seed)?;
        let decay: Vec<bool> = adapter.params.specs().iter().map(|s| s.decay).collect();
        let optimizer = AdamW::new(adapter.params.tensors(), decay, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            file,
            adapter,
            optimizer,
            sampler: BatchSampler::new(train_items.to_vec(), cfg.batch_size, cfg.seed),
            pair_rng: Rng::stream(cfg.seed, streams::PAIR_SAMPLING),
            query_pos: file.query_index(),
            step: 0,
        })
    }

    pub fn adapter(&self) -> &Adapter<F> {
        &self.adapter
    }

    pub fn into_adapter(self) -> Adapter<F> {
        self.adapter
    }

    pub fn optimizer(&self) -> &AdamW<F> {
        &self.optimizer
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Loss and gradients on one batch, without touching the parameters.
    fn loss_and_grads(
        &self,
        batch: &[usize],
        pairs: &[(usize, usize)],
    ) -> Result<(LossBreakdown, Gradients<F>), TrainError> {
        let mut g = Graph::<F>::new();
        // finiteness is checked on the loss and gradients instead
        g.set_check_finite(false);
        let vars = self.adapter.bind(&mut g, true)?;
        let mut text_vars: HashMap<u32, Var> = HashMap::new();
        let mut items = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &i in batch {
            let item = &self.file.items[i];
            let text = *text_vars.entry(item.query_id).or_insert_with(|| {
                let q = &self.file.queries[self.query_pos[&item.query_id]];
                g.constant(q.tokens.clone())
            });
            items.push((g.constant(item.patches.clone()), text));
            targets.push(item.target);
        }
        let out = forward_batch(&mut g, &vars, &self.adapter.config, &items, pairs)?;
        let (loss, breakdown) = combined_loss_graph(
            &mut g,
            out.scores,
            &targets,
            out.pair_outputs,
            self.cfg.alpha,
            self.cfg.rank_reduction,
        )?;
        if !breakdown.is_finite() {
            return Ok((breakdown, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars.all().iter().map(|&v| g.grad(v)).collect();
        Ok((breakdown, grads))
    }

    /// Runs one optimizer step and returns its log record.
    pub fn step_once(&mut self) -> Result<StepLog, TrainError> {
        let batch = self.sampler.next_batch().to_vec();
        let targets: Vec<f64> = batch.iter().map(|&i| self.file.items[i].target).collect();
        let groups: Vec<u32> = batch.iter().map(|&i| self.file.items[i].query_id).collect();
        // pairs are drawn even when the rank head is off so every variant
        // consumes the same random stream
        let pairs = build_pairs_grouped(&targets, Some(&groups), self.cfg.pairs, &mut self.pair_rng);
        let pairs = if self.adapter.config.ablation.use_rank_head {
            pairs.pairs
        } else {
            Vec::new()
        };
        let (loss, mut grads) = self.loss_and_grads(&batch, &pairs)?;
        let grads_finite = grads.iter().flatten().all(|g| g.is_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(TrainError::NonFiniteLoss {
                step: self.step + 1,
                saved: None,
            });
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        let lr = self.cfg.lr * self.cfg.lr_schedule.factor(self.step, self.cfg.steps);
        self.optimizer.step(self.adapter.params.tensors_mut(), &grads, lr);
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            l_reg: loss.l_reg,
            l_rank: loss.l_rank,
            total: loss.total,
        })
    }

    fn checkpoint(&self) -> Checkpoint<F> {
        let meta = serde_json::to_string(self.cfg).expect("config serializes");
        Checkpoint::new(self.adapter.clone(), self.step, meta)
    }

    /// Runs `cfg.steps` steps, handing each log record to `on_step`.
    ///
    /// With a checkpoint path, parameters are saved every
    /// `checkpoint_every` steps and at the end. On a non-finite loss the
    /// last good parameters (those before the failing step) are saved and
    /// the error names the file.
    pub fn run(&mut self, ckpt: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<(), TrainError> {
        while self.step < self.cfg.steps {
            match self.step_once() {
                Ok(log) => on_step(&log),
                Err(TrainError::NonFiniteLoss { step, .. }) => {
                    let saved = match ckpt {
                        Some(path) => {
                            self.checkpoint().save(path)?;
                            Some(path.to_path_buf())
                        }
                        None => None,
                    };
                    return Err(TrainError::NonFiniteLoss { step, saved });
                }
                Err(e) => return Err(e),
            }
            let every = self.cfg.checkpoint_every;
            if let Some(path) = ckpt {
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.cfg.steps {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = ckpt {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }
}

pub(crate) fn check_dims<F: Scalar>(cfg: &AdapterConfig, file: &EmbeddingFile<F>) -> Result<(), TrainError> {
    let d = file.dims;
    if (cfg.p, cfg.d, cfg.t) != (d.p, d.d, d.t) {
        return Err(TrainError::DimMismatch {
            model: (cfg.p, cfg.d, cfg.t),
            data: (d.p, d.d, d.t),
        });
    }
    Ok(())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub adapter: Adapter<F>,
    pub log: Vec<StepLog>,
    pub checkpoint: Option<PathBuf>,
}

/// Convenience wrapper: builds a trainer, runs it and collects the log.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    adapter_cfg: AdapterConfig,
    file: &EmbeddingFile<F>,
    train_items: &[usize],
    ckpt: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome<F>, TrainError> {
    let mut trainer = Trainer::new(cfg, adapter_cfg, file, train_items)?;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    trainer.run(ckpt, |l| {
        on_step(l);
        log.push(*l);
    })?;
    Ok(TrainOutcome {
        adapter: trainer.into_adapter(),
        log,
        checkpoint: ckpt.map(Path::to_path_buf),
    })
}
