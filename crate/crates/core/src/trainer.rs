//! Epoch loop: negative sampling, shuffled minibatches, Adam updates,
//! validation after every epoch and early stopping on Recall@10.
//!
//! Random streams are keyed by the master seed: negatives by
//! `(epoch, instance)`, the shuffle by `epoch`, neighborhood sampling by the
//! global step, and validation by a fixed evaluation key.

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, Wiring};
use crate::data::{build_eval_instances, build_training_instances, sample_negatives, Segment, SplitDataset, TrainingInstance};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{BatchLoss, Graphs};
use crate::numerics::Tensor;
use crate::seed::{self, tag};

/// Branch switches for the configured variant.
pub fn select_variant(config: &TrainConfig) -> Wiring {
    config.variant.wiring()
}

/// Seed pinning neighborhood samples during validation and evaluation.
pub fn eval_seed(config: &TrainConfig) -> u64 {
    seed::derive(config.seed, &[tag::EVAL])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub batch_losses: Vec<f64>,
    pub recall10: f64,
    pub ndcg10: f64,
}

impl EpochLog {
    /// `epoch \t loss \t recall@10 \t ndcg@10`.
    pub fn line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6}", self.epoch, self.loss, self.recall10, self.ndcg10)
    }
}

/// The epoch's instances with fresh negatives, in shuffled order.
pub fn epoch_instances(
    config: &TrainConfig,
    split: &SplitDataset,
    base: &[TrainingInstance],
    epoch: usize,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::with_capacity(base.len());
    for (i, inst) in base.iter().enumerate() {
        let mut rng = seed::rng(config.seed, &[tag::NEGATIVES, epoch as u64, i as u64]);
        out.push(sample_negatives(
            inst,
            split.history(inst.user),
            split.num_items,
            config.num_negatives,
            &mut rng,
        )?);
    }
    let mut rng = seed::rng(config.seed, &[tag::SHUFFLE, epoch as u64]);
    out.shuffle(&mut rng);
    Ok(out)
}

/// One forward/backward pass and Adam update on `batch`.
pub fn train_step(state: &mut Checkpoint, graphs: &Graphs, batch: &[TrainingInstance]) -> Result<BatchLoss> {
    let sample_seed = seed::derive(state.model.config.seed, &[tag::STEP, state.progress.step]);
    let (loss, grads) = state.model.batch_loss_and_grads(graphs, batch, sample_seed)?;
    if !loss.total().is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: state.progress.epoch,
            batch: state.progress.batch,
            loss: loss.total(),
        });
    }
    let dense = grads.dense(&state.model.params);
    let grad_refs: Vec<&Tensor> = dense.iter().collect();
    let mut params = state.model.params.tensors_mut();
    state.adam.step(&mut params, &grad_refs)?;
    state.progress.step += 1;
    state.progress.batch += 1;
    Ok(loss)
}

/// Mean total loss of `model` over `instances`, batched as in training,
/// without updating anything.
pub fn mean_loss(
    model: &crate::model::Model,
    graphs: &Graphs,
    instances: &[TrainingInstance],
    batch_size: usize,
    sample_seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    for batch in instances.chunks(batch_size.max(1)) {
        let (loss, _) = model.batch_loss_and_grads(graphs, batch, sample_seed)?;
        sum += loss.total() * batch.len() as f64;
    }
    Ok(sum / instances.len().max(1) as f64)
}

/// Resumable training loop over one split.
pub struct Trainer<'a> {
    split: &'a SplitDataset,
    graphs: &'a Graphs,
    base: Vec<TrainingInstance>,
    val: Vec<TrainingInstance>,
    state: Checkpoint,
    best: Checkpoint,
    epoch_cache: Option<(usize, Vec<TrainingInstance>)>,
    batch_losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, split: &'a SplitDataset, graphs: &'a Graphs) -> Result<Self> {
        config.validate()?;
        let state = Checkpoint::initial(config, split.num_users(), split.num_items);
        Self::resume(state, split, graphs)
    }

    /// Continues from `state`, whose progress says where to pick up.
    pub fn resume(state: Checkpoint, split: &'a SplitDataset, graphs: &'a Graphs) -> Result<Self> {
        let config = &state.model.config;
        if state.model.num_users() != split.num_users() || state.model.num_items() != split.num_items {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} users / {} items, dataset has {} / {}",
                state.model.num_users(),
                state.model.num_items(),
                split.num_users(),
                split.num_items
            )));
        }
        let base = build_training_instances(split, config.context_len, config.targets);
        if base.is_empty() {
            return Err(Error::Invalid(format!(
                "no user has {} train interactions; nothing to train on",
                config.context_len + config.targets
            )));
        }
        let val = build_eval_instances(split, Segment::Val, config.context_len, config.targets);
        Ok(Trainer {
            split,
            graphs,
            base,
            val,
            best: state.clone(),
            state,
            epoch_cache: None,
            batch_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.model.config
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    /// Snapshot with the best validation Recall@10 so far (the initial
    /// state before any epoch has finished).
    pub fn best(&self) -> &Checkpoint {
        &self.best
    }

    pub fn num_batches(&self) -> usize {
        self.base.len().div_ceil(self.config().batch_size)
    }

    pub fn training_instances(&self) -> &[TrainingInstance] {
        &self.base
    }

    /// The current epoch's instances with their negatives, in batch order.
    pub fn epoch_batch_order(&mut self) -> Result<&[TrainingInstance]> {
        self.next_batch()?;
        Ok(&self.epoch_cache.as_ref().unwrap().1)
    }

    /// The next batch of the current epoch, or `None` once it is exhausted.
    pub fn next_batch(&mut self) -> Result<Option<Vec<TrainingInstance>>> {
        let epoch = self.state.progress.epoch;
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let instances = epoch_instances(self.config(), self.split, &self.base, epoch)?;
            self.epoch_cache = Some((epoch, instances));
        }
        let bs = self.config().batch_size;
        let (_, instances) = self.epoch_cache.as_ref().unwrap();
        let start = self.state.progress.batch * bs;
        if start >= instances.len() {
            return Ok(None);
        }
        Ok(Some(instances[start..(start + bs).min(instances.len())].to_vec()))
    }

    /// Runs the next batch; `None` when the epoch has no batches left.
    pub fn step(&mut self) -> Result<Option<BatchLoss>> {
        let Some(batch) = self.next_batch()? else {
            return Ok(None);
        };
        let loss = train_step(&mut self.state, self.graphs, &batch)?;
        self.batch_losses.push(loss.total());
        log::debug!(
            "epoch {} batch {} loss {:.6}",
            self.state.progress.epoch,
            self.state.progress.batch - 1,
            loss.total()
        );
        Ok(Some(loss))
    }

    pub fn validate(&self) -> Result<MetricsReport> {
        metrics::evaluate(
            &self.state.model,
            self.graphs,
            self.split,
            &self.val,
            Segment::Val,
            eval_seed(self.config()),
        )
    }

    /// Validates, updates the best snapshot and advances to the next epoch.
    /// Without validation instances every epoch counts as the best so far
    /// and the metric columns are NaN.
    pub fn finish_epoch(&mut self) -> Result<EpochLog> {
        let (recall10, ndcg10) = if self.val.is_empty() {
            log::warn!("no validation instances; early stopping disabled");
            (f64::NAN, f64::NAN)
        } else {
            let report = self.validate()?;
            (report.recall_at(10), report.ndcg_at(10))
        };
        let losses = std::mem::take(&mut self.batch_losses);
        let p = &mut self.state.progress;
        let log = EpochLog {
            epoch: p.epoch,
            loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            batch_losses: losses,
            recall10,
            ndcg10,
        };
        p.epoch += 1;
        p.batch = 0;
        if recall10.is_nan() || recall10 > p.best_recall {
            if !recall10.is_nan() {
                p.best_recall = recall10;
            }
            p.best_epoch = log.epoch;
            p.stale_epochs = 0;
            self.best = self.state.clone();
        } else {
            p.stale_epochs += 1;
        }
        Ok(log)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        while self.step()?.is_some() {}
        self.finish_epoch()
    }

    /// True once the epoch budget is spent or validation has stalled for
    /// `patience` epochs (0 disables early stopping).
    pub fn finished(&self) -> bool {
        let p = &self.state.progress;
        let c = self.config();
        p.epoch >= c.epochs || (c.patience > 0 && p.stale_epochs >= c.patience)
    }

    pub fn into_parts(self) -> (Checkpoint, Checkpoint) {
        (self.best, self.state)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Full training run; `on_epoch` sees every log entry as it is produced.
pub fn train_with(
    config: TrainConfig,
    split: &SplitDataset,
    graphs: &Graphs,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, split, graphs)?;
    let mut log = Vec::new();
    while !trainer.finished() {
        let entry = trainer.run_epoch()?;
        on_epoch(&entry);
        log.push(entry);
    }
    let (best, last) = trainer.into_parts();
    Ok(TrainOutcome { best, last, log })
}

pub fn train(config: TrainConfig, split: &SplitDataset, graphs: &Graphs) -> Result<TrainOutcome> {
    train_with(config, split, graphs, |_| {})
}
