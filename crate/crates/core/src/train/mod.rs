//! Objective, optimizer, epoch loop and checkpoints.
//!
//! Every training prefix of a user's history predicts the behavior that
//! follows it, scored with a full softmax over the item vocabulary.

mod adam;
mod checkpoint;

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{check_config, Checkpoint, TrainingState, MAGIC, VERSION};

use crate::data::{Batches, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_ranking, MetricReport};
use crate::model::{ModelConfig, ParamStore, PyramidMixer, RESERVED_ROWS};
use crate::tensor::{Element, Graph, Var};

/// Mean softmax cross-entropy of `scores: [B, num_items]` against item-table
/// indices `targets`, over rows where `mask` is set.
pub fn compute_loss<T: Element>(g: &mut Graph<T>, scores: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let columns = targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| match (m, t.checked_sub(RESERVED_ROWS)) {
            (false, _) => Ok(0),
            (true, Some(c)) => Ok(c),
            (true, None) => Err(Error::Contract(format!("target {t} is a reserved row"))),
        })
        .collect::<Result<Vec<_>>>()?;
    g.cross_entropy(scores, &columns, mask)
}

/// Validation cutoff used for early stopping and the epoch log.
pub const VALID_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation MRR@10 improvement.
    pub patience: usize,
    /// Train on at most this many randomly drawn prefixes per user each
    /// epoch (all prefixes when unset).
    pub prefixes_per_user: Option<usize>,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 256,
            patience: 10,
            prefixes_per_user: None,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be positive".into()));
        }
        if self.prefixes_per_user == Some(0) {
            return Err(Error::Config("train.prefixes_per_user must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
    pub valid_mrr10: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_mrr10: f64,
    pub log: Vec<EpochLog>,
}

/// Owns the parameters, the optimizer and the shuffling generator.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: PyramidMixer<f32>,
    best: ParamStore<f32>,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    best_epoch: usize,
    best_mrr: Option<f64>,
    since_best: usize,
}

impl Trainer {
    /// Fresh parameters from `seed`; the data order uses a generator derived
    /// from the same seed.
    pub fn new(model_config: ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = PyramidMixer::init(model_config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Trainer {
            optimizer: Adam::new(config.optimizer.clone(), model.params()),
            best: model.params().clone(),
            config,
            model,
            rng,
            epoch: 0,
            best_epoch: 0,
            best_mrr: None,
            since_best: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = checkpoint
            .state
            .ok_or_else(|| Error::State("checkpoint carries no training state".into()))?;
        if state.optimizer.config != config.optimizer {
            log::warn!("resuming with the optimizer settings stored in the checkpoint");
        }
        let model = PyramidMixer::from_parts(checkpoint.config.clone(), state.current)?;
        PyramidMixer::from_parts(checkpoint.config, checkpoint.params.clone())?;
        Ok(Trainer {
            config,
            model,
            best: checkpoint.params,
            optimizer: state.optimizer,
            rng: state.rng,
            epoch: state.epoch,
            best_epoch: state.best_epoch,
            best_mrr: state.best_mrr,
            since_best: state.since_best,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PyramidMixer<f32> {
        &self.model
    }

    /// Parameters with the best validation MRR@10 so far.
    pub fn best_model(&self) -> PyramidMixer<f32> {
        PyramidMixer::from_parts(self.model.config().clone(), self.best.clone()).expect("same layout as the model")
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.best.clone(),
            state: Some(TrainingState {
                current: self.model.params().clone(),
                optimizer: self.optimizer.clone(),
                rng: self.rng.clone(),
                epoch: self.epoch,
                best_epoch: self.best_epoch,
                best_mrr: self.best_mrr,
                since_best: self.since_best,
            }),
        }
    }

    fn epoch_samples(&mut self, ds: &Dataset) -> Vec<Sample> {
        let Some(n) = self.config.prefixes_per_user else {
            return ds.split.train.clone();
        };
        let mut out = Vec::new();
        for group in ds.split.train.chunk_by(|a, b| a.seq == b.seq) {
            if group.len() <= n {
                out.extend_from_slice(group);
            } else {
                let mut picked: Vec<usize> = sample_indices(&mut self.rng, group.len(), n).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|i| group[i]));
            }
        }
        out
    }

    /// One pass of Adam updates over the (shuffled) training prefixes.
    /// Returns the sample-weighted mean loss.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<f64> {
        let samples = self.epoch_samples(ds);
        if samples.is_empty() {
            return Err(Error::Data("no training prefixes (every sequence is shorter than four)".into()));
        }
        let len = self.model.config().max_len;
        let batches = Batches::shuffled(&ds.split.sequences, &samples, len, self.config.batch_size, &mut self.rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (i, batch) in batches.enumerate() {
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, true);
            let out = self.model.forward(&mut g, &bound, &batch)?;
            let loss = compute_loss(&mut g, out.scores, &batch.targets, &vec![true; batch.size])?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "training loss is {value} at epoch {}, batch {}",
                    self.epoch + 1,
                    i + 1
                )));
            }
            g.backward(loss)?;
            let grads: Vec<(String, Vec<f32>)> = bound
                .iter()
                .map(|(name, v)| (name.to_string(), g.grad_tensor(v).into_data()))
                .collect();
            self.optimizer.step(self.model.params_mut(), &grads)?;
            total += value * batch.size as f64;
            count += batch.size;
        }
        Ok(total / count as f64)
    }

    /// Train one epoch, validate, and update the early-stopping bookkeeping.
    pub fn step_epoch(&mut self, ds: &Dataset) -> Result<EpochLog> {
        let start = Instant::now();
        let train_loss = self.run_epoch(ds)?;
        let valid: MetricReport = evaluate_ranking(&self.model, ds, &ds.split.valid, VALID_K)?;
        self.epoch += 1;
        if self.best_mrr.is_none_or(|b| valid.mrr > b) {
            self.best_mrr = Some(valid.mrr);
            self.best_epoch = self.epoch;
            self.best = self.model.params().clone();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(EpochLog {
            epoch: self.epoch,
            train_loss,
            valid_hr10: valid.hr,
            valid_ndcg10: valid.ndcg,
            valid_mrr10: valid.mrr,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// True once `patience` epochs passed without improvement or the epoch
    /// budget is spent. With patience 0 that is right after the first epoch.
    pub fn should_stop(&self) -> bool {
        self.epoch >= self.config.max_epochs || (self.epoch > 0 && self.since_best >= self.config.patience)
    }

    /// Runs epochs until [`Trainer::should_stop`], calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        ds: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<TrainSummary> {
        let mut log = Vec::new();
        while !self.should_stop() {
            let entry = self.step_epoch(ds)?;
            log::info!(
                "epoch {} loss {:.4} valid mrr@10 {:.4} ({:.1}s)",
                entry.epoch,
                entry.train_loss,
                entry.valid_mrr10,
                entry.wall_seconds
            );
            on_epoch(self, &entry)?;
            log.push(entry);
        }
        Ok(TrainSummary {
            epochs: self.epoch,
            best_epoch: self.best_epoch,
            best_valid_mrr10: self.best_mrr.unwrap_or(0.0),
            log,
        })
    }
}

#[cfg(test)]
mod tests;
