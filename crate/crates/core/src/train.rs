//! Mini-batch SGD over a [`Dataset`] and held-out evaluation.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{LossMode, LossReport};
use crate::metrics::{EvalReport, MetricCounters, DEFAULT_THRESHOLD};
use crate::model::MggModel;
use crate::params::{ParamStore, Sgd};

/// Consecutive phases of `epochs` epochs at a fixed learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossMode,
    pub batch_size: usize,
    pub schedule: Vec<Phase>,
    pub momentum: f64,
    pub seed: u64,
    /// Random horizontal flips with probability 0.5.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossMode::Plain,
            batch_size: 32,
            schedule: alloc::vec![Phase { epochs: 20, lr: 0.01 }, Phase { epochs: 10, lr: 0.001 }],
            momentum: 0.9,
            seed: 7,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule must contain at least one phase".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(p) = self.schedule.iter().find(|p| !(p.lr.is_finite() && p.lr > 0.0)) {
            return Err(Error::Config(format!("learning rate {} must be positive", p.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of each epoch, in order.
    pub fn epoch_rates(&self) -> impl Iterator<Item = f64> + '_ {
        self.schedule.iter().flat_map(|p| core::iter::repeat_n(p.lr, p.epochs))
    }
}

/// Loss breakdown averaged over the batches of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

/// Trains `store` in place. `on_epoch` sees each epoch's log and the
/// parameters at the end of that epoch; an error from it stops training.
pub fn train<F>(
    model: &MggModel,
    store: &mut ParamStore,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &ParamStore) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let channels = model.config().backbone.input.channels;
    let sgd = Sgd { momentum: config.momentum };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.total_epochs());
    for (epoch, lr) in config.epoch_rates().enumerate() {
        order.shuffle(&mut rng);
        let mut sum: Option<LossReport> = None;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let flip = config.augment.then_some((&mut rng, 0.5));
            let (images, labels) = data.batch(chunk, channels, flip)?;
            let report = model.train_step(store, &sgd, &images, &labels, config.loss, lr).map_err(|e| match e {
                Error::NonFinite { .. } | Error::Divergence { .. } => {
                    Error::Diverged { epoch: epoch + 1, batch: batches + 1, cause: e.to_string() }
                }
                other => other,
            })?;
            match sum.as_mut() {
                None => sum = Some(report),
                Some(acc) => {
                    acc.total += report.total;
                    acc.terms.iter_mut().zip(&report.terms).for_each(|(a, b)| a.1 += b.1);
                }
            }
            batches += 1;
        }
        let mut report = sum.expect("non-empty dataset yields a batch");
        let scale = 1.0 / batches as f64;
        report.total *= scale;
        report.terms.iter_mut().for_each(|t| t.1 *= scale);
        let log = EpochLog { epoch: epoch + 1, lr, report };
        on_epoch(&log, store)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Counts of final predictions against labels, in eval mode.
pub fn evaluate_counts(model: &MggModel, store: &mut ParamStore, data: &Dataset, batch_size: usize) -> Result<MetricCounters> {
    let channels = model.config().backbone.input.channels;
    let mut counters = MetricCounters::new(data.n_attrs, DEFAULT_THRESHOLD);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk, channels, None)?;
        let probs = model.predict(store, &images)?;
        for (row, &i) in probs.iter().zip(chunk) {
            counters.accumulate_sample(row, &data.samples[i].labels);
        }
    }
    Ok(counters)
}

pub fn evaluate(model: &MggModel, store: &mut ParamStore, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    Ok(evaluate_counts(model, store, data, batch_size)?.finalize())
}
