//! Mini-batch training with early stopping on development-set QWK.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{ExampleSource, TrainExample};
use super::{ModelKind, ModelSpec, ScoreModel, StatsNorm};
use crate::error::{Error, Result};
use crate::evaluation::{quadratic_weighted_kappa, Learner};
use crate::hypergen::HyperParams;
use crate::layers::Dropout;
use crate::optim::{lr_at, OptimConfig, OptimState};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_qwk: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Dev QWK did not improve for `patience` epochs.
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_qwk: f64,
    pub stop_reason: StopReason,
    /// Batches that had a single distinct label and used cross-entropy.
    pub cce_fallback_batches: usize,
}

fn fetch<'a>(data: &'a dyn ExampleSource, idx: &[usize]) -> Result<Vec<&'a TrainExample>> {
    idx.iter().map(|&i| data.example(i)).collect()
}

/// Trains `model` on `train_idx`, early-stopping on `dev_idx`, and returns
/// the snapshot with the best dev QWK. Only the given indices are read.
pub fn train(
    mut model: ScoreModel,
    data: &dyn ExampleSource,
    train_idx: &[usize],
    dev_idx: &[usize],
) -> Result<(ScoreModel, TrainReport)> {
    let hp = model.spec.hp.clone();
    hp.validate()?;
    let train_set = fetch(data, train_idx)?;
    let dev_set = fetch(data, dev_idx)?;
    if train_set.len() < 2 || dev_set.is_empty() {
        return Err(Error::DegenerateFold(alloc::format!(
            "{} training and {} development examples",
            train_set.len(),
            dev_set.len()
        )));
    }
    if train_set.iter().all(|e| e.label == train_set[0].label) {
        return Err(Error::DegenerateFold("training split contains a single class".into()));
    }
    let stats: Vec<_> = train_set.iter().map(|e| e.input.stats).collect();
    model.stats_norm = StatsNorm::fit(&stats);

    let mut opt = OptimState::new(OptimConfig {
        kind: hp.optimizer,
        alpha: hp.learning_rate,
        ..OptimConfig::default()
    });
    let schedule = hp.schedule();
    let mut shuffle_rng = seeded(derive_seed(hp.seed, 0x5EED));
    let dev_inputs: Vec<_> = dev_set.iter().map(|e| &e.input).collect();
    let dev_truth: Vec<i64> = dev_set.iter().map(|e| e.score).collect();

    let mut logs = Vec::with_capacity(hp.epochs);
    let mut best = (0usize, f64::NEG_INFINITY, model.params.clone());
    let mut wait = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut fallbacks = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut batches: Vec<&[usize]> = order.chunks(hp.batch_size).collect();
        // never leave a single-essay batch at the end
        if batches.len() > 1 && batches[batches.len() - 1].len() == 1 {
            batches.pop();
            let n = batches.len();
            let start = (n - 1) * hp.batch_size;
            batches[n - 1] = &order[start..];
        }
        let mut loss_sum = 0.0;
        let mut lr = hp.learning_rate;
        for (b, chunk) in batches.iter().enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut dropout = Dropout::new(hp.dropout, derive_seed(hp.seed, ((epoch as u64) << 32) | b as u64));
            let (g, nodes) = model.loss_graph(&batch, Some(&mut dropout))?;
            if !nodes.used_kappa && hp.class_loss == crate::hypergen::ClassLossKind::OrdinalKappa {
                fallbacks += 1;
            }
            let bp = g.backprop(&model.bindings(), nodes.total)?;
            lr = match schedule {
                Some(s) => lr_at(s, opt.t + 1)?,
                None => hp.learning_rate,
            };
            opt.step_with_lr(&mut model.params, &bp.gradients, lr)?;
            loss_sum += bp.loss;
        }
        let train_loss = loss_sum / batches.len() as f64;

        let preds = model.predict_batch(&dev_inputs)?;
        let pred_scores: Vec<i64> = preds.iter().map(|p| p.score).collect();
        let dev_qwk = quadratic_weighted_kappa(&dev_truth, &pred_scores, model.spec.score_min, model.spec.score_max)?;
        let (g, nodes) = model.loss_graph(&dev_set, None)?;
        let dev_loss = g.evaluate(&model.bindings())?.value(nodes.total).item();
        logs.push(EpochLog {
            epoch,
            train_loss,
            dev_loss,
            dev_qwk,
            learning_rate: lr,
        });
        if dev_qwk > best.1 {
            best = (epoch, dev_qwk, model.params.clone());
            wait = 0;
        } else {
            wait += 1;
            if wait >= hp.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let epochs_run = logs.len();
    model.params = best.2;
    model.provenance.trained = true;
    model.provenance.seed = hp.seed;
    model.provenance.epochs_run = epochs_run;
    model.provenance.best_epoch = best.0;
    model.provenance.best_dev_qwk = best.1;
    Ok((
        model,
        TrainReport {
            epochs: logs,
            epochs_run,
            best_epoch: best.0,
            best_dev_qwk: best.1,
            stop_reason,
            cce_fallback_batches: fallbacks,
        },
    ))
}

/// Builds and trains one neural scorer per fold.
#[derive(Clone, Debug)]
pub struct NeuralLearner {
    pub kind: ModelKind,
    pub hp: HyperParams,
    pub input_dim: usize,
    pub score_min: i64,
    pub score_max: i64,
    pub reports: Vec<TrainReport>,
}

impl NeuralLearner {
    pub fn new(kind: ModelKind, hp: HyperParams, input_dim: usize, score_min: i64, score_max: i64) -> Self {
        Self {
            kind,
            hp,
            input_dim,
            score_min,
            score_max,
            reports: Vec::new(),
        }
    }
}

impl Learner for NeuralLearner {
    type Model = ScoreModel;

    fn fit(&mut self, data: &dyn ExampleSource, train_idx: &[usize], dev_idx: &[usize], seed: u64) -> Result<ScoreModel> {
        let mut hp = self.hp.clone();
        hp.seed = seed;
        let spec = ModelSpec::new(self.kind, hp, self.input_dim, self.score_min, self.score_max);
        let model = ScoreModel::build(spec, derive_seed(seed, 0xB017))?;
        let (model, report) = train(model, data, train_idx, dev_idx)?;
        self.reports.push(report);
        Ok(model)
    }
}
