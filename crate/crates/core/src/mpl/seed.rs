use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{dataset_wer, Recognizer, TopCheckpoints, TrainError};
use crate::data::{spec_augment, AugmentPolicy, Dataset, Utterance};
use crate::model::intermediate_loss;
use crate::nn::{AdamConfig, LrSchedule, OptimizerState, ParamSet};
use crate::rng::Rng;

/// Hyperparameters of supervised seed training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub augment: AugmentPolicy,
    /// Number of best dev-WER epoch checkpoints to average.
    pub average_top: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            schedule: LrSchedule::noam(2.0, 32, 400),
            adam: AdamConfig {
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-9,
            },
            clip_norm: 5.0,
            augment: AugmentPolicy::default(),
            average_top: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        if self.average_top == 0 {
            return Err(TrainError::Config("average_top must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEpoch {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub dev_wer: f64,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub params: ParamSet,
    pub history: Vec<SeedEpoch>,
    /// Epochs whose checkpoints were averaged into `params`.
    pub averaged_epochs: Vec<usize>,
}

/// Forward augmented copies of `batch`, add the mean intermediate loss
/// gradient into `params`, and return the mean loss.
pub(crate) fn supervised_batch(
    rec: &Recognizer<'_>,
    params: &mut ParamSet,
    batch: &[&Utterance],
    augment: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<f64, TrainError> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for u in batch {
        let text = u
            .transcript
            .as_deref()
            .ok_or_else(|| TrainError::Config(format!("utterance {} has no transcript", u.id)))?;
        let targets = rec.targets(text)?;
        let x = spec_augment(&u.features, augment, rng);
        let out = rec.model.forward(params, &x)?;
        let mut loss = intermediate_loss(&out, &targets).map_err(|e| {
            if e.is_infeasible() {
                TrainError::CorruptLabel {
                    id: u.id.clone(),
                    source: e,
                }
            } else {
                e.into()
            }
        })?;
        loss.scale(scale);
        total += loss.loss;
        rec.model.backward(&out, params, loss.logit_grads)?;
    }
    Ok(total)
}

/// Clip, take one Adam step and clear gradients.
pub(crate) fn apply_update(
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    lr: f64,
    clip_norm: f64,
) -> Result<(), TrainError> {
    params.clip_grad_norm(clip_norm);
    params.check_finite()?;
    opt.adam_step(params, lr)?;
    params.zero_grad();
    Ok(())
}

/// Minimise the intermediate loss on `labeled`, evaluate on `dev` after every
/// epoch, and return the average of the best `average_top` epoch checkpoints.
/// With zero epochs the initialization is returned unchanged.
pub fn train_seed(
    rec: &Recognizer<'_>,
    init: &ParamSet,
    labeled: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    augment_rng: &mut Rng,
    shuffle_rng: &mut Rng,
    threads: usize,
) -> Result<SeedRun, TrainError> {
    cfg.validate()?;
    rec.model.check_params(init)?;
    if labeled.is_empty() {
        return Err(TrainError::Config("labeled split is empty".into()));
    }
    let mut params = init.snapshot();
    let mut opt = OptimizerState::new(&params, cfg.adam);
    let mut top = TopCheckpoints::new(cfg.average_top);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let step = opt.step() + 1;
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &labeled.utterances[i]).collect();
            let loss = supervised_batch(rec, &mut params, &batch, &cfg.augment, augment_rng)
                .map_err(|e| e.at_step(step))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    detail: "supervised loss".into(),
                });
            }
            let lr = cfg.schedule.lr(step)?;
            apply_update(&mut params, &mut opt, lr, cfg.clip_norm).map_err(|e| e.at_step(step))?;
            loss_sum += loss;
            batches += 1;
        }
        let dev_wer = dataset_wer(rec, &params, dev, None, threads)?;
        top.offer(dev_wer, epoch, &params);
        history.push(SeedEpoch {
            epoch,
            step: opt.step(),
            loss: loss_sum / batches as f64,
            dev_wer,
        });
    }
    let params = top.average()?.unwrap_or(params);
    Ok(SeedRun {
        params,
        history,
        averaged_epochs: top.epochs(),
    })
}
