use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::seed::{apply_update, supervised_batch};
use super::{dataset_wer, param_digest, Recognizer, TopCheckpoints, TrainError};
use crate::ctc::{best_path_decode, is_feasible};
use crate::data::{spec_augment, AugmentPolicy, Dataset, SealedTruth, Utterance};
use crate::metrics::{word_error_rate, CorpusWer};
use crate::model::weighted_head_loss;
use crate::nn::{AdamConfig, Matrix, OptimizerState, ParamSet};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MplVariant {
    /// Pseudo-labels from the last head supervise the last head only.
    #[serde(rename = "mpl")]
    Mpl,
    /// Every head is supervised by the offline model's own prediction at
    /// that head.
    #[serde(rename = "intermpl")]
    InterMpl,
    /// Every head is supervised by the offline model's final hypothesis.
    #[serde(rename = "intermpl-last")]
    InterMplLast,
}

impl MplVariant {
    pub fn name(self) -> &'static str {
        match self {
            MplVariant::Mpl => "mpl",
            MplVariant::InterMpl => "intermpl",
            MplVariant::InterMplLast => "intermpl-last",
        }
    }

    pub fn needs_intermediate_heads(self) -> bool {
        self != MplVariant::Mpl
    }
}

impl std::str::FromStr for MplVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mpl" => Ok(Self::Mpl),
            "intermpl" => Ok(Self::InterMpl),
            "intermpl-last" => Ok(Self::InterMplLast),
            other => Err(format!("unknown semi-supervised variant {other:?}")),
        }
    }
}

impl std::fmt::Display for MplVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MplConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate of the online model.
    pub lr: f64,
    pub adam: AdamConfig,
    /// Momentum of the offline model.
    pub alpha: f64,
    /// Probability of adding a labeled batch to a step. Defaults to the
    /// labeled share of all training utterances.
    pub mixing_ratio: Option<f64>,
    pub clip_norm: f64,
    pub augment: AugmentPolicy,
    pub average_top: usize,
}

impl Default for MplConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 3e-3,
            adam: AdamConfig::default(),
            alpha: 0.999,
            mixing_ratio: None,
            clip_norm: 5.0,
            augment: AugmentPolicy::default(),
            average_top: 3,
        }
    }
}

impl MplConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return err("alpha must lie strictly between 0 and 1");
        }
        if let Some(r) = self.mixing_ratio {
            if !(0.0..=1.0).contains(&r) {
                return err("mixing_ratio must lie in [0, 1]");
            }
        }
        if self.batch_size == 0 || self.average_top == 0 {
            return err("batch_size and average_top must be positive");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return err("lr and clip_norm must be positive");
        }
        Ok(())
    }
}

/// Counts of forward passes by purpose and input kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub label_forwards_clean: u64,
    pub label_forwards_augmented: u64,
    pub online_forwards_clean: u64,
    pub online_forwards_augmented: u64,
}

/// Online/offline parameter pair.
#[derive(Clone, Debug)]
pub struct MplState {
    online: ParamSet,
    offline: ParamSet,
    alpha: f64,
    step: u64,
    variant: MplVariant,
    mixing_ratio: f64,
    opt: OptimizerState,
    instrumentation: Instrumentation,
}

impl MplState {
    /// Both models start from `seed`.
    pub fn new(seed: &ParamSet, variant: MplVariant, alpha: f64, mixing_ratio: f64, adam: AdamConfig) -> Result<Self, TrainError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TrainError::Config("alpha must lie strictly between 0 and 1".into()));
        }
        if !(0.0..=1.0).contains(&mixing_ratio) {
            return Err(TrainError::Config("mixing_ratio must lie in [0, 1]".into()));
        }
        let online = seed.snapshot();
        Ok(Self {
            opt: OptimizerState::new(&online, adam),
            offline: online.clone(),
            online,
            alpha,
            step: 0,
            variant,
            mixing_ratio,
            instrumentation: Instrumentation::default(),
        })
    }

    pub fn online(&self) -> &ParamSet {
        &self.online
    }

    pub fn offline(&self) -> &ParamSet {
        &self.offline
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn variant(&self) -> MplVariant {
        self.variant
    }

    pub fn mixing_ratio(&self) -> f64 {
        self.mixing_ratio
    }

    pub fn instrumentation(&self) -> Instrumentation {
        self.instrumentation
    }

    /// `offline <- alpha * offline + (1 - alpha) * online`.
    fn momentum_update(&mut self) -> Result<(), TrainError> {
        self.offline.ema_update(&self.online, self.alpha)?;
        Ok(())
    }
}

/// Targets for one unlabeled utterance. `heads[h] = None` leaves head `h`
/// unsupervised.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub heads: Vec<Option<Vec<usize>>>,
    /// Final-head hypothesis as a base string.
    pub hypothesis: String,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.heads.iter().flatten().all(Vec::is_empty)
    }

    pub fn is_feasible(&self, frames: usize) -> bool {
        self.heads.iter().flatten().all(|t| is_feasible(frames, t))
    }
}

/// Decode the offline model on clean `features`.
pub fn generate_pseudo_labels(
    rec: &Recognizer<'_>,
    offline: &ParamSet,
    features: &Matrix,
    variant: MplVariant,
) -> Result<PseudoLabelSet, TrainError> {
    let out = rec.model.forward(offline, features)?;
    let posts = out.posteriorgrams();
    let last = posts.len() - 1;
    let final_ids = best_path_decode(&posts[last]);
    let hypothesis = rec.vocab.decode(&final_ids, posts[last].level())?;
    let heads = match variant {
        MplVariant::Mpl => (0..posts.len())
            .map(|h| (h == last).then(|| final_ids.clone()))
            .collect(),
        MplVariant::InterMpl => posts.iter().map(|p| Some(best_path_decode(p))).collect(),
        MplVariant::InterMplLast => posts
            .iter()
            .map(|p| {
                if p.level() == posts[last].level() {
                    Ok(Some(final_ids.clone()))
                } else {
                    Ok(Some(rec.vocab.encode(&hypothesis, p.level())?))
                }
            })
            .collect::<Result<_, TrainError>>()?,
    };
    Ok(PseudoLabelSet { heads, hypothesis })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub offered: usize,
    pub trained: usize,
    pub skipped: usize,
    /// Trained samples whose targets were all empty.
    pub empty: usize,
    pub unlabeled_loss: Option<f64>,
    pub labeled_loss: Option<f64>,
    /// Every offered pseudo-sample was skipped.
    pub all_skipped: bool,
    /// `(utterance id, final hypothesis)` for every offered sample.
    pub hypotheses: Vec<(String, String)>,
}

/// One online update followed by the momentum update of the offline model.
pub fn online_step(
    state: &mut MplState,
    rec: &Recognizer<'_>,
    unlabeled: &[&Utterance],
    labeled: &[&Utterance],
    augment: &AugmentPolicy,
    lr: f64,
    clip_norm: f64,
    rng: &mut Rng,
) -> Result<StepStats, TrainError> {
    if unlabeled.is_empty() && labeled.is_empty() {
        return Err(TrainError::Config("online step needs at least one utterance".into()));
    }
    let step = state.step + 1;
    let mut stats = StepStats {
        offered: unlabeled.len(),
        ..StepStats::default()
    };

    let mut kept = Vec::with_capacity(unlabeled.len());
    for u in unlabeled {
        let pl = generate_pseudo_labels(rec, &state.offline, &u.features, state.variant).map_err(|e| e.at_step(step))?;
        state.instrumentation.label_forwards_clean += 1;
        stats.hypotheses.push((u.id.clone(), pl.hypothesis.clone()));
        if !pl.is_feasible(u.frames()) {
            stats.skipped += 1;
            continue;
        }
        if pl.is_empty() {
            stats.empty += 1;
        }
        kept.push((u, pl));
    }
    stats.trained = kept.len();
    stats.all_skipped = !unlabeled.is_empty() && kept.is_empty();

    if !kept.is_empty() {
        let scale = 1.0 / kept.len() as f64;
        let mut total = 0.0;
        for (u, pl) in &kept {
            let x = spec_augment(&u.features, augment, rng);
            let out = rec.model.forward(&state.online, &x).map_err(|e| TrainError::from(e).at_step(step))?;
            state.instrumentation.online_forwards_augmented += 1;
            let targets: Vec<Option<&[usize]>> = pl.heads.iter().map(|t| t.as_deref()).collect();
            let mut loss = weighted_head_loss(&out, &targets)?;
            loss.scale(scale);
            total += loss.loss;
            rec.model.backward(&out, &mut state.online, loss.logit_grads)?;
        }
        stats.unlabeled_loss = Some(total);
    }
    if !labeled.is_empty() {
        let loss = supervised_batch(rec, &mut state.online, labeled, augment, rng).map_err(|e| e.at_step(step))?;
        state.instrumentation.online_forwards_augmented += labeled.len() as u64;
        stats.labeled_loss = Some(loss);
    }
    for l in [stats.unlabeled_loss, stats.labeled_loss].into_iter().flatten() {
        if !l.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: "online loss".into(),
            });
        }
    }
    apply_update(&mut state.online, &mut state.opt, lr, clip_norm).map_err(|e| e.at_step(step))?;
    state.momentum_update()?;
    state.step = step;
    Ok(stats)
}

/// One line of the run report per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub record: String,
    pub epoch: usize,
    pub step: u64,
    pub unlabeled_loss: Option<f64>,
    pub labeled_loss: Option<f64>,
    pub dev_wer: f64,
    pub pseudo_label_wer: Option<f64>,
    pub offered: usize,
    pub trained: usize,
    pub skipped: usize,
    pub empty: usize,
    pub all_skipped_steps: usize,
    pub labeled_batches: usize,
}

/// Final line of the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub record: String,
    pub variant: MplVariant,
    pub model_variant: String,
    pub epochs: usize,
    pub steps: u64,
    pub alpha: f64,
    pub mixing_ratio: f64,
    pub averaged_epochs: Vec<usize>,
    pub dev_wer: f64,
    pub test_wer: Option<f64>,
    pub total_offered: usize,
    pub total_skipped: usize,
    pub online_digest: String,
    pub offline_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: Summary,
}

impl RunReport {
    /// JSON lines: epoch records in order, then the summary.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("serializable"));
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&self.summary).expect("serializable"));
        s.push('\n');
        s
    }

    pub fn from_json_lines(text: &str) -> Result<Self, serde_json::Error> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, rest) = lines
            .split_last()
            .ok_or_else(|| <serde_json::Error as serde::de::Error>::custom("empty report"))?;
        Ok(Self {
            epochs: rest.iter().map(|l| serde_json::from_str(l)).collect::<Result<_, _>>()?,
            summary: serde_json::from_str(last)?,
        })
    }
}

/// Semi-supervised training from `seed`.
///
/// Returns the average of the best online checkpoints by dev WER and the
/// run report. `truth` is only used to score pseudo-labels.
#[allow(clippy::too_many_arguments)]
pub fn run_semi_supervised(
    rec: &Recognizer<'_>,
    seed: &ParamSet,
    labeled: &Dataset,
    unlabeled: &Dataset,
    truth: Option<&SealedTruth>,
    dev: &Dataset,
    variant: MplVariant,
    cfg: &MplConfig,
    augment_rng: &mut Rng,
    shuffle_rng: &mut Rng,
    threads: usize,
) -> Result<(ParamSet, RunReport), TrainError> {
    cfg.validate()?;
    rec.model.check_params(seed)?;
    if variant.needs_intermediate_heads() && rec.model.config().num_heads() < 2 {
        return Err(TrainError::Config(format!(
            "{variant} needs intermediate heads but the seed model ({}) has a single head",
            rec.model.config().variant
        )));
    }
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(TrainError::Config("no training data".into()));
    }
    let mixing = cfg
        .mixing_ratio
        .unwrap_or(labeled.len() as f64 / (labeled.len() + unlabeled.len()) as f64);
    if mixing > 0.0 && labeled.is_empty() {
        return Err(TrainError::Config("mixing_ratio is positive but the labeled split is empty".into()));
    }
    let mut state = MplState::new(seed, variant, cfg.alpha, mixing, cfg.adam)?;
    let mut top = TopCheckpoints::new(cfg.average_top);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut unl_order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut lab_order: Vec<usize> = (0..labeled.len()).collect();
    let mut lab_cursor = lab_order.len();
    let mut next_labeled = |rng: &mut Rng, n: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(lab_order.len()) {
            if lab_cursor == lab_order.len() {
                lab_order.shuffle(rng);
                lab_cursor = 0;
            }
            out.push(lab_order[lab_cursor]);
            lab_cursor += 1;
        }
        out
    };

    for epoch in 1..=cfg.epochs {
        let mut rec_epoch = EpochRecord {
            record: "epoch".into(),
            epoch,
            step: 0,
            unlabeled_loss: None,
            labeled_loss: None,
            dev_wer: 0.0,
            pseudo_label_wer: None,
            offered: 0,
            trained: 0,
            skipped: 0,
            empty: 0,
            all_skipped_steps: 0,
            labeled_batches: 0,
        };
        let (mut unl_sum, mut unl_n, mut lab_sum, mut lab_n) = (0.0, 0usize, 0.0, 0usize);
        let mut pl_wer = CorpusWer::default();

        let steps: Vec<(Vec<usize>, Vec<usize>)> = if unlabeled.is_empty() {
            let n_batches = labeled.len().div_ceil(cfg.batch_size);
            (0..n_batches)
                .map(|_| (Vec::new(), next_labeled(shuffle_rng, cfg.batch_size)))
                .collect()
        } else {
            unl_order.shuffle(shuffle_rng);
            unl_order
                .chunks(cfg.batch_size)
                .map(|c| {
                    let lab = if mixing > 0.0 && shuffle_rng.random_bool(mixing) {
                        next_labeled(shuffle_rng, cfg.batch_size)
                    } else {
                        Vec::new()
                    };
                    (c.to_vec(), lab)
                })
                .collect()
        };

        for (u_idx, l_idx) in steps {
            let ub: Vec<&Utterance> = u_idx.iter().map(|&i| &unlabeled.utterances[i]).collect();
            let lb: Vec<&Utterance> = l_idx.iter().map(|&i| &labeled.utterances[i]).collect();
            let s = online_step(&mut state, rec, &ub, &lb, &cfg.augment, cfg.lr, cfg.clip_norm, augment_rng)?;
            rec_epoch.offered += s.offered;
            rec_epoch.trained += s.trained;
            rec_epoch.skipped += s.skipped;
            rec_epoch.empty += s.empty;
            rec_epoch.all_skipped_steps += usize::from(s.all_skipped);
            rec_epoch.labeled_batches += usize::from(!lb.is_empty());
            if let Some(l) = s.unlabeled_loss {
                unl_sum += l;
                unl_n += 1;
            }
            if let Some(l) = s.labeled_loss {
                lab_sum += l;
                lab_n += 1;
            }
            if let Some(truth) = truth {
                for (id, hyp) in &s.hypotheses {
                    if let Some(reference) = truth.get(id) {
                        let r = word_error_rate(&rec.words(hyp), &rec.words(reference))?;
                        pl_wer.add(&r);
                    }
                }
            }
        }
        rec_epoch.step = state.step();
        rec_epoch.unlabeled_loss = (unl_n > 0).then(|| unl_sum / unl_n as f64);
        rec_epoch.labeled_loss = (lab_n > 0).then(|| lab_sum / lab_n as f64);
        rec_epoch.pseudo_label_wer = (pl_wer.utterances > 0).then(|| pl_wer.wer());
        rec_epoch.dev_wer = dataset_wer(rec, state.online(), dev, None, threads)?;
        top.offer(rec_epoch.dev_wer, epoch, state.online());
        records.push(rec_epoch);
    }

    let params = top.average()?.unwrap_or_else(|| state.online().snapshot());
    let summary = Summary {
        record: "summary".into(),
        variant,
        model_variant: rec.model.config().variant.to_string(),
        epochs: cfg.epochs,
        steps: state.step(),
        alpha: state.alpha(),
        mixing_ratio: mixing,
        averaged_epochs: top.epochs(),
        dev_wer: dataset_wer(rec, &params, dev, None, threads)?,
        test_wer: None,
        total_offered: records.iter().map(|r| r.offered).sum(),
        total_skipped: records.iter().map(|r| r.skipped).sum(),
        online_digest: param_digest(&params),
        offline_digest: param_digest(state.offline()),
    };
    Ok((
        params,
        RunReport {
            epochs: records,
            summary,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamTensor;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", ParamTensor::from_values(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn ema_half_way_and_fixed_point() {
        let mut s = MplState::new(&scalar(1.0), MplVariant::Mpl, 0.5, 0.0, AdamConfig::default()).unwrap();
        s.online = scalar(0.0);
        s.momentum_update().unwrap();
        assert_eq!(s.offline().tensors()[0].values(), &[0.5]);

        let mut s = MplState::new(&scalar(0.3), MplVariant::Mpl, 0.7, 0.0, AdamConfig::default()).unwrap();
        s.momentum_update().unwrap();
        assert_eq!(s.offline(), &scalar(0.3));
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        for a in [0.0, 1.0, -0.1, 1.5] {
            assert!(MplState::new(&scalar(0.0), MplVariant::Mpl, a, 0.0, AdamConfig::default()).is_err());
        }
    }

    proptest! {
        #[test]
        fn ema_matches_closed_form(alpha in 0.01f64..0.999, n in 1usize..200, phi0 in -3.0f64..3.0, xi in -3.0f64..3.0) {
            let mut s = MplState::new(&scalar(phi0), MplVariant::Mpl, alpha, 0.0, AdamConfig::default()).unwrap();
            s.online = scalar(xi);
            for _ in 0..n {
                s.momentum_update().unwrap();
            }
            let an = alpha.powi(n as i32);
            let expected = an * phi0 + (1.0 - an) * xi;
            prop_assert!((s.offline().tensors()[0].values()[0] - expected).abs() < 1e-12);
        }
    }
}
