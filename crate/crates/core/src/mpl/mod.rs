//! Supervised seed training and momentum pseudo-labeling.

mod seed;
mod semi;

pub use seed::{train_seed, SeedEpoch, SeedRun, TrainConfig};
pub use semi::{
    generate_pseudo_labels, online_step, run_semi_supervised, EpochRecord, Instrumentation, MplConfig, MplState,
    MplVariant, PseudoLabelSet, RunReport, StepStats, Summary,
};

use crate::ctc::best_path_decode;
use crate::data::{Dataset, SealedTruth};
use crate::metrics::{word_error_rate, EvaluationReport, MetricsError};
use crate::model::{Model, ModelError, ModelOutputs};
use crate::nn::{Matrix, NnError, ParamSet};
use crate::vocab::{VocabError, VocabHierarchy};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("labeled utterance {id} is unusable: {source}")]
    CorruptLabel {
        id: String,
        #[source]
        source: ModelError,
    },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(NnError::NonFinite(detail)) => TrainError::NonFinite { step: 0, detail },
            other => TrainError::Model(other),
        }
    }
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        ModelError::Nn(e).into()
    }
}

impl TrainError {
    /// Attach the optimizer step to a non-finite error.
    pub(crate) fn at_step(self, step: u64) -> Self {
        match self {
            TrainError::NonFinite { detail, .. } => TrainError::NonFinite { step, detail },
            other => other,
        }
    }
}

/// A model together with the vocabulary hierarchy its heads index.
#[derive(Clone, Copy, Debug)]
pub struct Recognizer<'a> {
    pub model: &'a Model,
    pub vocab: &'a VocabHierarchy,
}

impl<'a> Recognizer<'a> {
    pub fn new(model: &'a Model, vocab: &'a VocabHierarchy) -> Result<Self, TrainError> {
        let cfg = model.config();
        for (h, (&level, &size)) in cfg.head_levels.iter().zip(&cfg.head_vocab_sizes).enumerate() {
            let actual = vocab.size(level)?;
            if actual != size {
                return Err(TrainError::Config(format!(
                    "head {h} expects {size} tokens but vocabulary level {level} has {actual}"
                )));
            }
        }
        Ok(Self { model, vocab })
    }

    /// Encode `text` at every head's vocabulary level.
    pub fn targets(&self, text: &str) -> Result<Vec<Vec<usize>>, TrainError> {
        self.model
            .config()
            .head_levels
            .iter()
            .map(|&level| Ok(self.vocab.encode(text, level)?))
            .collect()
    }

    /// Best-path decode of the last head, rendered as a base string.
    pub fn hypothesis(&self, outputs: &ModelOutputs) -> Result<String, TrainError> {
        let last = outputs.last();
        Ok(self.vocab.decode(&best_path_decode(last), last.level())?)
    }

    pub fn transcribe(&self, params: &ParamSet, features: &Matrix) -> Result<String, TrainError> {
        let out = self.model.forward(params, features)?;
        self.hypothesis(&out)
    }

    pub fn words<'t>(&self, text: &'t str) -> Vec<&'t str> {
        self.vocab.alphabet().words(text)
    }
}

/// Score the last head's best-path output on `dataset`.
///
/// References come from the transcripts, or from `truth` for utterances
/// without one. Work is split across `threads` workers; the report order and
/// totals do not depend on the thread count.
pub fn evaluate(
    rec: &Recognizer<'_>,
    params: &ParamSet,
    dataset: &Dataset,
    truth: Option<&SealedTruth>,
    threads: usize,
) -> Result<EvaluationReport, TrainError> {
    let utts = &dataset.utterances;
    let threads = threads.clamp(1, utts.len().max(1));
    let chunk = utts.len().div_ceil(threads).max(1);
    let hyps: Vec<Result<String, TrainError>> = if threads == 1 {
        utts.iter().map(|u| rec.transcribe(params, &u.features)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = utts
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|u| rec.transcribe(params, &u.features)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut report = EvaluationReport::default();
    for (u, hyp) in utts.iter().zip(hyps) {
        let hyp = hyp?;
        let reference = match (&u.transcript, truth) {
            (Some(t), _) => t.as_str(),
            (None, Some(truth)) => truth
                .get(&u.id)
                .ok_or_else(|| TrainError::Config(format!("no reference for {}", u.id)))?,
            (None, None) => return Err(TrainError::Config(format!("no reference for {}", u.id))),
        };
        let r = word_error_rate(&rec.words(&hyp), &rec.words(reference))?;
        report.push(&u.id, &hyp, reference, &r);
    }
    Ok(report)
}

/// Corpus WER of the last head on `dataset`.
pub fn dataset_wer(
    rec: &Recognizer<'_>,
    params: &ParamSet,
    dataset: &Dataset,
    truth: Option<&SealedTruth>,
    threads: usize,
) -> Result<f64, TrainError> {
    Ok(evaluate(rec, params, dataset, truth, threads)?.summary.wer())
}

/// Stable digest of parameter values, for comparing runs bit for bit.
pub fn param_digest(params: &ParamSet) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params.iter() {
        for b in name.bytes().chain(t.values().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Keeps the `n` best `(score, epoch, params)` entries, lower score first,
/// ties going to the later epoch.
#[derive(Debug)]
pub(crate) struct TopCheckpoints {
    n: usize,
    entries: Vec<(f64, usize, ParamSet)>,
}

impl TopCheckpoints {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            n: n.max(1),
            entries: Vec::new(),
        }
    }

    pub(crate) fn offer(&mut self, score: f64, epoch: usize, params: &ParamSet) {
        self.entries.push((score, epoch, params.snapshot()));
        self.entries
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        self.entries.truncate(self.n);
    }

    pub(crate) fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.entries.iter().map(|x| x.1).collect();
        e.sort_unstable();
        e
    }

    pub(crate) fn average(&self) -> Result<Option<ParamSet>, NnError> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let sets: Vec<ParamSet> = self.entries.iter().map(|x| x.2.clone()).collect();
        crate::nn::average_params(&sets).map(Some)
    }
}
