//! Experiment configuration and the end-to-end pipelines behind the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, io, Corpus, CorpusConfig, DataError, Dataset, Role, SplitCounts};
use crate::metrics::wer_recovery_rate;
use crate::model::{Model, ModelConfig, ModelError, ModelVariant};
use crate::mpl::{
    dataset_wer, run_semi_supervised, train_seed, MplConfig, MplVariant, Recognizer, RunReport, SeedRun, TrainConfig,
    TrainError,
};
use crate::nn::{checkpoint, NnError, ParamSet};
use crate::rng::{derive_seed, substream};
use crate::vocab::{VocabError, VocabHierarchy};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        ExperimentError::Train(e.into())
    }
}

impl From<NnError> for ExperimentError {
    fn from(e: NnError) -> Self {
        ExperimentError::Train(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSpec {
    /// Size of each vocabulary level, smallest first.
    pub sizes: Vec<usize>,
    /// Level used by every head of the single-level model variants.
    pub shared_level: usize,
    /// Per-head levels of the hierarchical variant; the deepest levels by
    /// default.
    pub hc_levels: Option<Vec<usize>>,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            sizes: vec![16, 28, 48],
            shared_level: 1,
            hc_levels: None,
        }
    }
}

/// Architecture shared by every variant in an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub ff_hidden: usize,
    /// Head layers of the multi-head variants; plain CTC keeps only the last.
    pub head_layers: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 48,
            ff_hidden: 96,
            head_layers: vec![2, 4, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSelection {
    pub seed_model: ModelVariant,
    pub method: MplVariant,
    /// Convert a plain CTC seed into a self-conditioned model before
    /// semi-supervised training.
    pub cross_init: bool,
}

impl Default for VariantSelection {
    fn default() -> Self {
        Self {
            seed_model: ModelVariant::ScCtc,
            method: MplVariant::InterMplLast,
            cross_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Global seed; every random stream is derived from it.
    pub seed: u64,
    pub threads: usize,
    pub output: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub splits: SplitCounts,
    pub vocab: VocabSpec,
    pub model: ModelSpec,
    pub seed_training: TrainConfig,
    pub oracle_training: TrainConfig,
    pub mpl: MplConfig,
    pub variants: VariantSelection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            output: None,
            corpus: CorpusConfig::default(),
            splits: SplitCounts::default(),
            vocab: VocabSpec::default(),
            model: ModelSpec::default(),
            seed_training: TrainConfig::default(),
            oracle_training: TrainConfig {
                epochs: 12,
                average_top: 3,
                ..TrainConfig::default()
            },
            mpl: MplConfig::default(),
            variants: VariantSelection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML. Errors name the offending line and field.
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |m: String| Err(ExperimentError::Config(m));
        self.corpus.validate()?;
        if self.vocab.shared_level >= self.vocab.sizes.len() {
            return cfg(format!(
                "vocab.shared_level {} is out of range for {} levels",
                self.vocab.shared_level,
                self.vocab.sizes.len()
            ));
        }
        match &self.vocab.hc_levels {
            Some(levels) => {
                if levels.iter().any(|&l| l >= self.vocab.sizes.len()) {
                    return cfg(format!("vocab.hc_levels {levels:?} names a missing level"));
                }
            }
            None if self.model.head_layers.len() > self.vocab.sizes.len() => {
                return cfg("hc-ctc needs one vocabulary level per head".into());
            }
            None => {}
        }
        self.seed_training.validate()?;
        self.oracle_training.validate()?;
        self.mpl.validate()?;
        for v in [ModelVariant::Ctc, ModelVariant::InterCtc, ModelVariant::ScCtc, ModelVariant::HcCtc] {
            ModelConfig::validate(&self.model_config_with_sizes(v, &self.vocab.sizes))?;
        }
        Ok(())
    }

    /// Corpus configuration with the data substream seed filled in.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: derive_seed(self.seed, "data"),
            ..self.corpus.clone()
        }
    }

    fn model_config_with_sizes(&self, variant: ModelVariant, sizes: &[usize]) -> ModelConfig {
        let head_layers = if variant == ModelVariant::Ctc {
            vec![self.model.layers]
        } else {
            self.model.head_layers.clone()
        };
        let n = head_layers.len();
        let head_levels: Vec<usize> = if variant == ModelVariant::HcCtc {
            match &self.vocab.hc_levels {
                Some(levels) => levels.clone(),
                None => (0..n).map(|h| h + sizes.len() - n.min(sizes.len())).collect(),
            }
        } else {
            vec![self.vocab.shared_level; n]
        };
        ModelConfig {
            layers: self.model.layers,
            hidden: self.model.hidden,
            ff_hidden: self.model.ff_hidden,
            feature_dim: self.corpus.feature_dim,
            head_vocab_sizes: head_levels.iter().map(|&l| sizes.get(l).copied().unwrap_or(0)).collect(),
            head_layers,
            variant,
            head_levels,
        }
    }

    pub fn model_config(&self, variant: ModelVariant, vocab: &VocabHierarchy) -> ModelConfig {
        self.model_config_with_sizes(variant, vocab.sizes())
    }
}

/// Generated corpus plus the vocabulary learned from its labeled split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: VocabHierarchy,
}

pub fn build_vocab(cfg: &ExperimentConfig, labeled: &Dataset) -> Result<VocabHierarchy, ExperimentError> {
    let text: Vec<String> = labeled.utterances.iter().filter_map(|u| u.transcript.clone()).collect();
    Ok(VocabHierarchy::build(cfg.corpus.alphabet()?, &text, &cfg.vocab.sizes)?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let corpus = generate_corpus(&cfg.corpus_config(), cfg.splits)?;
    let vocab = build_vocab(cfg, &corpus.labeled)?;
    Ok(Prepared { corpus, vocab })
}

pub const VOCAB_FILE: &str = "vocab.txt";

/// Write every split into its own subdirectory of `dir`, plus the
/// vocabulary file.
pub fn write_prepared(dir: &Path, prep: &Prepared) -> Result<(), ExperimentError> {
    for role in Role::ALL {
        let truth = (role == Role::Unlabeled).then_some(&prep.corpus.unlabeled_truth);
        io::write_dataset(&dir.join(role.name()), prep.corpus.split(role), truth)?;
    }
    prep.vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(())
}

/// Inverse of [`write_prepared`].
pub fn read_prepared(dir: &Path) -> Result<Prepared, ExperimentError> {
    let missing = |p: &Path| ExperimentError::MissingInput(p.display().to_string());
    for role in Role::ALL {
        let d = dir.join(role.name());
        if !d.join(io::MANIFEST).exists() || !d.join(io::FEATURES).exists() {
            return Err(missing(&d));
        }
    }
    let vocab_path = dir.join(VOCAB_FILE);
    if !vocab_path.exists() {
        return Err(missing(&vocab_path));
    }
    let unl_dir = dir.join(Role::Unlabeled.name());
    if !unl_dir.join(io::TRUTH).exists() {
        return Err(missing(&unl_dir.join(io::TRUTH)));
    }
    let corpus = Corpus {
        labeled: io::read_dataset(&dir.join(Role::Labeled.name()), Role::Labeled)?,
        unlabeled: io::read_dataset(&unl_dir, Role::Unlabeled)?,
        dev: io::read_dataset(&dir.join(Role::Dev.name()), Role::Dev)?,
        test: io::read_dataset(&dir.join(Role::Test.name()), Role::Test)?,
        unlabeled_truth: io::read_truth(&unl_dir)?,
    };
    Ok(Prepared {
        corpus,
        vocab: VocabHierarchy::load(&vocab_path)?,
    })
}

/// Seed model trained on the labeled split.
pub fn run_seed(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    variant: ModelVariant,
) -> Result<(Model, SeedRun), ExperimentError> {
    let model = Model::new(cfg.model_config(variant, &prep.vocab))?;
    let rec = Recognizer::new(&model, &prep.vocab)?;
    let tag = format!("seed/{variant}");
    let init = model.init_params(&mut substream(cfg.seed, &format!("init/{tag}")));
    let run = train_seed(
        &rec,
        &init,
        &prep.corpus.labeled,
        &prep.corpus.dev,
        &cfg.seed_training,
        &mut substream(cfg.seed, &format!("augment/{tag}")),
        &mut substream(cfg.seed, &format!("shuffle/{tag}")),
        cfg.threads,
    )?;
    Ok((model, run))
}

/// Model trained on the labeled split plus the unlabeled split with its true
/// transcripts.
pub fn run_oracle(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    variant: ModelVariant,
) -> Result<(Model, SeedRun), ExperimentError> {
    let model = Model::new(cfg.model_config(variant, &prep.vocab))?;
    let rec = Recognizer::new(&model, &prep.vocab)?;
    let revealed = prep.corpus.unlabeled_truth.reveal(&prep.corpus.unlabeled, Role::Labeled);
    let all = prep.corpus.labeled.merged(&revealed, Role::Labeled);
    let tag = format!("oracle/{variant}");
    let init = model.init_params(&mut substream(cfg.seed, &format!("init/{tag}")));
    let run = train_seed(
        &rec,
        &init,
        &all,
        &prep.corpus.dev,
        &cfg.oracle_training,
        &mut substream(cfg.seed, &format!("augment/{tag}")),
        &mut substream(cfg.seed, &format!("shuffle/{tag}")),
        cfg.threads,
    )?;
    Ok((model, run))
}

/// Model and parameters the semi-supervised run starts from. A plain CTC
/// seed is converted into a self-conditioned model when `cross_init` is set.
pub fn semi_supervised_start(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seed_model: &Model,
    seed_params: &ParamSet,
    method: MplVariant,
    cross_init: bool,
) -> Result<(Model, ParamSet), ExperimentError> {
    let single_head = seed_model.config().num_heads() == 1;
    if method.needs_intermediate_heads() && single_head && !cross_init {
        return Err(ExperimentError::Config(format!(
            "{method} cannot start from a {} seed without cross-initialization",
            seed_model.config().variant
        )));
    }
    if cross_init && single_head {
        let target = Model::new(cfg.model_config(ModelVariant::ScCtc, &prep.vocab))?;
        let params = target.cross_initialize(seed_params, &mut substream(cfg.seed, "init/cross"));
        Ok((target, params))
    } else {
        Ok((seed_model.clone(), seed_params.clone()))
    }
}

/// Semi-supervised run from a trained seed; the summary carries the test WER
/// of the returned parameters.
pub fn run_mpl(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seed_model: &Model,
    seed_params: &ParamSet,
    method: MplVariant,
    cross_init: bool,
) -> Result<(Model, ParamSet, RunReport), ExperimentError> {
    let (model, start) = semi_supervised_start(cfg, prep, seed_model, seed_params, method, cross_init)?;
    let rec = Recognizer::new(&model, &prep.vocab)?;
    let tag = format!("mpl/{}/{method}/{}", seed_model.config().variant, cross_init);
    let (params, mut report) = run_semi_supervised(
        &rec,
        &start,
        &prep.corpus.labeled,
        &prep.corpus.unlabeled,
        Some(&prep.corpus.unlabeled_truth),
        &prep.corpus.dev,
        method,
        &cfg.mpl,
        &mut substream(cfg.seed, &format!("augment/{tag}")),
        &mut substream(cfg.seed, &format!("shuffle/{tag}")),
        cfg.threads,
    )?;
    report.summary.test_wer = Some(dataset_wer(&rec, &params, &prep.corpus.test, None, cfg.threads)?);
    Ok((model, params, report))
}

pub fn test_wer(cfg: &ExperimentConfig, prep: &Prepared, model: &Model, params: &ParamSet) -> Result<f64, ExperimentError> {
    let rec = Recognizer::new(model, &prep.vocab)?;
    Ok(dataset_wer(&rec, params, &prep.corpus.test, None, cfg.threads)?)
}

pub fn save_checkpoint(path: &Path, model: &Model, params: &ParamSet) -> Result<(), ExperimentError> {
    checkpoint::save(path, &model.config().to_meta(), params)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamSet), ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::MissingInput(path.display().to_string()));
    }
    let (meta, params) = checkpoint::load(path)?;
    let model = Model::new(ModelConfig::from_meta(&meta)?)?;
    model.check_params(&params)?;
    Ok((model, params))
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed_model: ModelVariant,
    pub inter_loss: bool,
    pub method: MplVariant,
    pub cross_init: bool,
    pub seed_test_wer: f64,
    pub oracle_test_wer: f64,
    pub test_wer: f64,
    /// `None` when the seed is no worse than the oracle.
    pub wrr: Option<f64>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "seed_model,inter_loss,method,cross_init,seed_test_wer,oracle_test_wer,test_wer,wrr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            self.seed_model,
            if self.inter_loss { "with" } else { "without" },
            self.method,
            self.cross_init,
            self.seed_test_wer,
            self.oracle_test_wer,
            self.test_wer,
            self.wrr.map(|w| format!("{w:.3}")).unwrap_or_default()
        )
    }
}

/// The cells of the ablation matrix: `(seed model, inter loss, method, cross init)`.
pub fn ablation_cells() -> Vec<(ModelVariant, bool, MplVariant, bool)> {
    vec![
        (ModelVariant::Ctc, true, MplVariant::InterMplLast, true),
        (ModelVariant::Ctc, false, MplVariant::Mpl, false),
        (ModelVariant::ScCtc, true, MplVariant::InterMpl, false),
        (ModelVariant::ScCtc, false, MplVariant::Mpl, false),
        (ModelVariant::HcCtc, true, MplVariant::InterMpl, false),
        (ModelVariant::HcCtc, false, MplVariant::Mpl, false),
    ]
}

/// Run the full ablation matrix. Seeds and oracles are trained once per
/// seed architecture.
pub fn run_ablation(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<AblationRow>, ExperimentError> {
    let mut rows = Vec::new();
    for arch in [ModelVariant::Ctc, ModelVariant::ScCtc, ModelVariant::HcCtc] {
        let (seed_model, seed) = run_seed(cfg, prep, arch)?;
        let seed_wer = test_wer(cfg, prep, &seed_model, &seed.params)?;
        let (oracle_model, oracle) = run_oracle(cfg, prep, arch)?;
        let oracle_wer = test_wer(cfg, prep, &oracle_model, &oracle.params)?;
        for (a, inter_loss, method, cross_init) in ablation_cells() {
            if a != arch {
                continue;
            }
            let (_, _, report) = run_mpl(cfg, prep, &seed_model, &seed.params, method, cross_init)?;
            let wer = report.summary.test_wer.expect("run_mpl scores the test split");
            rows.push(AblationRow {
                seed_model: arch,
                inter_loss,
                method,
                cross_init,
                seed_test_wer: seed_wer,
                oracle_test_wer: oracle_wer,
                test_wer: wer,
                wrr: wer_recovery_rate(seed_wer, wer, oracle_wer).ok(),
            });
        }
    }
    Ok(rows)
}
