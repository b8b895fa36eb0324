//! Command-line driver.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{DataError, Role};
use crate::experiment::{
    load_checkpoint, prepare, read_prepared, run_ablation, run_mpl, run_seed, save_checkpoint, test_wer,
    write_prepared, AblationRow, ExperimentConfig, ExperimentError, Prepared,
};
use crate::model::{ModelError, ModelVariant};
use crate::mpl::{evaluate, MplVariant, Recognizer, TrainError};
use crate::nn::NnError;
use crate::vocab::VocabError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OUTPUT_EXISTS: i32 = 3;
pub const EXIT_MISSING_INPUT: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "intermpl", version, about = "CTC seed training and momentum pseudo-labeling on a synthetic corpus")]
pub struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the global seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Dataset directory written by `gen-data`; regenerated from the config
    /// when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a supervised seed model on the labeled split.
    TrainSeed {
        #[command(flatten)]
        common: Common,
        /// Model variant; defaults to `variants.seed_model`.
        #[arg(long)]
        model: Option<ModelVariant>,
    },
    /// Semi-supervised training from a seed checkpoint.
    TrainMpl {
        #[command(flatten)]
        common: Common,
        /// Seed checkpoint.
        #[arg(long, alias = "checkpoint")]
        init: PathBuf,
        /// Defaults to `variants.method`.
        #[arg(long)]
        variant: Option<MplVariant>,
        /// Convert a plain CTC seed into a self-conditioned model first.
        #[arg(long)]
        cross_init: bool,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of labeled, unlabeled, dev, test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the with/without intermediate loss matrix over three seed models.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) => EXIT_CONFIG,
        ModelError::Nn(NnError::NonFinite(_)) => EXIT_NON_FINITE,
        ModelError::Nn(NnError::Config(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let code = match &e {
            ExperimentError::Config(_) => EXIT_CONFIG,
            ExperimentError::MissingInput(_) => EXIT_MISSING_INPUT,
            ExperimentError::Data(DataError::Config(_)) => EXIT_CONFIG,
            ExperimentError::Data(DataError::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
            ExperimentError::Vocab(VocabError::Config(_)) => EXIT_CONFIG,
            ExperimentError::Train(t) => match t {
                TrainError::Config(_) => EXIT_CONFIG,
                TrainError::NonFinite { .. } => EXIT_NON_FINITE,
                TrainError::Model(m) => model_code(m),
                _ => 1,
            },
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, e.to_string())
    }
}

/// Resolve the output directory, refuse a non-empty one without `--force`,
/// and write the effective configuration into it.
fn open_output(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::new(EXIT_CONFIG, "no output directory: pass --out or set `output`"))?;
    if out.exists() && fs::read_dir(&out)?.next().is_some() && !common.force {
        return Err(CliError::new(
            EXIT_OUTPUT_EXISTS,
            format!("output directory {} is not empty; pass --force to reuse it", out.display()),
        ));
    }
    fs::create_dir_all(&out)?;
    let mut effective = cfg.clone();
    effective.output = Some(out.clone());
    fs::write(out.join("config.toml"), effective.to_toml())?;
    Ok(out)
}

fn load_config(common: &Common, threads: Option<usize>) -> Result<ExperimentConfig, CliError> {
    if !common.config.exists() {
        return Err(CliError::new(
            EXIT_MISSING_INPUT,
            format!("config file {} not found", common.config.display()),
        ));
    }
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = threads {
        cfg.threads = t.max(1);
    }
    Ok(cfg)
}

fn load_data(common: &Common, cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    Ok(match &common.data {
        Some(dir) => read_prepared(dir)?,
        None => prepare(cfg)?,
    })
}

fn parse_role(s: &str) -> Result<Role, CliError> {
    Role::ALL
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown split {s:?}")))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_MISSING_INPUT, format!("{} not found", path.display())))
    }
}

/// Execute one command. Progress goes to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { common } => {
            let cfg = load_config(common, cli.threads)?;
            let out = open_output(common, &cfg)?;
            let prep = prepare(&cfg)?;
            write_prepared(&out, &prep)?;
            for role in Role::ALL {
                println!("{}: {} utterances", role.name(), prep.corpus.split(role).len());
            }
        }
        Command::TrainSeed { common, model } => {
            let cfg = load_config(common, cli.threads)?;
            let out = open_output(common, &cfg)?;
            let prep = load_data(common, &cfg)?;
            let variant = model.unwrap_or(cfg.variants.seed_model);
            let (m, run) = run_seed(&cfg, &prep, variant)?;
            save_checkpoint(&out.join("model.ckpt"), &m, &run.params)?;
            prep.vocab.save(&out.join("vocab.txt")).map_err(ExperimentError::from)?;
            let mut hist = String::new();
            for e in &run.history {
                hist.push_str(&serde_json::to_string(e).expect("serializable"));
                hist.push('\n');
            }
            fs::write(out.join("history.jsonl"), hist)?;
            let wer = test_wer(&cfg, &prep, &m, &run.params)?;
            println!("{variant} seed: test WER {:.2}% (averaged epochs {:?})", 100.0 * wer, run.averaged_epochs);
        }
        Command::TrainMpl {
            common,
            init,
            variant,
            cross_init,
        } => {
            let cfg = load_config(common, cli.threads)?;
            require(init)?;
            let out = open_output(common, &cfg)?;
            let prep = load_data(common, &cfg)?;
            let (seed_model, seed_params) = load_checkpoint(init)?;
            let method = variant.unwrap_or(cfg.variants.method);
            let cross = *cross_init || cfg.variants.cross_init;
            let (m, params, report) = run_mpl(&cfg, &prep, &seed_model, &seed_params, method, cross)?;
            save_checkpoint(&out.join("model.ckpt"), &m, &params)?;
            fs::write(out.join("report.jsonl"), report.to_json_lines())?;
            let s = &report.summary;
            println!(
                "{method} on {}: dev WER {:.2}%, test WER {:.2}%, skipped {}/{}",
                s.model_variant,
                100.0 * s.dev_wer,
                100.0 * s.test_wer.unwrap_or(f64::NAN),
                s.total_skipped,
                s.total_offered
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(common, cli.threads)?;
            let role = parse_role(split)?;
            require(checkpoint)?;
            let out = open_output(common, &cfg)?;
            let prep = load_data(common, &cfg)?;
            let (m, params) = load_checkpoint(checkpoint)?;
            let rec = Recognizer::new(&m, &prep.vocab).map_err(ExperimentError::from)?;
            let truth = (role == Role::Unlabeled).then_some(&prep.corpus.unlabeled_truth);
            let report = evaluate(&rec, &params, prep.corpus.split(role), truth, cfg.threads)
                .map_err(ExperimentError::from)?;
            fs::write(out.join(format!("eval-{}.jsonl", role.name())), report.to_json_lines())?;
            println!(
                "{}: WER {:.2}% over {} utterances",
                role.name(),
                100.0 * report.summary.wer(),
                report.summary.utterances
            );
        }
        Command::Ablate { common } => {
            let cfg = load_config(common, cli.threads)?;
            let out = open_output(common, &cfg)?;
            let prep = load_data(common, &cfg)?;
            let rows = run_ablation(&cfg, &prep)?;
            let mut csv = String::from(AblationRow::CSV_HEADER);
            csv.push('\n');
            for r in &rows {
                csv.push_str(&r.to_csv());
                csv.push('\n');
            }
            fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
