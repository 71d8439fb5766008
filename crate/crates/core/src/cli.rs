//! Command-line front end. The `nplda` binary only forwards to [`main`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use crate::baselines::{
    fit_gaussian_backend, train_dplda, DPLDAModel, DpldaBackend, DpldaConfig, GaussianBackend,
};
use crate::dataio::{
    decode_model, load_archive, load_model, load_scores, load_trials, save_model, write_archive,
    write_scores, write_text_archive, write_trials, EmbeddingArchive, Persist, ScoreRecord, Trial,
    TrialLabel, MODEL_MAGIC,
};
use crate::error::{Error, Result};
use crate::gplda::{derive_score_matrices, fit_gplda_em, GpldaBackend, GpldaConfig};
use crate::metrics::{CostParams, MetricReport, ScoreSet};
use crate::nplda::{forward, init_from_gplda, NPLDAParams, DEFAULT_ALPHA};
use crate::preprocess::PreprocessPipeline;
use crate::synth::{generate, SynthSpec};
use crate::trainer::{
    format_history, sample_trials, split_trials, train_nplda, LossKind, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "nplda",
    version,
    about = "PLDA and neural PLDA speaker verification back-ends"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding archive from a key-value spec file.
    GenSynth(GenSynthArgs),
    /// Sample labeled target and nontarget trials from an archive.
    SampleTrials(SampleTrialsArgs),
    /// Fit centering, LDA and length normalization on an archive.
    FitPreprocess(FitPreprocessArgs),
    /// Train a scoring back-end and save it as one model file.
    TrainBackend(TrainBackendArgs),
    /// Score a trial list with a trained back-end.
    Score(ScoreArgs),
    /// Report EER, minDCF and actDCF for a labeled score file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Key-value spec file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output archive.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the seed given in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the text format instead of binary.
    #[arg(long)]
    pub text: bool,
}

#[derive(Debug, Args)]
pub struct SampleTrialsArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Output trial list.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of target trials.
    #[arg(long)]
    pub targets: usize,
    /// Nontarget trials per target trial.
    #[arg(long, default_value_t = 10)]
    pub ratio: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitPreprocessArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Output pipeline model.
    #[arg(long)]
    pub out: PathBuf,
    /// LDA output dimension [default: min(170, d, speakers - 1)].
    #[arg(long)]
    pub lda_dim: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Gplda,
    Gb,
    Dplda,
    Nplda,
}

/// Training options. Every option except the paths and the back-end can
/// also be set in `--config` as `key = value` (dashes or underscores);
/// flags win over the file.
#[derive(Debug, Args)]
pub struct TrainBackendArgs {
    pub backend: BackendKind,
    /// Raw training archive.
    #[arg(long)]
    pub archive: PathBuf,
    /// Labeled training trials (required for gb, dplda and nplda).
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// Output model.
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-fitted pipeline; fitted on the archive when absent.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// Key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training history CSV [default: <out>.history.csv].
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Validation trials for nplda; a split of --trials otherwise.
    #[arg(long)]
    pub valid_trials: Option<PathBuf>,
    /// Fraction of --trials held out for validation [default: 0.1].
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    /// LDA output dimension when fitting the pipeline.
    #[arg(long)]
    pub lda_dim: Option<usize>,
    /// Speaker subspace rank [default: full].
    #[arg(long)]
    pub rank: Option<usize>,
    /// EM iterations [default: 10].
    #[arg(long)]
    pub em_iterations: Option<usize>,
    /// Average each speaker's records before EM [default: false].
    #[arg(long)]
    pub average_per_speaker: Option<bool>,
    /// Training epochs [default: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 8192].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// nplda loss: soft_dcf, bce or bce_regularized [default: soft_dcf].
    #[arg(long)]
    pub loss: Option<String>,
    /// Regularization weight [default: 1e-3 for dplda, 0 for nplda].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sigmoid warping factor of the soft DCF [default: 20].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Operating point beta [default: 99].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Epochs without validation-loss improvement before halving lr [default: 2].
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw archive holding every trial id.
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// Output score file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Effective prior ratio; overrides the cost flags.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_fa: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p_target: f64,
    /// Skip unlabeled lines instead of failing.
    #[arg(long)]
    pub ignore_unlabeled: bool,
}

/// Parses the process arguments, runs the command and maps errors to a
/// nonzero exit status.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&a),
        Command::SampleTrials(a) => cmd_sample_trials(&a),
        Command::FitPreprocess(a) => cmd_fit_preprocess(&a),
        Command::TrainBackend(a) => cmd_train_backend(&a).map(|_| ()),
        Command::Score(a) => cmd_score(&a),
        Command::Evaluate(a) => {
            let report = cmd_evaluate(&a)?;
            print!("{report}");
            Ok(())
        }
    }
}

pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let mut spec = SynthSpec::load(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let archive = generate(&spec)?;
    if args.text {
        write_text_archive(&archive, &args.out)
    } else {
        write_archive(&archive, &args.out)
    }
}

pub fn cmd_sample_trials(args: &SampleTrialsArgs) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    let trials = sample_trials(&archive, args.targets, args.ratio, args.seed)?;
    write_trials(&trials, &args.out)
}

pub fn cmd_fit_preprocess(args: &FitPreprocessArgs) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    save_model(&PreprocessPipeline::fit(&archive, args.lda_dim)?, &args.out)
}

/// Any trained back-end, recognized from the kind tag of a model file.
#[derive(Debug, Clone)]
pub enum Backend {
    Gplda(GpldaBackend),
    Gaussian(GaussianBackend),
    Dplda(DpldaBackend),
    Nplda(NPLDAParams),
}

impl Backend {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let kind = *bytes
            .get(MODEL_MAGIC.len() + 4)
            .ok_or_else(|| Error::Format("file too short for a model header".into()))?;
        match kind {
            GpldaBackend::KIND => decode_model(bytes).map(Backend::Gplda),
            GaussianBackend::KIND => decode_model(bytes).map(Backend::Gaussian),
            DpldaBackend::KIND => decode_model(bytes).map(Backend::Dplda),
            NPLDAParams::KIND => decode_model(bytes).map(Backend::Nplda),
            other => Err(Error::Format(format!(
                "model kind {other} is not a scoring back-end"
            ))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Backend::Gplda(m) => save_model(m, path),
            Backend::Gaussian(m) => save_model(m, path),
            Backend::Dplda(m) => save_model(m, path),
            Backend::Nplda(m) => save_model(m, path),
        }
    }

    /// Raw embedding dimension the back-end expects.
    pub fn input_dim(&self) -> usize {
        match self {
            Backend::Gplda(m) => m.pipeline.input_dim(),
            Backend::Gaussian(m) => m.pipeline.input_dim(),
            Backend::Dplda(m) => m.pipeline.input_dim(),
            Backend::Nplda(m) => m.input_dim(),
        }
    }

    pub fn score(&self, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
        match self {
            Backend::Gplda(m) => m.score(x_e, x_t),
            Backend::Gaussian(m) => m.score(x_e, x_t),
            Backend::Dplda(m) => m.score(x_e, x_t),
            Backend::Nplda(m) => forward(m, x_e, x_t),
        }
    }

    /// One record per trial, in input order.
    pub fn score_trials(
        &self,
        trials: &[Trial],
        archive: &EmbeddingArchive,
    ) -> Result<Vec<ScoreRecord>> {
        if archive.dimension() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "model expects dimension {} but archive has dimension {}",
                self.input_dim(),
                archive.dimension()
            )));
        }
        trials
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let lookup = |id: &str| {
                    archive
                        .get(id)
                        .map(|r| &r.vector)
                        .ok_or_else(|| Error::UnknownId {
                            line: i + 1,
                            id: id.to_string(),
                        })
                };
                Ok(ScoreRecord {
                    enroll_id: t.enroll_id.clone(),
                    test_id: t.test_id.clone(),
                    score: self.score(lookup(&t.enroll_id)?, lookup(&t.test_id)?)?,
                    label: (t.label != TrialLabel::Unlabeled).then_some(t.label),
                })
            })
            .collect()
    }
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let backend = Backend::load(&args.model)?;
    let archive = load_archive(&args.archive)?;
    let trials = load_trials(&args.trials, &archive)?;
    write_scores(&backend.score_trials(&trials, &archive)?, &args.out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport> {
    let cost = match args.beta {
        Some(beta) => CostParams::from_beta(beta)?,
        None => CostParams::new(args.c_miss, args.c_fa, args.p_target)?,
    };
    let records = load_scores(&args.scores)?;
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        match r.label.and_then(TrialLabel::as_binary) {
            Some(l) => {
                scores.push(r.score);
                labels.push(l);
            }
            None if args.ignore_unlabeled => {}
            None => {
                return Err(Error::InvalidArgument(format!(
                    "score line {} ({} {}) is unlabeled; pass --ignore-unlabeled to skip it",
                    i + 1,
                    r.enroll_id,
                    r.test_id
                )))
            }
        }
    }
    MetricReport::compute(&ScoreSet::new(scores, labels)?, &cost)
}

const CONFIG_KEYS: &[&str] = &[
    "valid_fraction",
    "lda_dim",
    "rank",
    "em_iterations",
    "average_per_speaker",
    "epochs",
    "batch_size",
    "lr",
    "loss",
    "lambda",
    "alpha",
    "beta",
    "patience",
    "seed",
];

/// `key = value` pairs; `#` starts a comment.
fn parse_config(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "line {}: unknown key {key:?}",
                n + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

struct Settings(HashMap<String, String>);

impl Settings {
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} = {s:?}"))),
            None => Ok(default),
        }
    }

    fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.0
            .get(key)
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("cannot parse {key} = {s:?}")))
            })
            .transpose()
    }
}

/// Trains the requested back-end, writes the model (and the history CSV
/// for iterative trainers) and returns it.
pub fn cmd_train_backend(args: &TrainBackendArgs) -> Result<Backend> {
    let settings = Settings(match &args.config {
        Some(path) => parse_config(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => HashMap::new(),
    });
    let seed = settings.pick(args.seed, "seed", 42u64)?;
    let archive = load_archive(&args.archive)?;
    let pipeline = match &args.pipeline {
        Some(path) => load_model::<PreprocessPipeline>(path)?,
        None => PreprocessPipeline::fit(&archive, settings.pick_opt(args.lda_dim, "lda_dim")?)?,
    };
    let processed = pipeline.apply_archive(&archive)?;
    let gplda_config = GpldaConfig {
        rank: settings.pick_opt(args.rank, "rank")?,
        iterations: settings.pick(args.em_iterations, "em_iterations", 10)?,
        average_per_speaker: settings.pick(
            args.average_per_speaker,
            "average_per_speaker",
            false,
        )?,
        ..GpldaConfig::default()
    };
    let load_train_trials = || -> Result<Vec<Trial>> {
        let path = args
            .trials
            .as_ref()
            .ok_or_else(|| Error::Config(format!("--trials is required for {:?}", args.backend)))?;
        load_trials(path, &archive)
    };
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", args.out.display())));
    let write_history =
        |text: String| fs::write(&history_path, text).map_err(|e| Error::io(&history_path, e));

    let backend = match args.backend {
        BackendKind::Gb => {
            let trials = load_train_trials()?;
            Backend::Gaussian(GaussianBackend::new(
                pipeline,
                fit_gaussian_backend(&trials, &processed)?,
            )?)
        }
        BackendKind::Gplda => {
            let fit = fit_gplda_em(&processed, &gplda_config)?;
            warn_all(&fit.warnings);
            let mut csv = String::from("iteration,log_likelihood\n");
            for (i, ll) in fit.log_likelihoods.iter().enumerate() {
                csv.push_str(&format!("{i},{ll:?}\n"));
            }
            write_history(csv)?;
            Backend::Gplda(GpldaBackend::new(pipeline, fit.model)?)
        }
        BackendKind::Dplda => {
            let trials = load_train_trials()?;
            let fit = fit_gplda_em(&processed, &gplda_config)?;
            warn_all(&fit.warnings);
            let init =
                DPLDAModel::from_score_matrices(&derive_score_matrices(&fit.model)?, &fit.model.mu);
            let defaults = DpldaConfig::default();
            let config = DpldaConfig {
                lambda: settings.pick(args.lambda, "lambda", defaults.lambda)?,
                epochs: settings.pick(args.epochs, "epochs", defaults.epochs)?,
                batch_size: settings.pick(args.batch_size, "batch_size", defaults.batch_size)?,
                lr: settings.pick(args.lr, "lr", defaults.lr)?,
                seed,
            };
            let trained = train_dplda(&trials, &processed, &init, &config)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in trained.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:?}\n"));
            }
            write_history(csv)?;
            Backend::Dplda(DpldaBackend::new(pipeline, trained.model)?)
        }
        BackendKind::Nplda => {
            let trials = load_train_trials()?;
            let (train, valid) = match &args.valid_trials {
                Some(path) => (trials, load_trials(path, &archive)?),
                None => split_trials(
                    &trials,
                    settings.pick(args.valid_fraction, "valid_fraction", 0.1)?,
                    seed,
                ),
            };
            let fit = fit_gplda_em(&processed, &gplda_config)?;
            warn_all(&fit.warnings);
            let defaults = TrainConfig::default();
            let beta = settings.pick(args.beta, "beta", 99.0)?;
            let loss: LossKind = settings
                .pick_opt(args.loss.clone(), "loss")?
                .map_or(Ok(defaults.loss), |s| s.parse())?;
            let config = TrainConfig {
                batch_size: settings.pick(args.batch_size, "batch_size", defaults.batch_size)?,
                lr: settings.pick(args.lr, "lr", defaults.lr)?,
                lr_halving_patience: settings.pick(
                    args.patience,
                    "patience",
                    defaults.lr_halving_patience,
                )?,
                max_epochs: settings.pick(args.epochs, "epochs", defaults.max_epochs)?,
                seed,
                loss,
                lambda: settings.pick(args.lambda, "lambda", defaults.lambda)?,
                alpha: settings.pick(args.alpha, "alpha", DEFAULT_ALPHA)?,
                cost: CostParams::from_beta(beta)?,
                ..defaults
            };
            let sm = derive_score_matrices(&fit.model)?;
            let init = init_from_gplda(&pipeline, &fit.model, &sm, &[beta], config.alpha)?;
            let outcome = train_nplda(init, &train, &valid, &archive, &config)?;
            write_history(format_history(&outcome.history))?;
            Backend::Nplda(outcome.params)
        }
    };
    backend.save(&args.out)?;
    Ok(backend)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_backend_and_flag_rejected() {
        assert!(Cli::try_parse_from([
            "nplda",
            "train-backend",
            "svm",
            "--archive",
            "a",
            "--out",
            "o"
        ])
        .is_err());
        assert!(
            Cli::try_parse_from(["nplda", "evaluate", "--scores", "s", "--frobnicate"]).is_err()
        );
        assert!(Cli::try_parse_from([
            "nplda",
            "train-backend",
            "nplda",
            "--archive",
            "a",
            "--out",
            "o"
        ])
        .is_ok());
    }

    #[test]
    fn config_file_parsing() {
        let map = parse_config("# comment\nepochs = 3\nbatch-size=16 # trailing\n").unwrap();
        assert_eq!(map["epochs"], "3");
        assert_eq!(map["batch_size"], "16");
        assert!(parse_config("learning_rate = 1").is_err());
        assert!(parse_config("epochs 3").is_err());
        let s = Settings(map);
        assert_eq!(s.pick(Some(7usize), "epochs", 20).unwrap(), 7);
        assert_eq!(s.pick(None, "epochs", 20usize).unwrap(), 3);
        assert_eq!(s.pick(None, "lr", 0.5f64).unwrap(), 0.5);
        assert!(s.pick::<f64>(None, "batch_size", 0.0).is_ok());
        let bad = Settings(HashMap::from([("lr".to_string(), "fast".to_string())]));
        assert!(bad.pick::<f64>(None, "lr", 0.1).is_err());
    }

    #[test]
    fn decode_rejects_non_backend_kinds() {
        let bytes = crate::dataio::encode_model(&PreprocessPipeline::identity(2));
        assert!(Backend::decode(&bytes).is_err());
        assert!(Backend::decode(b"NPLD").is_err());
    }
}
