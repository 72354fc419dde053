//! Batch commands: synthesise, train, score, evaluate and compare.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/                       synthetic corpus and manifest.csv
//! <mode>/<machine>/           model.ckpt, history.csv, scores.csv,
//!                             embeddings_{train,test}.csv, gaussian.json
//! <mode>/                     scores.csv, report.{csv,md}
//! compare/                    report.{csv,md}
//! ```
//!
//! Every directory that receives artifacts also gets `config.resolved.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{self, DatasetError, Manifest, Split};
use crate::metrics::{self, EvalReport, MetricsError, ReportFormat, ScoredClip};
use crate::model::{ModelError, SeparatorNet};
use crate::scoring::{self, ScoringError};
use crate::training::{self, History, TrainConfig, TrainError, TrainMode};

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Error, Debug)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("machine type {0:?} is not in the selected manifest entries")]
    UnknownMachine(String),
    #[error("machine type is ambiguous: choose one of {0:?}")]
    AmbiguousMachine(Vec<String>),
    #[error("no modes requested")]
    NoModes,
    #[error("no score files given")]
    NoScores,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.resolved.toml"), cfg.to_toml())
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn machine_dir(cfg: &ExperimentConfig, mode: TrainMode, machine: &str) -> PathBuf {
    cfg.out_dir.join(mode.as_str()).join(machine)
}

pub fn checkpoint_path(cfg: &ExperimentConfig, mode: TrainMode, machine: &str) -> PathBuf {
    machine_dir(cfg, mode, machine).join("model.ckpt")
}

/// Generates the synthetic corpus and returns the manifest path.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let spec = cfg
        .dataset
        .synth
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("dataset.synth is not set".into()))?;
    let dir = data_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    dataset::synth_generate(spec, &dir)?;
    let spec_echo = toml::to_string(spec).expect("spec serialises");
    write_file(&dir.join("synth.toml"), spec_echo)?;
    echo_config(cfg, &dir)?;
    Ok(dir.join("manifest.csv"))
}

/// Loads the configured manifest, generating the synthetic corpus when it is missing or stale.
pub fn ensure_manifest(cfg: &ExperimentConfig) -> Result<Manifest> {
    if let Some(path) = &cfg.dataset.manifest {
        return Ok(dataset::load_manifest(path)?);
    }
    let dir = data_dir(cfg);
    let spec = cfg.dataset.synth.as_ref().expect("resolved config has a dataset source");
    let fresh = fs::read_to_string(dir.join("synth.toml"))
        .ok()
        .is_some_and(|t| t == toml::to_string(spec).expect("spec serialises"));
    let path = if fresh { dir.join("manifest.csv") } else { cmd_synth(cfg)? };
    Ok(dataset::load_manifest(&path)?)
}

/// Selected machine types in manifest order.
pub fn selected_machines(cfg: &ExperimentConfig, manifest: &Manifest) -> Vec<String> {
    manifest
        .machine_types()
        .into_iter()
        .filter(|m| cfg.dataset.machines.is_empty() || cfg.dataset.machines.contains(m))
        .filter(|m| !cfg.dataset.exclude.contains(m))
        .collect()
}

fn pick_machine(cfg: &ExperimentConfig, manifest: &Manifest, machine: Option<&str>) -> Result<String> {
    let machines = selected_machines(cfg, manifest);
    match machine {
        Some(m) if machines.iter().any(|x| x == m) => Ok(m.to_string()),
        Some(m) => Err(RunError::UnknownMachine(m.to_string())),
        None if machines.len() == 1 => Ok(machines[0].clone()),
        None => Err(RunError::AmbiguousMachine(machines)),
    }
}

fn machine_index(manifest: &Manifest, machine: &str) -> u64 {
    manifest.machine_types().iter().position(|m| m == machine).unwrap_or(0) as u64
}

/// Seed shared by every mode for one machine.
fn machine_seed(cfg: &ExperimentConfig, manifest: &Manifest, machine: &str) -> u64 {
    cfg.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(machine_index(manifest, machine) + 1)
        // echoed configs are TOML, whose integers are signed 64-bit
        & i64::MAX as u64
}

pub fn train_config_for(cfg: &ExperimentConfig, manifest: &Manifest, machine: &str, mode: TrainMode) -> TrainConfig {
    let nontarget = if cfg.train.nontarget_classes.is_empty() {
        selected_machines(cfg, manifest)
            .into_iter()
            .filter(|m| m != machine)
            .collect()
    } else {
        cfg.train
            .nontarget_classes
            .iter()
            .filter(|m| *m != machine && !cfg.dataset.exclude.contains(m))
            .cloned()
            .collect()
    };
    TrainConfig {
        mode,
        target_class: machine.to_string(),
        nontarget_classes: nontarget,
        seed: machine_seed(cfg, manifest, machine),
        ..cfg.train.clone()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub machine: String,
    pub checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub history: History,
}

pub fn cmd_train(cfg: &ExperimentConfig, machine: Option<&str>, mode: TrainMode) -> Result<TrainOutcome> {
    let manifest = ensure_manifest(cfg)?;
    let machine = pick_machine(cfg, &manifest, machine)?;
    train_machine(cfg, &manifest, &machine, mode)
}

fn train_machine(cfg: &ExperimentConfig, manifest: &Manifest, machine: &str, mode: TrainMode) -> Result<TrainOutcome> {
    let tcfg = train_config_for(cfg, manifest, machine, mode);
    tcfg.validate()?;
    log::info!("training {machine} [{mode}] against {:?}", tcfg.nontarget_classes);
    let mut net = SeparatorNet::new(&cfg.model, &cfg.stft, tcfg.seed)?;
    let history = training::fit(&mut net, manifest, &tcfg, &cfg.mix)?;
    let dir = machine_dir(cfg, mode, machine);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let checkpoint = dir.join("model.ckpt");
    net.save_params(&checkpoint)?;
    let history_path = dir.join("history.csv");
    write_file(&history_path, history.to_csv())?;
    let mut echo = cfg.clone();
    echo.train = tcfg;
    echo_config(&echo, &dir)?;
    Ok(TrainOutcome {
        machine: machine.to_string(),
        checkpoint,
        history_path,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianSummary {
    pub machine_type: String,
    pub dim: usize,
    pub n_fit: usize,
    pub ridge: f64,
    pub mean_norm: f64,
    pub condition_number: f64,
    /// Mean squared Mahalanobis distance of the fitting vectors.
    pub train_mean_sq_distance: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub machine: String,
    pub scores_path: PathBuf,
    pub scores: Vec<ScoredClip>,
    pub train_scores: Vec<(String, f64)>,
    pub summary: GaussianSummary,
}

pub fn cmd_score(
    cfg: &ExperimentConfig,
    machine: Option<&str>,
    mode: TrainMode,
    checkpoint: Option<&Path>,
) -> Result<ScoreOutcome> {
    let manifest = ensure_manifest(cfg)?;
    let machine = pick_machine(cfg, &manifest, machine)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path(cfg, mode, &machine));
    score_machine(cfg, &manifest, &machine, mode, &ckpt)
}

fn score_machine(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    machine: &str,
    mode: TrainMode,
    checkpoint: &Path,
) -> Result<ScoreOutcome> {
    let net = SeparatorNet::load_params(checkpoint, Some(&cfg.model))?;
    if net.stft_config() != &cfg.stft {
        return Err(ModelError::ConfigMismatch {
            expected: format!("{:?}", cfg.stft),
            found: format!("{:?}", net.stft_config()),
        }
        .into());
    }
    let seg = cfg.scoring.segment_seconds;
    let train = manifest.read_all(manifest.select(machine, Split::Train))?;
    let test = manifest.read_all(manifest.select(machine, Split::Test))?;
    log::info!("scoring {machine} [{mode}]: {} train, {} test clips", train.len(), test.len());
    let train_set = scoring::extract_embeddings(&net, &train, machine, Split::Train, seg)?;
    let test_set = scoring::extract_embeddings(&net, &test, machine, Split::Test, seg)?;
    let model = scoring::fit_gaussian(train_set.vectors(), cfg.scoring.ridge_rel)?;
    let scores = scoring::score_set(&model, &test_set, &test, cfg.scoring.aggregation)?;
    let train_scores = scoring::score_set(&model, &train_set, &train, cfg.scoring.aggregation)?
        .into_iter()
        .map(|s| (s.clip_id, s.score))
        .collect();
    let sq: Vec<f64> = train_set
        .vectors()
        .map(|v| scoring::mahalanobis(&model, v).map(|d| d * d))
        .collect::<std::result::Result<_, _>>()?;
    let summary = GaussianSummary {
        machine_type: machine.to_string(),
        dim: model.dim(),
        n_fit: model.n_fit,
        ridge: model.ridge,
        mean_norm: model.mean.norm(),
        condition_number: model.condition_number(),
        train_mean_sq_distance: sq.iter().sum::<f64>() / sq.len() as f64,
    };
    let dir = machine_dir(cfg, mode, machine);
    let scores_path = dir.join("scores.csv");
    write_file(&scores_path, metrics::scores_to_csv(&scores))?;
    write_file(&dir.join("embeddings_train.csv"), train_set.to_csv())?;
    write_file(&dir.join("embeddings_test.csv"), test_set.to_csv())?;
    write_file(
        &dir.join("gaussian.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    echo_config(cfg, &dir)?;
    Ok(ScoreOutcome {
        machine: machine.to_string(),
        scores_path,
        scores,
        train_scores,
        summary,
    })
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    write_file(&dir.join("report.csv"), metrics::render_report(reports, ReportFormat::Csv))?;
    write_file(&dir.join("report.md"), metrics::render_report(reports, ReportFormat::Markdown))
}

/// Evaluates score files (one or more machines each) and writes `report.{csv,md}` into `out`.
pub fn cmd_eval(cfg: &ExperimentConfig, system: &str, score_files: &[PathBuf], out: &Path) -> Result<EvalReport> {
    if score_files.is_empty() {
        return Err(RunError::NoScores);
    }
    let mut scores = Vec::new();
    for f in score_files {
        scores.extend(metrics::read_scores_csv(f)?);
    }
    let report = metrics::evaluate(system, &scores, cfg.eval.max_fpr)?;
    write_reports(out, std::slice::from_ref(&report))?;
    echo_config(cfg, out)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: TrainMode,
    pub report: EvalReport,
    pub histories: Vec<(String, History)>,
}

/// Trains, scores and evaluates one mode on every selected machine.
pub fn run_mode(cfg: &ExperimentConfig, manifest: &Manifest, mode: TrainMode) -> Result<ModeRun> {
    let machines = selected_machines(cfg, manifest);
    let mut histories = Vec::new();
    let mut score_files = Vec::new();
    let mut all_scores = Vec::new();
    for m in &machines {
        let t = train_machine(cfg, manifest, m, mode)?;
        let s = score_machine(cfg, manifest, m, mode, &t.checkpoint)?;
        histories.push((m.clone(), t.history));
        score_files.push(s.scores_path);
        all_scores.extend(s.scores);
    }
    let dir = cfg.out_dir.join(mode.as_str());
    write_file(&dir.join("scores.csv"), metrics::scores_to_csv(&all_scores))?;
    let report = cmd_eval(cfg, mode.as_str(), &score_files, &dir)?;
    Ok(ModeRun {
        mode,
        report,
        histories,
    })
}

/// Runs each mode with shared data and seeds and writes a combined report.
pub fn cmd_compare(cfg: &ExperimentConfig, modes: &[TrainMode]) -> Result<Vec<ModeRun>> {
    if modes.is_empty() {
        return Err(RunError::NoModes);
    }
    let manifest = ensure_manifest(cfg)?;
    let runs = modes
        .iter()
        .map(|&mode| run_mode(cfg, &manifest, mode))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let dir = cfg.out_dir.join("compare");
    write_reports(&dir, &reports)?;
    echo_config(cfg, &dir)?;
    Ok(runs)
}
