//! The `bp-shift` command line: one subcommand per pipeline stage, a JSON
//! config, a reproducibility manifest per run and a lock per output
//! directory.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{validate_config, ConfigError, RunConfig};
use crate::dataset::{
    balanced_sample, read_dataset, split_dataset, write_dataset, CohortPartition, DatasetError,
    DatasetSplit, Example, InputType, PairRef, PairSet, PreparedCohort,
};
use crate::evaluation::{evaluate, EvalError};
use crate::experiment::{
    bands_csv, content_hash, model_predictor, oracle_predictor, Cell, EvalReport, Experiment,
    ExperimentError, MatrixPlan, ReportMeta, SetMetrics, SummaryRow,
};
use crate::fiducials::{segment_features, FeatureVector};
use crate::io::{by_patient, ingest, read_ndjson, read_segments, segment_files, write_ndjson, RawSegment};
use crate::labeling::{label_all, BpType, ChangePair, LabelError};
use crate::models::{Arch, Model, Preset};
use crate::nn::params::{decode_checkpoint, write_atomic};
use crate::signal::SegmentRecord;
use crate::synth::{gen_cohort, SynthConfig, SynthPreset, GENERATOR_VERSION};
use crate::train::{train_within, TrainError};

pub const LOCK_FILE: &str = ".bp-shift.lock";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidArgument(m) => CliError::Usage(m),
            DatasetError::Label(l @ LabelError::InvalidThreshold(_)) => CliError::Usage(l.to_string()),
            e => runtime(e),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Dataset(d) => d.into(),
            ExperimentError::UnknownPatient(p) => CliError::Usage(format!("unknown patient {p}")),
            e => runtime(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        runtime(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "bp-shift", version, about = "Classify blood-pressure changes from paired PPG segments")]
pub struct Cli {
    /// JSON run configuration; absent fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every output; relative paths resolve here.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic PPG/ABP cohort.
    Synth(SynthArgs),
    /// Validate segments and derive pressure summaries.
    Ingest(IngestArgs),
    /// Per-segment sdPPG features as CSV.
    Features(FeaturesArgs),
    /// Label every segment pair of every patient.
    Label(LabelArgs),
    /// Balanced training pool written as a dataset file.
    Sample(SampleArgs),
    /// Train/validation split and k folds over a dataset.
    Split(SplitArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Accuracy across the threshold grid.
    Sweep(SweepArgs),
    /// Train with and without the initial BP input.
    Ablate(AblateArgs),
    /// Architecture × input × pressure grid, window lengths and ablation.
    Matrix(MatrixArgs),
    /// Predicted and true labels along one patient's recording.
    Bands(BandsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<SynthPreset>,
    /// Output directory for the per-patient segment files.
    #[arg(long, default_value = "segments")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Segment file or directory of `*.ndjson` files.
    #[arg(long, default_value = "segments")]
    pub input: PathBuf,
    #[arg(long, default_value = "ingested")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long, default_value = "ingested")]
    pub input: PathBuf,
    #[arg(long, default_value = "features.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, default_value = "ingested")]
    pub input: PathBuf,
    #[arg(long, default_value = "pairs.ndjson")]
    pub out: PathBuf,
    #[arg(long)]
    pub sbp_threshold: Option<f64>,
    #[arg(long)]
    pub dbp_threshold: Option<f64>,
    #[arg(long)]
    pub mbp_threshold: Option<f64>,
}

/// Options that pick one model cell; each overrides the config file.
#[derive(Debug, Args, Default, Clone)]
pub struct CellArgs {
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long, value_enum)]
    pub input_type: Option<InputType>,
    #[arg(long, value_enum)]
    pub bp_type: Option<BpType>,
    /// Threshold in mmHg for the selected pressure type.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Window length in seconds: 3, 5 or 7.
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long, conflicts_with = "no_initial_bp")]
    pub with_initial_bp: bool,
    #[arg(long)]
    pub no_initial_bp: bool,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    #[arg(long, default_value = "ingested")]
    pub input: PathBuf,
    #[arg(long, default_value = "pairs.ndjson")]
    pub pairs: PathBuf,
    /// Dataset stem: writes `<stem>.ndjson`, `<stem>.bin` and `<stem>.meta.json`.
    #[arg(long, default_value = "dataset")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, default_value = "dataset")]
    pub dataset: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "split.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    /// Segment directory used when no dataset is given.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Train on a dataset written by `sample` instead of the segments.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Split written by `split`; defaults to `split.json` beside the dataset.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Validate on this fold instead of the hold-out split.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "history.ndjson")]
    pub history: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Evaluate on a dataset file instead of the held-out cohorts.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Train once at the configured threshold and evaluate it everywhere.
    #[arg(long)]
    pub reuse_model: bool,
    /// Thresholds to visit (default: the pressure type's grid).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub archs: Option<Vec<Arch>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub inputs: Option<Vec<InputType>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub bp_types: Option<Vec<BpType>>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<f64>>,
    #[arg(long)]
    pub no_ablation: bool,
    #[arg(long, default_value = "matrix")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BandsArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Patient to export (default: the first Test-II patient).
    #[arg(long)]
    pub patient: Option<String>,
    /// Model to score with; without one the true labels are echoed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "bands.csv")]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Holds the output directory's lock file for the lifetime of a run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(runtime(format!(
                "{} exists: another run is writing to this directory (remove the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub hash: String,
}

/// Provenance record written beside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub generator_version: u32,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Manifests (file names) that produced any of this run's inputs.
    pub parents: Vec<String>,
    pub details: Value,
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

struct Ctx {
    out_dir: PathBuf,
    cfg: RunConfig,
    _lock: DirLock,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>, CliError> {
        let mut out = Vec::new();
        for p in paths {
            let files = if p.is_dir() { segment_files(p)? } else { vec![p.clone()] };
            for f in files {
                out.push(FileHash {
                    path: self.rel(&f),
                    hash: content_hash(&std::fs::read(&f)?),
                });
            }
        }
        Ok(out)
    }

    fn write_manifest(
        &self,
        command: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        details: Value,
    ) -> Result<(), CliError> {
        let inputs = self.hashes(inputs)?;
        let outputs = self.hashes(outputs)?;
        let own = manifest_name(command);
        let mut parents = Vec::new();
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.out_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        names.sort();
        for m in names {
            let name = m.file_name().unwrap().to_string_lossy().to_string();
            if name == own {
                continue;
            }
            let Ok(other) = serde_json::from_slice::<Manifest>(&std::fs::read(&m)?) else {
                continue;
            };
            if other.outputs.iter().any(|o| inputs.iter().any(|i| i == o)) {
                parents.push(name);
            }
        }
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            generator_version: GENERATOR_VERSION,
            config: self.cfg.clone(),
            inputs,
            outputs,
            parents,
            details,
        };
        write_json(&self.out_dir.join(own), &manifest)
    }

    fn default_input(&self, given: Option<&PathBuf>) -> PathBuf {
        match given {
            Some(p) => self.path(p),
            None => {
                let ingested = self.out_dir.join("ingested");
                if ingested.is_dir() {
                    ingested
                } else {
                    self.out_dir.join("segments")
                }
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(runtime)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => validate_config(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn apply_cell(cfg: &mut RunConfig, a: &CellArgs) -> Result<(), CliError> {
    if let Some(v) = a.arch {
        cfg.arch = v;
    }
    if let Some(v) = a.input_type {
        cfg.input_type = v;
    }
    if let Some(v) = a.bp_type {
        cfg.bp_type = v;
    }
    if let Some(v) = a.threshold {
        cfg.thresholds.set(cfg.bp_type, v);
    }
    if let Some(v) = a.seconds {
        cfg.seconds = v;
    }
    if a.with_initial_bp {
        cfg.include_initial_bp = true;
    }
    if a.no_initial_bp {
        cfg.include_initial_bp = false;
    }
    if let Some(v) = a.preset {
        cfg.preset = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.epochs.is_some() {
        cfg.epochs = a.epochs;
    }
    if let Some(v) = a.per_class {
        cfg.per_class = v;
    }
    cfg.validate("command line")?;
    Ok(())
}

/// Reads, validates and groups segments; returns the patients and the
/// number of dropped segments.
fn load_patients(input: &Path) -> Result<(Vec<(String, Vec<SegmentRecord>)>, usize), CliError> {
    let files = segment_files(input)
        .map_err(|e| CliError::Usage(format!("cannot read segments at {}: {e}", input.display())))?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no segment files under {}", input.display())));
    }
    let mut records = Vec::new();
    let mut dropped = 0;
    for f in &files {
        let raw = read_segments(f).map_err(runtime)?;
        let ing = ingest(&raw).map_err(runtime)?;
        dropped += ing.dropped.len();
        records.extend(ing.records);
    }
    Ok((by_patient(records), dropped))
}

fn progress(epoch: &crate::train::EpochRecord) {
    eprintln!(
        "epoch {:>4}  train loss {:.4} acc {:.3}  val loss {} acc {}{}",
        epoch.epoch,
        epoch.train_loss,
        epoch.train_accuracy,
        epoch.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
        epoch.val_accuracy.map_or("-".into(), |v| format!("{v:.3}")),
        if epoch.improved { "  *" } else { "" }
    );
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    let out_dir = cli.out_dir.clone();
    let lock = DirLock::acquire(&out_dir)?;
    match &cli.command {
        Command::Synth(a) => {
            if let Some(p) = a.preset {
                let n = cfg.synth.n_patients;
                let s = cfg.synth.segments_per_patient;
                cfg.synth = SynthConfig {
                    n_patients: n,
                    segments_per_patient: s,
                    ..SynthConfig::preset(p)
                };
            }
            if let Some(v) = a.patients {
                cfg.synth.n_patients = v;
            }
            if let Some(v) = a.segments {
                cfg.synth.segments_per_patient = v;
            }
            cfg.synth.seed = a.seed.unwrap_or(cfg.seed);
            cfg.seed = cfg.synth.seed;
            cfg.synth
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let ctx = Ctx { out_dir, cfg, _lock: lock };
            cmd_synth(&ctx, a)
        }
        Command::Ingest(a) => cmd_ingest(&Ctx { out_dir, cfg, _lock: lock }, a),
        Command::Features(a) => cmd_features(&Ctx { out_dir, cfg, _lock: lock }, a),
        Command::Label(a) => {
            for (t, v) in [
                (BpType::Sbp, a.sbp_threshold),
                (BpType::Dbp, a.dbp_threshold),
                (BpType::Mbp, a.mbp_threshold),
            ] {
                if let Some(v) = v {
                    cfg.thresholds.set(t, v);
                }
            }
            cfg.validate("command line")?;
            cmd_label(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Sample(a) => {
            apply_cell(&mut cfg, &a.cell)?;
            cmd_sample(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Split(a) => {
            if let Some(f) = a.folds {
                cfg.folds = f;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate("command line")?;
            cmd_split(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Train(a) => {
            apply_cell(&mut cfg, &a.cell)?;
            cmd_train(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Evaluate(a) => cmd_evaluate(&Ctx { out_dir, cfg, _lock: lock }, a),
        Command::Sweep(a) => {
            apply_cell(&mut cfg, &a.cell)?;
            cfg.reuse_model |= a.reuse_model;
            cmd_sweep(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Ablate(a) => {
            apply_cell(&mut cfg, &a.cell)?;
            cmd_ablate(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Matrix(a) => {
            apply_cell(&mut cfg, &a.cell)?;
            cmd_matrix(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
        Command::Bands(a) => {
            apply_cell(&mut cfg, &a.cell)?;
            cmd_bands(&Ctx { out_dir, cfg, _lock: lock }, a)
        }
    }
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<(), CliError> {
    let cohort = gen_cohort(&ctx.cfg.synth).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = ctx.path(&a.out);
    std::fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    for p in &cohort.truth.patients {
        let segs: Vec<RawSegment> = cohort
            .segments
            .iter()
            .filter(|s| s.patient_id == p.patient_id)
            .cloned()
            .collect();
        let path = dir.join(format!("{}.ndjson", p.patient_id));
        write_ndjson(&path, &segs)?;
        outputs.push(path);
    }
    let truth = ctx.out_dir.join("truth.json");
    write_json(&truth, &cohort.truth)?;
    outputs.push(truth);
    eprintln!(
        "wrote {} patients x {} segments to {}",
        ctx.cfg.synth.n_patients,
        ctx.cfg.synth.segments_per_patient,
        dir.display()
    );
    ctx.write_manifest("synth", &[], &outputs, json!({}))
}

fn cmd_ingest(ctx: &Ctx, a: &IngestArgs) -> Result<(), CliError> {
    let input = ctx.path(&a.input);
    let files = segment_files(&input)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", input.display())))?;
    let dir = ctx.path(&a.out);
    std::fs::create_dir_all(&dir)?;
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for f in &files {
        let raw = read_segments(f).map_err(runtime)?;
        let ing = ingest(&raw).map_err(|e| CliError::Usage(e.to_string()))?;
        records.extend(ing.records);
        dropped.extend(ing.dropped);
    }
    let mut outputs = Vec::new();
    for (pid, recs) in by_patient(records) {
        let rows: Vec<RawSegment> = recs
            .iter()
            .map(|r| RawSegment {
                patient_id: r.patient_id.clone(),
                index: r.index,
                fs: r.ppg.fs,
                ppg: r.ppg.samples.clone(),
                abp: None,
                sbp: Some(r.sbp),
                dbp: Some(r.dbp),
            })
            .collect();
        let path = dir.join(format!("{pid}.ndjson"));
        write_ndjson(&path, &rows)?;
        outputs.push(path);
    }
    let dropped: Vec<Value> = dropped
        .into_iter()
        .map(|(p, i, r)| json!({ "patient_id": p, "index": i, "reason": r }))
        .collect();
    eprintln!("ingested {} patients, dropped {} segments", outputs.len(), dropped.len());
    ctx.write_manifest("ingest", &[input], &outputs, json!({ "dropped": dropped }))
}

fn cmd_features(ctx: &Ctx, a: &FeaturesArgs) -> Result<(), CliError> {
    let input = ctx.path(&a.input);
    let (patients, _) = load_patients(&input)?;
    let mut csv = format!("patient_id,index,{}\n", FeatureVector::NAMES.join(","));
    let mut failed = Vec::new();
    for (_, recs) in &patients {
        for r in recs {
            match segment_features(&r.ppg) {
                Ok(f) => {
                    let v: Vec<String> = f.to_array().iter().map(|x| x.to_string()).collect();
                    csv.push_str(&format!("{},{},{}\n", r.patient_id, r.index, v.join(",")));
                }
                Err(e) => failed.push(json!({ "patient_id": r.patient_id, "index": r.index, "reason": e.to_string() })),
            }
        }
    }
    let out = ctx.path(&a.out);
    write_text(&out, &csv)?;
    ctx.write_manifest("features", &[input], &[out], json!({ "failed": failed }))
}

fn cmd_label(ctx: &Ctx, a: &LabelArgs) -> Result<(), CliError> {
    let input = ctx.path(&a.input);
    let (patients, _) = load_patients(&input)?;
    let mut pairs: Vec<ChangePair> = Vec::new();
    for (_, recs) in &patients {
        if recs.len() < 2 {
            continue;
        }
        pairs.extend(label_all(recs, &ctx.cfg.thresholds).map_err(|e| CliError::Usage(e.to_string()))?);
    }
    let out = ctx.path(&a.out);
    write_ndjson(&out, &pairs)?;
    eprintln!("labeled {} pairs", pairs.len());
    ctx.write_manifest("label", &[input], &[out], json!({ "pairs": pairs.len() }))
}

/// Cell and cohort assignment stored beside a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub cell: Cell,
    pub seed: u64,
    pub per_class: usize,
    pub partition: CohortPartition,
    pub dropped_pairs: usize,
}

fn stem_path(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_sample(ctx: &Ctx, a: &SampleArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let cell = Cell::from_config(cfg);
    let input = ctx.path(&a.input);
    let pairs_path = ctx.path(&a.pairs);
    let (patients, _) = load_patients(&input)?;
    let ids: Vec<String> = patients.iter().map(|p| p.0.clone()).collect();
    let partition = CohortPartition::new(&ids, cfg.n_test1_patients, cfg.n_test2_patients, cfg.seed)?;
    let cohort = PreparedCohort::new(patients.into_iter().map(|p| p.1).collect(), cfg.seconds);
    let labeled: Vec<ChangePair> = read_ndjson(&pairs_path)
        .map_err(|e| CliError::Usage(format!("cannot read pairs (run `label` first): {e}")))?;
    if let Some(p) = labeled.first() {
        let t = match cell.bp_type {
            BpType::Sbp => p.threshold_sbp,
            BpType::Dbp => p.threshold_dbp,
            BpType::Mbp => p.threshold_mbp,
        };
        if t != cell.threshold {
            return Err(CliError::Usage(format!(
                "pairs were labeled at {t} mmHg but the {} threshold is {}",
                cell.bp_type, cell.threshold
            )));
        }
    }
    let train: std::collections::BTreeSet<&String> = partition.train.iter().collect();
    let mut pool = Vec::new();
    let mut dropped = 0;
    for p in labeled.iter().filter(|p| train.contains(&p.patient_id)) {
        let Some(pi) = cohort.patient_index(&p.patient_id) else { continue };
        let pat = &cohort.patients[pi];
        let ok = [p.i, p.i + p.j]
            .iter()
            .all(|&k| pat.segment(k).is_some_and(|s| s.usable(cell.input_type)));
        if !ok {
            dropped += 1;
            continue;
        }
        pool.push(PairRef {
            patient: pi,
            i: p.i,
            j: p.j,
            delta: p.delta(cell.bp_type),
            label: p.label(cell.bp_type),
        });
    }
    let all = PairSet::new(&cohort, pool, cell.input_spec());
    let chosen = balanced_sample(&all.labels(), cfg.per_class, cfg.seed)?;
    let examples = all.subset(&chosen).examples()?;
    let stem = ctx.path(&a.out);
    write_dataset(&stem, &examples)?;
    let meta = DatasetMeta {
        cell,
        seed: cfg.seed,
        per_class: cfg.per_class,
        partition,
        dropped_pairs: dropped,
    };
    let meta_path = stem_path(&stem, ".meta.json");
    write_json(&meta_path, &meta)?;
    eprintln!("sampled {} examples ({} per class)", examples.len(), cfg.per_class);
    ctx.write_manifest(
        "sample",
        &[input, pairs_path],
        &[stem_path(&stem, ".ndjson"), stem_path(&stem, ".bin"), meta_path],
        json!({ "examples": examples.len(), "dropped_pairs": dropped }),
    )
}

fn cmd_split(ctx: &Ctx, a: &SplitArgs) -> Result<(), CliError> {
    let stem = ctx.path(&a.dataset);
    let examples = read_dataset(&stem)?;
    let ids: Vec<usize> = (0..examples.len()).collect();
    let split = split_dataset(&ids, ctx.cfg.val_fraction, ctx.cfg.folds, ctx.cfg.seed)?;
    let out = ctx.path(&a.out);
    write_json(&out, &split)?;
    ctx.write_manifest(
        "split",
        &[stem_path(&stem, ".ndjson"), stem_path(&stem, ".bin")],
        &[out],
        json!({ "train": split.train.len(), "val": split.val.len(), "folds": split.folds.len() }),
    )
}

fn read_meta(stem: &Path) -> Result<DatasetMeta, CliError> {
    let p = stem_path(stem, ".meta.json");
    let bytes = std::fs::read(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    serde_json::from_slice(&bytes).map_err(runtime)
}

fn pick(examples: &[Example], ids: &[usize]) -> Vec<Example> {
    ids.iter().map(|&k| examples[k].clone()).collect()
}

fn checkpoint_extra(cell: &Cell, cfg: &RunConfig) -> Value {
    json!({ "cell": cell, "seed": cfg.seed })
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (outcome, cell, inputs) = if let Some(ds) = &a.dataset {
        let stem = ctx.path(ds);
        let meta = read_meta(&stem)?;
        let examples = read_dataset(&stem)?;
        let split_path = a
            .split
            .as_ref()
            .map(|s| ctx.path(s))
            .unwrap_or_else(|| stem.with_file_name("split.json"));
        let split: DatasetSplit = match std::fs::read(&split_path) {
            Ok(b) => serde_json::from_slice(&b).map_err(runtime)?,
            Err(_) => {
                let ids: Vec<usize> = (0..examples.len()).collect();
                split_dataset(&ids, cfg.val_fraction, cfg.folds, cfg.seed)?
            }
        };
        let (tr, va) = match a.fold {
            Some(f) if f < split.folds.len() => split.fold(f),
            Some(f) => return Err(CliError::Usage(format!("fold {f} of {}", split.folds.len()))),
            None => (split.train.clone(), split.val.clone()),
        };
        let cell = Cell {
            arch: cfg.arch,
            ..meta.cell
        };
        let run_cfg = cell.apply(cfg);
        // the dataset fixes the input shape
        let mut spec = run_cfg.model_spec(125.0);
        if let Some(e) = examples.first() {
            spec.in_channels = e.channels;
            spec.length = e.length;
        }
        let mut model = Model::build(&spec, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
        let (trs, vas) = (pick(&examples, &tr), pick(&examples, &va));
        let budget = cfg.time_budget_s.map(std::time::Duration::from_secs_f64);
        let out = train_within(&mut model, &trs, Some(&vas), cfg.seed, budget, progress)?;
        let mut inputs = vec![stem_path(&stem, ".ndjson"), stem_path(&stem, ".bin")];
        if split_path.exists() {
            inputs.push(split_path);
        }
        (out, cell, inputs)
    } else {
        let input = ctx.default_input(a.input.as_ref());
        let (patients, _) = load_patients(&input)?;
        let cell = Cell::from_config(cfg);
        let mut exp = Experiment::new(cfg.clone(), patients)?;
        let out = exp.train_cell(&cell, a.fold, progress)?;
        (out, cell, vec![input])
    };
    let ckpt = ctx.path(&a.checkpoint);
    let bytes = outcome.model.to_checkpoint_with(checkpoint_extra(&cell, cfg));
    if let Some(d) = ckpt.parent() {
        std::fs::create_dir_all(d)?;
    }
    write_atomic(&ckpt, &bytes)?;
    let hist = ctx.path(&a.history);
    write_ndjson(&hist, &outcome.history)?;
    let best = &outcome.history[outcome.best_epoch];
    eprintln!(
        "best epoch {} val acc {}",
        outcome.best_epoch,
        best.val_accuracy.map_or("-".into(), |v| format!("{v:.3}"))
    );
    ctx.write_manifest(
        "train",
        &inputs,
        &[ckpt, hist],
        json!({
            "cell": cell,
            "best_epoch": outcome.best_epoch,
            "stopped_early": outcome.stopped_early,
            "out_of_time": outcome.out_of_time,
        }),
    )
}

fn load_checkpoint(path: &Path) -> Result<(Model, Cell, Vec<u8>), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let model = Model::from_checkpoint(&bytes).map_err(runtime)?;
    let (_, meta) = decode_checkpoint(&bytes).map_err(runtime)?;
    let cell: Cell = serde_json::from_value(meta["extra"]["cell"].clone())
        .map_err(|_| CliError::Usage(format!("{} does not record its cell", path.display())))?;
    Ok((model, cell, bytes))
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<(), CliError> {
    let ckpt = ctx.path(&a.checkpoint);
    let (model, cell, bytes) = load_checkpoint(&ckpt)?;
    let hash = content_hash(&bytes);
    let (mut report, input) = if let Some(ds) = &a.dataset {
        let stem = ctx.path(ds);
        let examples = read_dataset(&stem)?;
        let m = evaluate(&model, &examples)?;
        let report = EvalReport {
            meta: ReportMeta::new(&cell, ctx.cfg.seed, None),
            sets: vec![SetMetrics {
                name: "dataset".into(),
                n: examples.len(),
                metrics: m,
            }],
        };
        (report, stem_path(&stem, ".bin"))
    } else {
        let input = ctx.default_input(a.input.as_ref());
        let (patients, _) = load_patients(&input)?;
        let mut exp = Experiment::new(ctx.cfg.clone(), patients)?;
        (exp.evaluate_cell(&model, &cell)?, input)
    };
    report.meta.checkpoint_hash = Some(hash);
    let out = ctx.path(&a.out);
    write_json(&out, &report)?;
    for s in &report.sets {
        eprintln!("{}: accuracy {:.4} macro F1 {:.4} (n = {})", s.name, s.metrics.accuracy, s.metrics.macro_f1, s.n);
    }
    ctx.write_manifest("evaluate", &[ckpt, input], &[out], json!({}))
}

fn experiment(ctx: &Ctx, input: Option<&PathBuf>) -> Result<(Experiment, PathBuf), CliError> {
    let input = ctx.default_input(input);
    let (patients, _) = load_patients(&input)?;
    Ok((Experiment::new(ctx.cfg.clone(), patients)?, input))
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<(), CliError> {
    let (mut exp, input) = experiment(ctx, a.input.as_ref())?;
    let cell = Cell::from_config(&ctx.cfg);
    let grid = a.grid.clone().unwrap_or_else(|| cell.bp_type.grid());
    let report = exp.threshold_sweep(&cell, &grid, ctx.cfg.reuse_model, |p| {
        match (&p.report, &p.error) {
            (Some(r), _) => eprintln!(
                "threshold {:>4}: test1 {:.3} test2 {:.3} (always-stable {:.3})",
                p.threshold,
                r.set("test1").map_or(f64::NAN, |m| m.accuracy),
                r.set("test2").map_or(f64::NAN, |m| m.accuracy),
                p.baseline_accuracy
            ),
            (None, Some(e)) => eprintln!("threshold {:>4}: {e}", p.threshold),
            _ => {}
        }
    })?;
    let stem = ctx.path(&a.out);
    let (j, c) = (stem_path(&stem, ".json"), stem_path(&stem, ".csv"));
    write_json(&j, &report)?;
    write_text(&c, &report.to_csv())?;
    ctx.write_manifest("sweep", &[input], &[j, c], json!({ "grid": grid }))
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    crate::experiment::MatrixReport {
        reports: Vec::new(),
        summary: rows.to_vec(),
    }
    .summary_csv()
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> Result<(), CliError> {
    let (mut exp, input) = experiment(ctx, a.input.as_ref())?;
    let base = Cell::from_config(&ctx.cfg);
    let mut reports = Vec::new();
    for include_initial_bp in [true, false] {
        let cell = Cell { include_initial_bp, ..base };
        let (_, r) = exp.run_cell(&cell)?;
        eprintln!(
            "initial BP {include_initial_bp}: test1 {:.3} test2 {:.3}",
            r.set("test1").map_or(f64::NAN, |m| m.accuracy),
            r.set("test2").map_or(f64::NAN, |m| m.accuracy)
        );
        reports.push(r);
    }
    let rows: Vec<SummaryRow> = reports.iter().map(|r| SummaryRow::new("ablation", r)).collect();
    let stem = ctx.path(&a.out);
    let (j, c) = (stem_path(&stem, ".json"), stem_path(&stem, ".csv"));
    write_json(&j, &reports)?;
    write_text(&c, &summary_csv(&rows))?;
    ctx.write_manifest("ablate", &[input], &[j, c], json!({}))
}

fn cmd_matrix(ctx: &Ctx, a: &MatrixArgs) -> Result<(), CliError> {
    let (mut exp, input) = experiment(ctx, a.input.as_ref())?;
    let d = MatrixPlan::default();
    let plan = MatrixPlan {
        archs: a.archs.clone().unwrap_or(d.archs),
        inputs: a.inputs.clone().unwrap_or(d.inputs),
        bp_types: a.bp_types.clone().unwrap_or(d.bp_types),
        lengths: a.lengths.clone().unwrap_or(d.lengths),
        ablation: !a.no_ablation,
    };
    for &s in &plan.lengths {
        if !crate::config::LENGTHS.contains(&s) {
            return Err(CliError::Usage(format!("length {s} is not one of 3, 5, 7")));
        }
    }
    let report = exp.run_matrix(&plan, |section, r| {
        eprintln!(
            "{section}: {} {} {} {}s bp={} -> test1 {:.3} test2 {:.3}",
            r.meta.arch.name(),
            r.meta.input_type.name(),
            r.meta.bp_type.name(),
            r.meta.seconds,
            r.meta.include_initial_bp,
            r.set("test1").map_or(f64::NAN, |m| m.accuracy),
            r.set("test2").map_or(f64::NAN, |m| m.accuracy)
        )
    })?;
    let stem = ctx.path(&a.out);
    let (j, c) = (stem_path(&stem, ".json"), stem_path(&stem, "_summary.csv"));
    write_json(&j, &report)?;
    write_text(&c, &report.summary_csv())?;
    ctx.write_manifest("matrix", &[input], &[j, c], json!({ "plan": plan }))
}

fn cmd_bands(ctx: &Ctx, a: &BandsArgs) -> Result<(), CliError> {
    let (mut exp, input) = experiment(ctx, a.input.as_ref())?;
    let patient = match &a.patient {
        Some(p) => p.clone(),
        None => exp
            .partition
            .test2
            .first()
            .cloned()
            .ok_or_else(|| CliError::Usage("no Test-II patient to export".into()))?,
    };
    let mut inputs = vec![input];
    let rows = match &a.checkpoint {
        Some(c) => {
            let path = ctx.path(c);
            let (model, cell, _) = load_checkpoint(&path)?;
            inputs.push(path);
            exp.label_bands(&patient, &cell, model_predictor(&model))?
        }
        None => exp.label_bands(&patient, &Cell::from_config(&ctx.cfg), oracle_predictor)?,
    };
    let out = ctx.path(&a.out);
    write_text(&out, &bands_csv(&rows))?;
    ctx.write_manifest(
        "bands",
        &inputs,
        &[out],
        json!({ "patient": patient, "predictor": if a.checkpoint.is_some() { "model" } else { "truth" } }),
    )
}
