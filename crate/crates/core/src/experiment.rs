//! Experiment harness: cohort partitioning, per-cell training and
//! evaluation, the threshold sweep, label bands and the report matrix.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{
    balanced_sample, build_test_ii, candidate_pairs, kfold, patient_positions, split_train_val,
    CohortPartition, DatasetError, InputSpec, InputType, PairRef, PairSet, PreparedCohort,
};
use crate::evaluation::{metrics, run_model, EvalError, Metrics};
use crate::labeling::{BpType, ChangeLabel};
use crate::models::{Arch, Model, ModelError};
use crate::signal::SegmentRecord;
use crate::train::{train_within, EpochRecord, TrainError, TrainOutcome};

/// Seconds of signal per segment; band rows sit at `t = j · SEGMENT_SECONDS`.
pub const SEGMENT_SECONDS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("patient {patient_id} has {have} segments; at least 2 are needed")]
    TooFewSegments { patient_id: String, have: usize },
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Git-style content hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One configuration of the model grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arch: Arch,
    pub input_type: InputType,
    pub bp_type: BpType,
    pub threshold: f64,
    pub seconds: f64,
    pub include_initial_bp: bool,
}

impl Cell {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            arch: cfg.arch,
            input_type: cfg.input_type,
            bp_type: cfg.bp_type,
            threshold: cfg.threshold(),
            seconds: cfg.seconds,
            include_initial_bp: cfg.include_initial_bp,
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        InputSpec {
            input_type: self.input_type,
            bp_type: self.bp_type,
            include_initial_bp: self.include_initial_bp,
        }
    }

    /// The run configuration with this cell's choices applied.
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.arch = self.arch;
        c.input_type = self.input_type;
        c.bp_type = self.bp_type;
        c.thresholds.set(self.bp_type, self.threshold);
        c.seconds = self.seconds;
        c.include_initial_bp = self.include_initial_bp;
        c
    }
}

/// Everything a report needs to identify the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub arch: Arch,
    pub input_type: InputType,
    pub bp_type: BpType,
    pub threshold: f64,
    pub seconds: f64,
    pub include_initial_bp: bool,
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
}

impl ReportMeta {
    pub fn new(cell: &Cell, seed: u64, model: Option<&Model>) -> Self {
        Self {
            arch: cell.arch,
            input_type: cell.input_type,
            bp_type: cell.bp_type,
            threshold: cell.threshold,
            seconds: cell.seconds,
            include_initial_bp: cell.include_initial_bp,
            seed,
            checkpoint_hash: model.map(|m| content_hash(&m.to_checkpoint())),
        }
    }
}

/// Metrics of one named evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    pub n: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub sets: Vec<SetMetrics>,
}

impl EvalReport {
    pub fn set(&self, name: &str) -> Option<&Metrics> {
        self.sets.iter().find(|s| s.name == name).map(|s| &s.metrics)
    }
}

/// A cohort split at patient level, with prepared signals cached per
/// window length.
pub struct Experiment {
    pub config: RunConfig,
    pub patient_ids: Vec<String>,
    pub partition: CohortPartition,
    records: Vec<Vec<SegmentRecord>>,
    prepared: Vec<PreparedCohort>,
}

impl Experiment {
    /// `patients` as produced by [`crate::io::by_patient`].
    pub fn new(
        config: RunConfig,
        patients: Vec<(String, Vec<SegmentRecord>)>,
    ) -> Result<Self, ExperimentError> {
        let patient_ids: Vec<String> = patients.iter().map(|p| p.0.clone()).collect();
        let partition = CohortPartition::new(
            &patient_ids,
            config.n_test1_patients,
            config.n_test2_patients,
            config.seed,
        )?;
        partition.check_disjoint()?;
        Ok(Self {
            config,
            patient_ids,
            partition,
            records: patients.into_iter().map(|p| p.1).collect(),
            prepared: Vec::new(),
        })
    }

    /// Prepared cohort for a window length, built on first use.
    pub fn cohort(&mut self, seconds: f64) -> &PreparedCohort {
        let pos = match self.prepared.iter().position(|c| c.seconds == seconds) {
            Some(p) => p,
            None => {
                self.prepared
                    .push(PreparedCohort::new(self.records.clone(), seconds));
                self.prepared.len() - 1
            }
        };
        &self.prepared[pos]
    }

    pub fn records(&self) -> &[Vec<SegmentRecord>] {
        &self.records
    }

    fn positions(&self, cohort: &PreparedCohort, ids: &[String]) -> Vec<usize> {
        patient_positions(cohort, ids)
    }

    /// Balanced training pool, split into train and validation ids. With
    /// `fold`, the pool's k-fold partition supplies the validation ids.
    pub fn training_sets<'c>(
        &self,
        cohort: &'c PreparedCohort,
        cell: &Cell,
        fold: Option<usize>,
    ) -> Result<(PairSet<'c>, PairSet<'c>), ExperimentError> {
        let cfg = &self.config;
        let pos = self.positions(cohort, &self.partition.train);
        let (pairs, _) =
            candidate_pairs(cohort, &pos, cell.bp_type, cell.threshold, cell.input_type)?;
        let all = PairSet::new(cohort, pairs, cell.input_spec());
        let ids = balanced_sample(&all.labels(), cfg.per_class, cfg.seed)?;
        let (train, val) = match fold {
            None => split_train_val(&ids, cfg.val_fraction, cfg.seed)?,
            Some(f) => {
                let folds = kfold(&ids, cfg.folds, cfg.seed)?;
                if f >= folds.len() {
                    return Err(DatasetError::InvalidArgument(format!(
                        "fold {f} of {}",
                        folds.len()
                    ))
                    .into());
                }
                let val = folds[f].clone();
                let held: BTreeSet<usize> = val.iter().copied().collect();
                let train = ids.iter().copied().filter(|k| !held.contains(k)).collect();
                (train, val)
            }
        };
        Ok((all.subset(&train), all.subset(&val)))
    }

    /// Uniformly re-sampled Test-I set at the cell's threshold.
    pub fn test1_set<'c>(
        &self,
        cohort: &'c PreparedCohort,
        cell: &Cell,
    ) -> Result<PairSet<'c>, ExperimentError> {
        let pos = self.positions(cohort, &self.partition.test1);
        let (pairs, _) =
            candidate_pairs(cohort, &pos, cell.bp_type, cell.threshold, cell.input_type)?;
        let all = PairSet::new(cohort, pairs, cell.input_spec());
        let ids = balanced_sample(
            &all.labels(),
            self.config.test1_per_class,
            self.config.seed.wrapping_add(1),
        )?;
        Ok(all.subset(&ids))
    }

    /// Every pair of the Test-II patients, natural label balance.
    pub fn test2_set<'c>(
        &self,
        cohort: &'c PreparedCohort,
        cell: &Cell,
    ) -> Result<PairSet<'c>, ExperimentError> {
        let excluded: Vec<String> = self
            .partition
            .train
            .iter()
            .chain(&self.partition.test1)
            .cloned()
            .collect();
        let (pairs, _) = build_test_ii(
            cohort,
            &self.partition.test2,
            &excluded,
            cell.bp_type,
            cell.threshold,
            cell.input_type,
        )?;
        Ok(PairSet::new(cohort, pairs, cell.input_spec()))
    }

    /// Builds and trains the model of `cell`.
    pub fn train_cell(
        &mut self,
        cell: &Cell,
        fold: Option<usize>,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome, ExperimentError> {
        let cfg = cell.apply(&self.config);
        let seed = cfg.seed;
        self.cohort(cell.seconds);
        let cohort = self.cached(cell.seconds);
        let (train, val) = self.training_sets(cohort, cell, fold)?;
        let mut model = Model::build(&cfg.model_spec(cohort.fs), seed)?;
        let budget = cfg.time_budget_s.map(Duration::from_secs_f64);
        Ok(train_within(&mut model, &train, Some(&val), seed, budget, on_epoch)?)
    }

    fn cached(&self, seconds: f64) -> &PreparedCohort {
        self.prepared
            .iter()
            .find(|c| c.seconds == seconds)
            .expect("cohort prepared before use")
    }

    /// Test-I and Test-II metrics of `model` under `cell`'s labels.
    pub fn evaluate_cell(&mut self, model: &Model, cell: &Cell) -> Result<EvalReport, ExperimentError> {
        self.cohort(cell.seconds);
        let cohort = self.cached(cell.seconds);
        let mut sets = Vec::new();
        for (name, set) in [
            ("test1", self.test1_set(cohort, cell)?),
            ("test2", self.test2_set(cohort, cell)?),
        ] {
            let ev = run_model(model, &set)?;
            sets.push(SetMetrics {
                name: name.into(),
                n: set.pairs.len(),
                metrics: metrics(&ev.confusion)?,
            });
        }
        Ok(EvalReport {
            meta: ReportMeta::new(cell, self.config.seed, Some(model)),
            sets,
        })
    }

    /// Trains and evaluates one cell.
    pub fn run_cell(&mut self, cell: &Cell) -> Result<(TrainOutcome, EvalReport), ExperimentError> {
        let out = self.train_cell(cell, None, |_| {})?;
        let report = self.evaluate_cell(&out.model, cell)?;
        Ok((out, report))
    }

    /// Label histogram of the Test-II pairs at one threshold.
    pub fn test2_label_counts(&mut self, cell: &Cell) -> Result<[usize; 3], ExperimentError> {
        self.cohort(cell.seconds);
        let cohort = self.cached(cell.seconds);
        let set = self.test2_set(cohort, cell)?;
        Ok(label_counts(set.pairs.iter().map(|p| p.label)))
    }

    /// Retrains (or reuses one model) across `grid` and evaluates both test
    /// cohorts at every threshold.
    pub fn threshold_sweep(
        &mut self,
        cell: &Cell,
        grid: &[f64],
        reuse_model: bool,
        mut progress: impl FnMut(&SweepPoint),
    ) -> Result<SweepReport, ExperimentError> {
        let shared = if reuse_model {
            Some(self.train_cell(cell, None, |_| {})?.model)
        } else {
            None
        };
        let mut points = Vec::with_capacity(grid.len());
        for &threshold in grid {
            let c = Cell { threshold, ..*cell };
            let counts = self.test2_label_counts(&c)?;
            let total: usize = counts.iter().sum();
            let stable_fraction = counts[ChangeLabel::Stable.index()] as f64 / total.max(1) as f64;
            let mut point = SweepPoint {
                threshold,
                test2_counts: counts,
                stable_fraction,
                baseline_accuracy: stable_fraction,
                report: None,
                error: None,
            };
            let model = match &shared {
                Some(m) => Ok(m.clone()),
                None => self.train_cell(&c, None, |_| {}).map(|o| o.model),
            };
            match model.and_then(|m| self.evaluate_cell(&m, &c)) {
                Ok(r) => point.report = Some(r),
                Err(ExperimentError::Dataset(e @ DatasetError::InsufficientClassCount { .. })) => {
                    point.error = Some(e.to_string())
                }
                Err(e) => return Err(e),
            }
            progress(&point);
            points.push(point);
        }
        Ok(SweepReport {
            meta: ReportMeta::new(cell, self.config.seed, shared.as_ref()),
            reuse_model,
            points,
        })
    }

    /// Label bands of one patient with `i = 1` fixed. `predictor` gets the
    /// pair and returns a label, or `None` when the pair cannot be scored.
    pub fn label_bands(
        &mut self,
        patient_id: &str,
        cell: &Cell,
        mut predictor: impl FnMut(&PairSet<'_>) -> Vec<Option<ChangeLabel>>,
    ) -> Result<Vec<BandRow>, ExperimentError> {
        self.cohort(cell.seconds);
        let cohort = self.cached(cell.seconds);
        let p = cohort
            .patient_index(patient_id)
            .ok_or_else(|| ExperimentError::UnknownPatient(patient_id.into()))?;
        let pat = &cohort.patients[p];
        let n = pat.records.len();
        if n < 2 {
            return Err(ExperimentError::TooFewSegments {
                patient_id: patient_id.into(),
                have: n,
            });
        }
        let series: Vec<f64> = pat.records.iter().map(|r| cell.bp_type.of(r)).collect();
        let usable = |k: usize| pat.segment(k).is_some_and(|s| s.usable(cell.input_type));
        let pairs: Vec<PairRef> = (1..n)
            .filter(|&j| usable(1) && usable(1 + j))
            .map(|j| {
                let delta = series[j] - series[0];
                PairRef {
                    patient: p,
                    i: 1,
                    j,
                    delta,
                    label: crate::labeling::classify_change(delta, cell.threshold),
                }
            })
            .collect();
        let set = PairSet::new(cohort, pairs, cell.input_spec());
        let predicted = predictor(&set);
        let mut by_j = vec![None; n];
        for (pair, label) in set.pairs.iter().zip(predicted) {
            by_j[pair.j] = label;
        }
        Ok((1..n)
            .map(|j| {
                let delta = series[j] - series[0];
                BandRow {
                    t: j as f64 * SEGMENT_SECONDS,
                    j,
                    initial_bp: series[0],
                    reference_bp: series[j],
                    true_label: crate::labeling::classify_change(delta, cell.threshold),
                    predicted: by_j[j],
                }
            })
            .collect())
    }

    /// The report bundle: `archs × inputs × bp types` at each type's
    /// configured threshold, then the window-length study and the
    /// initial-BP ablation for the configured cell.
    pub fn run_matrix(
        &mut self,
        plan: &MatrixPlan,
        mut progress: impl FnMut(&str, &EvalReport),
    ) -> Result<MatrixReport, ExperimentError> {
        let base = Cell::from_config(&self.config);
        let mut sections: Vec<(&str, Vec<Cell>)> = Vec::new();
        let mut grid = Vec::new();
        for &arch in &plan.archs {
            for &input_type in &plan.inputs {
                for &bp_type in &plan.bp_types {
                    grid.push(Cell {
                        arch,
                        input_type,
                        bp_type,
                        threshold: self.config.thresholds.get(bp_type),
                        ..base
                    });
                }
            }
        }
        sections.push(("models", grid));
        sections.push((
            "lengths",
            plan.lengths.iter().map(|&seconds| Cell { seconds, ..base }).collect(),
        ));
        if plan.ablation {
            sections.push((
                "ablation",
                [true, false]
                    .iter()
                    .map(|&include_initial_bp| Cell {
                        include_initial_bp,
                        ..base
                    })
                    .collect(),
            ));
        }
        let mut bundle = MatrixReport::default();
        for (name, cells) in sections {
            for cell in cells {
                let (_, report) = self.run_cell(&cell)?;
                progress(name, &report);
                bundle.summary.push(SummaryRow::new(name, &report));
                bundle.reports.push(SectionReport {
                    section: name.into(),
                    report,
                });
            }
        }
        Ok(bundle)
    }
}

pub fn label_counts(labels: impl Iterator<Item = ChangeLabel>) -> [usize; 3] {
    let mut c = [0; 3];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

/// Eval-mode predictions of `model` for every pair of `set`.
pub fn model_predictor(model: &Model) -> impl FnMut(&PairSet<'_>) -> Vec<Option<ChangeLabel>> + '_ {
    move |set| {
        if set.pairs.is_empty() {
            return Vec::new();
        }
        match run_model(model, set) {
            Ok(ev) => ev.predictions.into_iter().map(Some).collect(),
            Err(_) => vec![None; set.pairs.len()],
        }
    }
}

/// Scores each pair by its true label (used to check band plumbing).
pub fn oracle_predictor(set: &PairSet<'_>) -> Vec<Option<ChangeLabel>> {
    set.pairs.iter().map(|p| Some(p.label)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    /// Test-II label histogram (Spike, Stable, Dip).
    pub test2_counts: [usize; 3],
    pub stable_fraction: f64,
    /// Test-II accuracy of always predicting Stable.
    pub baseline_accuracy: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub meta: ReportMeta,
    pub reuse_model: bool,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// CSV with one row per threshold.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "threshold_mmhg,stable_fraction,baseline_accuracy,test1_accuracy,test1_macro_f1,test2_accuracy,test2_macro_f1\n",
        );
        for p in &self.points {
            let get = |name: &str| p.report.as_ref().and_then(|r| r.set(name));
            let f = |m: Option<&Metrics>, acc: bool| {
                m.map(|m| format!("{}", if acc { m.accuracy } else { m.macro_f1 }))
                    .unwrap_or_default()
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.threshold,
                p.stable_fraction,
                p.baseline_accuracy,
                f(get("test1"), true),
                f(get("test1"), false),
                f(get("test2"), true),
                f(get("test2"), false),
            ));
        }
        s
    }
}

/// One row of a label-band export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub t: f64,
    pub j: usize,
    pub initial_bp: f64,
    pub reference_bp: f64,
    pub true_label: ChangeLabel,
    pub predicted: Option<ChangeLabel>,
}

fn label_name(l: ChangeLabel) -> &'static str {
    match l {
        ChangeLabel::Spike => "spike",
        ChangeLabel::Stable => "stable",
        ChangeLabel::Dip => "dip",
    }
}

pub fn bands_csv(rows: &[BandRow]) -> String {
    let mut s = String::from("time_s,j,initial_bp_mmhg,reference_bp_mmhg,true_label,predicted_label\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t,
            r.j,
            r.initial_bp,
            r.reference_bp,
            label_name(r.true_label),
            r.predicted.map(label_name).unwrap_or("")
        ));
    }
    s
}

/// Which cells a matrix run covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixPlan {
    pub archs: Vec<Arch>,
    pub inputs: Vec<InputType>,
    pub bp_types: Vec<BpType>,
    pub lengths: Vec<f64>,
    pub ablation: bool,
}

impl Default for MatrixPlan {
    fn default() -> Self {
        Self {
            archs: Arch::ALL.to_vec(),
            inputs: vec![InputType::PpgSdppgWaveform],
            bp_types: BpType::ALL.to_vec(),
            lengths: crate::config::LENGTHS.to_vec(),
            ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionReport {
    pub section: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub section: String,
    pub arch: Arch,
    pub input_type: InputType,
    pub bp_type: BpType,
    pub threshold: f64,
    pub seconds: f64,
    pub include_initial_bp: bool,
    pub test1_accuracy: f64,
    pub test1_macro_f1: f64,
    pub test2_accuracy: f64,
    pub test2_macro_f1: f64,
}

impl SummaryRow {
    pub fn new(section: &str, r: &EvalReport) -> Self {
        let pick = |name: &str| r.set(name).map(|m| (m.accuracy, m.macro_f1)).unwrap_or((f64::NAN, f64::NAN));
        let (a1, f1) = pick("test1");
        let (a2, f2) = pick("test2");
        Self {
            section: section.into(),
            arch: r.meta.arch,
            input_type: r.meta.input_type,
            bp_type: r.meta.bp_type,
            threshold: r.meta.threshold,
            seconds: r.meta.seconds,
            include_initial_bp: r.meta.include_initial_bp,
            test1_accuracy: a1,
            test1_macro_f1: f1,
            test2_accuracy: a2,
            test2_macro_f1: f2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub reports: Vec<SectionReport>,
    pub summary: Vec<SummaryRow>,
}

impl MatrixReport {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "section,arch,input,bp_type,threshold_mmhg,seconds,initial_bp,test1_accuracy,test1_macro_f1,test2_accuracy,test2_macro_f1\n",
        );
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.section,
                r.arch.name(),
                r.input_type.name(),
                r.bp_type.name(),
                r.threshold,
                r.seconds,
                r.include_initial_bp,
                r.test1_accuracy,
                r.test1_macro_f1,
                r.test2_accuracy,
                r.test2_macro_f1
            ));
        }
        s
    }
}
