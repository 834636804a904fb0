//! Model inputs from labeled segment pairs: per-segment preparation,
//! example assembly, balanced sampling, splits and the on-disk dataset
//! format.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fiducials::{self, FiducialError};
use crate::labeling::{classify_change, enumerate_pairs, BpType, ChangeLabel, LabelError};
use crate::signal::{
    self, first_foot, min_max_normalize, second_derivative, truncate_from, SegmentRecord,
    SignalError,
};

/// Initial BP enters the model as `BP_i / BP_SCALE`.
pub const BP_SCALE: f64 = 200.0;
pub const SIDECAR_MAGIC: &[u8; 8] = b"BPSHIFT1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not enough {label:?} examples: have {have}, need {need}")]
    InsufficientClassCount {
        label: ChangeLabel,
        have: usize,
        need: usize,
    },
    #[error("too few examples: have {have}, need {need}")]
    TooFewExamples { have: usize, need: usize },
    #[error("patient {0} is already used by another cohort")]
    PatientOverlap(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Fiducial(#[from] FiducialError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
pub enum InputType {
    /// PPG at time steps i and i+j.
    #[serde(rename = "ppg")]
    #[value(name = "ppg")]
    PpgWaveform,
    /// PPG pair plus the five sdPPG features of each segment.
    #[serde(rename = "feat")]
    #[value(name = "feat")]
    WaveformFeature,
    /// PPG pair plus the sdPPG pair.
    #[serde(rename = "sdppg")]
    #[value(name = "sdppg")]
    PpgSdppgWaveform,
}

impl InputType {
    pub const ALL: [InputType; 3] = [
        InputType::PpgWaveform,
        InputType::WaveformFeature,
        InputType::PpgSdppgWaveform,
    ];

    pub fn channels(self) -> usize {
        match self {
            InputType::PpgSdppgWaveform => 4,
            _ => 2,
        }
    }

    /// Scalar inputs other than initial BP.
    pub fn feature_len(self) -> usize {
        match self {
            InputType::WaveformFeature => 10,
            _ => 0,
        }
    }

    pub fn aux_len(self, include_initial_bp: bool) -> usize {
        self.feature_len() + usize::from(include_initial_bp)
    }

    pub fn name(self) -> &'static str {
        match self {
            InputType::PpgWaveform => "ppg",
            InputType::WaveformFeature => "feat",
            InputType::PpgSdppgWaveform => "sdppg",
        }
    }
}

impl std::fmt::Display for InputType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Model-ready views of one segment, all cut at the same first foot.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    pub ppg: Vec<f32>,
    pub sdppg: Vec<f32>,
    pub features: Option<[f64; 5]>,
}

/// Cuts `seconds` from the first pulse foot; the PPG and the sdPPG of the
/// band-passed PPG are each min-max normalized.
pub fn prepare_segment(rec: &SegmentRecord, seconds: f64) -> Result<PreparedSegment, DatasetError> {
    let ppg = &rec.ppg;
    let start = first_foot(ppg)?;
    let raw = min_max_normalize(&truncate_from(ppg, start, seconds)?)?;
    let sd = second_derivative(&signal::bandpass_ppg(ppg))?;
    let sd = min_max_normalize(&truncate_from(&sd, start, seconds)?)?;
    let features = fiducials::segment_features(ppg).ok().map(|f| f.to_array());
    Ok(PreparedSegment {
        ppg: raw.samples.iter().map(|&v| v as f32).collect(),
        sdppg: sd.samples.iter().map(|&v| v as f32).collect(),
        features,
    })
}

impl PreparedSegment {
    pub fn usable(&self, input_type: InputType) -> bool {
        input_type != InputType::WaveformFeature || self.features.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub patient_id: String,
    /// Ordered segment series; position `k` is segment number `k + 1`.
    pub records: Vec<SegmentRecord>,
    pub prepared: Vec<Option<PreparedSegment>>,
    pub drop_reasons: Vec<Option<String>>,
}

impl PreparedPatient {
    pub fn new(records: Vec<SegmentRecord>, seconds: f64) -> Self {
        let patient_id = records.first().map(|r| r.patient_id.clone()).unwrap_or_default();
        let mut prepared = Vec::with_capacity(records.len());
        let mut drop_reasons = Vec::with_capacity(records.len());
        for r in &records {
            match prepare_segment(r, seconds) {
                Ok(p) => {
                    prepared.push(Some(p));
                    drop_reasons.push(None);
                }
                Err(e) => {
                    prepared.push(None);
                    drop_reasons.push(Some(e.to_string()));
                }
            }
        }
        Self {
            patient_id,
            records,
            prepared,
            drop_reasons,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn segment(&self, one_based: usize) -> Option<&PreparedSegment> {
        self.prepared.get(one_based.checked_sub(1)?)?.as_ref()
    }
}

/// Every patient of a cohort, prepared for one window length.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub seconds: f64,
    pub fs: f64,
    pub patients: Vec<PreparedPatient>,
}

impl PreparedCohort {
    /// `patients` are ordered segment series, one per patient.
    pub fn new(patients: Vec<Vec<SegmentRecord>>, seconds: f64) -> Self {
        let fs = patients
            .iter()
            .flat_map(|p| p.first())
            .map(|r| r.ppg.fs)
            .next()
            .unwrap_or(125.0);
        Self {
            seconds,
            fs,
            patients: patients
                .into_iter()
                .map(|p| PreparedPatient::new(p, seconds))
                .collect(),
        }
    }

    pub fn length(&self) -> usize {
        signal::window_len(self.seconds, self.fs)
    }

    pub fn patient_index(&self, patient_id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.patient_id == patient_id)
    }

    pub fn dropped_segments(&self) -> usize {
        self.patients
            .iter()
            .map(|p| p.prepared.iter().filter(|s| s.is_none()).count())
            .sum()
    }
}

/// A labeled pair pointing into a [`PreparedCohort`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub patient: usize,
    pub i: usize,
    pub j: usize,
    pub delta: f64,
    pub label: ChangeLabel,
}

/// Labeled pairs of the selected patients whose two segments are usable for
/// `input_type`, plus the number of pairs dropped.
pub fn candidate_pairs(
    cohort: &PreparedCohort,
    patients: &[usize],
    bp_type: BpType,
    threshold: f64,
    input_type: InputType,
) -> Result<(Vec<PairRef>, usize), DatasetError> {
    if !(threshold > 0.0) {
        return Err(LabelError::InvalidThreshold(threshold).into());
    }
    let mut out = Vec::new();
    let mut dropped = 0;
    for &p in patients {
        let pat = &cohort.patients[p];
        if pat.len() < 2 {
            continue;
        }
        let series: Vec<f64> = pat.records.iter().map(|r| bp_type.of(r)).collect();
        for (i, j) in enumerate_pairs(series.len())? {
            let ok = [i, i + j]
                .iter()
                .all(|&k| pat.segment(k).is_some_and(|s| s.usable(input_type)));
            if !ok {
                dropped += 1;
                continue;
            }
            let delta = series[i + j - 1] - series[i - 1];
            out.push(PairRef {
                patient: p,
                i,
                j,
                delta,
                label: classify_change(delta, threshold),
            });
        }
    }
    Ok((out, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub patient_id: String,
    pub i: usize,
    pub j: usize,
    pub delta: f64,
    /// Initial pressure of the active type, mmHg.
    pub bp_i: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Channel-major `channels × length` block.
    pub x: Vec<f32>,
    pub channels: usize,
    pub length: usize,
    pub aux: Vec<f32>,
    pub y: ChangeLabel,
    pub meta: ExampleMeta,
}

/// How pairs become model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub input_type: InputType,
    pub bp_type: BpType,
    pub include_initial_bp: bool,
}

impl InputSpec {
    pub fn channels(&self) -> usize {
        self.input_type.channels()
    }

    pub fn aux_len(&self) -> usize {
        self.input_type.aux_len(self.include_initial_bp)
    }
}

fn fill_example(
    cohort: &PreparedCohort,
    pair: &PairRef,
    spec: &InputSpec,
    x: &mut [f64],
    aux: &mut [f64],
) -> Result<(), DatasetError> {
    let pat = &cohort.patients[pair.patient];
    let missing = || DatasetError::InvalidArgument(format!(
        "segment pair ({}, {}) of {} is not usable",
        pair.i, pair.j, pat.patient_id
    ));
    let a = pat.segment(pair.i).ok_or_else(missing)?;
    let b = pat.segment(pair.i + pair.j).ok_or_else(missing)?;
    let len = cohort.length();
    let mut blocks: Vec<&[f32]> = vec![&a.ppg, &b.ppg];
    if spec.input_type == InputType::PpgSdppgWaveform {
        blocks.push(&a.sdppg);
        blocks.push(&b.sdppg);
    }
    for (c, blk) in blocks.iter().enumerate() {
        for (dst, &v) in x[c * len..(c + 1) * len].iter_mut().zip(blk.iter()) {
            *dst = v as f64;
        }
    }
    let mut k = 0;
    if spec.input_type == InputType::WaveformFeature {
        for seg in [a, b] {
            let f = seg.features.ok_or_else(missing)?;
            aux[k..k + 5].copy_from_slice(&f);
            k += 5;
        }
    }
    if spec.include_initial_bp {
        aux[k] = spec.bp_type.of(&pat.records[pair.i - 1]) / BP_SCALE;
    }
    Ok(())
}

/// Builds one example: channels `[ppg_i, ppg_{i+j}]` (plus
/// `[sdppg_i, sdppg_{i+j}]`), aux = features of both segments and/or
/// `BP_i / 200`.
pub fn assemble_example(
    cohort: &PreparedCohort,
    pair: &PairRef,
    spec: &InputSpec,
) -> Result<Example, DatasetError> {
    let channels = spec.channels();
    let length = cohort.length();
    let mut x = vec![0.0; channels * length];
    let mut aux = vec![0.0; spec.aux_len()];
    fill_example(cohort, pair, spec, &mut x, &mut aux)?;
    let pat = &cohort.patients[pair.patient];
    Ok(Example {
        x: x.iter().map(|&v| v as f32).collect(),
        channels,
        length,
        aux: aux.iter().map(|&v| v as f32).collect(),
        y: pair.label,
        meta: ExampleMeta {
            patient_id: pat.patient_id.clone(),
            i: pair.i,
            j: pair.j,
            delta: pair.delta,
            bp_i: spec.bp_type.of(&pat.records[pair.i - 1]),
        },
    })
}

/// Read access to a collection of examples, used by training and
/// evaluation.
pub trait ExampleSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn channels(&self) -> usize;
    fn length(&self) -> usize;
    fn aux_len(&self) -> usize;
    fn label(&self, k: usize) -> ChangeLabel;
    /// Writes example `k` into `x` (`channels × length`) and `aux`.
    fn write(&self, k: usize, x: &mut [f64], aux: &mut [f64]);
}

impl ExampleSource for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn channels(&self) -> usize {
        self.first().map_or(0, |e| e.channels)
    }
    fn length(&self) -> usize {
        self.first().map_or(0, |e| e.length)
    }
    fn aux_len(&self) -> usize {
        self.first().map_or(0, |e| e.aux.len())
    }
    fn label(&self, k: usize) -> ChangeLabel {
        self[k].y
    }
    fn write(&self, k: usize, x: &mut [f64], aux: &mut [f64]) {
        let e = &self[k];
        for (d, &s) in x.iter_mut().zip(&e.x) {
            *d = s as f64;
        }
        for (d, &s) in aux.iter_mut().zip(&e.aux) {
            *d = s as f64;
        }
    }
}

impl ExampleSource for Vec<Example> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn channels(&self) -> usize {
        self.as_slice().channels()
    }
    fn length(&self) -> usize {
        self.as_slice().length()
    }
    fn aux_len(&self) -> usize {
        self.as_slice().aux_len()
    }
    fn label(&self, k: usize) -> ChangeLabel {
        self[k].y
    }
    fn write(&self, k: usize, x: &mut [f64], aux: &mut [f64]) {
        self.as_slice().write(k, x, aux)
    }
}

/// Pairs assembled on demand from a prepared cohort.
#[derive(Debug, Clone)]
pub struct PairSet<'a> {
    pub cohort: &'a PreparedCohort,
    pub pairs: Vec<PairRef>,
    pub spec: InputSpec,
}

impl<'a> PairSet<'a> {
    pub fn new(cohort: &'a PreparedCohort, pairs: Vec<PairRef>, spec: InputSpec) -> Self {
        Self { cohort, pairs, spec }
    }

    pub fn subset(&self, ids: &[usize]) -> PairSet<'a> {
        PairSet {
            cohort: self.cohort,
            pairs: ids.iter().map(|&k| self.pairs[k]).collect(),
            spec: self.spec,
        }
    }

    pub fn example(&self, k: usize) -> Result<Example, DatasetError> {
        assemble_example(self.cohort, &self.pairs[k], &self.spec)
    }

    pub fn examples(&self) -> Result<Vec<Example>, DatasetError> {
        (0..self.pairs.len()).map(|k| self.example(k)).collect()
    }

    pub fn labels(&self) -> Vec<ChangeLabel> {
        self.pairs.iter().map(|p| p.label).collect()
    }
}

impl ExampleSource for PairSet<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }
    fn channels(&self) -> usize {
        self.spec.channels()
    }
    fn length(&self) -> usize {
        self.cohort.length()
    }
    fn aux_len(&self) -> usize {
        self.spec.aux_len()
    }
    fn label(&self, k: usize) -> ChangeLabel {
        self.pairs[k].label
    }
    fn write(&self, k: usize, x: &mut [f64], aux: &mut [f64]) {
        // candidate_pairs only admits usable segments
        fill_example(self.cohort, &self.pairs[k], &self.spec, x, aux)
            .expect("pair set holds usable pairs only");
    }
}

/// Exactly `per_class` ids per label, drawn without replacement. The result
/// is sorted, so it depends only on the candidates and the seed.
pub fn balanced_sample(
    labels: &[ChangeLabel],
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_class);
    for label in ChangeLabel::ALL {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == label).collect();
        if ids.len() < per_class {
            return Err(DatasetError::InsufficientClassCount {
                label,
                have: ids.len(),
                need: per_class,
            });
        }
        let (chosen, _) = ids.partial_shuffle(&mut rng, per_class);
        out.extend_from_slice(chosen);
    }
    out.sort_unstable();
    Ok(out)
}

/// Train / validation ids plus k disjoint folds over the same pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl DatasetSplit {
    /// Training and validation ids when fold `f` is held out.
    pub fn fold(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != f)
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect();
        (train, self.folds[f].clone())
    }
}

fn shuffled(ids: &[usize], seed: u64) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Random split with `round(fraction · n)` training ids.
pub fn split_train_val(
    ids: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("train fraction {fraction}")));
    }
    if ids.len() < 2 {
        return Err(DatasetError::TooFewExamples { have: ids.len(), need: 2 });
    }
    let v = shuffled(ids, seed);
    let n_train = ((fraction * v.len() as f64).round() as usize).clamp(1, v.len() - 1);
    let mut train = v[..n_train].to_vec();
    let mut val = v[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// `k` disjoint folds whose sizes differ by at most one; the first
/// `n mod k` folds get the extra id.
pub fn kfold(ids: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if k == 0 || ids.len() < k {
        return Err(DatasetError::TooFewExamples { have: ids.len(), need: k.max(1) });
    }
    let v = shuffled(ids, seed ^ 0x6b66_6f6c_64);
    let (base, extra) = (v.len() / k, v.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = v[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    Ok(folds)
}

pub fn split_dataset(
    ids: &[usize],
    fraction: f64,
    k: usize,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let (train, val) = split_train_val(ids, fraction, seed)?;
    Ok(DatasetSplit {
        train,
        val,
        folds: kfold(ids, k, seed)?,
    })
}

/// Patient-level cohort assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPartition {
    pub train: Vec<String>,
    pub test1: Vec<String>,
    pub test2: Vec<String>,
}

impl CohortPartition {
    /// Shuffles patient ids and deals `n_test1` and `n_test2` to the test
    /// cohorts; the rest train.
    pub fn new(
        patient_ids: &[String],
        n_test1: usize,
        n_test2: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        if n_test1 + n_test2 >= patient_ids.len() {
            return Err(DatasetError::InvalidArgument(format!(
                "{} patients cannot fill {n_test1} + {n_test2} test patients and a training cohort",
                patient_ids.len()
            )));
        }
        let mut ids = patient_ids.to_vec();
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let sorted = |v: &[String]| {
            let mut v = v.to_vec();
            v.sort();
            v
        };
        Ok(Self {
            test1: sorted(&ids[..n_test1]),
            test2: sorted(&ids[n_test1..n_test1 + n_test2]),
            train: sorted(&ids[n_test1 + n_test2..]),
        })
    }

    /// Fails if any patient belongs to two cohorts.
    pub fn check_disjoint(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.test1).chain(&self.test2) {
            if !seen.insert(id) {
                return Err(DatasetError::PatientOverlap(id.clone()));
            }
        }
        Ok(())
    }
}

/// Cohort positions of the given patient ids (unknown ids are skipped).
pub fn patient_positions(cohort: &PreparedCohort, ids: &[String]) -> Vec<usize> {
    ids.iter().filter_map(|id| cohort.patient_index(id)).collect()
}

/// Every enumerable pair of the Test-II patients, natural label balance.
/// Refuses patients that also appear in `excluded`.
pub fn build_test_ii(
    cohort: &PreparedCohort,
    patients: &[String],
    excluded: &[String],
    bp_type: BpType,
    threshold: f64,
    input_type: InputType,
) -> Result<(Vec<PairRef>, usize), DatasetError> {
    let ex: BTreeSet<&String> = excluded.iter().collect();
    if let Some(p) = patients.iter().find(|p| ex.contains(p)) {
        return Err(DatasetError::PatientOverlap(p.clone()));
    }
    let pos = patient_positions(cohort, patients);
    candidate_pairs(cohort, &pos, bp_type, threshold, input_type)
}

/// One line of the dataset descriptor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDescriptor {
    pub id: usize,
    pub patient_id: String,
    pub i: usize,
    pub j: usize,
    pub label: ChangeLabel,
    pub delta: f64,
    pub bp_i: f64,
    pub aux: Vec<f32>,
}

fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("ndjson"), stem.with_extension("bin"))
}

/// Writes `stem.ndjson` (descriptors) and `stem.bin` (waveform blocks).
pub fn write_dataset(stem: &Path, examples: &[Example]) -> Result<(), DatasetError> {
    let (desc, bin) = dataset_paths(stem);
    let channels = examples.first().map_or(0, |e| e.channels);
    let length = examples.first().map_or(0, |e| e.length);
    let mut d = std::io::BufWriter::new(std::fs::File::create(&desc)?);
    let mut b = std::io::BufWriter::new(std::fs::File::create(&bin)?);
    b.write_all(SIDECAR_MAGIC)?;
    for v in [examples.len(), channels, length] {
        b.write_all(&(v as u32).to_le_bytes())?;
    }
    for (id, e) in examples.iter().enumerate() {
        if e.channels != channels || e.length != length {
            return Err(DatasetError::Format(format!("example {id} has a different shape")));
        }
        let row = ExampleDescriptor {
            id,
            patient_id: e.meta.patient_id.clone(),
            i: e.meta.i,
            j: e.meta.j,
            label: e.y,
            delta: e.meta.delta,
            bp_i: e.meta.bp_i,
            aux: e.aux.clone(),
        };
        serde_json::to_writer(&mut d, &row)?;
        d.write_all(b"\n")?;
        for v in &e.x {
            b.write_all(&v.to_le_bytes())?;
        }
    }
    d.flush()?;
    b.flush()?;
    Ok(())
}

pub fn read_dataset(stem: &Path) -> Result<Vec<Example>, DatasetError> {
    let (desc, bin) = dataset_paths(stem);
    let rows: Vec<ExampleDescriptor> = std::fs::read_to_string(&desc)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let mut bytes = Vec::new();
    std::fs::File::open(&bin)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(DatasetError::Format("missing BPSHIFT1 header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, channels, length) = (u32_at(8), u32_at(12), u32_at(16));
    let block = channels * length;
    if n != rows.len() || bytes.len() != 20 + 4 * n * block {
        return Err(DatasetError::Format(format!(
            "sidecar holds {n} x {channels} x {length}, descriptors list {}",
            rows.len()
        )));
    }
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            let base = 20 + 4 * k * block;
            let x = bytes[base..base + 4 * block]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Example {
                x,
                channels,
                length,
                aux: r.aux,
                y: r.label,
                meta: ExampleMeta {
                    patient_id: r.patient_id,
                    i: r.i,
                    j: r.j,
                    delta: r.delta,
                    bp_i: r.bp_i,
                },
            }
        })
        .collect())
}
