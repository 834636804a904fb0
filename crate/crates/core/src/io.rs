//! Segment ingestion format: NDJSON, one object per 10-second segment.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{segment_bp_summary, SampledSignal, SegmentRecord, SignalError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("segment {patient_id}/{index}: either abp or both sbp and dbp are required")]
    MissingPressure { patient_id: String, index: u64 },
    #[error("segment {patient_id}/{index}: {source}")]
    Signal {
        patient_id: String,
        index: u64,
        source: SignalError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a segment file. `mbp` is never read: it is always
/// recomputed from SBP and DBP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSegment {
    pub patient_id: String,
    pub index: u64,
    pub fs: f64,
    pub ppg: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abp: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbp: Option<f64>,
}

impl RawSegment {
    /// Validates the waveform and derives the pressure summary.
    pub fn to_record(&self) -> Result<SegmentRecord, IngestError> {
        let wrap = |source| IngestError::Signal {
            patient_id: self.patient_id.clone(),
            index: self.index,
            source,
        };
        let ppg = SampledSignal::new(self.ppg.clone(), self.fs).map_err(wrap)?;
        let (sbp, dbp) = match (&self.abp, self.sbp, self.dbp) {
            (Some(abp), _, _) => {
                let abp = SampledSignal::new(abp.clone(), self.fs).map_err(wrap)?;
                let (s, d, _) = segment_bp_summary(&abp).map_err(wrap)?;
                (s, d)
            }
            (None, Some(s), Some(d)) => (s, d),
            _ => {
                return Err(IngestError::MissingPressure {
                    patient_id: self.patient_id.clone(),
                    index: self.index,
                })
            }
        };
        SegmentRecord::new(self.patient_id.clone(), self.index, ppg, sbp, dbp).map_err(wrap)
    }
}

pub fn read_segments(path: &Path) -> Result<Vec<RawSegment>, IngestError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seg = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(seg);
    }
    Ok(out)
}

pub fn write_segments(path: &Path, segments: &[RawSegment]) -> std::io::Result<()> {
    write_ndjson(path, segments)
}

pub fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Segment files under `path` (the file itself, or `*.ndjson` in a
/// directory, sorted by name).
pub fn segment_files(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
        .collect();
    files.sort();
    Ok(files)
}

/// Outcome of ingesting a set of raw segments.
#[derive(Debug, Default)]
pub struct Ingested {
    pub records: Vec<SegmentRecord>,
    /// `(patient_id, index, reason)` for every dropped segment.
    pub dropped: Vec<(String, u64, String)>,
}

/// Converts raw segments to records. Segments that fail beat detection or
/// validation are dropped and reported; a missing pressure is fatal.
pub fn ingest(raw: &[RawSegment]) -> Result<Ingested, IngestError> {
    let mut out = Ingested::default();
    for r in raw {
        match r.to_record() {
            Ok(rec) => out.records.push(rec),
            Err(e @ IngestError::MissingPressure { .. }) => return Err(e),
            Err(e) => out.dropped.push((r.patient_id.clone(), r.index, e.to_string())),
        }
    }
    Ok(out)
}

/// Groups records by patient, ordered by patient id, each series sorted by
/// segment index.
pub fn by_patient(records: Vec<SegmentRecord>) -> Vec<(String, Vec<SegmentRecord>)> {
    let mut map: std::collections::BTreeMap<String, Vec<SegmentRecord>> = Default::default();
    for r in records {
        map.entry(r.patient_id.clone()).or_default().push(r);
    }
    map.into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|r| r.index);
            (k, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse(n: usize, fs: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let ph = (i as f64 / fs).fract();
                0.5 * (1.0 - (std::f64::consts::TAU * ph).cos())
            })
            .collect()
    }

    #[test]
    fn scalar_pressures_are_accepted() {
        let raw = RawSegment {
            patient_id: "p".into(),
            index: 0,
            fs: 125.0,
            ppg: pulse(1250, 125.0),
            abp: None,
            sbp: Some(130.0),
            dbp: Some(70.0),
        };
        let rec = raw.to_record().unwrap();
        assert!((rec.mbp - 90.0).abs() < 1e-12);
    }

    #[test]
    fn missing_pressure_is_an_error() {
        let raw = RawSegment {
            patient_id: "p".into(),
            index: 0,
            fs: 125.0,
            ppg: pulse(1250, 125.0),
            abp: None,
            sbp: Some(130.0),
            dbp: None,
        };
        assert!(matches!(raw.to_record(), Err(IngestError::MissingPressure { .. })));
    }

    #[test]
    fn mbp_field_in_file_is_ignored() {
        let line = r#"{"patient_id":"p","index":3,"fs":125.0,"ppg":[0,1,0,1,0],"sbp":120,"dbp":60,"mbp":1000}"#;
        let raw: RawSegment = serde_json::from_str(line).unwrap();
        assert_eq!(raw.sbp, Some(120.0));
    }

    #[test]
    fn ndjson_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ndjson");
        let segs = vec![RawSegment {
            patient_id: "p".into(),
            index: 0,
            fs: 125.0,
            ppg: vec![0.1, 0.2, 1.0 / 3.0],
            abp: Some(vec![80.0, 120.0, 80.0]),
            sbp: None,
            dbp: None,
        }];
        write_segments(&path, &segs).unwrap();
        assert_eq!(read_segments(&path).unwrap(), segs);
    }
}
