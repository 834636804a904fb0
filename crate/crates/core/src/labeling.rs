//! Pairwise blood-pressure changes and their Spike / Stable / Dip labels.
//!
//! Pair indices are 1-based at this boundary: `i` names the initial reading,
//! `j` the number of readings after it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::SegmentRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("index out of range: i={i}, j={j}, n={n}")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("need at least 2 segments, got {0}")]
    TooFewSegments(usize),
    #[error("segments belong to more than one patient")]
    MixedPatients,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum BpType {
    Sbp,
    Dbp,
    Mbp,
}

impl BpType {
    pub const ALL: [BpType; 3] = [BpType::Sbp, BpType::Dbp, BpType::Mbp];

    /// Largest threshold on the sweep grid, mmHg.
    pub fn grid_max(self) -> f64 {
        match self {
            BpType::Sbp => 45.0,
            BpType::Dbp => 35.0,
            BpType::Mbp => 40.0,
        }
    }

    /// Thresholds from 5 mmHg to `grid_max` in 5 mmHg steps.
    pub fn grid(self) -> Vec<f64> {
        let steps = (self.grid_max() / 5.0) as usize;
        (1..=steps).map(|k| 5.0 * k as f64).collect()
    }

    /// Default threshold: 30 / 15 / 20 mmHg.
    pub fn default_threshold(self) -> f64 {
        match self {
            BpType::Sbp => 30.0,
            BpType::Dbp => 15.0,
            BpType::Mbp => 20.0,
        }
    }

    pub fn of(self, seg: &SegmentRecord) -> f64 {
        match self {
            BpType::Sbp => seg.sbp,
            BpType::Dbp => seg.dbp,
            BpType::Mbp => seg.mbp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BpType::Sbp => "sbp",
            BpType::Dbp => "dbp",
            BpType::Mbp => "mbp",
        }
    }
}

impl std::fmt::Display for BpType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Class order fixes logit order: Spike, Stable, Dip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChangeLabel {
    Spike,
    Stable,
    Dip,
}

impl ChangeLabel {
    pub const ALL: [ChangeLabel; 3] = [ChangeLabel::Spike, ChangeLabel::Stable, ChangeLabel::Dip];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn flipped(self) -> Self {
        match self {
            ChangeLabel::Spike => ChangeLabel::Dip,
            ChangeLabel::Stable => ChangeLabel::Stable,
            ChangeLabel::Dip => ChangeLabel::Spike,
        }
    }
}

/// Per-type thresholds in mmHg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub sbp: f64,
    pub dbp: f64,
    pub mbp: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            sbp: BpType::Sbp.default_threshold(),
            dbp: BpType::Dbp.default_threshold(),
            mbp: BpType::Mbp.default_threshold(),
        }
    }
}

impl Thresholds {
    pub fn get(&self, t: BpType) -> f64 {
        match t {
            BpType::Sbp => self.sbp,
            BpType::Dbp => self.dbp,
            BpType::Mbp => self.mbp,
        }
    }

    pub fn set(&mut self, t: BpType, v: f64) {
        match t {
            BpType::Sbp => self.sbp = v,
            BpType::Dbp => self.dbp = v,
            BpType::Mbp => self.mbp = v,
        }
    }
}

/// One (i, i+j) pair labeled for all three pressure types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePair {
    pub patient_id: String,
    pub i: usize,
    pub j: usize,
    pub delta_sbp: f64,
    pub delta_dbp: f64,
    pub delta_mbp: f64,
    pub label_sbp: ChangeLabel,
    pub label_dbp: ChangeLabel,
    pub label_mbp: ChangeLabel,
    pub threshold_sbp: f64,
    pub threshold_dbp: f64,
    pub threshold_mbp: f64,
}

impl ChangePair {
    pub fn delta(&self, t: BpType) -> f64 {
        match t {
            BpType::Sbp => self.delta_sbp,
            BpType::Dbp => self.delta_dbp,
            BpType::Mbp => self.delta_mbp,
        }
    }

    pub fn label(&self, t: BpType) -> ChangeLabel {
        match t {
            BpType::Sbp => self.label_sbp,
            BpType::Dbp => self.label_dbp,
            BpType::Mbp => self.label_mbp,
        }
    }
}

/// A pair labeled for a single pressure type and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedChange {
    pub patient_id: String,
    pub i: usize,
    pub j: usize,
    pub delta: f64,
    pub label: ChangeLabel,
}

/// `series[i+j] − series[i]`, 1-based.
pub fn delta_bp(series: &[f64], i: usize, j: usize) -> Result<f64, LabelError> {
    let n = series.len();
    if i < 1 || j < 1 || i + j > n {
        return Err(LabelError::IndexOutOfRange { i, j, n });
    }
    Ok(series[i + j - 1] - series[i - 1])
}

/// All (i, j) with `1 ≤ i ≤ N−1`, `1 ≤ j ≤ N−i`, lexicographic.
pub fn enumerate_pairs(n_segments: usize) -> Result<impl Iterator<Item = (usize, usize)>, LabelError> {
    if n_segments < 2 {
        return Err(LabelError::TooFewSegments(n_segments));
    }
    Ok((1..n_segments).flat_map(move |i| (1..=n_segments - i).map(move |j| (i, j))))
}

pub fn pair_count(n_segments: usize) -> usize {
    n_segments * n_segments.saturating_sub(1) / 2
}

/// Changes strictly beyond ±threshold are Spike / Dip; the boundary is Stable.
pub fn classify_change(delta: f64, threshold: f64) -> ChangeLabel {
    if delta > threshold {
        ChangeLabel::Spike
    } else if delta < -threshold {
        ChangeLabel::Dip
    } else {
        ChangeLabel::Stable
    }
}

fn check_patient(segments: &[SegmentRecord]) -> Result<(), LabelError> {
    if segments.len() < 2 {
        return Err(LabelError::TooFewSegments(segments.len()));
    }
    let pid = &segments[0].patient_id;
    if segments.iter().any(|s| &s.patient_id != pid) {
        return Err(LabelError::MixedPatients);
    }
    Ok(())
}

/// Labels every pair of one patient's ordered segments for one pressure type.
pub fn label_patient(
    segments: &[SegmentRecord],
    bp_type: BpType,
    threshold: f64,
) -> Result<Vec<TypedChange>, LabelError> {
    check_patient(segments)?;
    if !(threshold > 0.0) {
        return Err(LabelError::InvalidThreshold(threshold));
    }
    let series: Vec<f64> = segments.iter().map(|s| bp_type.of(s)).collect();
    let pid = &segments[0].patient_id;
    let mut out = Vec::with_capacity(pair_count(series.len()));
    for (i, j) in enumerate_pairs(series.len())? {
        let delta = delta_bp(&series, i, j)?;
        out.push(TypedChange {
            patient_id: pid.clone(),
            i,
            j,
            delta,
            label: classify_change(delta, threshold),
        });
    }
    Ok(out)
}

/// Labels every pair for all three pressure types at once.
pub fn label_all(
    segments: &[SegmentRecord],
    thresholds: &Thresholds,
) -> Result<Vec<ChangePair>, LabelError> {
    check_patient(segments)?;
    for t in BpType::ALL {
        if !(thresholds.get(t) > 0.0) {
            return Err(LabelError::InvalidThreshold(thresholds.get(t)));
        }
    }
    let pid = &segments[0].patient_id;
    let n = segments.len();
    let mut out = Vec::with_capacity(pair_count(n));
    for (i, j) in enumerate_pairs(n)? {
        let (a, b) = (&segments[i - 1], &segments[i + j - 1]);
        let (ds, dd, dm) = (b.sbp - a.sbp, b.dbp - a.dbp, b.mbp - a.mbp);
        out.push(ChangePair {
            patient_id: pid.clone(),
            i,
            j,
            delta_sbp: ds,
            delta_dbp: dd,
            delta_mbp: dm,
            label_sbp: classify_change(ds, thresholds.sbp),
            label_dbp: classify_change(dd, thresholds.dbp),
            label_mbp: classify_change(dm, thresholds.mbp),
            threshold_sbp: thresholds.sbp,
            threshold_dbp: thresholds.dbp,
            threshold_mbp: thresholds.mbp,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SampledSignal;
    use proptest::prelude::*;

    fn segs(sbp: &[f64]) -> Vec<SegmentRecord> {
        let ppg = SampledSignal::new(vec![0.0; 4], 125.0).unwrap();
        sbp.iter()
            .enumerate()
            .map(|(k, &s)| SegmentRecord::new("p1", k as u64, ppg.clone(), s, 1.0).unwrap())
            .collect()
    }

    #[test]
    fn delta_examples() {
        let s = [100.0, 120.0, 90.0];
        assert_eq!(delta_bp(&s, 1, 1), Ok(20.0));
        assert_eq!(delta_bp(&s, 1, 2), Ok(-10.0));
        assert_eq!(
            delta_bp(&s, 3, 1),
            Err(LabelError::IndexOutOfRange { i: 3, j: 1, n: 3 })
        );
        assert!(delta_bp(&s, 0, 1).is_err());
    }

    #[test]
    fn pairs_for_three() {
        let p: Vec<_> = enumerate_pairs(3).unwrap().collect();
        assert_eq!(p, vec![(1, 1), (1, 2), (2, 1)]);
        assert_eq!(enumerate_pairs(400).unwrap().count(), 79_800);
        assert!(matches!(enumerate_pairs(1), Err(LabelError::TooFewSegments(1))));
    }

    #[test]
    fn table_scale_order_of_magnitude() {
        // 500 patients with ~412 segments each
        let total = 500 * pair_count(412);
        assert!(total > 4.0e7 as usize && total < 6.0e7 as usize, "{total}");
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_change(35.0, 30.0), ChangeLabel::Spike);
        assert_eq!(classify_change(30.0, 30.0), ChangeLabel::Stable);
        assert_eq!(classify_change(-30.0, 30.0), ChangeLabel::Stable);
        assert_eq!(classify_change(-16.0, 15.0), ChangeLabel::Dip);
    }

    #[test]
    fn label_three_segments() {
        let out = label_patient(&segs(&[100.0, 140.0, 95.0]), BpType::Sbp, 30.0).unwrap();
        let labels: Vec<_> = out.iter().map(|c| c.label).collect();
        assert_eq!(
            labels,
            vec![ChangeLabel::Spike, ChangeLabel::Stable, ChangeLabel::Dip]
        );
        let deltas: Vec<_> = out.iter().map(|c| c.delta).collect();
        assert_eq!(deltas, vec![40.0, -5.0, -45.0]);
    }

    #[test]
    fn flat_series_all_stable() {
        let out = label_patient(&segs(&[120.0; 6]), BpType::Mbp, 5.0).unwrap();
        assert!(out.iter().all(|c| c.label == ChangeLabel::Stable));
    }

    #[test]
    fn label_errors() {
        assert_eq!(
            label_patient(&segs(&[120.0]), BpType::Sbp, 30.0),
            Err(LabelError::TooFewSegments(1))
        );
        let mut s = segs(&[120.0, 130.0]);
        s[1].patient_id = "other".into();
        assert_eq!(label_patient(&s, BpType::Sbp, 30.0), Err(LabelError::MixedPatients));
    }

    #[test]
    fn grids_match_ranges() {
        assert_eq!(BpType::Sbp.grid().len(), 9);
        assert_eq!(BpType::Dbp.grid().last(), Some(&35.0));
        assert_eq!(BpType::Mbp.grid().first(), Some(&5.0));
        assert_eq!(BpType::Mbp.grid().len(), 8);
    }

    #[test]
    fn label_all_matches_single_type() {
        let s = segs(&[100.0, 133.0, 95.0, 150.0]);
        let all = label_all(&s, &Thresholds::default()).unwrap();
        let sbp = label_patient(&s, BpType::Sbp, 30.0).unwrap();
        for (a, b) in all.iter().zip(&sbp) {
            assert_eq!((a.i, a.j, a.delta_sbp, a.label_sbp), (b.i, b.j, b.delta, b.label));
        }
    }

    proptest! {
        #[test]
        fn antisymmetry(d in -100.0f64..100.0, t in 0.1f64..50.0) {
            prop_assert_eq!(classify_change(-d, t), classify_change(d, t).flipped());
        }

        #[test]
        fn stable_fraction_monotone(series in prop::collection::vec(60.0f64..180.0, 2..30)) {
            let s = segs(&series);
            let mut prev = 0usize;
            for t in BpType::Sbp.grid() {
                let n = label_patient(&s, BpType::Sbp, t).unwrap()
                    .iter().filter(|c| c.label == ChangeLabel::Stable).count();
                prop_assert!(n >= prev);
                prev = n;
            }
        }

        #[test]
        fn offset_invariance(series in prop::collection::vec(60.0f64..180.0, 2..20), k in -50.0f64..50.0) {
            // dyadic shift keeps the subtraction exact
            let k = (k * 4.0).round() / 4.0;
            let series: Vec<f64> = series.iter().map(|v| (v * 4.0).round() / 4.0).collect();
            let a = label_patient(&segs(&series), BpType::Sbp, 20.0).unwrap();
            let shifted: Vec<f64> = series.iter().map(|v| v + k).collect();
            let b = label_patient(&segs(&shifted), BpType::Sbp, 20.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.label, y.label);
            }
        }

        #[test]
        fn pair_count_law(n in 2usize..200) {
            prop_assert_eq!(enumerate_pairs(n).unwrap().count(), n * (n - 1) / 2);
        }
    }
}
