//! sdPPG a–e wave detection and the five waveform features built from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{self, SampledSignal, SignalError};

/// The `a` wave must peak within this fraction of the beat.
pub const A_WINDOW: f64 = 0.30;
/// Latest beat fraction at which `c` may sit.
pub const C_LIMIT: f64 = 0.45;
/// Latest beat fraction for `d` and `e`.
pub const E_LIMIT: f64 = 0.80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wave {
    A,
    B,
    C,
    D,
    E,
}

impl std::fmt::Display for Wave {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Wave::A => "a",
            Wave::B => "b",
            Wave::C => "c",
            Wave::D => "d",
            Wave::E => "e",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiducialError {
    #[error("fiducial {0} not found")]
    FiducialNotFound(Wave),
    #[error("degenerate fiducial timing")]
    DegenerateTiming,
    #[error("no beat with valid fiducials")]
    NoValidBeats,
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Amplitudes and onset-relative times (s) of the a–e waves of one beat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdppgFiducials {
    pub onset: usize,
    /// Sample offsets from the beat onset, ordered a..e.
    pub offsets: [usize; 5],
    pub amplitude: [f64; 5],
    pub time: [f64; 5],
}

impl SdppgFiducials {
    pub fn a(&self) -> f64 {
        self.amplitude[0]
    }
    pub fn b(&self) -> f64 {
        self.amplitude[1]
    }
    pub fn c(&self) -> f64 {
        self.amplitude[2]
    }
    pub fn d(&self) -> f64 {
        self.amplitude[3]
    }
    pub fn e(&self) -> f64 {
        self.amplitude[4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub b_over_a: f64,
    pub slope_bc: f64,
    pub slope_bd: f64,
    pub agi: f64,
    pub agi_mod: f64,
}

impl FeatureVector {
    pub const NAMES: [&'static str; 5] = ["b_over_a", "slope_bc", "slope_bd", "agi", "agi_mod"];

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.b_over_a,
            self.slope_bc,
            self.slope_bd,
            self.agi,
            self.agi_mod,
        ]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            b_over_a: v[0],
            slope_bc: v[1],
            slope_bd: v[2],
            agi: v[3],
            agi_mod: v[4],
        }
    }
}

fn is_max(x: &[f64], i: usize) -> bool {
    x[i] > x[i - 1] && x[i] >= x[i + 1]
}

fn is_min(x: &[f64], i: usize) -> bool {
    x[i] < x[i - 1] && x[i] <= x[i + 1]
}

/// Sub-sample position and height of the parabola through `x[i-1..=i+1]`.
fn vertex(x: &[f64], i: usize) -> (f64, f64) {
    let (l, c, r) = (x[i - 1], x[i], x[i + 1]);
    let curv = l - 2.0 * c + r;
    if curv == 0.0 {
        return (i as f64, c);
    }
    let delta = (0.5 * (l - r) / curv).clamp(-0.5, 0.5);
    (i as f64 + delta, c - 0.25 * (l - r) * delta)
}

/// Locates the a–e waves in one beat of sdPPG (foot to foot).
///
/// `a` is the first local maximum in the first 30% of the beat reaching at
/// least half of that window's maximum. Then `b` (negative minimum), `c`
/// (maximum, before 45% of the beat), `d` (minimum) and `e` (maximum, both
/// before 80%) are the first qualifying extrema in strict order. Times and
/// amplitudes are refined by parabolic interpolation around each extremum.
pub fn locate_fiducials(
    sdppg_beat: &SampledSignal,
    beat_onset: usize,
) -> Result<SdppgFiducials, FiducialError> {
    let x = &sdppg_beat.samples;
    let n = x.len();
    if n < 5 {
        return Err(FiducialError::FiducialNotFound(Wave::A));
    }
    let last = n - 1;
    let limit = |frac: f64| ((frac * n as f64).ceil() as usize).min(last);

    let a_end = limit(A_WINDOW);
    let a_peak = x[..a_end.max(1)]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let ia = (1..a_end)
        .find(|&i| is_max(x, i) && x[i] > 0.0 && x[i] >= 0.5 * a_peak)
        .ok_or(FiducialError::FiducialNotFound(Wave::A))?;
    let c_end = limit(C_LIMIT);
    let e_end = limit(E_LIMIT);
    let ib = (ia + 1..c_end)
        .find(|&i| is_min(x, i) && x[i] < 0.0)
        .ok_or(FiducialError::FiducialNotFound(Wave::B))?;
    let ic = (ib + 1..c_end)
        .find(|&i| is_max(x, i))
        .ok_or(FiducialError::FiducialNotFound(Wave::C))?;
    let id = (ic + 1..e_end)
        .find(|&i| is_min(x, i))
        .ok_or(FiducialError::FiducialNotFound(Wave::D))?;
    let ie = (id + 1..e_end)
        .find(|&i| is_max(x, i))
        .ok_or(FiducialError::FiducialNotFound(Wave::E))?;

    let offsets = [ia, ib, ic, id, ie];
    let refined = offsets.map(|i| vertex(x, i));
    Ok(SdppgFiducials {
        onset: beat_onset,
        offsets,
        amplitude: refined.map(|(_, v)| v),
        time: refined.map(|(p, _)| p / sdppg_beat.fs),
    })
}

/// The five waveform features of one beat.
pub fn extract_features(fid: &SdppgFiducials) -> Result<FeatureVector, FiducialError> {
    let [a, b, c, d, e] = fid.amplitude;
    let [_, tb, tc, td, _] = fid.time;
    if tb == tc || tb == td {
        return Err(FiducialError::DegenerateTiming);
    }
    Ok(FeatureVector {
        b_over_a: b / a,
        slope_bc: (b - c) / (tb - tc),
        slope_bd: (b - d) / (tb - td),
        agi: (b - c - d - e) / a,
        agi_mod: (b - c - d) / a,
    })
}

/// Arithmetic mean over the successful per-beat results.
pub fn mean_features(
    per_beat: &[Result<FeatureVector, FiducialError>],
) -> Result<FeatureVector, FiducialError> {
    let mut sum = [0.0; 5];
    let mut count = 0usize;
    for f in per_beat.iter().flatten() {
        for (s, v) in sum.iter_mut().zip(f.to_array()) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(FiducialError::NoValidBeats);
    }
    Ok(FeatureVector::from_array(sum.map(|s| s / count as f64)))
}

/// sdPPG of the band-passed PPG, scaled so its peak magnitude is 1.
pub fn normalized_sdppg(ppg: &SampledSignal) -> Result<SampledSignal, FiducialError> {
    let filtered = signal::bandpass_ppg(ppg);
    let mut sd = signal::second_derivative(&filtered)?;
    let scale = sd.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(SignalError::ConstantSignal.into());
    }
    sd.samples.iter_mut().for_each(|v| *v /= scale);
    Ok(sd)
}

/// Per-beat features over every complete beat of a PPG segment.
pub fn beat_features(
    ppg: &SampledSignal,
) -> Result<Vec<Result<FeatureVector, FiducialError>>, FiducialError> {
    let filtered = signal::bandpass_ppg(ppg);
    let beats = signal::detect_beats(&filtered, signal::DEFAULT_MIN_HR, signal::DEFAULT_MAX_HR)?;
    let sd = normalized_sdppg(ppg)?;
    Ok(beats
        .beats()
        .map(|(start, end)| {
            let beat = SampledSignal {
                samples: sd.samples[start..end].to_vec(),
                fs: sd.fs,
            };
            locate_fiducials(&beat, start).and_then(|f| extract_features(&f))
        })
        .collect())
}

/// Segment-level features: mean over beats with valid fiducials.
pub fn segment_features(ppg: &SampledSignal) -> Result<FeatureVector, FiducialError> {
    mean_features(&beat_features(ppg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fid(amp: [f64; 5], time: [f64; 5]) -> SdppgFiducials {
        SdppgFiducials {
            onset: 0,
            offsets: [0; 5],
            amplitude: amp,
            time,
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn table_formulas_by_substitution() {
        let f = extract_features(&fid(
            [1.0, -0.5, 0.2, -0.1, 0.1],
            [0.05, 0.10, 0.20, 0.30, 0.40],
        ))
        .unwrap();
        assert!(close(f.b_over_a, -0.5));
        assert!(close(f.slope_bc, 7.0));
        assert!(close(f.slope_bd, 2.0));
        assert!(close(f.agi, -0.7));
        assert!(close(f.agi_mod, -0.6));
    }

    #[test]
    fn amplitude_doubling() {
        let t = [0.05, 0.10, 0.20, 0.30, 0.40];
        let base = [1.0, -0.5, 0.2, -0.1, 0.1];
        let f1 = extract_features(&fid(base, t)).unwrap();
        let f2 = extract_features(&fid(base.map(|v| 2.0 * v), t)).unwrap();
        assert!(close(f1.b_over_a, f2.b_over_a));
        assert!(close(f1.agi, f2.agi));
        assert!(close(f1.agi_mod, f2.agi_mod));
        assert!(close(2.0 * f1.slope_bc, f2.slope_bc));
        assert!(close(2.0 * f1.slope_bd, f2.slope_bd));
    }

    #[test]
    fn degenerate_timing() {
        let r = extract_features(&fid(
            [1.0, -0.5, 0.2, -0.1, 0.1],
            [0.05, 0.10, 0.10, 0.30, 0.40],
        ));
        assert_eq!(r, Err(FiducialError::DegenerateTiming));
    }

    #[test]
    fn ramp_has_no_a_wave() {
        let beat = SampledSignal::new((0..100).map(|i| i as f64).collect(), 125.0).unwrap();
        assert_eq!(
            locate_fiducials(&beat, 0),
            Err(FiducialError::FiducialNotFound(Wave::A))
        );
    }

    #[test]
    fn mean_skips_failed_beats() {
        let good = FeatureVector::from_array([1.0, 2.0, 3.0, 4.0, 5.0]);
        let other = FeatureVector::from_array([3.0, 2.0, 1.0, 0.0, -1.0]);
        let beats = vec![
            Ok(good),
            Err(FiducialError::FiducialNotFound(Wave::C)),
            Ok(other),
            Err(FiducialError::FiducialNotFound(Wave::A)),
        ];
        let m = mean_features(&beats).unwrap();
        assert_eq!(m.to_array(), [2.0, 2.0, 2.0, 2.0, 2.0]);
        let none: Vec<Result<FeatureVector, FiducialError>> =
            vec![Err(FiducialError::FiducialNotFound(Wave::B))];
        assert_eq!(mean_features(&none), Err(FiducialError::NoValidBeats));
    }
}
