//! Waveform representation and per-segment signal processing: beat
//! detection, blood-pressure summaries, second derivative, min-max
//! normalization and cycle-aligned truncation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::SosFilter;

/// Default heart-rate search bounds in beats per minute.
pub const DEFAULT_MIN_HR: f64 = 30.0;
pub const DEFAULT_MAX_HR: f64 = 200.0;

/// Low-pass corner used for beat detection.
pub const DETECT_LOWPASS_HZ: f64 = 8.0;
/// Band used to denoise PPG before derivative and fiducial work.
pub const PPG_BAND_HZ: (f64, f64) = (0.5, 8.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("no usable beats found")]
    NoBeatsFound,
    #[error("signal too short: {len} samples, need at least {need}")]
    SignalTooShort { len: usize, need: usize },
    #[error("signal is constant")]
    ConstantSignal,
    #[error("insufficient length after first foot: {have} samples, need {need}")]
    InsufficientLength { have: usize, need: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Uniformly sampled real-valued waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSignal {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl SampledSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self, SignalError> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(SignalError::InvalidArgument(format!("sampling rate {fs}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite(i));
        }
        Ok(Self { samples, fs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            fs: self.fs,
        }
    }
}

/// One 10-second window of PPG with scalar pressure summaries in mmHg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub patient_id: String,
    pub index: u64,
    pub ppg: SampledSignal,
    pub sbp: f64,
    pub dbp: f64,
    pub mbp: f64,
}

impl SegmentRecord {
    /// Builds a record, deriving MBP from SBP and DBP.
    pub fn new(
        patient_id: impl Into<String>,
        index: u64,
        ppg: SampledSignal,
        sbp: f64,
        dbp: f64,
    ) -> Result<Self, SignalError> {
        if !(sbp > dbp && dbp > 0.0 && sbp.is_finite()) {
            return Err(SignalError::InvalidArgument(format!(
                "pressures must satisfy sbp > dbp > 0, got {sbp}/{dbp}"
            )));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            index,
            ppg,
            sbp,
            dbp,
            mbp: mean_pressure(sbp, dbp),
        })
    }
}

pub fn mean_pressure(sbp: f64, dbp: f64) -> f64 {
    (sbp + 2.0 * dbp) / 3.0
}

/// Pulse onsets (feet) and systolic peaks as sample indices.
///
/// `peaks[k]` always lies between `feet[k]` and `feet[k + 1]`; the last peak
/// follows the last foot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatMarkers {
    pub feet: Vec<usize>,
    pub peaks: Vec<usize>,
}

impl BeatMarkers {
    /// Complete beats as half-open `[foot_k, foot_{k+1})` ranges.
    pub fn beats(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.feet.windows(2).map(|w| (w[0], w[1]))
    }
}

fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v < x[best] {
            best = i;
        }
    }
    best
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Finds pulse feet and systolic peaks.
///
/// The detector runs on an 8 Hz zero-phase low-pass copy. A local maximum is
/// accepted as a systolic peak when its rise above the preceding trough is at
/// least half the local signal range; peaks closer than the shortest allowed
/// beat keep the taller one. Each foot is the minimum between the previous
/// peak and its own peak. Only the longest run of feet whose spacing lies in
/// `[60/max_hr, 60/min_hr]` seconds is returned.
pub fn detect_beats(
    signal: &SampledSignal,
    min_hr: f64,
    max_hr: f64,
) -> Result<BeatMarkers, SignalError> {
    if !(20.0..=220.0).contains(&min_hr) || !(20.0..=220.0).contains(&max_hr) || min_hr >= max_hr
    {
        return Err(SignalError::InvalidArgument(format!(
            "heart-rate bounds [{min_hr}, {max_hr}]"
        )));
    }
    let fs = signal.fs;
    let n = signal.len();
    let need = (2.0 * fs).ceil() as usize;
    if n < need {
        return Err(SignalError::SignalTooShort { len: n, need });
    }
    let x = if DETECT_LOWPASS_HZ < 0.45 * fs {
        SosFilter::lowpass(4, DETECT_LOWPASS_HZ, fs).filtfilt(&signal.samples, fs.round() as usize)
    } else {
        signal.samples.clone()
    };

    let min_gap = (60.0 / max_hr * fs).floor() as usize;
    let max_gap = (60.0 / min_hr * fs).ceil() as usize;
    let (glo, ghi) = min_max(&x);
    if ghi - glo <= 1e-12 * ghi.abs().max(1.0) {
        return Err(SignalError::NoBeatsFound);
    }

    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        if !(x[i] > x[i - 1] && x[i] >= x[i + 1]) {
            continue;
        }
        let lo_w = i.saturating_sub(max_gap);
        let hi_w = (i + max_gap).min(n - 1);
        let (lo, hi) = min_max(&x[lo_w..=hi_w]);
        let left = peaks.last().map_or(lo_w, |&p| p.max(lo_w));
        let trough = x[left..=i].iter().cloned().fold(f64::INFINITY, f64::min);
        if x[i] - trough < 0.5 * (hi - lo) {
            continue;
        }
        match peaks.last() {
            Some(&p) if i - p < min_gap => {
                if x[i] > x[p] {
                    *peaks.last_mut().unwrap() = i;
                }
            }
            _ => peaks.push(i),
        }
    }

    // (foot, peak) pairs
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut rises: Vec<f64> = Vec::new();
    let mut boundary_first: Option<(usize, usize)> = None;
    for (k, &p) in peaks.iter().enumerate() {
        let start = if k == 0 {
            p.saturating_sub(max_gap)
        } else {
            peaks[k - 1]
        };
        if start >= p {
            continue;
        }
        let foot = start + argmin(&x[start..p]);
        if k == 0 && foot == start {
            // Trough sits on the window edge. Only a true foot when the
            // window edge is the start of the recording.
            if start == 0 {
                boundary_first = Some((foot, p));
            }
            continue;
        }
        rises.push(x[p] - x[foot]);
        pairs.push((foot, p));
    }
    if let Some((foot, p)) = boundary_first {
        let mut sorted = rises.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let accept = if sorted.is_empty() {
            true
        } else {
            x[p] - x[foot] >= 0.9 * sorted[sorted.len() / 2]
        };
        if accept {
            pairs.insert(0, (foot, p));
        }
    }

    // longest run with physiological spacing
    let mut best = (0usize, 0usize);
    let mut run_start = 0usize;
    for k in 0..pairs.len() {
        if k > 0 {
            let gap = pairs[k].0 - pairs[k - 1].0;
            if gap < min_gap || gap > max_gap {
                run_start = k;
            }
        }
        if k + 1 - run_start > best.1 - best.0 {
            best = (run_start, k + 1);
        }
    }
    let run = &pairs[best.0..best.1];
    if run.len() < 2 {
        return Err(SignalError::NoBeatsFound);
    }
    Ok(BeatMarkers {
        feet: run.iter().map(|p| p.0).collect(),
        peaks: run.iter().map(|p| p.1).collect(),
    })
}

/// Per-segment (SBP, DBP, MBP) from an arterial pressure waveform.
///
/// Uses complete beats only. SBP is the mean of per-beat maxima, DBP the mean
/// of the trough values around each foot.
pub fn segment_bp_summary(abp: &SampledSignal) -> Result<(f64, f64, f64), SignalError> {
    let beats = detect_beats(abp, DEFAULT_MIN_HR, DEFAULT_MAX_HR)?;
    let x = &abp.samples;
    let mut sum_max = 0.0;
    let mut sum_min = 0.0;
    let mut count = 0usize;
    for (start, end) in beats.beats() {
        let reach = ((end - start) / 10).max(1);
        let lo = start.saturating_sub(reach);
        let hi = (start + reach).min(x.len() - 1);
        let (trough, _) = min_max(&x[lo..=hi]);
        let (_, peak) = min_max(&x[start..end]);
        sum_max += peak;
        sum_min += trough;
        count += 1;
    }
    if count == 0 {
        return Err(SignalError::NoBeatsFound);
    }
    let sbp = sum_max / count as f64;
    let dbp = sum_min / count as f64;
    Ok((sbp, dbp, mean_pressure(sbp, dbp)))
}

/// Second-order central difference scaled by fs², endpoints replicated.
pub fn second_derivative(signal: &SampledSignal) -> Result<SampledSignal, SignalError> {
    let n = signal.len();
    if n < 5 {
        return Err(SignalError::SignalTooShort { len: n, need: 5 });
    }
    let s = &signal.samples;
    let fs2 = signal.fs * signal.fs;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (s[i + 1] - 2.0 * s[i] + s[i - 1]) * fs2;
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    Ok(signal.with_samples(out))
}

/// Affine map of the signal onto `[0, 1]`.
pub fn min_max_normalize(signal: &SampledSignal) -> Result<SampledSignal, SignalError> {
    if signal.is_empty() {
        return Err(SignalError::SignalTooShort { len: 0, need: 1 });
    }
    let (lo, hi) = min_max(&signal.samples);
    if hi == lo {
        return Err(SignalError::ConstantSignal);
    }
    let span = hi - lo;
    Ok(signal.with_samples(signal.samples.iter().map(|v| (v - lo) / span).collect()))
}

/// Number of samples in a window of `seconds` at `fs`.
pub fn window_len(seconds: f64, fs: f64) -> usize {
    (seconds * fs).round() as usize
}

/// Index of the first detected pulse foot.
pub fn first_foot(ppg: &SampledSignal) -> Result<usize, SignalError> {
    Ok(detect_beats(ppg, DEFAULT_MIN_HR, DEFAULT_MAX_HR)?.feet[0])
}

/// Cuts `seconds` of signal starting at the first detected pulse foot.
pub fn truncate_to_cycles(ppg: &SampledSignal, seconds: f64) -> Result<SampledSignal, SignalError> {
    if !(seconds > 0.0) {
        return Err(SignalError::InvalidArgument(format!("target seconds {seconds}")));
    }
    let start = first_foot(ppg)?;
    truncate_from(ppg, start, seconds)
}

/// Cuts `seconds` of signal beginning at `start`.
pub fn truncate_from(
    signal: &SampledSignal,
    start: usize,
    seconds: f64,
) -> Result<SampledSignal, SignalError> {
    let need = window_len(seconds, signal.fs);
    let have = signal.len().saturating_sub(start);
    if have < need {
        return Err(SignalError::InsufficientLength { have, need });
    }
    Ok(signal.with_samples(signal.samples[start..start + need].to_vec()))
}

/// Zero-phase 0.5–8 Hz band-pass used ahead of derivative work.
pub fn bandpass_ppg(ppg: &SampledSignal) -> SampledSignal {
    let (lo, hi) = PPG_BAND_HZ;
    if hi >= 0.45 * ppg.fs {
        return ppg.clone();
    }
    let f = SosFilter::bandpass(4, lo, hi, ppg.fs);
    ppg.with_samples(f.filtfilt(&ppg.samples, (2.0 * ppg.fs).round() as usize))
}
