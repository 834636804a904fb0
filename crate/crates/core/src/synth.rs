//! Synthetic paired PPG / arterial-pressure cohorts with ground truth.
//!
//! Each PPG beat is a sum of three Gaussian lobes (systolic, dicrotic,
//! diastolic) placed at fixed fractions of the beat period. The dicrotic lobe
//! grows and moves earlier as mean pressure rises, scaled by
//! `coupling_gain`; with a gain of zero the PPG carries no pressure
//! information. Arterial pressure beats are raised-cosine pulses rising from
//! the beat's diastolic value to its systolic value and falling to the next
//! beat's diastolic value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::RawSegment;
use crate::signal::mean_pressure;

/// Bump when the generator's output changes for a fixed config.
pub const GENERATOR_VERSION: u32 = 1;

/// Fraction of the period spent on the pressure upstroke.
const ABP_RISE_FRACTION: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthPreset {
    /// Noise-free waveforms for signal-processing oracles.
    Oracle,
    /// Noisy waveforms with morphology coupled to pressure.
    Learnable,
    /// As `Learnable` but with coupling switched off and a steady heart
    /// rate, so no PPG property tracks pressure or time.
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub segments_per_patient: usize,
    pub fs: f64,
    pub segment_seconds: f64,
    /// Range of per-patient baseline heart rate, bpm.
    pub hr_range: (f64, f64),
    /// Per-segment heart-rate random-walk step, bpm.
    pub hr_walk_sigma: f64,
    /// Beat-to-beat period jitter as a fraction of the period.
    pub period_jitter: f64,
    pub sbp_range: (f64, f64),
    pub dbp_range: (f64, f64),
    /// Per-segment SBP random-walk step, mmHg.
    pub walk_sigma: f64,
    /// Expected step events per segment.
    pub event_rate: f64,
    /// Step-event magnitude range (SBP, mmHg); the sign is random.
    pub event_magnitude: (f64, f64),
    /// Fraction of an SBP change carried over to DBP.
    pub dbp_follow: f64,
    pub coupling_gain: f64,
    /// Per-beat pressure jitter, mmHg.
    pub beat_jitter: f64,
    /// Per-beat relative jitter of the dicrotic amplitude.
    pub morphology_jitter: f64,
    /// White noise on the PPG, in units of the systolic lobe height.
    pub noise_sigma: f64,
    /// Respiratory baseline wander amplitude on the PPG.
    pub wander_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::preset(SynthPreset::Learnable)
    }
}

impl SynthConfig {
    pub fn preset(preset: SynthPreset) -> Self {
        let base = Self {
            n_patients: 5,
            segments_per_patient: 60,
            fs: 125.0,
            segment_seconds: 10.0,
            hr_range: (60.0, 90.0),
            hr_walk_sigma: 1.0,
            period_jitter: 0.02,
            sbp_range: (100.0, 150.0),
            dbp_range: (60.0, 85.0),
            walk_sigma: 3.0,
            event_rate: 0.03,
            event_magnitude: (20.0, 45.0),
            dbp_follow: 0.6,
            coupling_gain: 1.0,
            beat_jitter: 1.0,
            morphology_jitter: 0.02,
            noise_sigma: 0.01,
            wander_amplitude: 0.03,
            seed: 0,
        };
        match preset {
            SynthPreset::Learnable => base,
            // a drifting heart rate tracks elapsed time, and so does |ΔBP|
            SynthPreset::Control => Self {
                coupling_gain: 0.0,
                hr_walk_sigma: 0.0,
                ..base
            },
            SynthPreset::Oracle => Self {
                period_jitter: 0.0,
                beat_jitter: 0.0,
                morphology_jitter: 0.0,
                noise_sigma: 0.0,
                wander_amplitude: 0.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let nonneg = [
            ("hr_walk_sigma", self.hr_walk_sigma),
            ("period_jitter", self.period_jitter),
            ("walk_sigma", self.walk_sigma),
            ("event_rate", self.event_rate),
            ("event_magnitude.min", self.event_magnitude.0),
            ("dbp_follow", self.dbp_follow),
            ("coupling_gain", self.coupling_gain),
            ("beat_jitter", self.beat_jitter),
            ("morphology_jitter", self.morphology_jitter),
            ("noise_sigma", self.noise_sigma),
            ("wander_amplitude", self.wander_amplitude),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let ranges = [
            ("hr_range", self.hr_range, (40.0, 180.0)),
            ("sbp_range", self.sbp_range, (80.0, 200.0)),
            ("dbp_range", self.dbp_range, (40.0, 120.0)),
        ];
        for (name, (lo, hi), (min, max)) in ranges {
            if !(lo <= hi && lo >= min && hi <= max) {
                return bad(format!("{name} ({lo}, {hi}) outside [{min}, {max}]"));
            }
        }
        if self.event_magnitude.0 > self.event_magnitude.1 {
            return bad("event_magnitude min exceeds max".into());
        }
        if self.sbp_range.0 - self.dbp_range.1 < 10.0 {
            return bad("sbp_range must sit at least 10 mmHg above dbp_range".into());
        }
        if !(self.fs >= 50.0 && self.segment_seconds >= 2.0) {
            return bad(format!("fs {} / segment_seconds {}", self.fs, self.segment_seconds));
        }
        if self.period_jitter >= 0.2 || self.morphology_jitter >= 0.5 {
            return bad("jitter too large".into());
        }
        Ok(())
    }

    pub fn segment_len(&self) -> usize {
        (self.segment_seconds * self.fs).round() as usize
    }
}

/// Gaussian pulse component, position and width as fractions of the period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub amp: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpState {
    pub sbp: f64,
    pub dbp: f64,
}

impl BpState {
    pub fn mbp(&self) -> f64 {
        mean_pressure(self.sbp, self.dbp)
    }
}

/// Pressure-dependent beat shape. Higher MBP gives a taller, earlier
/// dicrotic lobe.
pub fn morphology(mbp: f64, coupling_gain: f64) -> [Lobe; 3] {
    let z = coupling_gain * ((mbp - 95.0) / 30.0).tanh();
    [
        Lobe {
            amp: 1.0,
            center: 0.20,
            width: 0.065,
        },
        Lobe {
            amp: 0.35 + 0.20 * z,
            center: 0.44 - 0.05 * z,
            width: 0.07,
        },
        Lobe {
            amp: 0.25,
            center: 0.62,
            width: 0.12,
        },
    ]
}

fn lobe_sum(lobes: &[Lobe], period: f64, t: f64) -> f64 {
    lobes
        .iter()
        .map(|l| {
            let s = l.width * period;
            let u = (t - l.center * period) / s;
            l.amp * (-0.5 * u * u).exp()
        })
        .sum()
}

/// Exact second time derivative of a lobe sum at `t` seconds after onset.
pub fn lobe_second_derivative(lobes: &[Lobe], period: f64, t: f64) -> f64 {
    lobes
        .iter()
        .map(|l| {
            let s = l.width * period;
            let d = t - l.center * period;
            l.amp * (-0.5 * d * d / (s * s)).exp() * (d * d / s.powi(4) - 1.0 / (s * s))
        })
        .sum()
}

fn lobe_third_derivative(lobes: &[Lobe], period: f64, t: f64) -> f64 {
    lobes
        .iter()
        .map(|l| {
            let s = l.width * period;
            let d = t - l.center * period;
            l.amp * (-0.5 * d * d / (s * s)).exp() * (3.0 * d / s.powi(4) - d.powi(3) / s.powi(6))
        })
        .sum()
}

/// Continuous-time a–e waves of a lobe sum, located by root-finding on the
/// analytic third derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiducialTruth {
    /// Seconds from beat onset, ordered a..e.
    pub time: [f64; 5],
    pub amplitude: [f64; 5],
}

impl FiducialTruth {
    /// The five waveform features evaluated on the exact waves.
    pub fn features(&self) -> [f64; 5] {
        let [a, b, c, d, e] = self.amplitude;
        let [_, tb, tc, td, _] = self.time;
        [
            b / a,
            (b - c) / (tb - tc),
            (b - d) / (tb - td),
            (b - c - d - e) / a,
            (b - c - d) / a,
        ]
    }
}

pub fn analytic_fiducials(lobes: &[Lobe], period: f64) -> Option<FiducialTruth> {
    let steps = 4000;
    let h = period / steps as f64;
    let mut extrema: Vec<(f64, f64, bool)> = Vec::new(); // (t, value, is_max)
    let mut prev = lobe_third_derivative(lobes, period, 0.0);
    for k in 1..=steps {
        let t = k as f64 * h;
        let cur = lobe_third_derivative(lobes, period, t);
        if prev > 0.0 && cur <= 0.0 || prev < 0.0 && cur >= 0.0 {
            let (mut lo, mut hi) = (t - h, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let m = lobe_third_derivative(lobes, period, mid);
                if (m > 0.0) == (prev > 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            extrema.push((root, lobe_second_derivative(lobes, period, root), prev > 0.0));
        }
        prev = cur;
    }
    let a_lim = 0.30 * period;
    let a_peak = (0..=steps / 10 * 3)
        .map(|k| lobe_second_derivative(lobes, period, k as f64 * h))
        .fold(f64::NEG_INFINITY, f64::max);
    let ia = extrema
        .iter()
        .position(|&(t, v, mx)| mx && t < a_lim && v > 0.0 && v >= 0.5 * a_peak)?;
    let next = |from: usize, want_max: bool, limit: f64, neg: bool| {
        extrema[from + 1..]
            .iter()
            .position(|&(t, v, mx)| mx == want_max && t < limit && (!neg || v < 0.0))
            .map(|p| p + from + 1)
    };
    let ib = next(ia, false, 0.45 * period, true)?;
    let ic = next(ib, true, 0.45 * period, false)?;
    let id = next(ic, false, 0.80 * period, false)?;
    let ie = next(id, true, 0.80 * period, false)?;
    let idx = [ia, ib, ic, id, ie];
    Some(FiducialTruth {
        time: idx.map(|i| extrema[i].0),
        amplitude: idx.map(|i| extrema[i].1),
    })
}

/// One isolated beat sampled from its onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBeat {
    pub fs: f64,
    pub period: f64,
    pub ppg: Vec<f64>,
    pub abp: Vec<f64>,
    pub lobes: [Lobe; 3],
    pub bp: BpState,
    pub fiducials: Option<FiducialTruth>,
}

/// Generates one beat at `hr` bpm for the given pressure state.
pub fn gen_beat(
    hr: f64,
    bp: BpState,
    coupling_gain: f64,
    fs: f64,
    seed: u64,
) -> Result<GeneratedBeat, SynthError> {
    if !(40.0..=180.0).contains(&hr) || !(bp.sbp > bp.dbp && bp.dbp > 0.0) || coupling_gain < 0.0 {
        return Err(SynthError::InvalidConfig(format!(
            "beat hr {hr}, bp {}/{}, gain {coupling_gain}",
            bp.sbp, bp.dbp
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // small deterministic morphology variation per seed
    let mut lobes = morphology(bp.mbp(), coupling_gain);
    lobes[1].amp *= 1.0 + 0.02 * (rng.random::<f64>() - 0.5);
    let period = 60.0 / hr;
    let n = (period * fs).round() as usize;
    let ppg = (0..n).map(|i| lobe_sum(&lobes, period, i as f64 / fs)).collect();
    let abp = (0..n)
        .map(|i| abp_value(bp.dbp, bp.sbp, bp.dbp, period, i as f64 / fs))
        .collect();
    Ok(GeneratedBeat {
        fs,
        period,
        ppg,
        abp,
        lobes,
        bp,
        fiducials: analytic_fiducials(&lobes, period),
    })
}

fn abp_value(d_start: f64, s: f64, d_end: f64, period: f64, t: f64) -> f64 {
    let rise = ABP_RISE_FRACTION * period;
    if t <= rise {
        let u = (t / rise).clamp(0.0, 1.0);
        d_start + (s - d_start) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
    } else {
        let u = ((t - rise) / (period - rise)).clamp(0.0, 1.0);
        d_end + (s - d_end) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub segment: usize,
    pub sbp_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTruth {
    pub index: u64,
    pub bp: BpState,
    pub hr: f64,
    /// Nominal beat onsets that fall inside the segment, as sample positions.
    pub beat_onsets: Vec<f64>,
    /// Minimum of the noise-free PPG near each onset, clipped to the segment.
    pub ppg_feet: Vec<usize>,
    /// Per-beat pressure extrema for beats fully inside the segment.
    pub beat_sbp: Vec<f64>,
    pub beat_dbp: Vec<f64>,
    /// Onset sample positions of the beats in `beat_sbp`.
    pub complete_beat_onsets: Vec<f64>,
    pub mean_dicrotic_amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub events: Vec<StepEvent>,
    pub segments: Vec<SegmentTruth>,
}

/// Ground truth for a whole cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub generator_version: u32,
    pub config: SynthConfig,
    pub patients: Vec<PatientTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub segments: Vec<RawSegment>,
    pub truth: SynthTruth,
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let mut v = v;
    for _ in 0..4 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            break;
        }
    }
    v.clamp(lo, hi)
}

struct Beat {
    onset: f64,
    period: f64,
    lobes: [Lobe; 3],
    sbp: f64,
    dbp: f64,
}

pub fn patient_id(seed: u64, ordinal: usize) -> String {
    format!("s{seed}-p{ordinal:04}")
}

/// Generates a cohort. Every patient draws from its own ChaCha stream
/// (`seed`, stream = patient ordinal), so patients are independent of the
/// cohort size.
pub fn gen_cohort(config: &SynthConfig) -> Result<Cohort, SynthError> {
    config.validate()?;
    let mut segments = Vec::with_capacity(config.n_patients * config.segments_per_patient);
    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(p as u64);
        let pid = patient_id(config.seed, p);
        let (segs, truth) = gen_patient(config, &pid, &mut rng, None);
        segments.extend(segs);
        patients.push(truth);
    }
    Ok(Cohort {
        segments,
        truth: SynthTruth {
            generator_version: GENERATOR_VERSION,
            config: config.clone(),
            patients,
        },
    })
}

/// A single patient with forced pressure trajectory (used for demos and
/// band exports). `sbp_series[k]`/`dbp_series[k]` set segment `k`'s state.
pub fn gen_patient_with_trajectory(
    config: &SynthConfig,
    patient: &str,
    sbp_series: &[f64],
    dbp_series: &[f64],
) -> Result<(Vec<RawSegment>, PatientTruth), SynthError> {
    config.validate()?;
    if sbp_series.len() != dbp_series.len()
        || sbp_series.iter().zip(dbp_series).any(|(s, d)| !(s > d && *d > 0.0))
    {
        return Err(SynthError::InvalidConfig("trajectory".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let traj: Vec<BpState> = sbp_series
        .iter()
        .zip(dbp_series)
        .map(|(&sbp, &dbp)| BpState { sbp, dbp })
        .collect();
    Ok(gen_patient(config, patient, &mut rng, Some(&traj)))
}

fn gen_patient(
    cfg: &SynthConfig,
    pid: &str,
    rng: &mut ChaCha8Rng,
    trajectory: Option<&[BpState]>,
) -> (Vec<RawSegment>, PatientTruth) {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let gauss = |rng: &mut ChaCha8Rng| std_normal.sample(rng);
    let events_per_seg = if cfg.event_rate > 0.0 {
        Some(Poisson::new(cfg.event_rate).unwrap())
    } else {
        None
    };

    let mut hr = rng.random_range(cfg.hr_range.0..=cfg.hr_range.1);
    let mut sbp = rng.random_range(cfg.sbp_range.0..=cfg.sbp_range.1);
    let mut dbp = rng.random_range(cfg.dbp_range.0..=cfg.dbp_range.1);
    if sbp - dbp < 20.0 {
        dbp = sbp - 20.0;
    }
    let n_segments = trajectory.map_or(cfg.segments_per_patient, |t| t.len());
    let seg_len = cfg.segment_len();
    let mut events = Vec::new();
    let mut out = Vec::with_capacity(n_segments);
    let mut truths = Vec::with_capacity(n_segments);
    let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);

    for s in 0..n_segments {
        if let Some(traj) = trajectory {
            sbp = traj[s].sbp;
            dbp = traj[s].dbp;
        } else if s > 0 {
            let mut step = cfg.walk_sigma * gauss(rng);
            if let Some(pois) = &events_per_seg {
                let k = pois.sample(rng) as usize;
                for _ in 0..k {
                    let mag = rng.random_range(cfg.event_magnitude.0..=cfg.event_magnitude.1);
                    let signed = if rng.random::<bool>() { mag } else { -mag };
                    events.push(StepEvent {
                        segment: s,
                        sbp_change: signed,
                    });
                    step += signed;
                }
            }
            let new_sbp = reflect(sbp + step, 80.0, 200.0);
            let dstep = cfg.dbp_follow * (new_sbp - sbp) + 0.3 * cfg.walk_sigma * gauss(rng);
            sbp = new_sbp;
            dbp = reflect(dbp + dstep, 40.0, 120.0);
            if sbp - dbp < 20.0 {
                dbp = (sbp - 20.0).max(40.0);
                sbp = sbp.max(dbp + 20.0);
            }
        }
        if s > 0 {
            hr = reflect(hr + cfg.hr_walk_sigma * gauss(rng), 40.0, 180.0);
        }
        let state = BpState { sbp, dbp };
        let base_lobes = morphology(state.mbp(), cfg.coupling_gain);

        // beats covering [-1 period, segment end + 1 period]
        let seg_t = cfg.segment_seconds;
        let nominal = 60.0 / hr;
        let mut t = -rng.random_range(0.0..nominal) - nominal;
        let mut beats: Vec<Beat> = Vec::new();
        while t < seg_t + nominal {
            let period = nominal * (1.0 + cfg.period_jitter * gauss(rng));
            let mut lobes = base_lobes;
            lobes[1].amp *= 1.0 + cfg.morphology_jitter * gauss(rng);
            beats.push(Beat {
                onset: t,
                period,
                lobes,
                sbp: sbp + cfg.beat_jitter * gauss(rng),
                dbp: dbp + cfg.beat_jitter * gauss(rng),
            });
            t += period;
        }

        let fs = cfg.fs;
        let mut clean = vec![0.0; seg_len];
        for b in &beats {
            let lo = ((b.onset - 0.5 * b.period) * fs).floor().max(0.0) as usize;
            let hi = (((b.onset + 1.6 * b.period) * fs).ceil().max(0.0) as usize).min(seg_len);
            for (i, v) in clean.iter_mut().enumerate().take(hi).skip(lo) {
                *v += lobe_sum(&b.lobes, b.period, i as f64 / fs - b.onset);
            }
        }
        let mut abp = vec![0.0; seg_len];
        let mut k = 0;
        for (i, v) in abp.iter_mut().enumerate() {
            let ti = i as f64 / fs;
            while k + 1 < beats.len() && beats[k + 1].onset <= ti {
                k += 1;
            }
            let b = &beats[k];
            let d_next = beats.get(k + 1).map_or(b.dbp, |n| n.dbp);
            *v = abp_value(b.dbp, b.sbp, d_next, b.period, ti - b.onset);
        }

        let mut onsets = Vec::new();
        let mut feet = Vec::new();
        let mut beat_sbp = Vec::new();
        let mut beat_dbp = Vec::new();
        let mut complete = Vec::new();
        for (bi, b) in beats.iter().enumerate() {
            let pos = b.onset * fs;
            let reach = 0.15 * b.period * fs;
            if pos + reach >= 0.0 && pos - reach < seg_len as f64 - 1.0 {
                let lo = (pos - reach).floor().max(0.0) as usize;
                let hi = ((pos + reach).ceil().max(0.0) as usize).min(seg_len - 1);
                let mut best = lo;
                for i in lo..=hi {
                    if clean[i] < clean[best] {
                        best = i;
                    }
                }
                feet.push(best);
            }
            if pos >= 0.0 && pos < seg_len as f64 {
                onsets.push(pos);
                if let Some(next) = beats.get(bi + 1) {
                    if next.onset * fs < seg_len as f64 - 1.0 {
                        beat_sbp.push(b.sbp);
                        beat_dbp.push(b.dbp);
                        complete.push(pos);
                    }
                }
            }
        }
        let in_seg: Vec<&Beat> = beats
            .iter()
            .filter(|b| b.onset >= 0.0 && b.onset < seg_t)
            .collect();
        let mean_dicrotic_amp =
            in_seg.iter().map(|b| b.lobes[1].amp).sum::<f64>() / in_seg.len().max(1) as f64;

        let ppg: Vec<f64> = clean
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ti = i as f64 / fs + s as f64 * seg_t;
                v + cfg.wander_amplitude * (std::f64::consts::TAU * 0.25 * ti + wander_phase).sin()
                    + cfg.noise_sigma * gauss(rng)
            })
            .collect();

        out.push(RawSegment {
            patient_id: pid.to_string(),
            index: s as u64,
            fs,
            ppg,
            abp: Some(abp),
            sbp: None,
            dbp: None,
        });
        truths.push(SegmentTruth {
            index: s as u64,
            bp: state,
            hr,
            beat_onsets: onsets,
            ppg_feet: feet,
            beat_sbp,
            beat_dbp,
            complete_beat_onsets: complete,
            mean_dicrotic_amp,
        });
    }
    (
        out,
        PatientTruth {
            patient_id: pid.to_string(),
            events,
            segments: truths,
        },
    )
}
