//! Detects pulse feet on synthetic PPG and compares them with the
//! generator's noise-free feet.

use bpshift::io::ingest;
use bpshift::signal::{bandpass_ppg, detect_beats, DEFAULT_MAX_HR, DEFAULT_MIN_HR};
use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let cfg = SynthConfig {
        n_patients: 1,
        segments_per_patient: 5,
        seed: 11,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let cohort = gen_cohort(&cfg).unwrap();
    let records = ingest(&cohort.segments).unwrap().records;
    let truth = &cohort.truth.patients[0].segments;
    for (rec, t) in records.iter().zip(truth) {
        let filtered = bandpass_ppg(&rec.ppg);
        let beats = detect_beats(&filtered, DEFAULT_MIN_HR, DEFAULT_MAX_HR).unwrap();
        // nearest true foot for every detected one, in samples
        let err: Vec<i64> = beats
            .feet
            .iter()
            .map(|&f| {
                t.ppg_feet
                    .iter()
                    .map(|&g| f as i64 - g as i64)
                    .min_by_key(|d| d.abs())
                    .unwrap_or(i64::MAX)
            })
            .collect();
        println!(
            "segment {}: HR {:.0} bpm, {} feet detected / {} true, offsets {:?}",
            rec.index,
            t.hr,
            beats.feet.len(),
            t.ppg_feet.len(),
            err
        );
    }
}
