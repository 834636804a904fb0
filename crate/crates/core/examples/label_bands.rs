//! Builds a patient with a scripted pressure course and prints its label
//! bands: the reference pressure against the first segment's, with the
//! labels each later segment receives.

use bpshift::config::RunConfig;
use bpshift::dataset::InputType;
use bpshift::experiment::{bands_csv, oracle_predictor, Cell, Experiment};
use bpshift::io::{by_patient, ingest};
use bpshift::labeling::BpType;
use bpshift::models::Arch;
use bpshift::synth::{gen_patient_with_trajectory, SynthConfig, SynthPreset};

fn main() {
    // rise by 40 mmHg, hold, then fall well below the start
    let sbp: Vec<f64> = (0..40)
        .map(|k| match k {
            0..=9 => 120.0,
            10..=19 => 120.0 + 4.0 * (k - 9) as f64,
            20..=29 => 160.0,
            _ => 100.0,
        })
        .collect();
    let dbp: Vec<f64> = sbp.iter().map(|s| s - 45.0).collect();
    let synth = SynthConfig {
        n_patients: 1,
        segments_per_patient: sbp.len(),
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let (raw, _) = gen_patient_with_trajectory(&synth, "demo", &sbp, &dbp).unwrap();
    let recs = ingest(&raw).unwrap().records;
    let cfg = RunConfig {
        n_test1_patients: 0,
        n_test2_patients: 0,
        ..RunConfig::default()
    };
    let mut exp = Experiment::new(cfg, by_patient(recs)).unwrap();
    let cell = Cell {
        arch: Arch::Encoder,
        input_type: InputType::PpgSdppgWaveform,
        bp_type: BpType::Sbp,
        threshold: 30.0,
        seconds: 7.0,
        include_initial_bp: true,
    };
    let rows = exp.label_bands("demo", &cell, oracle_predictor).unwrap();
    print!("{}", bands_csv(&rows));
}
