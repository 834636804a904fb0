//! Sweeps the MBP threshold and prints how the Test-II class mix and accuracy
//! move with it.

use bpshift::config::RunConfig;
use bpshift::experiment::{Cell, Experiment};
use bpshift::io::{by_patient, ingest};
use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let synth = SynthConfig {
        n_patients: 20,
        seed: 4,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let recs = ingest(&gen_cohort(&synth).unwrap().segments).unwrap().records;
    let cfg = RunConfig {
        seed: 4,
        per_class: 150,
        test1_per_class: 50,
        n_test1_patients: 4,
        n_test2_patients: 3,
        epochs: Some(5),
        reuse_model: true,
        ..RunConfig::default()
    };
    let mut exp = Experiment::new(cfg, by_patient(recs)).unwrap();
    let cell = Cell::from_config(&exp.config);
    let grid = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
    let report = exp.threshold_sweep(&cell, &grid, true, |_| {}).unwrap();
    print!("{}", report.to_csv());
}
