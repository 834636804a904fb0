//! Runs a reduced experiment matrix and prints its summary table.

use bpshift::config::RunConfig;
use bpshift::experiment::MatrixPlan;
use bpshift::experiment::Experiment;
use bpshift::io::{by_patient, ingest};
use bpshift::labeling::BpType;
use bpshift::models::Arch;
use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let synth = SynthConfig {
        n_patients: 16,
        event_rate: 0.3,
        seed: 9,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let recs = ingest(&gen_cohort(&synth).unwrap().segments).unwrap().records;
    let cfg = RunConfig {
        seed: 9,
        per_class: 80,
        test1_per_class: 30,
        n_test1_patients: 4,
        n_test2_patients: 3,
        epochs: Some(3),
        ..RunConfig::default()
    };
    let mut exp = Experiment::new(cfg, by_patient(recs)).unwrap();
    let plan = MatrixPlan {
        archs: vec![Arch::Mlp, Arch::Encoder],
        bp_types: vec![BpType::Mbp],
        lengths: vec![5.0, 7.0],
        ..MatrixPlan::default()
    };
    let report = exp
        .run_matrix(&plan, |section, r| eprintln!("{section}: {} done", r.meta.arch.name()))
        .unwrap();
    print!("{}", report.summary_csv());
}
