//! Trains the Encoder on a synthetic cohort and reports Test-I and Test-II
//! metrics.
//!
//! cargo run --release --example train_encoder -- [epochs]

use bpshift::config::RunConfig;
use bpshift::experiment::{Cell, Experiment};
use bpshift::io::{by_patient, ingest};
use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let epochs: usize = std::env::args().nth(1).map_or(15, |a| a.parse().expect("epochs"));
    let synth = SynthConfig {
        n_patients: 30,
        seed: 7,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let recs = ingest(&gen_cohort(&synth).unwrap().segments).unwrap().records;
    let cfg = RunConfig {
        seed: 7,
        per_class: 400,
        test1_per_class: 200,
        n_test1_patients: 6,
        n_test2_patients: 4,
        epochs: Some(epochs),
        ..RunConfig::default()
    };
    let mut exp = Experiment::new(cfg, by_patient(recs)).unwrap();
    let cell = Cell::from_config(&exp.config);
    let out = exp
        .train_cell(&cell, None, |r| {
            println!(
                "epoch {:>3} train acc {:.3} val acc {:.3}",
                r.epoch,
                r.train_accuracy,
                r.val_accuracy.unwrap_or(f64::NAN)
            )
        })
        .unwrap();
    let report = exp.evaluate_cell(&out.model, &cell).unwrap();
    for s in &report.sets {
        println!(
            "{}: n = {} accuracy {:.3} balanced {:.3} macro F1 {:.3}",
            s.name, s.n, s.metrics.accuracy, s.metrics.balanced_accuracy, s.metrics.macro_f1
        );
    }
}
