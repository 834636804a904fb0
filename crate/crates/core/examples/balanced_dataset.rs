//! Draws a class-balanced training pool from a cohort and writes it as a
//! dataset file.

use bpshift::dataset::{
    balanced_sample, candidate_pairs, read_dataset, write_dataset, InputSpec, InputType,
    PairSet, PreparedCohort,
};
use bpshift::io::{by_patient, ingest};
use bpshift::labeling::BpType;
use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let cfg = SynthConfig {
        n_patients: 10,
        seed: 2,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let recs = ingest(&gen_cohort(&cfg).unwrap().segments).unwrap().records;
    let cohort = PreparedCohort::new(by_patient(recs).into_iter().map(|p| p.1).collect(), 7.0);
    let all: Vec<usize> = (0..cohort.patients.len()).collect();
    let spec = InputSpec {
        input_type: InputType::PpgSdppgWaveform,
        bp_type: BpType::Mbp,
        include_initial_bp: true,
    };
    let (pairs, dropped) = candidate_pairs(&cohort, &all, spec.bp_type, 20.0, spec.input_type).unwrap();
    let set = PairSet::new(&cohort, pairs, spec);
    let labels = set.labels();
    println!("{} candidate pairs ({dropped} dropped)", labels.len());

    let ids = balanced_sample(&labels, 100, 5).unwrap();
    let examples = set.subset(&ids).examples().unwrap();
    let e = &examples[0];
    println!(
        "{} examples, each {} channels x {} samples with {} auxiliary input(s)",
        examples.len(),
        e.channels,
        e.length,
        e.aux.len()
    );

    let dir = tempfile_dir();
    let stem = dir.join("balanced");
    write_dataset(&stem, &examples).unwrap();
    assert_eq!(read_dataset(&stem).unwrap(), examples);
    println!("round-tripped through {}", stem.display());
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("bpshift-example-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
