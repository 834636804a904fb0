//! Generates a small synthetic cohort and summarizes each patient's pressure
//! trajectory.
//!
//! cargo run --release --example synth_cohort -- [patients] [seed]

use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(5, |a| a.parse().expect("patients"));
    let seed: u64 = args.next().map_or(1, |a| a.parse().expect("seed"));
    let cfg = SynthConfig {
        n_patients: n,
        seed,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let cohort = gen_cohort(&cfg).expect("valid preset");
    println!(
        "{} segments of {} samples at {} Hz",
        cohort.segments.len(),
        cfg.segment_len(),
        cfg.fs
    );
    for p in &cohort.truth.patients {
        let sbp: Vec<f64> = p.segments.iter().map(|s| s.bp.sbp).collect();
        let lo = sbp.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sbp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{}: SBP {lo:.0}..{hi:.0} mmHg, {} step events",
            p.patient_id,
            p.events.len()
        );
    }
}
