//! Labels every segment pair of one patient as Spike, Stable or Dip for each
//! pressure type.

use bpshift::io::ingest;
use bpshift::labeling::{label_patient, pair_count, BpType};
use bpshift::synth::{gen_cohort, SynthConfig, SynthPreset};

fn main() {
    let cfg = SynthConfig {
        n_patients: 1,
        seed: 21,
        ..SynthConfig::preset(SynthPreset::Learnable)
    };
    let records = ingest(&gen_cohort(&cfg).unwrap().segments).unwrap().records;
    println!("{} segments -> {} pairs", records.len(), pair_count(records.len()));
    for t in BpType::ALL {
        let th = t.default_threshold();
        let pairs = label_patient(&records, t, th).unwrap();
        let mut counts = [0usize; 3];
        for p in &pairs {
            counts[p.label.index()] += 1;
        }
        let biggest = pairs
            .iter()
            .max_by(|a, b| a.delta.abs().total_cmp(&b.delta.abs()))
            .unwrap();
        println!(
            "{} at {th} mmHg: spike {} stable {} dip {}; largest change {:+.1} (i={}, j={})",
            t.name(),
            counts[0],
            counts[1],
            counts[2],
            biggest.delta,
            biggest.i,
            biggest.j
        );
    }
}
