//! Measures sdPPG waveform features on generated beats and sets them beside
//! the exact values of the underlying waveform. Only the amplitude ratios are
//! shown: the measured sdPPG is rescaled to unit peak, so slopes differ in
//! units from the exact ones.

use bpshift::fiducials::{
    extract_features, locate_fiducials, normalized_sdppg, FeatureVector,
};
use bpshift::signal::SampledSignal;
use bpshift::synth::{gen_beat, BpState};

fn main() {
    let fs = 125.0;
    const RATIOS: [usize; 3] = [0, 3, 4];
    let names: Vec<&str> = RATIOS.iter().map(|&k| FeatureVector::NAMES[k]).collect();
    println!("  MBP           {}", names.join("  "));
    for sbp in [100.0, 120.0, 140.0, 160.0] {
        let bp = BpState { sbp, dbp: sbp - 45.0 };
        let beat = gen_beat(70.0, bp, 1.0, fs, 3).unwrap();
        let Some(exact) = beat.fiducials else { continue };
        // three copies so the filters settle before the middle beat
        let ppg: Vec<f64> = beat.ppg.iter().chain(&beat.ppg).chain(&beat.ppg).cloned().collect();
        let n = beat.ppg.len();
        let sd = normalized_sdppg(&SampledSignal::new(ppg, fs).unwrap()).unwrap();
        let mid = SampledSignal::new(sd.samples[n..2 * n].to_vec(), fs).unwrap();
        let measured = locate_fiducials(&mid, n).and_then(|f| extract_features(&f));
        let fmt = |v: [f64; 5]| RATIOS.map(|k| format!("{:>8.3}", v[k])).join(" ");
        println!("{:>5.1} exact    {}", bp.mbp(), fmt(exact.features()));
        match measured {
            Ok(f) => println!("      measured {}", fmt(f.to_array())),
            Err(e) => println!("      measured: {e}"),
        }
    }
}
