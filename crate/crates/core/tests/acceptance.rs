//! End-to-end acceptance checks. Every criterion prints one `PASS` or `FAIL`
//! line to stderr (uncaptured) and then asserts.
//!
//! The trained-model criteria are slow on one core: the learnability run
//! alone trains two models on 4,800 pairs each.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bpshift::config::RunConfig;
use bpshift::dataset::InputType;
use bpshift::evaluation::{metrics, ConfusionMatrix};
use bpshift::experiment::{Cell, Experiment};
use bpshift::fiducials::{extract_features, locate_fiducials};
use bpshift::io::{by_patient, ingest};
use bpshift::labeling::{enumerate_pairs, label_patient, BpType, ChangeLabel};
use bpshift::models::{Arch, Model, ModelSpec, Preset};
use bpshift::nn::gradcheck::check_gradients;
use bpshift::nn::{ops, NnError, Tape, Tensor, Var};
use bpshift::signal::{
    second_derivative, segment_bp_summary, SampledSignal, SegmentRecord,
};
use bpshift::synth::{gen_beat, gen_cohort, BpState, SynthConfig, SynthPreset};
use bpshift::train::EpochRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training criteria time themselves, so they must not share the core.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{tag} {name}: {detail}");
    pass
}

fn progress(label: &str) -> impl FnMut(&EpochRecord) + '_ {
    let start = Instant::now();
    move |r| {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "  [{label}] epoch {:3} loss {:.4} val {:.4}{} {:6.0}s",
            r.epoch,
            r.train_loss,
            r.val_accuracy.unwrap_or(f64::NAN),
            if r.improved { " *" } else { "" },
            start.elapsed().as_secs_f64()
        );
    }
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

type Op = fn(&mut Tape, &[Var]) -> Result<Var, NnError>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[test]
fn gradient_suite() {
    let _g = serial();
    let ops_under_test: Vec<(&str, bool, Vec<Vec<usize>>, Op)> = vec![
        ("dense", false, vec![vec![3, 4], vec![5, 4], vec![5]], |t, v| t.dense(v[0], v[1], v[2])),
        ("conv1d", false, vec![vec![2, 3, 7], vec![4, 3, 3], vec![4]], |t, v| {
            t.conv1d(v[0], v[1], v[2])
        }),
        ("instance_norm", true, vec![vec![2, 3, 6], vec![3], vec![3]], |t, v| {
            t.instance_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("prelu", false, vec![vec![2, 3, 5], vec![3]], |t, v| t.prelu(v[0], v[1])),
        ("dropout", false, vec![vec![2, 3, 4]], |t, v| {
            let mask = ops::dropout_mask(24, 0.3, &mut ChaCha8Rng::seed_from_u64(5));
            t.dropout(v[0], mask)
        }),
        ("global_average_pool", false, vec![vec![2, 3, 5]], |t, v| t.global_average_pool(v[0])),
        ("max_pool", false, vec![vec![2, 3, 8]], |t, v| t.max_pool(v[0], 2, 2)),
        ("softmax_attention", false, vec![vec![2, 3, 6]], |t, v| t.softmax_attention(v[0])),
        ("add", false, vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("concat", false, vec![vec![2, 1, 4], vec![2, 3, 4]], |t, v| t.concat(&[v[0], v[1]])),
        ("broadcast_time", false, vec![vec![2, 3]], |t, v| t.broadcast_time(v[0], 5)),
        ("reshape", false, vec![vec![2, 3, 4]], |t, v| t.reshape(v[0], &[2, 4, 3])),
        ("flatten", false, vec![vec![2, 3, 4]], |t, v| t.flatten(v[0])),
        ("cross_entropy", false, vec![vec![4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    ];
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_norm: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    for (name, norm, shapes, f) in &ops_under_test {
        let tol = if *norm { 1e-4 } else { 1e-6 };
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = check_gradients(&inputs, 1e-5, seed + 100, f).unwrap();
            if *norm {
                worst_norm = worst_norm.max(r.max_rel_error);
            } else {
                worst_other = worst_other.max(r.max_rel_error);
            }
            if r.max_rel_error >= tol {
                failures.push(format!("{name}#{seed}: {:e}", r.max_rel_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = verdict(
        "gradient suite",
        failures.is_empty() && secs < 60.0,
        &format!(
            "{} ops x 10 instances, worst {worst_norm:.1e} (norm) / {worst_other:.1e} (others), {secs:.1}s {failures:?}",
            ops_under_test.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// labeling
// ---------------------------------------------------------------------------

fn records(sbp: &[f64], dbp: &[f64]) -> Vec<SegmentRecord> {
    let ppg = SampledSignal::new(vec![0.0; 4], 125.0).unwrap();
    sbp.iter()
        .zip(dbp)
        .enumerate()
        .map(|(k, (&s, &d))| SegmentRecord::new("p", k as u64, ppg.clone(), s, d).unwrap())
        .collect()
}

/// Direct restatement of the labeling rule, independent of the library.
fn brute_force(series: &[f64], threshold: f64) -> Vec<(usize, usize, f64, ChangeLabel)> {
    let n = series.len();
    let mut out = Vec::new();
    for i in 1..n {
        for j in 1..=(n - i) {
            let d = series[i + j - 1] - series[i - 1];
            let label = if d > threshold {
                ChangeLabel::Spike
            } else if d < -threshold {
                ChangeLabel::Dip
            } else {
                ChangeLabel::Stable
            };
            out.push((i, j, d, label));
        }
    }
    out
}

#[test]
fn labeling_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        // whole mmHg values so deltas land exactly on grid thresholds
        let sbp: Vec<f64> = (0..n).map(|_| rng.random_range(90..=180) as f64).collect();
        let dbp: Vec<f64> = sbp
            .iter()
            .map(|s| s - rng.random_range(25..=60) as f64)
            .collect();
        let segs = records(&sbp, &dbp);
        for t in BpType::ALL {
            let series: Vec<f64> = match t {
                BpType::Sbp => sbp.clone(),
                BpType::Dbp => dbp.clone(),
                BpType::Mbp => sbp.iter().zip(&dbp).map(|(s, d)| (s + 2.0 * d) / 3.0).collect(),
            };
            for threshold in t.grid() {
                let got = label_patient(&segs, t, threshold).unwrap();
                let want = brute_force(&series, threshold);
                compared += 1;
                let same = got.len() == want.len()
                    && got.iter().zip(&want).all(|(g, w)| {
                        (g.i, g.j, g.delta.to_bits(), g.label) == (w.0, w.1, w.2.to_bits(), w.3)
                    });
                if !same {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = verdict(
        "labeling oracle",
        mismatches == 0 && secs < 60.0,
        &format!("{compared} (series, type, threshold) cases, {mismatches} mismatches, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn pair_count_law() {
    let _g = serial();
    let bad: Vec<usize> = (2..=500)
        .filter(|&n| enumerate_pairs(n).unwrap().count() != n * (n - 1) / 2)
        .collect();
    let pass = verdict(
        "pair-count law",
        bad.is_empty(),
        &format!("N in [2, 500], violations {bad:?}"),
    );
    assert!(pass);
}

#[test]
fn mbp_identity() {
    let _g = serial();
    let mut cfg = SynthConfig::preset(SynthPreset::Learnable);
    cfg.n_patients = 20;
    cfg.segments_per_patient = 50;
    cfg.seed = 11;
    let cohort = gen_cohort(&cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for seg in &cohort.segments {
        let abp = SampledSignal::new(seg.abp.clone().unwrap(), seg.fs).unwrap();
        let (sbp, dbp, mbp) = segment_bp_summary(&abp).unwrap();
        worst = worst.max((mbp - (sbp + 2.0 * dbp) / 3.0).abs());
        n += 1;
    }
    let pass = verdict(
        "MBP identity",
        n == 1000 && worst <= 1e-9,
        &format!("{n} segments, worst |mbp - (sbp + 2 dbp)/3| = {worst:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Non-negative rational in lowest terms; `0/0` is read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Q(u128, u128);

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Q {
    fn new(n: u128, d: u128) -> Q {
        if d == 0 || n == 0 {
            return Q(0, 1);
        }
        let g = gcd(n, d);
        Q(n / g, d / g)
    }
    fn add(self, o: Q) -> Q {
        Q::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Q) -> Q {
        Q::new(self.0 * o.0, self.1 * o.1)
    }
    fn div(self, o: Q) -> Q {
        Q::new(self.0 * o.1, self.1 * o.0)
    }
    fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

struct HandMetrics {
    accuracy: Q,
    precision: [Q; 3],
    recall: [Q; 3],
    f1: [Q; 3],
    class_accuracy: [Q; 3],
    macro_f1: Q,
}

fn by_hand(c: &[[u64; 3]; 3]) -> HandMetrics {
    let total: u128 = c.iter().flatten().map(|&v| v as u128).sum();
    let col = |k: usize| (0..3).map(|r| c[r][k] as u128).sum::<u128>();
    let row = |k: usize| (0..3).map(|p| c[k][p] as u128).sum::<u128>();
    let mut h = HandMetrics {
        accuracy: Q::new((0..3).map(|k| c[k][k] as u128).sum(), total),
        precision: [Q(0, 1); 3],
        recall: [Q(0, 1); 3],
        f1: [Q(0, 1); 3],
        class_accuracy: [Q(0, 1); 3],
        macro_f1: Q(0, 1),
    };
    for k in 0..3 {
        let tp = c[k][k] as u128;
        let (fp, fn_) = (col(k) - tp, row(k) - tp);
        let tn = total - tp - fp - fn_;
        h.precision[k] = Q::new(tp, tp + fp);
        h.recall[k] = Q::new(tp, tp + fn_);
        let two = Q(2, 1);
        let pr = h.precision[k].mul(h.recall[k]);
        let s = h.precision[k].add(h.recall[k]);
        h.f1[k] = if s.0 == 0 { Q(0, 1) } else { two.mul(pr).div(s) };
        // the harmonic mean collapses to 2TP / (2TP + FP + FN)
        assert_eq!(h.f1[k], Q::new(2 * tp, 2 * tp + fp + fn_));
        h.class_accuracy[k] = Q::new(tp + tn, total);
        h.macro_f1 = h.macro_f1.add(h.f1[k].mul(Q(1, 3)));
    }
    h
}

#[test]
fn metrics_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for m in 0..100 {
        let mut counts = [[0u64; 3]; 3];
        for r in counts.iter_mut() {
            for v in r.iter_mut() {
                // sparse matrices exercise the 0/0 conventions
                *v = if m % 5 == 0 && rng.random_bool(0.4) {
                    0
                } else {
                    rng.random_range(0..1000)
                };
            }
        }
        if counts.iter().flatten().all(|&v| v == 0) {
            counts[1][1] = 1;
        }
        let got = metrics(&ConfusionMatrix::new(counts)).unwrap();
        let want = by_hand(&counts);
        let mut err = |a: f64, b: Q| worst = worst.max((a - b.f()).abs());
        err(got.accuracy, want.accuracy);
        err(got.macro_f1, want.macro_f1);
        for k in 0..3 {
            let c = &got.per_class[k];
            err(c.precision, want.precision[k]);
            err(c.recall, want.recall[k]);
            err(c.f1, want.f1[k]);
            err(c.accuracy, want.class_accuracy[k]);
        }
    }
    let pass = verdict(
        "metrics oracle",
        worst < 1e-12,
        &format!("100 matrices vs rational hand computation, worst float error {worst:.1e}"),
    );
    assert!(pass);
}

#[test]
fn architecture_conformance() {
    let _g = serial();
    let expected = [
        (Arch::Mlp, 4, 0),
        (Arch::Cnn, 4, 3),
        (Arch::Resnet, 11, 10),
        (Arch::Encoder, 5, 3),
    ];
    let mut rows = Vec::new();
    let mut ok = true;
    for (arch, layers, convs) in expected {
        for preset in [Preset::Paper, Preset::Desk] {
            let mut spec = ModelSpec::new(arch, preset, 4, 875);
            spec.include_initial_bp = true;
            let m = Model::build(&spec, 0).unwrap();
            let got = (m.layer_count(), m.conv_count());
            ok &= got == (layers, convs);
            if preset == Preset::Paper {
                rows.push(format!("{}={}/{}", arch.name(), got.0, got.1));
            }
        }
    }
    let pass = verdict("architecture conformance", ok, &rows.join(" "));
    assert!(pass);
}

#[test]
fn fiducial_recovery() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut ok = 0;
    let mut errs = Vec::new();
    for k in 0..1000u64 {
        let hr = rng.random_range(55.0..95.0);
        let sbp = rng.random_range(90.0..170.0);
        let dbp = rng.random_range(50.0..sbp - 25.0);
        let beat = gen_beat(hr, BpState { sbp, dbp }, 1.0, 125.0, k).unwrap();
        let truth = beat.fiducials.expect("analytic fiducials");
        let sd = second_derivative(&SampledSignal::new(beat.ppg.clone(), beat.fs).unwrap()).unwrap();
        let Ok(fid) = locate_fiducials(&sd, 0) else { continue };
        let Ok(f) = extract_features(&fid) else { continue };
        ok += 1;
        for (got, want) in f.to_array().iter().zip(truth.features()) {
            errs.push(((got - want) / want).abs());
        }
    }
    errs.sort_by(f64::total_cmp);
    let med = errs.get(errs.len() / 2).copied().unwrap_or(f64::INFINITY);
    let pass = verdict(
        "fiducial recovery",
        ok >= 950 && med <= 0.02,
        &format!("{ok}/1000 beats located, median relative feature error {:.2}%", med * 100.0),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// trained models
// ---------------------------------------------------------------------------

fn experiment(cfg: RunConfig) -> Experiment {
    let cohort = gen_cohort(&cfg.synth).unwrap();
    let ing = ingest(&cohort.segments).unwrap();
    Experiment::new(cfg, by_patient(ing.records)).unwrap()
}

const BUDGET: Duration = Duration::from_secs(30 * 60);

/// 65 learnable patients: 50 train, 10 Test-I, 5 Test-II. Every training run
/// gets the same 30 min single-threaded budget.
fn learnable_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 7,
        time_budget_s: Some(BUDGET.as_secs_f64()),
        ..RunConfig::default()
    };
    cfg.synth.seed = 7;
    cfg
}

/// Learnability, the initial-BP ablation, and the report fields they share.
#[test]
fn learnability_and_ablation() {
    let _g = serial();
    let cfg = learnable_config();
    assert_eq!((cfg.per_class, cfg.threshold(), cfg.bp_type), (2000, 20.0, BpType::Mbp));
    let mut exp = experiment(cfg.clone());
    assert_eq!(exp.partition.train.len(), 50);

    let enc_cell = Cell::from_config(&cfg);
    assert_eq!(
        (enc_cell.arch, enc_cell.input_type, enc_cell.include_initial_bp),
        (Arch::Encoder, InputType::PpgSdppgWaveform, true)
    );
    let start = Instant::now();
    let enc = exp.train_cell(&enc_cell, None, progress("encoder")).unwrap();
    let enc_time = start.elapsed();
    let enc_report = exp.evaluate_cell(&enc.model, &enc_cell).unwrap();

    let mlp_cell = Cell {
        arch: Arch::Mlp,
        ..enc_cell
    };
    let mlp = exp.train_cell(&mlp_cell, None, progress("mlp")).unwrap();
    let mlp_report = exp.evaluate_cell(&mlp.model, &mlp_cell).unwrap();

    let enc_bal = enc_report.set("test1").unwrap().balanced_accuracy;
    let mlp_bal = mlp_report.set("test1").unwrap().balanced_accuracy;
    let a = verdict(
        "learnability: encoder >= 80%",
        enc_bal >= 0.80 && enc_time < BUDGET,
        &format!(
            "Test-I balanced accuracy {:.1}% after {} epochs in {:.0}s",
            enc_bal * 100.0,
            enc.history.len(),
            enc_time.as_secs_f64()
        ),
    );
    let b = verdict(
        "learnability: mlp >= 60%",
        mlp_bal >= 0.60,
        &format!(
            "Test-I balanced accuracy {:.1}% after {} epochs",
            mlp_bal * 100.0,
            mlp.history.len()
        ),
    );
    let c = verdict(
        "learnability: encoder >= mlp + 5 points",
        enc_bal >= mlp_bal + 0.05,
        &format!("margin {:+.1} points", (enc_bal - mlp_bal) * 100.0),
    );

    let bare_cell = Cell {
        include_initial_bp: false,
        ..enc_cell
    };
    let bare = exp.train_cell(&bare_cell, None, progress("encoder, no initial BP")).unwrap();
    let bare_report = exp.evaluate_cell(&bare.model, &bare_cell).unwrap();
    let with_bp = enc_report.set("test2").unwrap().accuracy;
    let without = bare_report.set("test2").unwrap().accuracy;
    let d = verdict(
        "ablation direction",
        with_bp >= without - 0.01,
        &format!(
            "Test-II accuracy with initial BP {:.1}%, without {:.1}%",
            with_bp * 100.0,
            without * 100.0
        ),
    );
    assert!(a && b && c && d);
}

/// Every architecture on the gain-0 cohort stays at chance.
#[test]
fn negative_control() {
    let _g = serial();
    let mut cfg = learnable_config();
    // 50 train patients as before; a larger Test-I cohort narrows the
    // spread of a chance-level score
    cfg.synth = SynthConfig {
        n_patients: 80,
        seed: 7,
        ..SynthConfig::preset(SynthPreset::Control)
    };
    cfg.n_test1_patients = 25;
    cfg.test1_per_class = 1500;
    cfg.per_class = 1000;
    // the initial reading predicts its own change (regression to the mean),
    // so it is left out to test the waveform path alone
    cfg.include_initial_bp = false;
    let mut exp = experiment(cfg.clone());
    let base = Cell::from_config(&cfg);
    let mut rows = Vec::new();
    let mut ok = true;
    for arch in Arch::ALL {
        let cell = Cell { arch, ..base };
        let out = exp.train_cell(&cell, None, progress(arch.name())).unwrap();
        let report = exp.evaluate_cell(&out.model, &cell).unwrap();
        let acc = report.set("test1").unwrap().accuracy;
        ok &= (acc - 1.0 / 3.0).abs() <= 0.05;
        rows.push(format!("{}={:.1}%", arch.name(), acc * 100.0));
    }
    let pass = verdict("negative control", ok, &format!("Test-I accuracy {}", rows.join(" ")));
    assert!(pass);
}

/// Threshold sweep on a cohort whose pressure moves by Gaussian steps only.
#[test]
fn sweep_shape() {
    let _g = serial();
    let mut cfg = learnable_config();
    cfg.synth.event_rate = 0.0;
    cfg.synth.walk_sigma = 4.0;
    // Test-I does not enter this criterion; a small sample keeps more of
    // the grid feasible
    cfg.test1_per_class = 100;
    let mut exp = experiment(cfg.clone());
    let cell = Cell::from_config(&cfg);
    let grid = BpType::Mbp.grid();
    let report = exp
        .threshold_sweep(&cell, &grid, false, |p| {
            let mut err = std::io::stderr().lock();
            let _ = writeln!(
                err,
                "  [sweep] θ={} stable {:.3} test2 {}",
                p.threshold,
                p.stable_fraction,
                p.report
                    .as_ref()
                    .and_then(|r| r.set("test2"))
                    .map_or_else(|| p.error.clone().unwrap_or_default(), |m| format!("{:.3}", m.accuracy))
            );
        })
        .unwrap();
    let fractions: Vec<f64> = report.points.iter().map(|p| p.stable_fraction).collect();
    let baseline: Vec<f64> = report.points.iter().map(|p| p.baseline_accuracy).collect();
    let nondecreasing = |v: &[f64], slack: f64| v.windows(2).all(|w| w[1] >= w[0] - slack);
    let a = verdict(
        "sweep shape: stable fraction and always-stable baseline",
        nondecreasing(&fractions, 0.0) && nondecreasing(&baseline, 0.0) && fractions == baseline,
        &format!("stable fraction {fractions:.3?}"),
    );
    let accs: Vec<(f64, f64)> = report
        .points
        .iter()
        .filter_map(|p| Some((p.threshold, p.report.as_ref()?.set("test2")?.accuracy)))
        .collect();
    let series: Vec<f64> = accs.iter().map(|a| a.1).collect();
    let b = verdict(
        "sweep shape: encoder Test-II accuracy",
        accs.len() >= 4 && nondecreasing(&series, 0.03),
        &format!("(θ, accuracy) {accs:.3?}; {} thresholds skipped", grid.len() - accs.len()),
    );
    assert!(a && b);
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let config = r#"{"seed": 5, "per_class": 40, "test1_per_class": 20, "n_test1_patients": 3,
        "n_test2_patients": 2, "epochs": 3, "batch_size": 16}"#;
    std::fs::write(dir.join("run.json"), config).unwrap();
    let cfg = dir.join("run.json");
    let cfg = cfg.to_str().unwrap();
    for args in [
        vec!["synth", "--patients", "12", "--segments", "40", "--seed", "5"],
        vec!["ingest"],
        vec!["label"],
        vec!["sample"],
        vec!["split"],
        vec!["train", "--dataset", "dataset"],
        vec!["evaluate"],
    ] {
        let mut argv = vec!["bp-shift", "--out-dir", dir.to_str().unwrap(), "--config", cfg];
        argv.extend_from_slice(&args);
        let code = bpshift::cli::run(argv.iter().map(|s| s.to_string()));
        assert_eq!(code, 0, "bp-shift {args:?}");
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            (name, std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn determinism() {
    let _g = serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let required = ["dataset.meta.json", "sample.manifest.json", "history.ndjson", "report.json"];
    let covered = required.iter().all(|r| names.contains(r));
    let pass = verdict(
        "determinism",
        first.len() == second.len() && differing.is_empty() && covered,
        &format!("{} files compared across two runs, differing {differing:?}", first.len()),
    );
    assert!(pass);
}
