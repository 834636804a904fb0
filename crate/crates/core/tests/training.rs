//! Training and evaluation contracts on constructed data.

use bpshift::dataset::{Example, ExampleMeta};
use bpshift::evaluation::{evaluate, run_model};
use bpshift::labeling::ChangeLabel;
use bpshift::models::{Arch, Model, ModelSpec, Preset};
use bpshift::nn::{ops, Tensor};
use bpshift::train::train;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LEN: usize = 16;

fn example(x: Vec<f32>, channels: usize, y: ChangeLabel, aux: Vec<f32>) -> Example {
    Example {
        length: x.len() / channels,
        x,
        channels,
        aux,
        y,
        meta: ExampleMeta {
            patient_id: "toy".into(),
            i: 1,
            j: 1,
            delta: 0.0,
            bp_i: 100.0,
        },
    }
}

/// Three classes whose signals are offset along orthogonal templates, so a
/// linear map separates them with a wide margin.
fn separable(n_per_class: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut out = Vec::new();
    for k in 0..n_per_class * 3 {
        let label = ChangeLabel::ALL[k % 3];
        let c = label.index();
        let x: Vec<f32> = (0..LEN)
            .map(|t| {
                let template = if t % 3 == c { 1.0 } else { 0.0 };
                (template + noise.sample(&mut rng)) as f32
            })
            .collect();
        out.push(example(x, 1, label, vec![]));
    }
    out
}

fn mlp(epochs: usize, lr: f64) -> Model {
    let mut spec = ModelSpec::new(Arch::Mlp, Preset::Desk, 1, LEN);
    spec.hidden = 32;
    spec.epochs = epochs;
    spec.patience = epochs;
    spec.lr = lr;
    Model::build(&spec, 1).unwrap()
}

#[test]
fn mlp_fits_separable_classes() {
    let data = separable(60, 4);
    let out = train(mlp(200, 1e-3), &data, None, 9).unwrap();
    let best = out.history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.99, "best train accuracy {best}");
    assert!(out.history.len() <= 200);
    let m = evaluate(&out.model, &data).unwrap();
    assert!(m.accuracy >= 0.99, "{m:?}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = separable(20, 5);
    let start = mlp(7, 0.0);
    let out = train(start.clone(), &data, Some(&data[..12].to_vec()), 3).unwrap();
    // moments and the step counter advance, the weights do not
    for name in start.params.names() {
        assert_eq!(out.model.params.get(name), start.params.get(name), "{name}");
    }
    assert!(out.model.params.step > 0);
}

#[test]
fn evaluation_ignores_example_order() {
    let data = separable(30, 6);
    let model = mlp(1, 1e-3);
    let forward = evaluate(&model, &data).unwrap();
    let mut shuffled = data.clone();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(evaluate(&model, &shuffled).unwrap(), forward);
    shuffled.reverse();
    assert_eq!(evaluate(&model, &shuffled).unwrap(), forward);
}

#[test]
fn single_example_scores_zero_or_one() {
    let data = separable(3, 7);
    let model = mlp(1, 1e-3);
    for e in &data {
        let m = evaluate(&model, &vec![e.clone()]).unwrap();
        assert!(m.accuracy == 0.0 || m.accuracy == 1.0);
        assert_eq!(m.confusion.total(), 1);
    }
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    for arch in Arch::ALL {
        let mut spec = ModelSpec::new(arch, Preset::Desk, 4, 64);
        spec.include_initial_bp = true;
        let model = Model::build(&spec, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::new(vec![3, 4, 64], (0..3 * 4 * 64).map(|_| rng.random_range(0.0..1.0)).collect());
        let aux = Tensor::new(vec![3, 1], vec![0.5, 0.6, 0.7]);
        let before = model.to_checkpoint();
        let a = model.logits(x.clone(), Some(aux.clone())).unwrap();
        let b = model.logits(x, Some(aux)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b), "{arch:?}");
        assert_eq!(model.to_checkpoint(), before);
    }
}

#[test]
fn run_model_predictions_follow_logits() {
    let data = separable(5, 8);
    let model = mlp(1, 1e-3);
    let ev = run_model(&model, &data).unwrap();
    assert_eq!(ev.predictions.len(), data.len());
    assert_eq!(ev.confusion.total(), data.len() as u64);
    assert!(ev.loss.is_finite() && ev.loss > 0.0);
}

/// Attention pooling weighs time steps as a set: moving a run of identical
/// feature columns elsewhere in time leaves the pooled vector unchanged.
fn pooled(h: &[Vec<f64>], len: usize) -> Vec<f64> {
    let ch = h.len();
    let t = Tensor::new(vec![1, ch, len], h.concat());
    ops::softmax_attention_forward(&t).unwrap().0.into_data()
}

proptest! {
    #[test]
    fn attention_ignores_translation_of_a_constant_suffix(
        prefix in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..20),
        column in prop::collection::vec(-3.0f64..3.0, 3),
        suffix_len in 1usize..15,
        shift in 0usize..20,
    ) {
        let len = prefix.len() + suffix_len;
        let shift = shift % (prefix.len() + 1);
        // channel-major rows, suffix at the end vs. moved `shift` steps earlier
        let mut end = vec![Vec::new(); 3];
        let mut moved = vec![Vec::new(); 3];
        for c in 0..3 {
            let p: Vec<f64> = prefix.iter().map(|col| col[c]).collect();
            let s = vec![column[c]; suffix_len];
            end[c] = [p.clone(), s.clone()].concat();
            let cut = p.len() - shift;
            moved[c] = [&p[..cut], &s[..], &p[cut..]].concat();
        }
        let a = pooled(&end, len);
        let b = pooled(&moved, len);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}
