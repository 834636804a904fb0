//! Finite-difference checks of every differentiable tape op and of the
//! model's conditioning path.

use bpshift::models::{Arch, Mode, Model, ModelSpec, Preset};
use bpshift::nn::gradcheck::check_gradients;
use bpshift::nn::{ops, NnError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const NORM_TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

/// Uniform values in ±1 kept away from zero, so no probe crosses a kink.
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

fn run(
    tol: f64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NnError> + Copy,
) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let r = check_gradients(&inputs, H, seed + 100, f).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst < tol, "max relative error {worst:e} >= {tol:e}");
    worst
}

#[test]
fn dense() {
    run(TOL, &[&[3, 4], &[5, 4], &[5]], |t, v| t.dense(v[0], v[1], v[2]));
}

#[test]
fn conv1d() {
    run(TOL, &[&[2, 3, 7], &[4, 3, 3], &[4]], |t, v| t.conv1d(v[0], v[1], v[2]));
}

#[test]
fn instance_norm() {
    run(NORM_TOL, &[&[2, 3, 6], &[3], &[3]], |t, v| {
        t.instance_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn prelu() {
    run(TOL, &[&[2, 3, 5], &[3]], |t, v| t.prelu(v[0], v[1]));
}

#[test]
fn dropout_with_fixed_mask() {
    run(TOL, &[&[2, 3, 4]], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = ops::dropout_mask(24, 0.3, &mut rng);
        t.dropout(v[0], mask)
    });
}

#[test]
fn global_average_pool() {
    run(TOL, &[&[2, 3, 5]], |t, v| t.global_average_pool(v[0]));
}

#[test]
fn max_pool() {
    run(TOL, &[&[2, 3, 8]], |t, v| t.max_pool(v[0], 2, 2));
}

#[test]
fn softmax_attention() {
    run(TOL, &[&[2, 3, 6]], |t, v| t.softmax_attention(v[0]));
}

#[test]
fn add() {
    run(TOL, &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
}

#[test]
fn concat() {
    run(TOL, &[&[2, 1, 4], &[2, 3, 4]], |t, v| t.concat(&[v[0], v[1]]));
}

#[test]
fn broadcast_time() {
    run(TOL, &[&[2, 3]], |t, v| t.broadcast_time(v[0], 5));
}

#[test]
fn reshape_and_flatten() {
    run(TOL, &[&[2, 3, 4]], |t, v| {
        let r = t.reshape(v[0], &[2, 4, 3])?;
        t.flatten(r)
    });
}

#[test]
fn cross_entropy() {
    run(TOL, &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]));
}

#[test]
fn composed_block() {
    run(NORM_TOL, &[&[2, 2, 8], &[3, 2, 3], &[3], &[3], &[3], &[3]], |t, v| {
        let c = t.conv1d(v[0], v[1], v[2])?;
        let n = t.instance_norm(c, v[3], v[4], 1e-5)?;
        let a = t.prelu(n, v[5])?;
        let p = t.max_pool(a, 2, 2)?;
        t.softmax_attention(p)
    });
}

/// Loss of a conditioned model on a fixed batch, as a function of its
/// parameters.
fn model_loss(model: &Model, x: &Tensor, aux: &Tensor, y: &[usize]) -> (f64, Model) {
    let mut f = model.forward(x.clone(), Some(aux.clone()), Mode::Eval).unwrap();
    let loss = f.tape.cross_entropy(f.logits, y).unwrap();
    let value = f.tape.value(loss).data()[0];
    let mut grads = f.tape.backward(loss);
    let mut m = model.clone();
    m.params.zero_grad();
    m.params.accumulate(&f.bound, &mut grads);
    (value, m)
}

#[test]
fn conditioning_maps_receive_correct_gradients() {
    for arch in Arch::ALL {
        let mut spec = ModelSpec::new(arch, Preset::Desk, 2, 12);
        spec.widths = [3, 3, 3];
        spec.hidden = 6;
        spec.include_initial_bp = true;
        let mut model = Model::build(&spec, 11).unwrap();
        // give the zero-initialized paths non-trivial values
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for n in &names {
            for v in model.params.get_mut(n).unwrap().data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = rand_tensor(&mut rng, &[3, 2, 12]);
        let aux = Tensor::new(vec![3, 1], vec![0.45, 0.6, 0.75]);
        let y = [0, 1, 2];
        let (_, with_grads) = model_loss(&model, &x, &aux, &y);
        let cond: Vec<&String> = names
            .iter()
            .filter(|n| n.contains("map_") || n.contains("cond_w"))
            .collect();
        assert!(!cond.is_empty(), "{arch:?} has no conditioning parameters");
        let mut worst: f64 = 0.0;
        for n in cond {
            let g = with_grads.params.grad(n).unwrap().clone();
            for e in 0..g.len() {
                let mut probe = model.clone();
                let x0 = probe.params.get(n).unwrap().data()[e];
                probe.params.get_mut(n).unwrap().data_mut()[e] = x0 + H;
                let (up, _) = model_loss(&probe, &x, &aux, &y);
                probe.params.get_mut(n).unwrap().data_mut()[e] = x0 - H;
                let (down, _) = model_loss(&probe, &x, &aux, &y);
                let numeric = (up - down) / (2.0 * H);
                let a = g.data()[e];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
            }
        }
        assert!(worst < 1e-5, "{arch:?}: conditioning gradient error {worst:e}");
    }
}
