//! Central finite-difference gradient checks for tape programs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    /// Number of input elements compared.
    pub checked: usize,
}

fn projected(
    inputs: &[Tensor],
    projection: &mut Option<Tensor>,
    seed: u64,
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
) -> Result<(Tape, Vec<Var>, Var), NnError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n])?;
    let r = projection.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    });
    let r = tape.leaf(r.clone());
    let zero = tape.leaf(Tensor::zeros(&[1]));
    let y = tape.dense(flat, r, zero)?;
    Ok((tape, vars, y))
}

/// Compares reverse-mode gradients of `f` with respect to every input
/// against central differences with step `h`. The output of `f` is reduced
/// to a scalar by a fixed random projection drawn from `seed`.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
) -> Result<GradReport, NnError> {
    let mut projection = None;
    let (tape, vars, y) = projected(inputs, &mut projection, seed, &f)?;
    let grads = tape.backward(y);
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            let mut at = |x: f64| -> Result<f64, NnError> {
                probe[k].data_mut()[e] = x;
                let (t, _, y) = projected(&probe, &mut projection, seed, &f)?;
                Ok(t.value(y).data()[0])
            };
            let numeric = (at(x0 + h)? - at(x0 - h)?) / (2.0 * h);
            probe[k].data_mut()[e] = x0;
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
