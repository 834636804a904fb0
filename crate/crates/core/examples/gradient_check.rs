//! Checks reverse-mode gradients of a few tape programs against central
//! differences.

use bpshift::nn::gradcheck::check_gradients;
use bpshift::nn::Tensor;

fn input(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|k| (k as f64 * 0.7 + phase).sin()).collect())
}

fn main() {
    let x = input(&[2, 3, 10], 0.1);
    let w = input(&[4, 3, 3], 0.5);
    let b = input(&[4], 0.9);
    let r = check_gradients(&[x.clone(), w, b], 1e-5, 1, |t, v| {
        let c = t.conv1d(v[0], v[1], v[2])?;
        t.max_pool(c, 2, 2)
    })
    .unwrap();
    println!("conv1d + max_pool: {} inputs, max rel error {:.2e}", r.checked, r.max_rel_error);

    let r = check_gradients(&[x], 1e-5, 2, |t, v| t.softmax_attention(v[0])).unwrap();
    println!("attention pooling: {} inputs, max rel error {:.2e}", r.checked, r.max_rel_error);

    let logits = input(&[5, 3], 0.3);
    let r = check_gradients(&[logits], 1e-5, 3, |t, v| t.cross_entropy(v[0], &[0, 1, 2, 1, 0])).unwrap();
    println!("cross entropy: {} inputs, max rel error {:.2e}", r.checked, r.max_rel_error);
}
