//! Forward and backward kernels. Every kernel takes a leading batch axis.

use super::tensor::Tensor;
use super::NnError;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), NnError> {
    if cond {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(msg()))
    }
}

/// Dot product with four fixed accumulators; summation order is fixed.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// `y = x·Wᵀ + b` for `x: [B, n_in]`, `W: [n_out, n_in]`, `b: [n_out]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    check(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, || {
        format!("dense ranks x{:?} w{:?} b{:?}", x.shape(), w.shape(), b.shape())
    })?;
    let (batch, n_in) = (x.dim(0), x.dim(1));
    let n_out = w.dim(0);
    check(w.dim(1) == n_in && b.dim(0) == n_out, || {
        format!("dense x{:?} w{:?} b{:?}", x.shape(), w.shape(), b.shape())
    })?;
    let mut y = vec![0.0; batch * n_out];
    for o in 0..n_out {
        let wr = &w.data()[o * n_in..(o + 1) * n_in];
        for bi in 0..batch {
            y[bi * n_out + o] = dot(wr, x.row(bi)) + b.data()[o];
        }
    }
    Ok(Tensor::new(vec![batch, n_out], y))
}

/// Returns `(dx, dW, db)`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, n_in) = (x.dim(0), x.dim(1));
    let n_out = w.dim(0);
    let mut dx = Tensor::zeros(&[batch, n_in]);
    let mut dw = Tensor::zeros(&[n_out, n_in]);
    let mut db = Tensor::zeros(&[n_out]);
    for o in 0..n_out {
        let wr = &w.data()[o * n_in..(o + 1) * n_in];
        let dwr = &mut dw.data_mut()[o * n_in..(o + 1) * n_in];
        for bi in 0..batch {
            let g = dy.data()[bi * n_out + o];
            if g != 0.0 {
                axpy(g, x.row(bi), dwr);
            }
        }
        for bi in 0..batch {
            let g = dy.data()[bi * n_out + o];
            db.data_mut()[o] += g;
            if g != 0.0 {
                axpy(g, wr, &mut dx.data_mut()[bi * n_in..(bi + 1) * n_in]);
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

/// Valid output range `n` for kernel tap offset `off` so that `n + off` is in
/// `[0, len)`.
#[inline]
fn tap_range(off: isize, len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Stride-1 cross-correlation with zero "same" padding.
///
/// `x: [B, C_in, L]`, `w: [C_out, C_in, K]` with odd `K`, `bias: [C_out]`.
pub fn conv1d_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    check(x.rank() == 3 && w.rank() == 3 && bias.rank() == 1, || {
        format!("conv1d ranks x{:?} w{:?}", x.shape(), w.shape())
    })?;
    let (batch, c_in, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, k) = (w.dim(0), w.dim(2));
    check(w.dim(1) == c_in && bias.dim(0) == c_out && k % 2 == 1, || {
        format!("conv1d x{:?} w{:?} bias{:?}", x.shape(), w.shape(), bias.shape())
    })?;
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; batch * c_out * len];
    for bi in 0..batch {
        for o in 0..c_out {
            let yr = &mut y[(bi * c_out + o) * len..(bi * c_out + o + 1) * len];
            yr.fill(bias.data()[o]);
            for c in 0..c_in {
                let xr = &x.data()[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                for t in 0..k {
                    let wv = w.data()[(o * c_in + c) * k + t];
                    let off = t as isize - pad;
                    let (lo, hi) = tap_range(off, len);
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    axpy(wv, src, &mut yr[lo..hi]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![batch, c_out, len], y))
}

/// Returns `(dx, dW, dbias)`.
pub fn conv1d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, c_in, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, k) = (w.dim(0), w.dim(2));
    let pad = (k / 2) as isize;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    for bi in 0..batch {
        for o in 0..c_out {
            let gr = &dy.data()[(bi * c_out + o) * len..(bi * c_out + o + 1) * len];
            db.data_mut()[o] += gr.iter().sum::<f64>();
            for c in 0..c_in {
                let base = (bi * c_in + c) * len;
                for t in 0..k {
                    let off = t as isize - pad;
                    let (lo, hi) = tap_range(off, len);
                    let s_lo = (lo as isize + off) as usize;
                    let s_hi = (hi as isize + off) as usize;
                    let widx = (o * c_in + c) * k + t;
                    let xr = &x.data()[base + s_lo..base + s_hi];
                    dw.data_mut()[widx] += dot(&gr[lo..hi], xr);
                    let wv = w.data()[widx];
                    axpy(wv, &gr[lo..hi], &mut dx.data_mut()[base + s_lo..base + s_hi]);
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// instance norm
// ---------------------------------------------------------------------------

/// Saved statistics for the instance-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per (example, channel) normalization over time with population variance.
pub fn instance_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache), NnError> {
    check(x.rank() == 3, || format!("instance_norm x{:?}", x.shape()))?;
    let (batch, ch, len) = (x.dim(0), x.dim(1), x.dim(2));
    check(gain.len() == ch && shift.len() == ch && len >= 2, || {
        format!("instance_norm x{:?} gain{:?}", x.shape(), gain.shape())
    })?;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; batch * ch];
    for bi in 0..batch {
        for c in 0..ch {
            let r = (bi * ch + c) * len..(bi * ch + c + 1) * len;
            let xr = &x.data()[r.clone()];
            let mean = xr.iter().sum::<f64>() / len as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[bi * ch + c] = is;
            let (g, s) = (gain.data()[c], shift.data()[c]);
            for (n, v) in xr.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[r.start + n] = h;
                y[r.start + n] = g * h + s;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y),
        NormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat),
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dshift)`.
pub fn instance_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = cache.xhat.shape();
    let (batch, ch, len) = (shape[0], shape[1], shape[2]);
    let mut dx = Tensor::zeros(shape);
    let mut dg = Tensor::zeros(&[ch]);
    let mut ds = Tensor::zeros(&[ch]);
    let nf = len as f64;
    for bi in 0..batch {
        for c in 0..ch {
            let r = (bi * ch + c) * len..(bi * ch + c + 1) * len;
            let xh = &cache.xhat.data()[r.clone()];
            let g = &dy.data()[r.clone()];
            let sum_g: f64 = g.iter().sum();
            let sum_gx = dot(g, xh);
            dg.data_mut()[c] += sum_gx;
            ds.data_mut()[c] += sum_g;
            let scale = gain.data()[c] * cache.inv_std[bi * ch + c] / nf;
            let out = &mut dx.data_mut()[r];
            for n in 0..len {
                out[n] = scale * (nf * g[n] - sum_g - xh[n] * sum_gx);
            }
        }
    }
    (dx, dg, ds)
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

fn channel_layout(x: &Tensor) -> (usize, usize, usize) {
    let batch = x.dim(0);
    let ch = if x.rank() > 1 { x.dim(1) } else { 1 };
    (batch, ch, x.len() / (batch * ch).max(1))
}

/// `y = x` for `x > 0`, else `slope[c]·x`; the channel axis is axis 1.
pub fn prelu_forward(x: &Tensor, slope: &Tensor) -> Result<Tensor, NnError> {
    let (batch, ch, inner) = channel_layout(x);
    check(slope.len() == ch, || {
        format!("prelu x{:?} slope{:?}", x.shape(), slope.shape())
    })?;
    let mut y = x.clone();
    for bi in 0..batch {
        for c in 0..ch {
            let a = slope.data()[c];
            let base = (bi * ch + c) * inner;
            for v in &mut y.data_mut()[base..base + inner] {
                if *v <= 0.0 {
                    *v *= a;
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dslope)`.
pub fn prelu_backward(x: &Tensor, slope: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (batch, ch, inner) = channel_layout(x);
    let mut dx = dy.clone();
    let mut da = Tensor::zeros(&[ch]);
    for bi in 0..batch {
        for c in 0..ch {
            let a = slope.data()[c];
            let base = (bi * ch + c) * inner;
            let mut acc = 0.0;
            for n in base..base + inner {
                let xv = x.data()[n];
                if xv <= 0.0 {
                    acc += dy.data()[n] * xv;
                    dx.data_mut()[n] *= a;
                }
            }
            da.data_mut()[c] += acc;
        }
    }
    (dx, da)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Per-channel mean over time: `[B, C, L] → [B, C]`.
pub fn global_average_pool_forward(x: &Tensor) -> Result<Tensor, NnError> {
    check(x.rank() == 3 && x.dim(2) > 0, || format!("gap x{:?}", x.shape()))?;
    let (batch, ch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let y = (0..batch * ch)
        .map(|r| x.data()[r * len..(r + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    Ok(Tensor::new(vec![batch, ch], y))
}

pub fn global_average_pool_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let len = x_shape[2];
    let mut dx = Tensor::zeros(x_shape);
    for (r, g) in dy.data().iter().enumerate() {
        dx.data_mut()[r * len..(r + 1) * len].fill(g / len as f64);
    }
    dx
}

/// Windowed maxima, `L' = (L − window)/stride + 1`. Ties go to the first index.
pub fn max_pool_forward(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>), NnError> {
    check(
        x.rank() == 3 && window >= 1 && stride >= 1 && x.dim(2) >= window,
        || format!("max_pool x{:?} window {window}", x.shape()),
    )?;
    let (batch, ch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let out_len = (len - window) / stride + 1;
    let mut y = Vec::with_capacity(batch * ch * out_len);
    let mut arg = Vec::with_capacity(batch * ch * out_len);
    for r in 0..batch * ch {
        let xr = &x.data()[r * len..(r + 1) * len];
        for p in 0..out_len {
            let s = p * stride;
            let mut best = s;
            for i in s + 1..s + window {
                if xr[i] > xr[best] {
                    best = i;
                }
            }
            y.push(xr[best]);
            arg.push(r * len + best);
        }
    }
    Ok((Tensor::new(vec![batch, ch, out_len], y), arg))
}

pub fn max_pool_backward(x_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    for (g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// softmax attention pooling
// ---------------------------------------------------------------------------

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Scores each time step by its channel mean, softmaxes the scores over
/// time and returns the weighted sum `[B, C, L] → [B, C]` along with the
/// weights `[B, L]`.
pub fn softmax_attention_forward(h: &Tensor) -> Result<(Tensor, Tensor), NnError> {
    check(h.rank() == 3 && h.dim(2) > 0, || format!("attention h{:?}", h.shape()))?;
    let (batch, ch, len) = (h.dim(0), h.dim(1), h.dim(2));
    let mut weights = vec![0.0; batch * len];
    let mut out = vec![0.0; batch * ch];
    for bi in 0..batch {
        let w = &mut weights[bi * len..(bi + 1) * len];
        for c in 0..ch {
            axpy(1.0 / ch as f64, &h.data()[(bi * ch + c) * len..(bi * ch + c + 1) * len], w);
        }
        softmax_in_place(w);
        for c in 0..ch {
            out[bi * ch + c] = dot(w, &h.data()[(bi * ch + c) * len..(bi * ch + c + 1) * len]);
        }
    }
    Ok((
        Tensor::new(vec![batch, ch], out),
        Tensor::new(vec![batch, len], weights),
    ))
}

pub fn softmax_attention_backward(h: &Tensor, weights: &Tensor, dy: &Tensor) -> Tensor {
    let (batch, ch, len) = (h.dim(0), h.dim(1), h.dim(2));
    let mut dh = Tensor::zeros(h.shape());
    let mut dw = vec![0.0; len];
    for bi in 0..batch {
        let w = &weights.data()[bi * len..(bi + 1) * len];
        dw.fill(0.0);
        for c in 0..ch {
            let g = dy.data()[bi * ch + c];
            let base = (bi * ch + c) * len;
            axpy(g, &h.data()[base..base + len], &mut dw);
            axpy(g, w, &mut dh.data_mut()[base..base + len]);
        }
        let mean_dw = dot(w, &dw);
        for c in 0..ch {
            let base = (bi * ch + c) * len;
            let row = &mut dh.data_mut()[base..base + len];
            for l in 0..len {
                row[l] += w[l] * (dw[l] - mean_dw) / ch as f64;
            }
        }
    }
    dh
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood over the batch via log-sum-exp.
/// Returns `(loss, softmax probabilities)`.
pub fn cross_entropy_forward(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor), NnError> {
    check(logits.rank() == 2 && logits.dim(0) == targets.len(), || {
        format!("cross_entropy logits{:?} targets {}", logits.shape(), targets.len())
    })?;
    let k = logits.dim(1);
    check(targets.iter().all(|&t| t < k), || "target class out of range".into())?;
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (bi, &t) in targets.iter().enumerate() {
        let row = &mut probs.data_mut()[bi * k..(bi + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok((loss / targets.len() as f64, probs))
}

/// `(softmax − one_hot) / B`, scaled by the upstream gradient `g`.
pub fn cross_entropy_backward(probs: &Tensor, targets: &[usize], g: f64) -> Tensor {
    let k = probs.dim(1);
    let scale = g / targets.len() as f64;
    let mut d = probs.clone();
    for (bi, &t) in targets.iter().enumerate() {
        d.data_mut()[bi * k + t] -= 1.0;
    }
    d.data_mut().iter_mut().for_each(|v| *v *= scale);
    d
}

/// Inverted-dropout mask with entries `0` or `1/(1 − rate)`.
pub fn dropout_mask<R: rand::Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec())
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let x = t(&[1, 2], &[0.3, -1.2]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        assert_eq!(dense_forward(&x, &eye, &zero).unwrap().data(), x.data());
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[1, 2], &[1.0, 1.0]);
        assert_eq!(dense_forward(&ones, &w, &zero).unwrap().data(), &[3.0, 7.0]);
        assert!(dense_forward(&t(&[1, 3], &[0.0; 3]), &w, &zero).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]);
        let w = t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv1d_forward(&x, &w, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_direct_sum() {
        // y[n] = Σ_k x[n+k−1]·w[k] with zero padding, computed directly
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ws = [1.0, 0.0, -1.0];
        let mut expect = [0.0; 4];
        for n in 0..4i64 {
            for k in 0..3i64 {
                let idx = n + k - 1;
                if (0..4).contains(&idx) {
                    expect[n as usize] += xs[idx as usize] * ws[k as usize];
                }
            }
        }
        assert_eq!(expect, [-2.0, -2.0, -2.0, 3.0]);
        let y = conv1d_forward(&t(&[1, 1, 4], &xs), &t(&[1, 1, 3], &ws), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &expect);
        assert!(conv1d_forward(&t(&[1, 1, 4], &xs), &t(&[1, 1, 2], &[1.0, 1.0]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn instance_norm_examples() {
        let g = t(&[1], &[1.0]);
        let s = t(&[1], &[0.0]);
        let (y, _) = instance_norm_forward(&t(&[1, 1, 3], &[2.0; 3]), &g, &s, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let (y, _) = instance_norm_forward(&t(&[1, 1, 2], &[0.0, 2.0]), &g, &s, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prelu_examples() {
        let x = t(&[1, 1, 2], &[-1.0, 2.0]);
        assert_eq!(prelu_forward(&x, &t(&[1], &[0.0])).unwrap().data(), &[0.0, 2.0]);
        assert_eq!(prelu_forward(&x, &t(&[1], &[1.0])).unwrap().data(), x.data());
    }

    #[test]
    fn pooling_examples() {
        let g = global_average_pool_forward(&t(&[1, 1, 3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.data(), &[2.0]);
        let (m, _) = max_pool_forward(&t(&[1, 1, 4], &[1.0, 3.0, 2.0, 5.0]), 2, 2).unwrap();
        assert_eq!(m.data(), &[3.0, 5.0]);
        assert!(max_pool_forward(&t(&[1, 1, 1], &[1.0]), 2, 2).is_err());
    }

    #[test]
    fn attention_examples() {
        let h = t(&[1, 3, 1], &[1.0, -2.0, 0.5]);
        let (o, w) = softmax_attention_forward(&h).unwrap();
        assert_eq!(o.data(), h.data());
        assert_eq!(w.data(), &[1.0]);
        let h = t(&[1, 2, 4], &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
        let (o, w) = softmax_attention_forward(&h).unwrap();
        assert!((o.data()[0] - 3.0).abs() < 1e-12 && (o.data()[1] + 1.0).abs() < 1e-12);
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, p) = cross_entropy_forward(&t(&[1, 3], &[0.0, 0.0, 0.0]), &[2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let d = cross_entropy_backward(&p, &[2], 1.0);
        let expect = [1.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0];
        for (a, b) in d.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        let (l, _) = cross_entropy_forward(&t(&[1, 3], &[10.0, -10.0, -10.0]), &[0]).unwrap();
        // ln(1 + 2e^{-20})
        let exact = (2.0 * (-20.0f64).exp()).ln_1p();
        assert!((l - exact).abs() < 1e-15 && (l - 4.1e-9).abs() < 1e-10, "{l}");
    }
}
