//! Reverse-mode differentiation over a linear tape of tensor operations.

use super::ops::{self, NormCache};
use super::tensor::Tensor;
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gain: Var, shift: Var, cache: NormCache },
    PRelu { x: Var, slope: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Gap { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Attention { h: Var, weights: Tensor },
    Add { a: Var, b: Var },
    /// Concatenation along axis 1 of tensors sharing axis 0 and trailing axes.
    Concat { parts: Vec<Var> },
    /// `[B, m] → [B, m, L]`
    BroadcastTime { x: Var },
    Reshape { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward values so that [`Tape::backward`] can replay them in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = ops::conv1d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv1d { x, w, b }))
    }

    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var, NnError> {
        let (y, cache) =
            ops::instance_norm_forward(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.push(y, Op::InstanceNorm { x, gain, shift, cache }))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var, NnError> {
        let y = ops::prelu_forward(self.value(x), self.value(slope))?;
        Ok(self.push(y, Op::PRelu { x, slope }))
    }

    /// Multiplies by a precomputed inverted-dropout mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, NnError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(NnError::ShapeMismatch(format!(
                "dropout mask {} vs {}",
                mask.len(),
                xv.len()
            )));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), data);
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    pub fn global_average_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let y = ops::global_average_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::Gap { x }))
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, NnError> {
        let (y, argmax) = ops::max_pool_forward(self.value(x), window, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn softmax_attention(&mut self, h: Var) -> Result<Var, NnError> {
        let (y, weights) = ops::softmax_attention_forward(self.value(h))?;
        Ok(self.push(y, Op::Attention { h, weights }))
    }

    /// Attention weights of an attention node, `[B, L]`.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = first[0];
        let tail: Vec<usize> = first[2..].to_vec();
        let inner: usize = tail.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[0] != lead || s[2..] != tail[..] {
                return Err(NnError::ShapeMismatch(format!("concat {first:?} with {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(lead * total * inner);
        for r in 0..lead {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p).data();
                data.extend_from_slice(&v[r * w * inner..(r + 1) * w * inner]);
            }
        }
        let mut shape = vec![lead, total];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec() }))
    }

    pub fn broadcast_time(&mut self, x: Var, len: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(NnError::ShapeMismatch(format!("broadcast_time {:?}", xv.shape())));
        }
        let (b, m) = (xv.dim(0), xv.dim(1));
        let mut data = Vec::with_capacity(b * m * len);
        for v in xv.data() {
            data.extend(std::iter::repeat_n(*v, len));
        }
        Ok(self.push(Tensor::new(vec![b, m, len], data), Op::BroadcastTime { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(NnError::ShapeMismatch(format!("reshape {:?} to {shape:?}", xv.shape())));
        }
        let y = xv.clone().reshape(shape);
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// `[B, C·L…]` view of a batched tensor.
    pub fn flatten(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape();
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Mean cross-entropy over the batch; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let (loss, probs) = ops::cross_entropy_forward(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Conv1d { x, w, b } => {
                    let (dx, dw, db) = ops::conv1d_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::InstanceNorm { x, gain, shift, cache } => {
                    let (dx, dg, ds) = ops::instance_norm_backward(cache, self.value(*gain), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *shift, ds);
                }
                Op::PRelu { x, slope } => {
                    let (dx, da) = ops::prelu_backward(self.value(*x), self.value(*slope), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *slope, da);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), data));
                }
                Op::Gap { x } => {
                    let dx = ops::global_average_pool_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::max_pool_backward(self.value(*x).shape(), argmax, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::Attention { h, weights } => {
                    let dh = ops::softmax_attention_backward(self.value(*h), weights, &g);
                    acc(&mut grads, *h, dh);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Concat { parts } => {
                    let s = g.shape();
                    let lead = s[0];
                    let inner: usize = s[2..].iter().product();
                    let total = s[1];
                    let mut off = 0;
                    for &p in parts {
                        let ps = self.value(p).shape().to_vec();
                        let w = ps[1];
                        let mut data = Vec::with_capacity(lead * w * inner);
                        for r in 0..lead {
                            let base = (r * total + off) * inner;
                            data.extend_from_slice(&g.data()[base..base + w * inner]);
                        }
                        acc(&mut grads, p, Tensor::new(ps, data));
                        off += w;
                    }
                }
                Op::BroadcastTime { x } => {
                    let len = g.dim(2);
                    let data = (0..g.len() / len)
                        .map(|r| g.data()[r * len..(r + 1) * len].iter().sum())
                        .collect();
                    acc(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), data));
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let d = ops::cross_entropy_backward(probs, targets, g.data()[0]);
                    acc(&mut grads, *logits, d);
                }
            }
        }
        Gradients(grads)
    }
}
