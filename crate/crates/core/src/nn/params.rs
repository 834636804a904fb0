//! Named trainable tensors, Adam state and the checkpoint archive.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"BPNN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Ordered set of named parameters with gradient slots and Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    /// Adam step counter.
    pub step: u64,
}

/// Tape handles for the parameters used in one forward pass.
#[derive(Debug, Default)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Option<Var> {
        self.vars.get(i).copied().flatten()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.clone(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        self.index.insert(name, self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.params[i].grad)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Records parameter `i` on the tape, reusing an existing handle.
    pub fn bind(&self, i: usize, tape: &mut Tape, bound: &mut Bound) -> Var {
        if bound.vars.len() < self.params.len() {
            bound.vars.resize(self.params.len(), None);
        }
        if let Some(v) = bound.vars[i] {
            return v;
        }
        let v = tape.leaf(self.params[i].value.clone());
        bound.vars[i] = Some(v);
        v
    }

    pub fn bind_name(&self, name: &str, tape: &mut Tape, bound: &mut Bound) -> Result<Var, NnError> {
        let i = self
            .id(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        Ok(self.bind(i, tape, bound))
    }

    /// Adds tape gradients of all bound parameters into the gradient slots.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients) {
        for (i, v) in bound.vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    self.params[i].grad.add_assign(&g);
                }
            }
        }
    }

    /// Scales every gradient slot by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Copies values from `other` for every name present in both.
    pub fn load_values(&mut self, other: &ParameterSet) -> Result<(), NnError> {
        for p in &other.params {
            let dst = self
                .get_mut(&p.name)
                .ok_or_else(|| NnError::UnknownParameter(p.name.clone()))?;
            if dst.shape() != p.value.shape() {
                return Err(NnError::ShapeMismatch(format!("parameter {}", p.name)));
            }
            *dst = p.value.clone();
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update using the current gradient slots.
    pub fn step(&self, params: &mut ParameterSet) {
        params.step += 1;
        let t = params.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in &mut params.params {
            let (w, g) = (p.value.data_mut(), p.grad.data());
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for k in 0..w.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serializes parameter values as `BPNN1`, a little-endian `u32` header
/// length, the JSON header and then the raw `f64` payloads.
pub fn encode_checkpoint(params: &ParameterSet, meta: &serde_json::Value) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in params.params() {
        let nbytes = p.value.len() * 8;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: "f64".into(),
            shape: p.value.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        step: params.step,
        tensors,
        meta: meta.clone(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(9 + hjson.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for p in params.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterSet, serde_json::Value), NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = 9 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[9..body]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut params = ParameterSet::new();
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        if t.nbytes != n * 8 || body + t.offset + t.nbytes > bytes.len() {
            return Err(bad(&format!("bad extent for {}", t.name)));
        }
        let raw = &bytes[body + t.offset..body + t.offset + t.nbytes];
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data));
    }
    params.step = header.step;
    Ok((params, header.meta))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet,
    meta: &serde_json::Value,
) -> Result<(), NnError> {
    write_atomic(path, &encode_checkpoint(params, meta)).map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, serde_json::Value), NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(vec![w]));
        p
    }

    #[test]
    fn first_adam_step_is_lr() {
        let mut p = scalar_set(0.0);
        p.params[0].grad = Tensor::from_vec(vec![1.0]);
        Adam::new(0.001).step(&mut p);
        let w = p.get("w").unwrap().data()[0];
        // m̂ = v̂ = 1 at t = 1
        assert!((w + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = scalar_set(0.7);
        Adam::new(0.01).step(&mut p);
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn adam_minimizes_square() {
        // scalar reference recursion
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!(w.abs() < 0.1);

        let mut p = scalar_set(1.0);
        let opt = Adam::new(lr);
        for _ in 0..200 {
            let cur = p.get("w").unwrap().data()[0];
            p.params[0].grad = Tensor::from_vec(vec![2.0 * cur]);
            opt.step(&mut p);
        }
        let got = p.get("w").unwrap().data()[0];
        assert!(got.abs() < 0.1);
        assert_eq!(got, w);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]));
        p.insert("b", Tensor::from_vec(vec![0.5]));
        p.step = 42;
        let meta = serde_json::json!({"kind": "mlp"});
        let bytes = encode_checkpoint(&p, &meta);
        assert_eq!(&bytes[..5], b"BPNN1");
        let (q, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(q.get("a"), p.get("a"));
        assert_eq!(q.get("b"), p.get("b"));
        assert_eq!(q.step, 42);
        assert_eq!(m, meta);
        assert!(decode_checkpoint(b"BPNN2xxxx").is_err());
    }
}
