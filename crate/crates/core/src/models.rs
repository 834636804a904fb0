//! The four classifier architectures (MLP, CNN, ResNet, Encoder) with
//! optional conditioning on scalar inputs.
//!
//! Scalar inputs (sdPPG features and/or the scaled initial pressure) pass
//! through a learned linear map per block; the mapped vector is broadcast
//! over time and concatenated to the block's input channels (conv blocks)
//! or appended to the input vector (dense layers and the output head).
//! Concatenation is implemented as a separate weight slice so that the
//! main-path weights of a conditioned and an ablated model coincide for the
//! same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::ChangeLabel;
use crate::nn::params::{decode_checkpoint, encode_checkpoint};
use crate::nn::{ops, Bound, NnError, ParameterSet, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model expects the initial BP input")]
    MissingInitialBp,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
    Resnet,
    Encoder,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Mlp, Arch::Cnn, Arch::Resnet, Arch::Encoder];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::Resnet => "resnet",
            Arch::Encoder => "encoder",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published hyperparameters: widths 64, 1024 epochs, batch 500.
    Paper,
    /// Small widths and short schedules for a single CPU core.
    Desk,
}

/// Architecture and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub length: usize,
    /// Scalar inputs other than initial BP.
    pub feature_len: usize,
    pub include_initial_bp: bool,
    /// MLP hidden width.
    pub hidden: usize,
    pub widths: [usize; 3],
    pub kernels: [usize; 3],
    pub dropout: f64,
    pub prelu_init: f64,
    pub norm_eps: f64,
    /// Width of each block's mapped conditioning vector.
    pub cond_width: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, preset: Preset, in_channels: usize, length: usize) -> Self {
        let mut s = Self {
            arch,
            in_channels,
            length,
            feature_len: 0,
            include_initial_bp: false,
            hidden: 500,
            widths: [64; 3],
            kernels: [9, 5, 3],
            dropout: 0.2,
            prelu_init: 0.25,
            norm_eps: 1e-5,
            cond_width: 4,
            lr: 0.001,
            epochs: 1024,
            batch_size: 500,
            patience: 1024,
        };
        match preset {
            Preset::Paper => {
                if arch == Arch::Encoder {
                    s.lr = 0.0001;
                }
            }
            Preset::Desk => {
                s.widths = [8; 3];
                s.epochs = 200;
                s.batch_size = 32;
                s.patience = 20;
            }
        }
        s
    }

    pub fn aux_len(&self) -> usize {
        self.feature_len + usize::from(self.include_initial_bp)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.in_channels == 0 || self.length < 8 {
            return bad(format!("input {}x{}", self.in_channels, self.length));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel sizes {:?} must be odd", self.kernels));
        }
        if self.widths.contains(&0) || self.hidden == 0 {
            return bad("zero width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        if self.arch == Arch::Encoder && self.length < 8 {
            return bad("encoder input too short for two max-pools".into());
        }
        if self.aux_len() > 0 && self.cond_width == 0 {
            return bad("cond_width must be positive when scalar inputs are used".into());
        }
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return bad(format!("lr {} batch {}", self.lr, self.batch_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    layers: Vec<LayerInfo>,
}

/// Dropout is active only in training mode.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub bound: Bound,
    pub logits: Var,
    pub attention: Option<Var>,
}

fn param_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Builder {
    params: ParameterSet,
    layers: Vec<LayerInfo>,
    seed: u64,
    aux: usize,
    cond_width: usize,
}

impl Builder {
    fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(self.seed, name));
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data));
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.insert(name, Tensor::full(shape, v));
    }

    /// Conditioning map and its weight slice, when the model has scalar
    /// inputs and `enabled` is set.
    fn cond(&mut self, layer: &str, enabled: bool, slice_shape: &[usize], fan_in: usize) {
        let (aux, m) = (self.aux, self.cond_width);
        if aux > 0 && enabled {
            self.he(&format!("{layer}.map_w"), &[m, aux], aux);
            self.constant(&format!("{layer}.map_b"), &[m], 0.0);
            self.he(&format!("{layer}.cond_w"), slice_shape, fan_in);
        }
    }

    /// conv + instance norm (+ PReLU when `slope` is given).
    fn conv_unit(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, cond: bool, slope: Option<f64>) {
        self.he(&format!("{name}.w"), &[c_out, c_in, k], c_in * k);
        self.constant(&format!("{name}.b"), &[c_out], 0.0);
        let m = self.cond_width;
        self.cond(name, cond, &[c_out, m, k], m * k);
        self.constant(&format!("{name}.gain"), &[c_out], 1.0);
        self.constant(&format!("{name}.shift"), &[c_out], 0.0);
        if let Some(a) = slope {
            self.constant(&format!("{name}.slope"), &[c_out], a);
        }
        self.layers.push(LayerInfo {
            name: name.into(),
            kind: LayerKind::Conv,
        });
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, slope: Option<f64>) {
        self.he(&format!("{name}.w"), &[n_out, n_in], n_in);
        self.constant(&format!("{name}.b"), &[n_out], 0.0);
        let m = self.cond_width;
        self.cond(name, true, &[n_out, m], m);
        if let Some(a) = slope {
            self.constant(&format!("{name}.slope"), &[n_out], a);
        }
        self.layers.push(LayerInfo {
            name: name.into(),
            kind: LayerKind::Dense,
        });
    }
}

impl Model {
    /// Builds and initialises a model: He-uniform weights seeded per
    /// parameter name, zero biases, unit norm gains, PReLU slopes at
    /// `prelu_init`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut b = Builder {
            params: ParameterSet::new(),
            layers: Vec::new(),
            seed,
            aux: spec.aux_len(),
            cond_width: spec.cond_width,
        };
        let a0 = Some(spec.prelu_init);
        match spec.arch {
            Arch::Mlp => {
                let mut n_in = spec.in_channels * spec.length;
                for k in 0..3 {
                    b.dense(&format!("fc{k}"), n_in, spec.hidden, a0);
                    n_in = spec.hidden;
                }
                b.dense("head", n_in, 3, None);
            }
            Arch::Cnn | Arch::Encoder => {
                let mut c_in = spec.in_channels;
                for k in 0..3 {
                    let w = spec.widths[k];
                    b.conv_unit(&format!("block{k}"), c_in, w, spec.kernels[k], true, a0);
                    c_in = w;
                }
                if spec.arch == Arch::Encoder {
                    b.layers.push(LayerInfo {
                        name: "attention".into(),
                        kind: LayerKind::Attention,
                    });
                }
                b.dense("head", c_in, 3, None);
            }
            Arch::Resnet => {
                let mut c_in = spec.widths[0];
                b.conv_unit("stem", spec.in_channels, c_in, spec.kernels[0], true, a0);
                for blk in 0..3 {
                    let w = spec.widths[blk];
                    for u in 0..3 {
                        let name = format!("res{blk}.conv{u}");
                        let unit_in = if u == 0 { c_in } else { w };
                        // the last unit's activation follows the shortcut sum
                        let slope = if u == 2 { None } else { a0 };
                        b.conv_unit(&name, unit_in, w, spec.kernels[u], u == 0, slope);
                    }
                    if c_in != w {
                        b.conv_unit(&format!("res{blk}.proj"), c_in, w, 1, false, None);
                    }
                    b.constant(&format!("res{blk}.out_slope"), &[w], spec.prelu_init);
                    c_in = w;
                }
                b.dense("head", c_in, 3, None);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            params: b.params,
            layers: b.layers,
        })
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }

    /// Weights and biases of the dense and conv layers on the main path.
    pub fn layer_param_count(&self) -> usize {
        self.params
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".w") || p.name.ends_with(".b"))
            .map(|p| p.value.len())
            .sum()
    }

    /// Every trainable scalar.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_parameters(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(String::from)
            .collect();
        for n in names {
            self.params.get_mut(&n).unwrap().fill(0.0);
        }
    }

    /// Zeroes every conditioning map (`*.map_w`, `*.map_b`).
    pub fn zero_conditioning_maps(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.ends_with(".map_w") || n.ends_with(".map_b"))
            .map(String::from)
            .collect();
        for n in names {
            self.params.get_mut(&n).unwrap().fill(0.0);
        }
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let meta = serde_json::json!({ "spec": self.spec });
        encode_checkpoint(&self.params, &meta)
    }

    /// Checkpoint carrying caller metadata under `"extra"` beside the spec.
    pub fn to_checkpoint_with(&self, extra: serde_json::Value) -> Vec<u8> {
        let meta = serde_json::json!({ "spec": self.spec, "extra": extra });
        encode_checkpoint(&self.params, &meta)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        let (params, meta) = decode_checkpoint(bytes)?;
        let spec: ModelSpec = serde_json::from_value(meta["spec"].clone())
            .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        let mut model = Model::build(&spec, 0)?;
        model.params.load_values(&params)?;
        model.params.step = params.step;
        Ok(model)
    }

    /// Records a forward pass of a batch `x: [B, C, L]` with scalar inputs
    /// `aux: [B, A]`.
    pub fn forward(&self, x: Tensor, aux: Option<Tensor>, mode: Mode<'_>) -> Result<Forward, ModelError> {
        let spec = &self.spec;
        if x.rank() != 3 || x.dim(1) != spec.in_channels || x.dim(2) != spec.length {
            return Err(ModelError::ShapeMismatch(format!(
                "input {:?}, model expects [B, {}, {}]",
                x.shape(),
                spec.in_channels,
                spec.length
            )));
        }
        let batch = x.dim(0);
        let aux_len = spec.aux_len();
        let aux = match (aux_len, aux) {
            (0, _) => None,
            (n, Some(a)) if a.shape() == [batch, n] => Some(a),
            (_, Some(a)) if spec.include_initial_bp && a.rank() == 2 && a.dim(1) + 1 == aux_len => {
                return Err(ModelError::MissingInitialBp)
            }
            (_, Some(a)) => {
                return Err(ModelError::ShapeMismatch(format!(
                    "aux {:?}, expected [{batch}, {aux_len}]",
                    a.shape()
                )))
            }
            (_, None) if spec.include_initial_bp => return Err(ModelError::MissingInitialBp),
            (n, None) => {
                return Err(ModelError::ShapeMismatch(format!("missing {n} scalar inputs")))
            }
        };

        let mut ctx = Ctx {
            tape: Tape::new(),
            bound: Bound::default(),
            params: &self.params,
            mode,
            eps: spec.norm_eps,
            dropout: spec.dropout,
            aux: None,
        };
        let input = ctx.tape.leaf(x);
        ctx.aux = aux.map(|a| ctx.tape.leaf(a));
        let mut attention = None;

        let logits = match spec.arch {
            Arch::Mlp => {
                let mut h = ctx.tape.flatten(input)?;
                for k in 0..3 {
                    let name = format!("fc{k}");
                    h = ctx.dense(&name, h)?;
                    let slope = ctx.param(&format!("{name}.slope"))?;
                    h = ctx.tape.prelu(h, slope)?;
                    h = ctx.dropout(h)?;
                }
                ctx.dense("head", h)?
            }
            Arch::Cnn => {
                let mut h = input;
                for k in 0..3 {
                    h = ctx.conv_unit(&format!("block{k}"), h, true)?;
                }
                let pooled = ctx.tape.global_average_pool(h)?;
                ctx.dense("head", pooled)?
            }
            Arch::Encoder => {
                let mut h = input;
                for k in 0..3 {
                    h = ctx.conv_unit(&format!("block{k}"), h, true)?;
                    h = ctx.dropout(h)?;
                    if k < 2 {
                        h = ctx.tape.max_pool(h, 2, 2)?;
                    }
                }
                let att = ctx.tape.softmax_attention(h)?;
                attention = Some(att);
                ctx.dense("head", att)?
            }
            Arch::Resnet => {
                let mut h = ctx.conv_unit("stem", input, true)?;
                for blk in 0..3 {
                    let shortcut = if self.params.id(&format!("res{blk}.proj.w")).is_some() {
                        ctx.conv_unit(&format!("res{blk}.proj"), h, false)?
                    } else {
                        h
                    };
                    let mut u = h;
                    for k in 0..3 {
                        u = ctx.conv_unit(&format!("res{blk}.conv{k}"), u, k < 2)?;
                    }
                    let sum = ctx.tape.add(u, shortcut)?;
                    let slope = ctx.param(&format!("res{blk}.out_slope"))?;
                    h = ctx.tape.prelu(sum, slope)?;
                }
                let pooled = ctx.tape.global_average_pool(h)?;
                ctx.dense("head", pooled)?
            }
        };
        Ok(Forward {
            tape: ctx.tape,
            bound: ctx.bound,
            logits,
            attention,
        })
    }

    /// Eval-mode logits `[B, 3]`.
    pub fn logits(&self, x: Tensor, aux: Option<Tensor>) -> Result<Tensor, ModelError> {
        let f = self.forward(x, aux, Mode::Eval)?;
        Ok(f.tape.value(f.logits).clone())
    }
}

struct Ctx<'p, 'r> {
    tape: Tape,
    bound: Bound,
    params: &'p ParameterSet,
    mode: Mode<'r>,
    eps: f64,
    dropout: f64,
    aux: Option<Var>,
}

impl Ctx<'_, '_> {
    fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        Ok(self.params.bind_name(name, &mut self.tape, &mut self.bound)?)
    }

    fn has(&self, name: &str) -> bool {
        self.params.id(name).is_some()
    }

    /// The layer's mapped conditioning vector `[B, m]`, if it has one.
    fn cond(&mut self, layer: &str) -> Result<Option<Var>, ModelError> {
        let (Some(aux), true) = (self.aux, self.has(&format!("{layer}.map_w"))) else {
            return Ok(None);
        };
        let w = self.param(&format!("{layer}.map_w"))?;
        let b = self.param(&format!("{layer}.map_b"))?;
        Ok(Some(self.tape.dense(aux, w, b)?))
    }

    fn zero_bias(&mut self, n: usize) -> Var {
        self.tape.leaf(Tensor::zeros(&[n]))
    }

    fn dense(&mut self, name: &str, h: Var) -> Result<Var, ModelError> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let mut y = self.tape.dense(h, w, b)?;
        if let Some(c) = self.cond(name)? {
            let cw = self.param(&format!("{name}.cond_w"))?;
            let n_out = self.params.get(&format!("{name}.b")).unwrap().len();
            let zero = self.zero_bias(n_out);
            let yc = self.tape.dense(c, cw, zero)?;
            y = self.tape.add(y, yc)?;
        }
        Ok(y)
    }

    /// conv (+ conditioning) → instance norm → optional PReLU.
    fn conv_unit(&mut self, name: &str, h: Var, activate: bool) -> Result<Var, ModelError> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let mut y = self.tape.conv1d(h, w, b)?;
        if let Some(c) = self.cond(name)? {
            let len = self.tape.value(h).dim(2);
            let cb = self.tape.broadcast_time(c, len)?;
            let cw = self.param(&format!("{name}.cond_w"))?;
            let n_out = self.params.get(&format!("{name}.b")).unwrap().len();
            let zero = self.zero_bias(n_out);
            let yc = self.tape.conv1d(cb, cw, zero)?;
            y = self.tape.add(y, yc)?;
        }
        if self.has(&format!("{name}.gain")) {
            let g = self.param(&format!("{name}.gain"))?;
            let s = self.param(&format!("{name}.shift"))?;
            y = self.tape.instance_norm(y, g, s, self.eps)?;
        }
        if activate && self.has(&format!("{name}.slope")) {
            let a = self.param(&format!("{name}.slope"))?;
            y = self.tape.prelu(y, a)?;
        }
        Ok(y)
    }

    fn dropout(&mut self, h: Var) -> Result<Var, ModelError> {
        match &mut self.mode {
            Mode::Train(rng) if self.dropout > 0.0 => {
                let n = self.tape.value(h).len();
                let mask = ops::dropout_mask(n, self.dropout, &mut **rng);
                Ok(self.tape.dropout(h, mask)?)
            }
            _ => Ok(h),
        }
    }
}

/// Arg-max class; ties resolve to the earlier class (Spike, Stable, Dip).
pub fn predict(logits: &[f64]) -> ChangeLabel {
    let mut best = 0;
    for k in 1..logits.len().min(3) {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    ChangeLabel::from_index(best).expect("three classes")
}
