//! Classifier architectures, optimizers, LR schedule, and the
//! checkpoint format.

use crate::rngutil;
use crate::tensor::{numel, Graph, Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMIX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    BadVersion(u32),
    #[error("checkpoint: truncated file")]
    Truncated,
    #[error("checkpoint: spec does not match stored model: {0}")]
    SpecMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint spec decode: {0}")]
    SpecDecode(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected ReLU net; `widths` includes input and output.
    Mlp { widths: Vec<usize> },
    /// Stack of 3x3 convolutions, global average pool, linear head.
    SmallConv {
        channels: Vec<usize>,
        kernels: Vec<usize>,
    },
    /// Pre-activation residual blocks with per-channel affine scaling
    /// in place of batch norm.
    MiniPreactResnet { blocks: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.class_count < 2 {
            return Err(NnError::BadSpec(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        match &self.architecture {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
                    return Err(NnError::BadSpec("mlp widths must be >= 1 with at least input and output".into()));
                }
                if *widths.last().unwrap() != self.class_count {
                    return Err(NnError::BadSpec(format!(
                        "mlp output width {} != class_count {}",
                        widths.last().unwrap(),
                        self.class_count
                    )));
                }
                let din: usize = self.input_shape.iter().product();
                if din != widths[0] {
                    return Err(NnError::BadSpec(format!(
                        "mlp input width {} != input_shape {:?} ({} values)",
                        widths[0], self.input_shape, din
                    )));
                }
            }
            Architecture::SmallConv { channels, kernels } => {
                if self.input_shape.len() != 3 {
                    return Err(NnError::BadSpec("small_conv needs [c,h,w] input_shape".into()));
                }
                if channels.is_empty() || channels.len() != kernels.len() {
                    return Err(NnError::BadSpec("small_conv channels/kernels must be non-empty and equal length".into()));
                }
                if kernels.iter().any(|&k| k == 0 || k > 5) {
                    return Err(NnError::BadSpec("small_conv kernels must be in 1..=5".into()));
                }
            }
            Architecture::MiniPreactResnet { blocks, width } => {
                if self.input_shape.len() != 3 {
                    return Err(NnError::BadSpec("mini_preact_resnet needs [c,h,w] input_shape".into()));
                }
                if *blocks == 0 || *width == 0 || *width > 64 {
                    return Err(NnError::BadSpec("mini_preact_resnet: 1+ blocks, width in 1..=64".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
}

fn init_values(rng: &mut ChaCha8Rng, fan_in: usize, n: usize, zero: bool) -> Vec<f64> {
    if zero {
        return vec![0.0; n];
    }
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        .collect()
}

/// Build parameters (deterministic from `init_seed`) and return the model.
pub fn build_model(g: &mut Graph, spec: &ModelSpec) -> Result<Model, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rngutil::derive_seed(spec.init_seed, "model-init"));
    let mut params = Vec::new();
    let add = |g: &mut Graph,
                   rng: &mut ChaCha8Rng,
                   params: &mut Vec<Param>,
                   name: String,
                   shape: Vec<usize>,
                   fan_in: usize,
                   kind: InitKind| {
        let n = numel(&shape);
        let values = match kind {
            InitKind::FanIn => init_values(rng, fan_in, n, false),
            InitKind::Zero => vec![0.0; n],
            InitKind::One => vec![1.0; n],
        };
        let t = g.leaf(shape, values, true);
        params.push(Param { name, tensor: t });
    };
    enum InitKind {
        FanIn,
        Zero,
        One,
    }
    match &spec.architecture {
        Architecture::Mlp { widths } => {
            for l in 0..widths.len() - 1 {
                let (fi, fo) = (widths[l], widths[l + 1]);
                add(g, &mut rng, &mut params, format!("fc{l}.w"), vec![fi, fo], fi, InitKind::FanIn);
                add(g, &mut rng, &mut params, format!("fc{l}.b"), vec![fo], fi, InitKind::FanIn);
            }
        }
        Architecture::SmallConv { channels, kernels } => {
            let mut c_in = spec.input_shape[0];
            for (l, (&c_out, &k)) in channels.iter().zip(kernels).enumerate() {
                let fan_in = c_in * k * k;
                add(g, &mut rng, &mut params, format!("conv{l}.w"), vec![c_out, c_in, k, k], fan_in, InitKind::FanIn);
                add(g, &mut rng, &mut params, format!("conv{l}.b"), vec![c_out], fan_in, InitKind::FanIn);
                c_in = c_out;
            }
            add(g, &mut rng, &mut params, "head.w".into(), vec![c_in, spec.class_count], c_in, InitKind::FanIn);
            add(g, &mut rng, &mut params, "head.b".into(), vec![spec.class_count], c_in, InitKind::FanIn);
        }
        Architecture::MiniPreactResnet { blocks, width } => {
            let c_in = spec.input_shape[0];
            let w = *width;
            add(g, &mut rng, &mut params, "stem.w".into(), vec![w, c_in, 3, 3], c_in * 9, InitKind::FanIn);
            add(g, &mut rng, &mut params, "stem.b".into(), vec![w], c_in * 9, InitKind::FanIn);
            for b in 0..*blocks {
                for half in 0..2 {
                    add(g, &mut rng, &mut params, format!("block{b}.scale{half}"), vec![w], w, InitKind::One);
                    add(g, &mut rng, &mut params, format!("block{b}.shift{half}"), vec![w], w, InitKind::Zero);
                    add(g, &mut rng, &mut params, format!("block{b}.conv{half}.w"), vec![w, w, 3, 3], w * 9, InitKind::FanIn);
                    add(g, &mut rng, &mut params, format!("block{b}.conv{half}.b"), vec![w], w * 9, InitKind::FanIn);
                }
            }
            add(g, &mut rng, &mut params, "head.w".into(), vec![w, spec.class_count], w, InitKind::FanIn);
            add(g, &mut rng, &mut params, "head.b".into(), vec![spec.class_count], w, InitKind::FanIn);
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

impl Model {
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| p.tensor)
    }

    pub fn param_count(&self, g: &Graph) -> usize {
        self.params.iter().map(|p| g.values(p.tensor).len()).sum()
    }

    /// Forward pass to logits. `x` is [m, d] for MLPs and [m,c,h,w]
    /// for convolutional architectures.
    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor, NnError> {
        match &self.spec.architecture {
            Architecture::Mlp { widths } => {
                let mut h = x;
                let shape = g.shape(x).to_vec();
                if shape.len() > 2 {
                    // Flatten image batches; the MLP consumes [m, d].
                    let d: usize = shape[1..].iter().product();
                    h = g.reshape(h, vec![shape[0], d])?;
                }
                for l in 0..widths.len() - 1 {
                    let w = self.param(&format!("fc{l}.w")).unwrap();
                    let b = self.param(&format!("fc{l}.b")).unwrap();
                    let z = g.matmul(h, w)?;
                    h = g.add_rowvec(z, b)?;
                    if l + 1 < widths.len() - 1 {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            Architecture::SmallConv { channels, kernels } => {
                let mut h = x;
                for (l, &k) in kernels.iter().enumerate() {
                    let _ = channels;
                    let w = self.param(&format!("conv{l}.w")).unwrap();
                    let b = self.param(&format!("conv{l}.b")).unwrap();
                    let z = g.conv2d(h, w, 1, k / 2)?;
                    h = g.add_chanvec(z, b)?;
                    h = g.relu(h);
                }
                let pooled = g.mean_hw(h)?;
                let w = self.param("head.w").unwrap();
                let b = self.param("head.b").unwrap();
                let z = g.matmul(pooled, w)?;
                Ok(g.add_rowvec(z, b)?)
            }
            Architecture::MiniPreactResnet { blocks, .. } => {
                let stem_w = self.param("stem.w").unwrap();
                let stem_b = self.param("stem.b").unwrap();
                let z = g.conv2d(x, stem_w, 1, 1)?;
                let mut h = g.add_chanvec(z, stem_b)?;
                for bi in 0..*blocks {
                    let mut t = h;
                    for half in 0..2 {
                        let scale = self.param(&format!("block{bi}.scale{half}")).unwrap();
                        let shift = self.param(&format!("block{bi}.shift{half}")).unwrap();
                        let cw = self.param(&format!("block{bi}.conv{half}.w")).unwrap();
                        let cb = self.param(&format!("block{bi}.conv{half}.b")).unwrap();
                        // pre-activation: affine, relu, conv
                        let scaled = chan_affine(g, t, scale, shift)?;
                        let act = g.relu(scaled);
                        let conv = g.conv2d(act, cw, 1, 1)?;
                        t = g.add_chanvec(conv, cb)?;
                    }
                    h = g.add(h, t)?;
                }
                let pooled = g.mean_hw(h)?;
                let w = self.param("head.w").unwrap();
                let b = self.param("head.b").unwrap();
                let z = g.matmul(pooled, w)?;
                Ok(g.add_rowvec(z, b)?)
            }
        }
    }

    pub fn set_requires_grad(&self, g: &mut Graph, rg: bool) {
        for p in &self.params {
            g.set_requires_grad(p.tensor, rg);
        }
    }
}

/// Per-channel x*scale + shift for [n,c,h,w].
fn chan_affine(g: &mut Graph, x: Tensor, scale: Tensor, shift: Tensor) -> Result<Tensor, TensorError> {
    let s = g.shape(x).to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    // Expand scale over rows via reshape to [n*c, hw] and scale_rows.
    let flat = g.reshape(x, vec![n * c, hw])?;
    let mut sv = Vec::with_capacity(n * c);
    for _ in 0..n {
        sv.push(scale);
    }
    // scale vector of length n*c built on the tape by concatenation
    let mut cat = sv[0];
    for &t in &sv[1..] {
        cat = g.concat_rows(cat, t)?;
    }
    let scaled = g.scale_rows(flat, cat)?;
    let mut shv = Vec::with_capacity(n);
    for _ in 0..n {
        shv.push(shift);
    }
    let mut shcat = shv[0];
    for &t in &shv[1..] {
        shcat = g.concat_rows(shcat, t)?;
    }
    // shift per (n,c) row: add shift broadcast over hw
    let shifted = add_col_broadcast(g, scaled, shcat)?;
    g.reshape(shifted, s)
}

/// [m, k] + column vector [m] broadcast over k.
fn add_col_broadcast(g: &mut Graph, x: Tensor, col: Tensor) -> Result<Tensor, TensorError> {
    let k = g.shape(x)[1];
    let ones = g.leaf(vec![1, k], vec![1.0; k], false);
    let colm = g.reshape(col, vec![g.values(col).len(), 1])?;
    let expanded = g.matmul(colm, ones)?;
    g.add(x, expanded)
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Yogi { beta1: f64, beta2: f64, eps_hat: f64 },
}

impl OptimizerKind {
    pub fn yogi_default() -> Self {
        OptimizerKind::Yogi {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-3,
        }
    }
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, g: &Graph, model: &Model) -> Self {
        let sizes: Vec<usize> = model.params.iter().map(|p| g.values(p.tensor).len()).collect();
        Optimizer {
            kind,
            lr,
            weight_decay,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over every model parameter. Weight decay is applied
    /// as grad += wd * theta before the step.
    pub fn step(&mut self, g: &mut Graph, model: &Model) -> Result<(), NnError> {
        for (pi, p) in model.params.iter().enumerate() {
            let n = g.values(p.tensor).len();
            let mut grad: Vec<f64> = match g.grad(p.tensor) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; n],
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGrad(p.name.clone()));
            }
            if self.weight_decay != 0.0 {
                let theta = g.values(p.tensor);
                for (gi, &ti) in grad.iter_mut().zip(theta) {
                    *gi += self.weight_decay * ti;
                }
            }
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let v = &mut self.first[pi];
                    let theta = g.values_mut(p.tensor);
                    for i in 0..n {
                        v[i] = momentum * v[i] + grad[i];
                        theta[i] -= self.lr * v[i];
                    }
                }
                OptimizerKind::Yogi { beta1, beta2, eps_hat } => {
                    let m = &mut self.first[pi];
                    let v = &mut self.second[pi];
                    for i in 0..n {
                        let g2 = grad[i] * grad[i];
                        v[i] -= (1.0 - beta2) * crate::tensor::sign(v[i] - g2) * g2;
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    }
                    let theta = g.values_mut(p.tensor);
                    for i in 0..n {
                        theta[i] -= self.lr * m[i] / (v[i].sqrt() + eps_hat);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), NnError> {
        let mono = self
            .milestones
            .windows(2)
            .all(|w| w[0] < w[1]);
        let in_range = self.milestones.iter().all(|&m| m > 0.0 && m <= 1.0);
        if !mono || !in_range {
            return Err(NnError::BadSpec("milestones must be strictly increasing in (0,1]".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(NnError::BadSpec("factor must be in (0,1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let frac = epoch as f64 / total_epochs as f64;
        let passed = self.milestones.iter().filter(|&&m| frac >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: "AMIX" | version u32 LE | spec-json len u64 LE |
// spec json | per-parameter f64 LE arrays in declaration order.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(path: &Path, g: &Graph, model: &Model) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&model.spec)?;
    f.write_all(&(spec.len() as u64).to_le_bytes())?;
    f.write_all(&spec)?;
    for p in &model.params {
        for v in g.values(p.tensor) {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path, g: &mut Graph) -> Result<Model, NnError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| NnError::Truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic);
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(|_| NnError::Truncated)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::BadVersion(version));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(|_| NnError::Truncated)?;
    let spec_len = u64::from_le_bytes(len8) as usize;
    let mut spec_buf = vec![0u8; spec_len];
    f.read_exact(&mut spec_buf).map_err(|_| NnError::Truncated)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_buf)?;
    let model = build_model(g, &spec)?;
    for p in &model.params {
        let n = g.values(p.tensor).len();
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf).map_err(|_| NnError::Truncated)?;
        let vals = g.values_mut(p.tensor);
        for i in 0..n {
            vals[i] = f64::from_le_bytes(buf[i * 8..(i + 1) * 8].try_into().unwrap());
        }
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::SpecMismatch(format!(
            "{} trailing bytes after parameters",
            rest.len()
        )));
    }
    Ok(model)
}
