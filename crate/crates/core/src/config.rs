//! TOML experiment configuration: dataset selector, model, training
//! hyperparameters, and the evaluation attacker list. Unknown keys are
//! rejected and validation reports every violation at once.

use crate::data::{self, Dataset};
use crate::nn::{LrSchedule, ModelSpec, OptimizerKind};
use crate::train::{Ablations, EvalSpec, TrainConfig, TrainScheme};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Data(#[from] data::DataError),
}

/// Accepts a plain number or a rational string like "8/255".
pub fn rational<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    struct V;
    impl Visitor<'_> for V {
        type Value = f64;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or a rational string like \"8/255\"")
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_str<E: de::Error>(self, s: &str) -> Result<f64, E> {
            parse_rational(s).ok_or_else(|| E::custom(format!("bad rational \"{s}\"")))
        }
    }
    d.deserialize_any(V)
}

pub fn rational_opt<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    rational(d).map(Some)
}

pub fn parse_rational(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().ok()?;
        let d: f64 = den.trim().parse().ok()?;
        if d == 0.0 {
            return None;
        }
        Some(n / d)
    } else {
        s.parse().ok()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Rings,
    Digits,
    Idx,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub seed: u64,
    /// digits: number of glyph classes; blobs: cluster count.
    pub classes: usize,
    pub spacing: f64,
    pub sigma: f64,
    pub radii: Vec<f64>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::TwoMoons,
            train_size: 512,
            test_size: 256,
            noise: 0.1,
            seed: 0,
            classes: 4,
            spacing: 3.0,
            sigma: 0.4,
            radii: vec![1.0, 2.0],
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<(Dataset, Dataset), ConfigError> {
        let tr_seed = self.seed;
        let te_seed = self.seed.wrapping_add(1);
        Ok(match self.kind {
            DatasetKind::TwoMoons => (
                data::gen_two_moons(self.train_size, self.noise, tr_seed),
                data::gen_two_moons(self.test_size, self.noise, te_seed),
            ),
            DatasetKind::Blobs => (
                data::gen_gaussian_blobs(self.classes, self.train_size, self.spacing, self.sigma, tr_seed),
                data::gen_gaussian_blobs(self.classes, self.test_size, self.spacing, self.sigma, te_seed),
            ),
            DatasetKind::Rings => (
                data::gen_rings(self.train_size, &self.radii, self.sigma, tr_seed),
                data::gen_rings(self.test_size, &self.radii, self.sigma, te_seed),
            ),
            DatasetKind::Digits => (
                data::gen_digits8x8(self.train_size, self.classes, self.noise, tr_seed),
                data::gen_digits8x8(self.test_size, self.classes, self.noise, te_seed),
            ),
            DatasetKind::Idx => {
                let missing = || {
                    ConfigError::Invalid(vec![
                        "dataset: idx kind requires train_images/train_labels/test_images/test_labels".into(),
                    ])
                };
                let tr = data::load_idx(
                    self.train_images.as_deref().ok_or_else(missing)?,
                    self.train_labels.as_deref().ok_or_else(missing)?,
                )?;
                let te = data::load_idx(
                    self.test_images.as_deref().ok_or_else(missing)?,
                    self.test_labels.as_deref().ok_or_else(missing)?,
                )?;
                (tr, te)
            }
        })
    }

    fn validate(&self, errs: &mut Vec<String>) {
        if self.kind != DatasetKind::Idx {
            if self.train_size == 0 {
                errs.push("dataset.train_size: must be >= 1".into());
            }
            if self.test_size == 0 {
                errs.push("dataset.test_size: must be >= 1".into());
            }
        }
        match self.kind {
            DatasetKind::Digits => {
                if !(2..=10).contains(&self.classes) {
                    errs.push(format!("dataset.classes: digits supports 2..=10, got {}", self.classes));
                }
            }
            DatasetKind::Blobs => {
                if self.classes < 2 {
                    errs.push("dataset.classes: blobs needs >= 2 clusters".into());
                }
            }
            DatasetKind::Rings => {
                if self.radii.len() < 2 {
                    errs.push("dataset.radii: rings needs >= 2 radii".into());
                }
            }
            DatasetKind::Idx => {
                for (name, p) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if p.is_none() {
                        errs.push(format!("dataset.{name}: required for kind = \"idx\""));
                    }
                }
            }
            DatasetKind::TwoMoons => {}
        }
    }
}

fn default_attack_steps() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.5
}
fn default_kappa() -> f64 {
    0.65
}
fn default_eta_gamma() -> f64 {
    0.1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::yogi_default()
}
fn default_lr() -> f64 {
    0.003
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_milestones() -> Vec<f64> {
    vec![0.7, 0.9]
}
fn default_factor() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_epsilon() -> f64 {
    8.0 / 255.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub scheme: TrainScheme,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epsilon", deserialize_with = "rational")]
    pub epsilon: f64,
    #[serde(default = "default_attack_steps")]
    pub attack_steps: usize,
    #[serde(default, deserialize_with = "rational_opt")]
    pub attack_step_size: Option<f64>,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_eta_gamma")]
    pub eta_gamma: f64,
    #[serde(default)]
    pub lambda_override: Option<f64>,
    #[serde(default)]
    pub post_mix_clamp: bool,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_milestones")]
    pub milestones: Vec<f64>,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub normalize: bool,
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attacks: Vec<EvalSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            batch_size: default_eval_batch(),
            seed: 0,
            attacks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Every violation at once, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        self.dataset.validate(&mut errs);
        if let Err(e) = self.model.validate() {
            errs.push(format!("model: {e}"));
        }
        let t = &self.train;
        if t.epochs == 0 {
            errs.push("train.epochs: must be >= 1".into());
        }
        if t.batch_size == 0 {
            errs.push("train.batch_size: must be >= 1".into());
        }
        if t.epsilon < 0.0 {
            errs.push(format!("train.epsilon: must be >= 0, got {}", t.epsilon));
        }
        if let Some(s) = t.attack_step_size {
            if s < 0.0 {
                errs.push(format!("train.attack_step_size: must be >= 0, got {s}"));
            }
        }
        if t.alpha <= 0.0 {
            errs.push(format!("train.alpha: must be > 0, got {}", t.alpha));
        }
        if !(0.0..1.0).contains(&t.kappa) {
            errs.push(format!("train.kappa: must be in [0,1), got {}", t.kappa));
        }
        if t.eta_gamma <= 0.0 {
            errs.push(format!("train.eta_gamma: must be > 0, got {}", t.eta_gamma));
        }
        if let Some(l) = t.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                errs.push(format!("train.lambda_override: must be in [0,1], got {l}"));
            }
        }
        if t.lr <= 0.0 {
            errs.push(format!("train.lr: must be > 0, got {}", t.lr));
        }
        if t.weight_decay < 0.0 {
            errs.push(format!("train.weight_decay: must be >= 0, got {}", t.weight_decay));
        }
        if !(0.0 < t.factor && t.factor <= 1.0) {
            errs.push(format!("train.factor: must be in (0,1], got {}", t.factor));
        }
        let mut prev = 0.0;
        for &m in &t.milestones {
            if !(prev < m && m <= 1.0) {
                errs.push(format!(
                    "train.milestones: must be strictly increasing fractions in (0,1], got {:?}",
                    t.milestones
                ));
                break;
            }
            prev = m;
        }
        match &t.optimizer {
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(momentum) {
                    errs.push(format!("train.optimizer.momentum: must be in [0,1), got {momentum}"));
                }
            }
            OptimizerKind::Yogi { beta1, beta2, eps_hat } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) {
                    errs.push(format!("train.optimizer: betas must be in [0,1), got {beta1}/{beta2}"));
                }
                if *eps_hat <= 0.0 {
                    errs.push(format!("train.optimizer.eps_hat: must be > 0, got {eps_hat}"));
                }
            }
        }
        let e = &self.eval;
        if e.batch_size == 0 {
            errs.push("eval.batch_size: must be >= 1".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &e.attacks {
            if a.name.is_empty() {
                errs.push("eval.attacks: empty attack name".into());
            }
            if !names.insert(a.name.clone()) {
                errs.push(format!("eval.attacks: duplicate name \"{}\"", a.name));
            }
            if a.epsilon < 0.0 {
                errs.push(format!("eval.attacks.{}: epsilon must be >= 0", a.name));
            }
            if a.step_size < 0.0 {
                errs.push(format!("eval.attacks.{}: step_size must be >= 0", a.name));
            }
            if a.restarts == 0 {
                errs.push(format!("eval.attacks.{}: restarts must be >= 1", a.name));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Concrete training configuration for one run seed. The seed also
    /// reseeds the weight initialization.
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        let mut model = self.model.clone();
        model.init_seed = seed;
        let t = &self.train;
        TrainConfig {
            scheme: t.scheme,
            epochs: t.epochs,
            batch_size: t.batch_size,
            epsilon: t.epsilon,
            attack_steps: t.attack_steps,
            attack_step_size: t.attack_step_size,
            ablations: t.ablations,
            alpha: t.alpha,
            kappa: t.kappa,
            eta_gamma: t.eta_gamma,
            lambda_override: t.lambda_override,
            post_mix_clamp: t.post_mix_clamp,
            optimizer: t.optimizer.clone(),
            schedule: LrSchedule {
                base_lr: t.lr,
                milestones: t.milestones.clone(),
                factor: t.factor,
            },
            weight_decay: t.weight_decay,
            seed,
            model,
            augment: t.augment,
            normalize: t.normalize,
        }
    }

    /// Snapshot with every default made explicit; reloading it
    /// reproduces the run byte for byte.
    pub fn resolved_toml(&self, seed: u64) -> String {
        let mut resolved = self.clone();
        resolved.train.seed = seed;
        resolved.model.init_seed = seed;
        toml::to_string_pretty(&resolved).expect("config serializes")
    }
}
