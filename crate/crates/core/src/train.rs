//! The outer training loops: PGD baseline, mixup-then-attack,
//! attack-then-mixup, and adversarially optimized mixup with its
//! ablation toggles, plus run metrics and their JSONL encoding.

use crate::adversary::{pgd_attack, AttackConfig, AttackError, AttackInit, Attacker};
use crate::data::{self, ChannelStat, DataError, Dataset};
use crate::mixup::{
    self, MixState, MixupError, PairBatch, PerturbationMode, PerturbationState,
};
use crate::nn::{self, build_model, LrSchedule, Model, NnError, Optimizer, OptimizerKind};
use crate::objectives::{accuracy, kl_per_example, LabelDistribution, ObjectiveError};
use crate::rngutil;
use crate::tensor::{Graph, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScheme {
    Standard,
    Attack,
    MixThenAttack,
    AttackThenMix,
    AdvMixup,
}

impl TrainScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainScheme::Standard => "standard",
            TrainScheme::Attack => "attack",
            TrainScheme::MixThenAttack => "mix_then_attack",
            TrainScheme::AttackThenMix => "attack_then_mix",
            TrainScheme::AdvMixup => "adv_mixup",
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub frozen_lambda: bool,
    pub shared_delta: bool,
    pub geometric_labels: bool,
    pub optimize_ratio: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: TrainScheme,
    pub epochs: usize,
    pub batch_size: usize,
    /// linf bound in raw (pre-normalization) input units.
    pub epsilon: f64,
    pub attack_steps: usize,
    /// Defaults to epsilon/2 when absent.
    pub attack_step_size: Option<f64>,
    pub ablations: Ablations,
    pub alpha: f64,
    pub kappa: f64,
    pub eta_gamma: f64,
    /// Test hook: force every pair's lambda to a constant.
    pub lambda_override: Option<f64>,
    /// Clamp the mixed point to the declared input range inside the
    /// inner loop (off by default; the one mechanism that makes the
    /// geometric label ratio differ from lambda_x).
    pub post_mix_clamp: bool,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: nn::ModelSpec,
    pub augment: bool,
    pub normalize: bool,
}

impl TrainConfig {
    pub fn step_size(&self) -> f64 {
        self.attack_step_size.unwrap_or(self.epsilon / 2.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub scheme: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub pristine_acc: Option<f64>,
    pub robust_acc: BTreeMap<String, f64>,
    /// Not serialized: wall clock would break byte-for-byte
    /// reproducibility of metrics files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    /// One JSON object per epoch, then a final summary object.
    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for e in &self.epochs {
            let line = serde_json::json!({
                "type": "epoch",
                "epoch": e.epoch,
                "lr": e.lr,
                "train_loss": e.train_loss,
                "train_acc": e.train_acc,
            });
            writeln!(w, "{line}")?;
        }
        let line = serde_json::json!({
            "type": "summary",
            "scheme": self.scheme,
            "seed": self.seed,
            "pristine_acc": self.pristine_acc,
            "robust_acc": self.robust_acc,
        });
        writeln!(w, "{line}")?;
        Ok(())
    }
}

/// A trained model together with the graph holding its parameters and
/// the normalization statistics of its training data.
pub struct TrainSession {
    pub graph: Graph,
    pub model: Model,
    pub stats: Option<Vec<ChannelStat>>,
    pub declared_range: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Pgd,
    RandomSearch,
}

/// Evaluation attacker in raw input units; converted per-channel when
/// the session normalizes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSpec {
    pub name: String,
    pub kind: EvalKind,
    #[serde(deserialize_with = "crate::config::rational")]
    pub epsilon: f64,
    #[serde(deserialize_with = "crate::config::rational")]
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub queries: usize,
}

fn one() -> usize {
    1
}

impl TrainSession {
    fn convert(&self, v: f64) -> Vec<f64> {
        match &self.stats {
            Some(st) => data::convert_eps(v, st),
            None => vec![v],
        }
    }

    fn converted_range(&self) -> Option<Vec<(f64, f64)>> {
        match (&self.stats, self.declared_range) {
            (Some(st), Some(r)) => Some(data::convert_range(r, st)),
            (None, Some(r)) => Some(vec![r]),
            (_, None) => None,
        }
    }

    pub fn attacker(&self, spec: &EvalSpec) -> (String, Attacker) {
        let cfg = AttackConfig {
            epsilon: self.convert(spec.epsilon),
            step_size: self.convert(spec.step_size),
            steps: spec.steps,
            restarts: spec.restarts,
            init: AttackInit::Uniform,
            clamp_input_range: self.converted_range(),
        };
        let attacker = match spec.kind {
            EvalKind::Pgd => Attacker::Pgd(cfg),
            EvalKind::RandomSearch => Attacker::RandomSearch {
                cfg,
                queries: spec.queries.max(1),
            },
        };
        (spec.name.clone(), attacker)
    }

    /// Pristine plus robust accuracy on a dataset, normalizing it with
    /// the session's training statistics first.
    pub fn evaluate(
        &mut self,
        ds: &Dataset,
        specs: &[EvalSpec],
        batch_size: usize,
        seed: u64,
    ) -> Result<(f64, BTreeMap<String, f64>), TrainError> {
        let mut inputs = ds.inputs.clone();
        if let Some(st) = &self.stats {
            let mut shape = vec![ds.len()];
            shape.extend_from_slice(&ds.example_shape);
            data::normalize_batch(&mut inputs, &shape, st);
        }
        let attackers: Vec<(String, Attacker)> = specs.iter().map(|s| self.attacker(s)).collect();
        Ok(crate::adversary::evaluate_robust(
            &mut self.graph,
            &self.model,
            &inputs,
            &ds.example_shape,
            &ds.labels,
            ds.class_count,
            &attackers,
            batch_size,
            seed,
        )?)
    }
}

struct StepOutcome {
    loss: f64,
    acc: f64,
}

/// Train one model with the configured scheme. Single-threaded and
/// bit-reproducible for a fixed (config, seed).
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<(TrainSession, RunMetrics), TrainError> {
    let start = std::time::Instant::now();
    let mut g = Graph::new();
    let model = build_model(&mut g, &cfg.model)?;
    let stats = if cfg.normalize && ds.is_image() {
        Some(data::compute_channel_stats(ds)?)
    } else {
        None
    };
    let eps = match &stats {
        Some(st) => data::convert_eps(cfg.epsilon, st),
        None => vec![cfg.epsilon],
    };
    let step = match &stats {
        Some(st) => data::convert_eps(cfg.step_size(), st),
        None => vec![cfg.step_size()],
    };
    let range = match (&stats, ds.declared_range) {
        (Some(st), Some(r)) => Some(data::convert_range(r, st)),
        (None, Some(r)) => Some(vec![r]),
        (_, None) => None,
    };

    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.schedule.base_lr, cfg.weight_decay, &g, &model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let policy = if ds.is_image() {
        Some(data::AugmentPolicy::for_side(ds.example_shape[2]))
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.epochs);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rngutil::stream(cfg.seed, &format!("data/{epoch}")));
        }
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, shape) = ds.gather(chunk);
            if cfg.augment && ds.is_image() {
                let mut rng = rngutil::stream(cfg.seed, &format!("aug/{epoch}/{bi}"));
                data::augment(&mut x, &shape, &mut rng, policy.as_ref().unwrap());
            }
            if let Some(st) = &stats {
                data::normalize_batch(&mut x, &shape, st);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let target = LabelDistribution::one_hot(&labels, ds.class_count);
            let mut rng_attack = rngutil::stream(cfg.seed, &format!("attack/{epoch}/{bi}"));
            let mut rng_mix = rngutil::stream(cfg.seed, &format!("mix/{epoch}/{bi}"));

            let ctx = StepCtx {
                cfg,
                eps: &eps,
                step: &step,
                range: &range,
            };
            let out = match cfg.scheme {
                TrainScheme::Standard => {
                    param_step(&mut g, &model, &mut opt, &x, &shape, &target)?
                }
                TrainScheme::Attack => {
                    let acfg = ctx.train_attack_cfg();
                    let xadv = pgd_attack(&mut g, &model, &x, &shape, &target, &acfg, &mut rng_attack)?;
                    assert_linf(&x, &xadv, &shape, &eps);
                    param_step(&mut g, &model, &mut opt, &xadv, &shape, &target)?
                }
                TrainScheme::MixThenAttack => {
                    step_mix_then_attack(&mut g, &model, &mut opt, &ctx, &x, &shape, &target, &mut rng_attack, &mut rng_mix)?
                }
                TrainScheme::AttackThenMix => {
                    step_attack_then_mix(&mut g, &model, &mut opt, &ctx, &x, &shape, &target, &mut rng_attack, &mut rng_mix)?
                }
                TrainScheme::AdvMixup => {
                    step_adv_mixup(&mut g, &model, &mut opt, &ctx, &x, &shape, &target, &mut rng_attack, &mut rng_mix)?
                }
            };
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step: bi });
            }
            loss_sum += out.loss;
            acc_sum += out.acc;
            batches += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            train_acc: acc_sum / batches.max(1) as f64,
        });
    }

    let metrics = RunMetrics {
        scheme: cfg.scheme.as_str().to_string(),
        seed: cfg.seed,
        epochs,
        pristine_acc: None,
        robust_acc: BTreeMap::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((
        TrainSession {
            graph: g,
            model,
            stats,
            declared_range: ds.declared_range,
        },
        metrics,
    ))
}

struct StepCtx<'a> {
    cfg: &'a TrainConfig,
    eps: &'a [f64],
    step: &'a [f64],
    range: &'a Option<Vec<(f64, f64)>>,
}

impl StepCtx<'_> {
    fn train_attack_cfg(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.eps.to_vec(),
            step_size: self.step.to_vec(),
            steps: self.cfg.attack_steps,
            restarts: 1,
            init: AttackInit::Uniform,
            clamp_input_range: self.range.clone(),
        }
    }

    fn lambda_vec(&self, m: usize, rejection: bool, rng: &mut impl rand::Rng) -> Vec<f64> {
        match self.cfg.lambda_override {
            Some(l) => vec![l; m],
            None if rejection => mixup::sample_lambda_init(self.cfg.alpha, self.cfg.kappa, m, rng),
            None => mixup::sample_lambda_plain(self.cfg.alpha, m, rng),
        }
    }
}

/// The epsilon-ball assertion at the moment of the parameter update.
/// The attack asserts the delta buffer exactly; recomputing the
/// difference from x + delta carries one float rounding.
fn assert_linf(x: &[f64], xadv: &[f64], shape: &[usize], eps: &[f64]) {
    for (i, (&a, &b)) in x.iter().zip(xadv).enumerate() {
        let bound = mixup::channel_bound(eps, shape, i);
        assert!(
            (b - a).abs() <= bound + 1e-12,
            "linf constraint violated at parameter update: {} > {bound}",
            (b - a).abs()
        );
    }
}

/// Descend the KL loss of f(x) against `target` once.
fn param_step(
    g: &mut Graph,
    model: &Model,
    opt: &mut Optimizer,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
) -> Result<StepOutcome, TrainError> {
    let wm = g.leaf_watermark();
    let xt = g.leaf(shape.to_vec(), x.to_vec(), false);
    let logits = model.forward(g, xt)?;
    let per = kl_per_example(g, logits, target)?;
    let loss = g.mean_all(per);
    let loss_v = g.values(loss)[0];
    let acc = accuracy(g.values(logits), target.classes, &target.hard_labels());
    g.backward(loss)?;
    opt.step(g, model)?;
    g.reset();
    g.truncate_leaves(wm);
    Ok(StepOutcome { loss: loss_v, acc })
}

#[allow(clippy::too_many_arguments)]
fn step_mix_then_attack(
    g: &mut Graph,
    model: &Model,
    opt: &mut Optimizer,
    ctx: &StepCtx,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    rng_attack: &mut impl rand::Rng,
    rng_mix: &mut impl rand::Rng,
) -> Result<StepOutcome, TrainError> {
    let pair = PairBatch::new(x, shape, target, rng_mix);
    let m = shape[0];
    let lambda = ctx.lambda_vec(m, false, rng_mix);
    let el = x.len() / m.max(1);
    let mut xm = vec![0.0; x.len()];
    for r in 0..m {
        for j in 0..el {
            xm[r * el + j] =
                lambda[r] * pair.x_i[r * el + j] + (1.0 - lambda[r]) * pair.x_j[r * el + j];
        }
    }
    let ym = mixup::mix_labels(&pair.y_i, &pair.y_j, &lambda);
    let acfg = ctx.train_attack_cfg();
    let xm_adv = pgd_attack(g, model, &xm, shape, &ym, &acfg, rng_attack)?;
    assert_linf(&xm, &xm_adv, shape, ctx.eps);
    param_step(g, model, opt, &xm_adv, shape, &ym)
}

#[allow(clippy::too_many_arguments)]
fn step_attack_then_mix(
    g: &mut Graph,
    model: &Model,
    opt: &mut Optimizer,
    ctx: &StepCtx,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    rng_attack: &mut impl rand::Rng,
    rng_mix: &mut impl rand::Rng,
) -> Result<StepOutcome, TrainError> {
    // Each example is attacked toward its own label; the permuted
    // partner view reuses the same attacked batch.
    let acfg = ctx.train_attack_cfg();
    let xadv = pgd_attack(g, model, x, shape, target, &acfg, rng_attack)?;
    assert_linf(x, &xadv, shape, ctx.eps);
    let pair = PairBatch::new(&xadv, shape, target, rng_mix);
    let m = shape[0];
    let lambda = ctx.lambda_vec(m, false, rng_mix);
    let el = x.len() / m.max(1);
    let mut xm = vec![0.0; x.len()];
    for r in 0..m {
        for j in 0..el {
            xm[r * el + j] =
                lambda[r] * pair.x_i[r * el + j] + (1.0 - lambda[r]) * pair.x_j[r * el + j];
        }
    }
    let ym = mixup::mix_labels(&pair.y_i, &pair.y_j, &lambda);
    param_step(g, model, opt, &xm, shape, &ym)
}

#[allow(clippy::too_many_arguments)]
fn step_adv_mixup(
    g: &mut Graph,
    model: &Model,
    opt: &mut Optimizer,
    ctx: &StepCtx,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    rng_attack: &mut impl rand::Rng,
    rng_mix: &mut impl rand::Rng,
) -> Result<StepOutcome, TrainError> {
    let cfg = ctx.cfg;
    let m = shape[0];
    let pair = PairBatch::new(x, shape, target, rng_mix);
    let optimize_ratio =
        cfg.ablations.optimize_ratio && !cfg.ablations.frozen_lambda && cfg.lambda_override.is_none();
    let lambda_init = ctx.lambda_vec(m, optimize_ratio, rng_mix);
    let mut mix = MixState {
        lambda_x: lambda_init.clone(),
        lambda_y: lambda_init.clone(),
        gamma: if optimize_ratio {
            Some(mixup::gamma_init(&lambda_init, cfg.kappa)?)
        } else {
            None
        },
        kappa: cfg.kappa,
        alpha: cfg.alpha,
        frozen: cfg.ablations.frozen_lambda,
    };

    let batch_wm = g.leaf_watermark();
    let mode = if cfg.ablations.shared_delta {
        PerturbationMode::Shared
    } else {
        PerturbationMode::Independent
    };
    let pert = PerturbationState::init(g, shape, ctx.eps.to_vec(), mode, rng_attack);

    model.set_requires_grad(g, false);
    for _ in 0..cfg.attack_steps {
        let wm = g.leaf_watermark();
        let built = build_mix_tape(g, model, &pair, &pert, &mix, ctx, optimize_ratio)?;
        if !g.values(built.loss)[0].is_finite() {
            model.set_requires_grad(g, true);
            return Err(AttackError::NonFiniteLoss.into());
        }
        g.backward(built.loss)?;
        let gamma_grad = built
            .gamma_leaf
            .and_then(|t| g.grad(t).map(|v| v.to_vec()));
        // Step while the gradients are still on the tape; reset wipes them.
        pert.sign_step_and_project(g, ctx.step);
        pert.assert_in_ball(g);
        g.reset();
        g.truncate_leaves(wm);
        if let Some(gg) = gamma_grad {
            mixup::ratio_step(&mut mix, &gg, cfg.eta_gamma);
        }
    }
    model.set_requires_grad(g, true);

    // Final parameter update on the worst found (x_m', y_m).
    let wm = g.leaf_watermark();
    let built = build_mix_tape(g, model, &pair, &pert, &mix, ctx, false)?;
    let loss_v = g.values(built.loss)[0];
    let acc = accuracy(
        g.values(built.logits),
        built.ym.classes,
        &built.ym.hard_labels(),
    );
    g.backward(built.loss)?;
    opt.step(g, model)?;
    g.reset();
    g.truncate_leaves(wm);
    g.truncate_leaves(batch_wm);
    Ok(StepOutcome { loss: loss_v, acc })
}

struct MixTape {
    loss: Tensor,
    logits: Tensor,
    ym: LabelDistribution,
    gamma_leaf: Option<Tensor>,
}

/// One forward tape of the integrated mixup objective
/// d(f(x_m'), y_m), with lambda supplied either as a constant or
/// through the sigmoid reparameterization of a gamma leaf.
fn build_mix_tape(
    g: &mut Graph,
    model: &Model,
    pair: &PairBatch,
    pert: &PerturbationState,
    mix: &MixState,
    ctx: &StepCtx,
    with_gamma: bool,
) -> Result<MixTape, TrainError> {
    let cfg = ctx.cfg;
    let m = pair.shape[0];
    let xi = g.leaf(pair.shape.clone(), pair.x_i.clone(), false);
    let xj = g.leaf(pair.shape.clone(), pair.x_j.clone(), false);
    let (lam_t, gamma_leaf) = if with_gamma {
        let gamma = g.leaf(vec![m], mix.gamma.clone().unwrap(), true);
        (mixup::lambda_tensor_from_gamma(g, gamma, mix.kappa), Some(gamma))
    } else {
        (g.leaf(vec![m], mix.lambda_x.clone(), false), None)
    };
    let d_i = pert.delta_i;
    let d_j = match pert.delta_j {
        Some(dj) => dj,
        None => g.permute_rows(pert.delta_i, &pair.perm)?,
    };
    let xi_p = g.add(xi, d_i)?;
    let xj_p = g.add(xj, d_j)?;
    let mut xm = mixup::mix_points(g, xi_p, xj_p, lam_t)?;
    if cfg.post_mix_clamp {
        if let Some(range) = ctx.range {
            // Desk-scale data is single-channel; one clamp covers it.
            xm = g.clamp(xm, range[0].0, range[0].1);
        }
    }
    let lambda_y: Vec<f64> = if cfg.ablations.geometric_labels {
        let ly = mixup::geometric_label_ratio(g, xi_p, xj_p, xm)?;
        g.values(ly).to_vec()
    } else {
        g.values(lam_t).to_vec()
    };
    let ym = mixup::mix_labels(&pair.y_i, &pair.y_j, &lambda_y);
    let logits = model.forward(g, xm)?;
    let per = kl_per_example(g, logits, &ym)?;
    let loss = g.mean_all(per);
    Ok(MixTape {
        loss,
        logits,
        ym,
        gamma_leaf,
    })
}

/// Robust accuracy of a session against a quick PGD attacker; used by
/// smoke tests and the FFI surface.
pub fn quick_robust_eval(
    session: &mut TrainSession,
    ds: &Dataset,
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let spec = EvalSpec {
        name: "pgd".into(),
        kind: EvalKind::Pgd,
        epsilon,
        step_size: epsilon / 4.0,
        steps,
        restarts: 1,
        queries: 0,
    };
    let (pristine, robust) = session.evaluate(ds, &[spec], 256, seed)?;
    Ok((pristine, robust["pgd"]))
}
