//! Attack-time optimizers: the PGD inner loop, FGSM-with-random-init
//! as its single-step case, a gradient-free random-search attacker for
//! obfuscation checks, and the robust-evaluation harness.

use crate::mixup::channel_bound;
use crate::nn::{Model, NnError};
use crate::objectives::{accuracy, kl_per_example, LabelDistribution, ObjectiveError};
use crate::rngutil;
use crate::tensor::{sign, Graph};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("non-finite loss during attack")]
    NonFiniteLoss,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    Uniform,
    Zero,
}

/// Attack hyperparameters in the space the attack runs in. For
/// normalized image data `epsilon`/`step_size` hold per-channel
/// converted bounds (see [`crate::data::convert_eps`]); for raw or 2-D
/// data they hold a single entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: Vec<f64>,
    pub step_size: Vec<f64>,
    pub steps: usize,
    pub restarts: usize,
    pub init: AttackInit,
    /// Per-channel valid input range, when the dataset declares one.
    pub clamp_input_range: Option<Vec<(f64, f64)>>,
}

impl AttackConfig {
    pub fn scalar(epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon: vec![epsilon],
            step_size: vec![step_size],
            steps,
            restarts: 1,
            init: AttackInit::Uniform,
            clamp_input_range: None,
        }
    }

    pub fn max_epsilon(&self) -> f64 {
        self.epsilon.iter().cloned().fold(0.0, f64::max)
    }
}

fn range_bound(range: &Option<Vec<(f64, f64)>>, shape: &[usize], idx: usize) -> Option<(f64, f64)> {
    range.as_ref().map(|r| {
        if r.len() == 1 || shape.len() != 4 {
            r[0]
        } else {
            let hw = shape[2] * shape[3];
            r[(idx / hw) % r.len()]
        }
    })
}

/// Project delta into the epsilon ball and, when a range is declared,
/// keep x+delta inside it. Both projections are exact clamps.
fn project_delta(delta: &mut [f64], x: &[f64], shape: &[usize], cfg: &AttackConfig) {
    for i in 0..delta.len() {
        let b = channel_bound(&cfg.epsilon, shape, i);
        delta[i] = delta[i].clamp(-b, b);
        if let Some((lo, hi)) = range_bound(&cfg.clamp_input_range, shape, i) {
            // The subtraction can round a hair past b; the final clamp
            // keeps the ball constraint exact.
            delta[i] = ((x[i] + delta[i]).clamp(lo, hi) - x[i]).clamp(-b, b);
        }
    }
}

/// Compose x + delta, re-clamped to the declared range so emitted
/// examples satisfy it exactly.
fn compose(x: &[f64], delta: &[f64], shape: &[usize], cfg: &AttackConfig) -> Vec<f64> {
    x.iter()
        .zip(delta)
        .enumerate()
        .map(|(i, (&a, &d))| match range_bound(&cfg.clamp_input_range, shape, i) {
            Some((lo, hi)) => (a + d).clamp(lo, hi),
            None => a + d,
        })
        .collect()
}

/// Per-example loss of f(x + delta) against `target`, without touching
/// parameter gradients.
fn forward_losses(
    g: &mut Graph,
    model: &Model,
    x: &[f64],
    shape: &[usize],
    delta: &[f64],
    target: &LabelDistribution,
) -> Result<Vec<f64>, AttackError> {
    let wm = g.leaf_watermark();
    let xv: Vec<f64> = x.iter().zip(delta).map(|(&a, &d)| a + d).collect();
    let xt = g.leaf(shape.to_vec(), xv, false);
    let logits = model.forward(g, xt)?;
    let per = kl_per_example(g, logits, target)?;
    let out = g.values(per).to_vec();
    g.reset();
    g.truncate_leaves(wm);
    Ok(out)
}

/// Projected sign-gradient ascent on the KL loss within the epsilon
/// box around x. Returns the adversarial batch; with restarts > 1 the
/// per-example highest-loss restart is kept. Model parameters are
/// bit-identical before and after.
pub fn pgd_attack(
    g: &mut Graph,
    model: &Model,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AttackError> {
    model.set_requires_grad(g, false);
    let result = pgd_attack_inner(g, model, x, shape, target, cfg, rng);
    model.set_requires_grad(g, true);
    result
}

fn pgd_attack_inner(
    g: &mut Graph,
    model: &Model,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AttackError> {
    let m = shape[0];
    let el = x.len() / m.max(1);
    let mut best_delta = vec![0.0; x.len()];
    let mut best_loss = vec![f64::NEG_INFINITY; m];
    for _ in 0..cfg.restarts.max(1) {
        let mut delta: Vec<f64> = match cfg.init {
            AttackInit::Uniform => (0..x.len())
                .map(|i| {
                    let b = channel_bound(&cfg.epsilon, shape, i);
                    (rng.random::<f64>() * 2.0 - 1.0) * b
                })
                .collect(),
            AttackInit::Zero => vec![0.0; x.len()],
        };
        project_delta(&mut delta, x, shape, cfg);
        for _ in 0..cfg.steps {
            let wm = g.leaf_watermark();
            let xt = g.leaf(shape.to_vec(), x.to_vec(), false);
            let dt = g.leaf(shape.to_vec(), delta.clone(), true);
            let xa = g.add(xt, dt)?;
            let logits = model.forward(g, xa)?;
            let per = kl_per_example(g, logits, target)?;
            let loss = g.mean_all(per);
            if !g.values(loss)[0].is_finite() {
                g.reset();
                g.truncate_leaves(wm);
                return Err(AttackError::NonFiniteLoss);
            }
            g.backward(loss)?;
            let grad = g.grad(dt).map(|gr| gr.to_vec()).unwrap_or_else(|| vec![0.0; delta.len()]);
            g.reset();
            g.truncate_leaves(wm);
            for i in 0..delta.len() {
                let eta = channel_bound(&cfg.step_size, shape, i);
                delta[i] += sign(grad[i]) * eta;
            }
            project_delta(&mut delta, x, shape, cfg);
        }
        let losses = forward_losses(g, model, x, shape, &delta, target)?;
        for r in 0..m {
            if losses[r] > best_loss[r] {
                best_loss[r] = losses[r];
                best_delta[r * el..(r + 1) * el].copy_from_slice(&delta[r * el..(r + 1) * el]);
            }
        }
    }
    for (i, &d) in best_delta.iter().enumerate() {
        let b = channel_bound(&cfg.epsilon, shape, i);
        assert!(d.abs() <= b, "delta out of ball after projection: {d} > {b}");
    }
    Ok(compose(x, &best_delta, shape, cfg))
}

/// Gradient-free attacker: random sign-corner moves on contiguous
/// coordinate blocks, keeping the best candidate per example. Only
/// forward loss evaluations are used.
pub fn random_search_attack(
    g: &mut Graph,
    model: &Model,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    cfg: &AttackConfig,
    queries: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AttackError> {
    model.set_requires_grad(g, false);
    let result = random_search_inner(g, model, x, shape, target, cfg, queries.max(1), rng);
    model.set_requires_grad(g, true);
    result
}

fn random_search_inner(
    g: &mut Graph,
    model: &Model,
    x: &[f64],
    shape: &[usize],
    target: &LabelDistribution,
    cfg: &AttackConfig,
    queries: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AttackError> {
    let m = shape[0];
    let el = x.len() / m.max(1);
    let mut best = vec![0.0; x.len()];
    let mut best_loss = forward_losses(g, model, x, shape, &best, target)?;
    for q in 0..queries {
        // Block size shrinks over the query budget.
        let frac = 1.0 - q as f64 / queries as f64;
        let block = ((el as f64 * 0.5 * frac).ceil() as usize).clamp(1, el);
        let mut cand = best.clone();
        for r in 0..m {
            let start = r * el + rng.random_range(0..=(el - block));
            for i in start..start + block {
                let b = channel_bound(&cfg.epsilon, shape, i % el.max(1));
                cand[i] = if rng.random::<bool>() { b } else { -b };
            }
        }
        project_delta(&mut cand, x, shape, cfg);
        let losses = forward_losses(g, model, x, shape, &cand, target)?;
        for r in 0..m {
            if losses[r] > best_loss[r] {
                best_loss[r] = losses[r];
                best[r * el..(r + 1) * el].copy_from_slice(&cand[r * el..(r + 1) * el]);
            }
        }
    }
    Ok(x.iter().zip(&best).map(|(&a, &d)| a + d).collect())
}

/// A named attack for evaluation reports.
#[derive(Clone, Debug)]
pub enum Attacker {
    Pgd(AttackConfig),
    RandomSearch { cfg: AttackConfig, queries: usize },
}

/// Pristine accuracy plus robust accuracy per named attacker. An
/// example counts as robust only if correctly classified after attack.
pub fn evaluate_robust(
    g: &mut Graph,
    model: &Model,
    inputs: &[f64],
    shape_per_example: &[usize],
    labels: &[usize],
    class_count: usize,
    attackers: &[(String, Attacker)],
    batch_size: usize,
    seed: u64,
) -> Result<(f64, BTreeMap<String, f64>), AttackError> {
    let n = labels.len();
    let el: usize = shape_per_example.iter().product();
    let mut pristine_correct = 0usize;
    let mut robust_correct: BTreeMap<String, usize> = attackers.iter().map(|(n, _)| (n.clone(), 0)).collect();
    let mut start = 0;
    let mut shard = 0u64;
    while start < n {
        let end = (start + batch_size).min(n);
        let m = end - start;
        let x = &inputs[start * el..end * el];
        let y = &labels[start..end];
        let mut shape = vec![m];
        shape.extend_from_slice(shape_per_example);
        let target = LabelDistribution::one_hot(y, class_count);

        let wm = g.leaf_watermark();
        let xt = g.leaf(shape.clone(), x.to_vec(), false);
        model.set_requires_grad(g, false);
        let logits = model.forward(g, xt)?;
        let lv = g.values(logits).to_vec();
        model.set_requires_grad(g, true);
        g.reset();
        g.truncate_leaves(wm);
        pristine_correct += (accuracy(&lv, class_count, y) * m as f64).round() as usize;

        for (name, attacker) in attackers {
            // Counter-based shard seeding: shard count never changes results.
            let mut rng = rngutil::stream(seed, &format!("eval/{name}/{shard}"));
            let xadv = match attacker {
                Attacker::Pgd(cfg) => pgd_attack(g, model, x, &shape, &target, cfg, &mut rng)?,
                Attacker::RandomSearch { cfg, queries } => {
                    random_search_attack(g, model, x, &shape, &target, cfg, *queries, &mut rng)?
                }
            };
            let wm = g.leaf_watermark();
            let xt = g.leaf(shape.clone(), xadv, false);
            model.set_requires_grad(g, false);
            let logits = model.forward(g, xt)?;
            let lv = g.values(logits).to_vec();
            model.set_requires_grad(g, true);
            g.reset();
            g.truncate_leaves(wm);
            *robust_correct.get_mut(name).unwrap() +=
                (accuracy(&lv, class_count, y) * m as f64).round() as usize;
        }
        start = end;
        shard += 1;
    }
    let pristine = pristine_correct as f64 / n.max(1) as f64;
    let robust = robust_correct
        .into_iter()
        .map(|(k, c)| (k, c as f64 / n.max(1) as f64))
        .collect();
    Ok((pristine, robust))
}
