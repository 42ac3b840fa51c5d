//! Finite-difference verification of every tape operation and of the
//! two long chains the attack relies on: loss gradients with respect
//! to the perturbation and to the reparameterized mixing ratio.

use crate::mixup;
use crate::nn::{build_model, Architecture, Model, ModelSpec};
use crate::rngutil;
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use serde::Serialize;

const OP_TOL: f64 = 1e-4;
const CHAIN_TOL: f64 = 1e-3;
const FD_H: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub checks: Vec<OpCheck>,
    pub passed: bool,
}

impl GradReport {
    pub fn failures(&self) -> impl Iterator<Item = &OpCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// One check instance: rebuildable scalar function of a single leaf.
/// `build` must be deterministic given the leaf values.
fn check_instance(build: &mut dyn FnMut(&mut Graph, &[f64], bool) -> (Tensor, Tensor), base: &[f64], fault: bool) -> f64 {
    let mut g = Graph::new();
    let (leaf, loss) = build(&mut g, base, true);
    g.backward(loss).expect("gradcheck loss must be scalar");
    let mut analytic = g.grad(leaf).expect("checked leaf must require grad").to_vec();
    if fault {
        for v in &mut analytic {
            *v = *v * 1.05 + 1e-3;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += FD_H;
        let mut minus = base.to_vec();
        minus[i] -= FD_H;
        let mut gp = Graph::new();
        let (_, lp) = build(&mut gp, &plus, false);
        let mut gm = Graph::new();
        let (_, lm) = build(&mut gm, &minus, false);
        let numeric = (gp.values(lp)[0] - gm.values(lm)[0]) / (2.0 * FD_H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values kept away from a kink so central differences are valid.
fn away_from(rng: &mut impl Rng, lo: f64, hi: f64, n: usize, kinks: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > 5e-3) {
                return v;
            }
        })
        .collect()
}

/// Weighted sum of an arbitrary-shape output so the loss is scalar but
/// not symmetric in the output entries.
fn weighted_sum(g: &mut Graph, out: Tensor, weights: &[f64]) -> Tensor {
    let shape = g.shape(out).to_vec();
    let w = g.leaf(shape, weights.to_vec(), false);
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod)
}

pub fn run(seed: u64) -> GradReport {
    run_with_fault(seed, None)
}

/// `fault` perturbs the analytic gradient of the named op before the
/// comparison; the resulting report must name exactly that op.
pub fn run_with_fault(seed: u64, fault: Option<&str>) -> GradReport {
    let mut checks = Vec::new();
    let instances = 100;

    // Shorthand: run `instances` random instances of one builder.
    let op = |name: &str,
                  checks: &mut Vec<OpCheck>,
                  make: &mut dyn FnMut(
        &mut rand_chacha::ChaCha8Rng,
    )
        -> (Vec<f64>, Box<dyn FnMut(&mut Graph, &[f64], bool) -> (Tensor, Tensor)>)| {
        let mut rng = rngutil::stream(seed, &format!("gradcheck/{name}"));
        let injected = fault == Some(name);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (base, mut build) = make(&mut rng);
            worst = worst.max(check_instance(&mut build, &base, injected));
        }
        checks.push(OpCheck {
            op: name.to_string(),
            instances,
            max_rel_err: worst,
            tolerance: OP_TOL,
            passed: worst < OP_TOL,
        });
    };

    op("add", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let c = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let ct = g.leaf(vec![2, 3], c.clone(), false);
            let y = g.add(x, ct).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("sub", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let c = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let ct = g.leaf(vec![6], c.clone(), false);
            let y = g.sub(ct, x).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("mul", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let c = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let ct = g.leaf(vec![6], c.clone(), false);
            let y = g.mul(x, ct).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("div", &mut checks, &mut |rng| {
        let base = uniform(rng, 0.5, 2.0, 6);
        let c = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let ct = g.leaf(vec![6], c.clone(), false);
            let y = g.div(ct, x).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("add_scalar", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 4);
        let w = uniform(rng, -1.0, 1.0, 4);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![4], b.to_vec(), rg);
            let y = g.add_scalar(x, 0.7);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("mul_scalar", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 4);
        let w = uniform(rng, -1.0, 1.0, 4);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![4], b.to_vec(), rg);
            let y = g.mul_scalar(x, -1.3);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("matmul", &mut checks, &mut |rng| {
        let base = uniform(rng, -1.0, 1.0, 6);
        let c = uniform(rng, -1.0, 1.0, 6);
        let w = uniform(rng, -1.0, 1.0, 4);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let ct = g.leaf(vec![3, 2], c.clone(), false);
            let y = g.matmul(x, ct).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("conv2d", &mut checks, &mut |rng| {
        let base = uniform(rng, -1.0, 1.0, 32);
        let k = uniform(rng, -1.0, 1.0, 18);
        let w = uniform(rng, -1.0, 1.0, 16);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![1, 2, 4, 4], b.to_vec(), rg);
            let kt = g.leaf(vec![1, 2, 3, 3], k.clone(), false);
            let y = g.conv2d(x, kt, 1, 1).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("add_rowvec", &mut checks, &mut |rng| {
        let base = uniform(rng, -1.0, 1.0, 3);
        let c = uniform(rng, -1.0, 1.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let bias = g.leaf(vec![3], b.to_vec(), rg);
            let ct = g.leaf(vec![2, 3], c.clone(), false);
            let y = g.add_rowvec(ct, bias).unwrap();
            (bias, weighted_sum(g, y, &w))
        }))
    });

    op("add_chanvec", &mut checks, &mut |rng| {
        let base = uniform(rng, -1.0, 1.0, 2);
        let c = uniform(rng, -1.0, 1.0, 18);
        let w = uniform(rng, -1.0, 1.0, 18);
        (base, Box::new(move |g, b, rg| {
            let bias = g.leaf(vec![2], b.to_vec(), rg);
            let ct = g.leaf(vec![1, 2, 3, 3], c.clone(), false);
            let y = g.add_chanvec(ct, bias).unwrap();
            (bias, weighted_sum(g, y, &w))
        }))
    });

    op("relu", &mut checks, &mut |rng| {
        let base = away_from(rng, -2.0, 2.0, 6, &[0.0]);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.relu(x);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("sigmoid", &mut checks, &mut |rng| {
        let base = uniform(rng, -3.0, 3.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.sigmoid(x);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("exp", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.exp(x);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("log", &mut checks, &mut |rng| {
        let base = uniform(rng, 0.2, 3.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.log(x);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("softmax", &mut checks, &mut |rng| {
        let base = uniform(rng, -3.0, 3.0, 8);
        let w = uniform(rng, -1.0, 1.0, 8);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 4], b.to_vec(), rg);
            let y = g.softmax(x).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("log_softmax", &mut checks, &mut |rng| {
        let base = uniform(rng, -3.0, 3.0, 8);
        let w = uniform(rng, -1.0, 1.0, 8);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 4], b.to_vec(), rg);
            let y = g.log_softmax(x).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("sum_all", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.sum_all(x);
            (x, y)
        }))
    });

    op("mean_all", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.mean_all(x);
            (x, y)
        }))
    });

    op("row_sum", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 2);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let y = g.row_sum(x);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("row_dot", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let c = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 2);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let ct = g.leaf(vec![2, 3], c.clone(), false);
            let y = g.row_dot(x, ct).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("scale_rows", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 2);
        let c = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let s = g.leaf(vec![2], b.to_vec(), rg);
            let ct = g.leaf(vec![2, 3], c.clone(), false);
            let y = g.scale_rows(ct, s).unwrap();
            (s, weighted_sum(g, y, &w))
        }))
    });

    op("clamp", &mut checks, &mut |rng| {
        let base = away_from(rng, -2.0, 2.0, 6, &[-1.0, 1.0]);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![6], b.to_vec(), rg);
            let y = g.clamp(x, -1.0, 1.0);
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("concat_rows", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let c = uniform(rng, -2.0, 2.0, 3);
        let w = uniform(rng, -1.0, 1.0, 9);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let ct = g.leaf(vec![1, 3], c.clone(), false);
            let y = g.concat_rows(x, ct).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("slice_rows", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 9);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![3, 3], b.to_vec(), rg);
            let y = g.slice_rows(x, 1, 2).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("permute_rows", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![3, 2], b.to_vec(), rg);
            let y = g.permute_rows(x, &[2, 0, 1]).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("reshape", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let w = uniform(rng, -1.0, 1.0, 6);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let y = g.reshape(x, vec![3, 2]).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("mean_hw", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 18);
        let w = uniform(rng, -1.0, 1.0, 2);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![1, 2, 3, 3], b.to_vec(), rg);
            let y = g.mean_hw(x).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    op("kl_rows", &mut checks, &mut |rng| {
        let base = uniform(rng, -2.0, 2.0, 6);
        let mut target = uniform(rng, 0.1, 1.0, 6);
        for row in target.chunks_mut(3) {
            let s: f64 = row.iter().sum();
            for v in row {
                *v /= s;
            }
        }
        let w = uniform(rng, -1.0, 1.0, 2);
        (base, Box::new(move |g, b, rg| {
            let x = g.leaf(vec![2, 3], b.to_vec(), rg);
            let y = g.kl_rows(x, &target).unwrap();
            (x, weighted_sum(g, y, &w))
        }))
    });

    // Full chains through the integrated mixup objective.
    checks.push(chain_check(seed, "chain/delta", fault == Some("chain/delta"), ChainTarget::Delta));
    checks.push(chain_check(seed, "chain/gamma", fault == Some("chain/gamma"), ChainTarget::Gamma));

    let passed = checks.iter().all(|c| c.passed);
    GradReport { checks, passed }
}

enum ChainTarget {
    Delta,
    Gamma,
}

/// d loss / d delta and d loss / d gamma through mix, model, and KL,
/// checked on 100 random instances.
fn chain_check(seed: u64, name: &str, fault: bool, target: ChainTarget) -> OpCheck {
    let instances = 100;
    let mut rng = rngutil::stream(seed, &format!("gradcheck/{name}"));
    let kappa = 0.65;
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let m = 3usize;
        let d = 2usize;
        let spec = ModelSpec {
            architecture: Architecture::Mlp {
                widths: vec![d, 8, 2],
            },
            input_shape: vec![d],
            class_count: 2,
            init_seed: seed.wrapping_add(inst as u64),
        };
        let xi = uniform(&mut rng, -1.0, 1.0, m * d);
        let xj = uniform(&mut rng, -1.0, 1.0, m * d);
        let gamma0 = uniform(&mut rng, -1.5, 1.5, m);
        let delta0 = uniform(&mut rng, -0.1, 0.1, m * d);
        let target_rows = {
            let mut t = uniform(&mut rng, 0.1, 1.0, m * 2);
            for row in t.chunks_mut(2) {
                let s: f64 = row.iter().sum();
                for v in row {
                    *v /= s;
                }
            }
            t
        };
        let perm = vec![1, 2, 0];

        let spec_ref = &spec;
        let xi_ref = &xi;
        let xj_ref = &xj;
        let tgt = &target_rows;
        let perm_ref = &perm;
        let build_full = move |g: &mut Graph, delta: &[f64], gamma: &[f64], rg_delta: bool, rg_gamma: bool| -> (Tensor, Tensor, Tensor) {
            let model: Model = build_model(g, spec_ref).unwrap();
            model.set_requires_grad(g, false);
            let xit = g.leaf(vec![m, d], xi_ref.clone(), false);
            let xjt = g.leaf(vec![m, d], xj_ref.clone(), false);
            let dt = g.leaf(vec![m, d], delta.to_vec(), rg_delta);
            let gt = g.leaf(vec![m], gamma.to_vec(), rg_gamma);
            let lam = mixup::lambda_tensor_from_gamma(g, gt, kappa);
            let dj = g.permute_rows(dt, perm_ref).unwrap();
            let xip = g.add(xit, dt).unwrap();
            let xjp = g.add(xjt, dj).unwrap();
            let xm = mixup::mix_points(g, xip, xjp, lam).unwrap();
            let logits = model.forward(g, xm).unwrap();
            let per = g.kl_rows(logits, tgt).unwrap();
            let loss = g.mean_all(per);
            (dt, gt, loss)
        };

        let mut g = Graph::new();
        let (dt, gt, loss) = build_full(&mut g, &delta0, &gamma0, true, true);
        g.backward(loss).unwrap();
        let (leaf, base): (Tensor, &[f64]) = match target {
            ChainTarget::Delta => (dt, &delta0),
            ChainTarget::Gamma => (gt, &gamma0),
        };
        let mut analytic = g.grad(leaf).unwrap().to_vec();
        if fault {
            for v in &mut analytic {
                *v = *v * 1.05 + 1e-3;
            }
        }
        for i in 0..base.len() {
            let eval = |vals: &[f64]| -> f64 {
                let mut gg = Graph::new();
                let (_, _, l) = match target {
                    ChainTarget::Delta => build_full(&mut gg, vals, &gamma0, false, false),
                    ChainTarget::Gamma => build_full(&mut gg, &delta0, vals, false, false),
                };
                gg.values(l)[0]
            };
            let mut plus = base.to_vec();
            plus[i] += FD_H;
            let mut minus = base.to_vec();
            minus[i] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    OpCheck {
        op: name.to_string(),
        instances,
        max_rel_err: worst,
        tolerance: CHAIN_TOL,
        passed: worst < CHAIN_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_pass_within_tolerance() {
        let report = run(1234);
        for c in &report.checks {
            assert!(c.passed, "{} rel err {} >= {}", c.op, c.max_rel_err, c.tolerance);
        }
        assert!(report.passed);
    }

    #[test]
    fn injected_fault_is_named_in_the_report() {
        let report = run_with_fault(1234, Some("sigmoid"));
        assert!(!report.passed);
        let failing: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
        assert_eq!(failing, vec!["sigmoid"]);
    }

    #[test]
    fn chain_fault_is_detected() {
        let report = run_with_fault(99, Some("chain/gamma"));
        let failing: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
        assert_eq!(failing, vec!["chain/gamma"]);
    }
}
