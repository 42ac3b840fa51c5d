//! Mixup mathematics: interpolation on the tape, Beta sampling with a
//! kappa rejection floor, shared vs independent perturbation buffers,
//! geometric label assignment, and the sigmoid-reparameterized mixing
//! ratio.

use crate::objectives::LabelDistribution;
use crate::tensor::{sign, Graph, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

/// Boundary guard for the inverse-sigmoid map.
pub const LAMBDA_CLAMP_MARGIN: f64 = 1e-6;
/// Below this squared length a pair is treated as degenerate.
pub const DEGENERATE_VV: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MixupError {
    #[error("gamma_init: lambda {0} outside (kappa={1}, 1)")]
    LambdaOutOfRange(f64, f64),
    #[error("mix_inputs: lambda {0} outside [0,1]")]
    LambdaOutsideUnit(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PerturbationMode {
    Independent,
    Shared,
}

/// The delta buffers and their epsilon-ball constraint. In shared mode
/// the j-side is the pairing permutation of the single buffer; in
/// independent mode the two buffers are optimized separately.
pub struct PerturbationState {
    pub delta_i: Tensor,
    pub delta_j: Option<Tensor>,
    /// Per-channel linf bound (length 1 for non-image data).
    pub epsilon: Vec<f64>,
    pub mode: PerturbationMode,
}

impl PerturbationState {
    /// Uniform init in the epsilon box. Always draws the i-buffer
    /// first so that the shared/independent choice does not disturb
    /// other streams.
    pub fn init(
        g: &mut Graph,
        batch_shape: &[usize],
        epsilon: Vec<f64>,
        mode: PerturbationMode,
        rng: &mut impl Rng,
    ) -> Self {
        let draw = |g: &mut Graph, rng: &mut dyn rand::RngCore| {
            let n: usize = batch_shape.iter().product();
            let mut vals = Vec::with_capacity(n);
            for idx in 0..n {
                let b = channel_bound(&epsilon, batch_shape, idx);
                vals.push((rng.random::<f64>() * 2.0 - 1.0) * b);
            }
            g.leaf(batch_shape.to_vec(), vals, true)
        };
        let delta_i = draw(g, rng);
        let delta_j = match mode {
            PerturbationMode::Shared => None,
            PerturbationMode::Independent => Some(draw(g, rng)),
        };
        PerturbationState {
            delta_i,
            delta_j,
            epsilon,
            mode,
        }
    }

    pub fn buffers(&self) -> Vec<Tensor> {
        match self.delta_j {
            Some(dj) => vec![self.delta_i, dj],
            None => vec![self.delta_i],
        }
    }

    /// Sign-step each buffer by its gradient and project back into the
    /// epsilon ball (exact clamp). Must run after backward() and before
    /// the tape reset that clears leaf gradients.
    pub fn sign_step_and_project(&self, g: &mut Graph, step: &[f64]) {
        for buf in self.buffers() {
            let shape = g.shape(buf).to_vec();
            let grads = g
                .grad(buf)
                .expect("sign_step_and_project: no gradient; call after backward, before reset")
                .to_vec();
            let eps = self.epsilon.clone();
            let vals = g.values_mut(buf);
            for i in 0..vals.len() {
                let eta = channel_bound(step, &shape, i);
                vals[i] += sign(grads[i]) * eta;
                let b = channel_bound(&eps, &shape, i);
                vals[i] = vals[i].clamp(-b, b);
            }
        }
    }

    /// Projection alone: exact clamp of every buffer into the ball.
    pub fn project(&self, g: &mut Graph) {
        for buf in self.buffers() {
            let shape = g.shape(buf).to_vec();
            let eps = self.epsilon.clone();
            let vals = g.values_mut(buf);
            for i in 0..vals.len() {
                let b = channel_bound(&eps, &shape, i);
                vals[i] = vals[i].clamp(-b, b);
            }
        }
    }

    /// Max |delta| over all buffers; the ball invariant is
    /// `linf_norm <= max(epsilon)` with zero tolerance per channel.
    pub fn assert_in_ball(&self, g: &Graph) {
        for buf in self.buffers() {
            let shape = g.shape(buf).to_vec();
            for (i, &v) in g.values(buf).iter().enumerate() {
                let b = channel_bound(&self.epsilon, &shape, i);
                assert!(
                    v.abs() <= b,
                    "delta out of epsilon ball: |{v}| > {b}"
                );
            }
        }
    }
}

/// Per-channel bound lookup for a flat index into [m,c,h,w] (or any
/// other layout, where a single bound applies everywhere).
pub fn channel_bound(bounds: &[f64], shape: &[usize], idx: usize) -> f64 {
    if bounds.len() == 1 || shape.len() != 4 {
        bounds[0]
    } else {
        let hw = shape[2] * shape[3];
        bounds[(idx / hw) % bounds.len()]
    }
}

/// Everything Algorithms 4-6 optimize about the mixing ratio.
#[derive(Clone, Debug)]
pub struct MixState {
    pub lambda_x: Vec<f64>,
    pub lambda_y: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub kappa: f64,
    pub alpha: f64,
    pub frozen: bool,
}

/// i.i.d. Beta(alpha, alpha) draws, rejection-resampled until every
/// draw is >= kappa, then clamped off the open-interval boundaries.
pub fn sample_lambda_init(alpha: f64, kappa: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let beta = Beta::new(alpha, alpha).unwrap();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = beta.sample(rng);
        while v < kappa {
            v = beta.sample(rng);
        }
        out.push(v.clamp(kappa + LAMBDA_CLAMP_MARGIN, 1.0 - LAMBDA_CLAMP_MARGIN));
    }
    out
}

/// Plain Beta(alpha, alpha) draws on [0,1] (baseline mixup).
pub fn sample_lambda_plain(alpha: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let beta = Beta::new(alpha, alpha).unwrap();
    (0..n).map(|_| beta.sample(rng)).collect()
}

/// gamma = -log((1-kappa)/(lambda-kappa) - 1), the exact inverse of
/// lambda = kappa + (1-kappa) * sigmoid(gamma).
pub fn gamma_init(lambda_init: &[f64], kappa: f64) -> Result<Vec<f64>, MixupError> {
    lambda_init
        .iter()
        .map(|&l| {
            if l <= kappa || l >= 1.0 {
                return Err(MixupError::LambdaOutOfRange(l, kappa));
            }
            Ok(-(((1.0 - kappa) / (l - kappa)) - 1.0).ln())
        })
        .collect()
}

pub fn lambda_from_gamma(gamma: &[f64], kappa: f64) -> Vec<f64> {
    gamma
        .iter()
        .map(|&g| kappa + (1.0 - kappa) / (1.0 + (-g).exp()))
        .collect()
}

/// Sign-gradient ascent on gamma; lambda stays strictly inside
/// (kappa, 1) through the sigmoid map. No-op when frozen.
pub fn ratio_step(mix: &mut MixState, grad_gamma: &[f64], eta_gamma: f64) {
    if mix.frozen {
        return;
    }
    let Some(gamma) = mix.gamma.as_mut() else {
        return;
    };
    for (gm, &gr) in gamma.iter_mut().zip(grad_gamma) {
        *gm += sign(gr) * eta_gamma;
    }
    // The sigmoid saturates to exactly 1.0 in floats for large gamma;
    // the clamp keeps lambda strictly inside (kappa, 1).
    mix.lambda_x = lambda_from_gamma(gamma, mix.kappa)
        .into_iter()
        .map(|l| l.clamp(mix.kappa + LAMBDA_CLAMP_MARGIN, 1.0 - LAMBDA_CLAMP_MARGIN))
        .collect();
}

/// Uniform random pairing permutation; fixed points allowed.
pub fn pair_permutation(m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    perm
}

/// On-tape lambda tensor from a gamma leaf:
/// kappa + (1-kappa)*sigmoid(gamma), clamped strictly inside
/// (kappa, 1). The clamp gradient is boundary-inclusive, so gamma
/// still receives a signal at the edges.
pub fn lambda_tensor_from_gamma(g: &mut Graph, gamma: Tensor, kappa: f64) -> Tensor {
    let s = g.sigmoid(gamma);
    let scaled = g.mul_scalar(s, 1.0 - kappa);
    let lam = g.add_scalar(scaled, kappa);
    g.clamp(lam, kappa + LAMBDA_CLAMP_MARGIN, 1.0 - LAMBDA_CLAMP_MARGIN)
}

/// x_m = lambda*(x_i + d_i) + (1-lambda)*(x_j + d_j), on the tape so
/// gradients reach the deltas and (through `lambda`) gamma.
pub fn mix_inputs(
    g: &mut Graph,
    x_i: Tensor,
    d_i: Tensor,
    x_j: Tensor,
    d_j: Tensor,
    lambda: Tensor,
) -> Result<Tensor, MixupError> {
    for &l in g.values(lambda) {
        if !(0.0..=1.0).contains(&l) {
            return Err(MixupError::LambdaOutsideUnit(l));
        }
    }
    let xi_p = g.add(x_i, d_i)?;
    let xj_p = g.add(x_j, d_j)?;
    mix_points(g, xi_p, xj_p, lambda)
}

/// Convex combination of two already-perturbed endpoints.
pub fn mix_points(
    g: &mut Graph,
    xi_p: Tensor,
    xj_p: Tensor,
    lambda: Tensor,
) -> Result<Tensor, MixupError> {
    let left = g.scale_rows(xi_p, lambda)?;
    let ones_minus = {
        let neg = g.mul_scalar(lambda, -1.0);
        g.add_scalar(neg, 1.0)
    };
    let right = g.scale_rows(xj_p, ones_minus)?;
    Ok(g.add(left, right)?)
}

/// y_m = lambda_y*y_i + (1-lambda_y)*y_j per pair.
pub fn mix_labels(y_i: &LabelDistribution, y_j: &LabelDistribution, lambda_y: &[f64]) -> LabelDistribution {
    let k = y_i.classes;
    let mut probs = vec![0.0; y_i.probs.len()];
    for r in 0..y_i.rows() {
        let l = lambda_y[r];
        for j in 0..k {
            probs[r * k + j] = l * y_i.probs[r * k + j] + (1.0 - l) * y_j.probs[r * k + j];
        }
    }
    LabelDistribution { probs, classes: k }
}

/// Normalized projection coordinate of x_m' along the segment from
/// x_i' to x_j', clamped to [0,1]: lambda_y = clamp(1 + p.v/v.v, 0, 1)
/// with v = x_j'-x_i', p = x_i'-x_m'. Differentiable where unclamped;
/// degenerate pairs (v.v < 1e-12) yield exactly 1.
pub fn geometric_label_ratio(
    g: &mut Graph,
    xi_p: Tensor,
    xj_p: Tensor,
    xm_p: Tensor,
) -> Result<Tensor, MixupError> {
    let v = g.sub(xj_p, xi_p)?;
    let p = g.sub(xi_p, xm_p)?;
    let pv = g.row_dot(p, v)?;
    let vv = g.row_dot(v, v)?;
    let m = g.values(vv).len();
    let mut degenerate = vec![0.0; m];
    let mut n_degenerate = 0usize;
    for (r, &val) in g.values(vv).iter().enumerate() {
        if val < DEGENERATE_VV {
            degenerate[r] = 1.0;
            n_degenerate += 1;
        }
    }
    if n_degenerate > 0 {
        eprintln!("geometric_label_ratio: {n_degenerate} degenerate pair(s), lambda_y := 1");
    }
    // Guard the division for degenerate rows, then splice in the
    // canonical value 1 for exactly those rows.
    let mask = g.leaf(vec![m], degenerate, false);
    let safe_vv = g.add(vv, mask)?;
    let ratio = g.div(pv, safe_vv)?;
    let shifted = g.add_scalar(ratio, 1.0);
    let clamped = g.clamp(shifted, 0.0, 1.0);
    let inv_mask = {
        let neg = g.mul_scalar(mask, -1.0);
        g.add_scalar(neg, 1.0)
    };
    let keep = g.mul(clamped, inv_mask)?;
    Ok(g.add(keep, mask)?)
}

/// Pair batch: the minibatch plus its permuted partner view.
pub struct PairBatch {
    pub perm: Vec<usize>,
    pub x_i: Vec<f64>,
    pub x_j: Vec<f64>,
    pub shape: Vec<usize>,
    pub y_i: LabelDistribution,
    pub y_j: LabelDistribution,
}

impl PairBatch {
    pub fn new(x: &[f64], shape: &[usize], labels: &LabelDistribution, rng: &mut impl Rng) -> Self {
        let m = shape[0];
        let perm = pair_permutation(m, rng);
        let el = x.len() / m.max(1);
        let mut x_j = Vec::with_capacity(x.len());
        let k = labels.classes;
        let mut yj = Vec::with_capacity(labels.probs.len());
        for &p in &perm {
            x_j.extend_from_slice(&x[p * el..(p + 1) * el]);
            yj.extend_from_slice(&labels.probs[p * k..(p + 1) * k]);
        }
        PairBatch {
            perm,
            x_i: x.to_vec(),
            x_j,
            shape: shape.to_vec(),
            y_i: labels.clone(),
            y_j: LabelDistribution { probs: yj, classes: k },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::stream;

    #[test]
    fn beta_mean_without_rejection() {
        let mut rng = stream(1, "beta");
        let draws = sample_lambda_plain(0.5, 100_000, &mut rng);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn rejection_respects_kappa() {
        let mut rng = stream(2, "beta");
        let draws = sample_lambda_init(0.5, 0.65, 100_000, &mut rng);
        assert!(draws.iter().all(|&v| v >= 0.65));
        assert!(draws.iter().all(|&v| v < 1.0));
    }

    #[test]
    fn fixed_seed_identical_draws() {
        let a = sample_lambda_init(0.5, 0.65, 100, &mut stream(3, "b"));
        let b = sample_lambda_init(0.5, 0.65, 100, &mut stream(3, "b"));
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_midpoint_is_zero() {
        let kappa = 0.65;
        let g = gamma_init(&[0.825], kappa).unwrap();
        assert!(g[0].abs() < 1e-12);
        let back = lambda_from_gamma(&g, kappa);
        assert!((back[0] - 0.825).abs() < 1e-12);
    }

    #[test]
    fn gamma_roundtrip_thousand_draws() {
        let kappa = 0.65;
        let draws = sample_lambda_init(0.5, kappa, 1000, &mut stream(4, "g"));
        let gamma = gamma_init(&draws, kappa).unwrap();
        let back = lambda_from_gamma(&gamma, kappa);
        for (a, b) in draws.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_boundary_guard_finite() {
        let kappa = 0.65;
        let g = gamma_init(&[kappa + LAMBDA_CLAMP_MARGIN], kappa).unwrap();
        assert!(g[0].is_finite() && g[0] < -10.0);
        assert!(gamma_init(&[kappa], kappa).is_err());
        assert!(gamma_init(&[1.0], kappa).is_err());
    }

    #[test]
    fn ratio_step_rules() {
        let kappa = 0.65;
        let mut mix = MixState {
            lambda_x: lambda_from_gamma(&[0.0], kappa),
            lambda_y: vec![],
            gamma: Some(vec![0.0]),
            kappa,
            alpha: 0.5,
            frozen: false,
        };
        // sign(0) := 0 keeps gamma unchanged.
        ratio_step(&mut mix, &[0.0], 0.1);
        assert_eq!(mix.gamma.as_ref().unwrap()[0], 0.0);
        ratio_step(&mut mix, &[3.5], 0.1);
        assert!((mix.gamma.as_ref().unwrap()[0] - 0.1).abs() < 1e-15);
        let expect = kappa + (1.0 - kappa) / (1.0 + (-0.1f64).exp());
        assert!((mix.lambda_x[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn million_ascent_steps_stay_below_one() {
        let kappa = 0.65;
        let mut mix = MixState {
            lambda_x: vec![],
            lambda_y: vec![],
            gamma: Some(vec![0.0]),
            kappa,
            alpha: 0.5,
            frozen: false,
        };
        for _ in 0..1_000_000 {
            ratio_step(&mut mix, &[1.0], 0.1);
        }
        assert!(mix.lambda_x[0] < 1.0 && mix.lambda_x[0] > kappa);
    }

    #[test]
    fn frozen_mix_ignores_steps() {
        let mut mix = MixState {
            lambda_x: vec![0.8],
            lambda_y: vec![0.8],
            gamma: Some(vec![0.3]),
            kappa: 0.65,
            alpha: 0.5,
            frozen: true,
        };
        ratio_step(&mut mix, &[5.0], 0.1);
        assert_eq!(mix.gamma.as_ref().unwrap()[0], 0.3);
    }

    #[test]
    fn permutation_bijective_and_seeded() {
        let mut rng = stream(5, "perm");
        for _ in 0..1000 {
            let p = pair_permutation(17, &mut rng);
            let mut seen = vec![false; 17];
            for &i in &p {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert_eq!(
            pair_permutation(9, &mut stream(6, "p")),
            pair_permutation(9, &mut stream(6, "p"))
        );
    }

    #[test]
    fn mix_inputs_endpoint_and_interior() {
        let mut g = Graph::new();
        let xi = g.leaf(vec![1, 2], vec![1.0, 0.0], false);
        let xj = g.leaf(vec![1, 2], vec![0.0, 1.0], false);
        let zero = g.leaf(vec![1, 2], vec![0.0, 0.0], false);
        let lam1 = g.leaf(vec![1], vec![1.0], false);
        let xm = mix_inputs(&mut g, xi, zero, xj, zero, lam1).unwrap();
        assert_eq!(g.values(xm), &[1.0, 0.0]);
        let lam = g.leaf(vec![1], vec![0.7], false);
        let xm = mix_inputs(&mut g, xi, zero, xj, zero, lam).unwrap();
        assert!((g.values(xm)[0] - 0.7).abs() < 1e-15);
        assert!((g.values(xm)[1] - 0.3).abs() < 1e-15);
        let bad = g.leaf(vec![1], vec![1.5], false);
        assert!(matches!(
            mix_inputs(&mut g, xi, zero, xj, zero, bad),
            Err(MixupError::LambdaOutsideUnit(_))
        ));
    }

    /// Collinear-delta construction: d_i = -c (x_j - x_i), d_j = 0
    /// gives x_m = lam(1+c) x_i + (1 - lam(1+c)) x_j. Reconstruction
    /// solves for the x_i coefficient and must recover lam*(1+c).
    #[test]
    fn counterproductive_case_reconstruction() {
        let mut rng = stream(7, "cc");
        for _ in 0..50 {
            let mut g = Graph::new();
            let xi_v: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let xj_v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 2.0).collect();
            let c: f64 = rng.random::<f64>() * 0.5;
            let lam_v: f64 = 0.3 + 0.4 * rng.random::<f64>();
            let di_v: Vec<f64> = xi_v
                .iter()
                .zip(&xj_v)
                .map(|(&a, &b)| -c * (b - a))
                .collect();
            let xi = g.leaf(vec![1, 4], xi_v.clone(), false);
            let xj = g.leaf(vec![1, 4], xj_v.clone(), false);
            let di = g.leaf(vec![1, 4], di_v, false);
            let zero = g.leaf(vec![1, 4], vec![0.0; 4], false);
            let lam = g.leaf(vec![1], vec![lam_v], false);
            let xm = mix_inputs(&mut g, xi, di, xj, zero, lam).unwrap();
            // Solve x_m = a*x_i + (1-a)*x_j coordinatewise.
            let xm_v = g.values(xm);
            for k in 0..4 {
                let a = (xm_v[k] - xj_v[k]) / (xi_v[k] - xj_v[k]);
                assert!((a - lam_v * (1.0 + c)).abs() < 1e-9, "coef {a}");
            }
        }
    }

    #[test]
    fn mix_labels_rules() {
        let yi = LabelDistribution::one_hot(&[0], 3);
        let yj = LabelDistribution::one_hot(&[1], 3);
        let ym = mix_labels(&yi, &yj, &[0.7]);
        assert_eq!(ym.probs, vec![0.7, 1.0 - 0.7, 0.0]);
        ym.validate().unwrap();
        let same = mix_labels(&yi, &yi, &[0.123]);
        assert_eq!(same.probs, yi.probs);
        let all_i = mix_labels(&yi, &yj, &[1.0]);
        assert_eq!(all_i.probs, yi.probs);
    }

    #[test]
    fn geometric_ratio_hand_computed() {
        let mut g = Graph::new();
        let xi = g.leaf(vec![1, 2], vec![0.0, 0.0], false);
        let xj = g.leaf(vec![1, 2], vec![2.0, 0.0], false);
        let xm = g.leaf(vec![1, 2], vec![0.6, 0.4], false);
        let ly = geometric_label_ratio(&mut g, xi, xj, xm).unwrap();
        assert!((g.values(ly)[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn geometric_ratio_endpoints() {
        let mut g = Graph::new();
        let xi = g.leaf(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0], false);
        let xj = g.leaf(vec![2, 2], vec![2.0, 0.0, 3.0, 1.0], false);
        // Row 0: x_m = x_j -> 0. Row 1: x_m = x_i -> 1.
        let xm = g.leaf(vec![2, 2], vec![2.0, 0.0, 1.0, 1.0], false);
        let ly = geometric_label_ratio(&mut g, xi, xj, xm).unwrap();
        assert_eq!(g.values(ly), &[0.0, 1.0]);
    }

    #[test]
    fn geometric_identity_on_segment() {
        let mut rng = stream(8, "geo");
        for _ in 0..200 {
            let mut g = Graph::new();
            let d = 3;
            let xi_v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let xj_v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 + 2.0).collect();
            let lam_v = rng.random::<f64>();
            let xi = g.leaf(vec![1, d], xi_v, false);
            let xj = g.leaf(vec![1, d], xj_v, false);
            let lam = g.leaf(vec![1], vec![lam_v], false);
            let xm = mix_points(&mut g, xi, xj, lam).unwrap();
            let ly = geometric_label_ratio(&mut g, xi, xj, xm).unwrap();
            assert!((g.values(ly)[0] - lam_v).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_pair_returns_one() {
        let mut g = Graph::new();
        let xi = g.leaf(vec![1, 2], vec![0.5, 0.5], false);
        let xm = g.leaf(vec![1, 2], vec![0.9, 0.1], false);
        let ly = geometric_label_ratio(&mut g, xi, xi, xm).unwrap();
        assert_eq!(g.values(ly), &[1.0]);
    }

    #[test]
    fn shared_vs_independent_buffers() {
        let mut g = Graph::new();
        let shape = vec![3usize, 2];
        let mut rng = stream(9, "pert");
        let shared = PerturbationState::init(&mut g, &shape, vec![0.5], PerturbationMode::Shared, &mut rng);
        assert!(shared.delta_j.is_none());
        let indep = PerturbationState::init(&mut g, &shape, vec![0.5], PerturbationMode::Independent, &mut rng);
        let dj = indep.delta_j.unwrap();
        // Zeroing delta_i leaves delta_j untouched in independent mode.
        let dj_before = g.values(dj).to_vec();
        g.values_mut(indep.delta_i).fill(0.0);
        assert_eq!(g.values(dj), dj_before.as_slice());
    }

    #[test]
    fn projection_is_exact() {
        let mut g = Graph::new();
        let shape = vec![4usize, 3];
        let mut rng = stream(10, "proj");
        let eps = 0.3;
        let pert = PerturbationState::init(&mut g, &shape, vec![eps], PerturbationMode::Independent, &mut rng);
        for buf in pert.buffers() {
            let v = g.values_mut(buf);
            v[0] = 0.5; // push out of the ball
            v[1] = -2.0;
        }
        pert.project(&mut g);
        pert.assert_in_ball(&g);
        for buf in pert.buffers() {
            assert!(g.values(buf).iter().all(|v| v.abs() <= eps));
            assert_eq!(g.values(buf)[0], eps);
            assert_eq!(g.values(buf)[1], -eps);
        }
    }

    #[test]
    fn hand_clamp_step() {
        // delta=(0.1,-0.2), g=(-3,5), eta=0.25, eps=0.3 -> (-0.15, 0.05)
        let mut g = Graph::new();
        let d = g.leaf(vec![1, 2], vec![0.1, -0.2], true);
        let pert = PerturbationState {
            delta_i: d,
            delta_j: None,
            epsilon: vec![0.3],
            mode: PerturbationMode::Shared,
        };
        // Fabricate the gradient by backprop of dot(d, w) with w=(-3,5).
        let w = g.leaf(vec![1, 2], vec![-3.0, 5.0], false);
        let prod = g.mul(d, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        pert.sign_step_and_project(&mut g, &[0.25]);
        let v = g.values(d);
        assert!((v[0] + 0.15).abs() < 1e-15);
        assert!((v[1] - 0.05).abs() < 1e-15);
    }
}
