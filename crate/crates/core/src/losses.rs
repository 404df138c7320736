//! Per-voxel classification losses: BCE and focal base losses over soft
//! targets, the label-flip loss (base loss against a learned-smoothed
//! target plus a calibration term on the flip probability), and the
//! Monte-Carlo predictive-variance loss (base loss averaged over logit
//! perturbations drawn at a learned scale).
//!
//! Every loss exists in two forms that must agree: a plain scalar
//! function (the reference, used by tests and documentation) and a tape
//! graph builder operating on whole tensors (used by training). The graph
//! forms are composed from stable primitives (softplus, sigmoid) so that
//! no intermediate ever takes a log of a saturated probability.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Clamp range for the log-variance head before exponentiation; bounds
/// sigma to roughly [4.5e-5, 12].
pub const LOG_VAR_CLAMP: (f64, f64) = (-20.0, 5.0);

/// Which base loss the composite losses wrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseLoss {
    Bce,
    Focal { gamma: f64 },
}

impl BaseLoss {
    pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
}

fn check_target<S: Scalar>(t: S) -> Result<()> {
    if t < S::zero() || t > S::one() {
        return Err(Error::Contract(format!("target {t} outside [0,1]")));
    }
    Ok(())
}

/// Numerically stable sigmoid (shared with the tape kernels).
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy against a soft target, in the stable logit form
/// max(l,0) - l*t + ln(1 + e^-|l|). Gradient w.r.t. the logit is p - t.
pub fn bce_soft<S: Scalar>(logit: S, t: S) -> Result<S> {
    check_target(t)?;
    Ok(logit.max(S::zero()) - logit * t + (-logit.abs()).exp().ln_1p())
}

/// Focal loss extended to soft targets:
/// -(t*(1-p)^g*ln p + (1-t)*p^g*ln(1-p)). Reduces exactly to `bce_soft`
/// at gamma = 0 and to the published focal loss at t in {0,1}.
pub fn focal_soft<S: Scalar>(logit: S, t: S, gamma: S) -> Result<S> {
    check_target(t)?;
    if gamma < S::zero() {
        return Err(Error::Contract(format!("focal gamma {gamma} must be >= 0")));
    }
    // -ln p = softplus(-l), -ln(1-p) = softplus(l), 1-p = sigmoid(-l).
    let p = sigmoid(logit);
    let not_p = sigmoid(-logit);
    Ok(t * not_p.powf(gamma) * softplus(-logit) + (S::one() - t) * p.powf(gamma) * softplus(logit))
}

pub fn base_soft<S: Scalar>(base: BaseLoss, logit: S, t: S) -> Result<S> {
    match base {
        BaseLoss::Bce => bce_soft(logit, t),
        BaseLoss::Focal { gamma } => focal_soft(logit, t, S::fp(gamma)),
    }
}

/// Flip probability q = 0.5 * sigmoid(raw), the map from the unconstrained
/// network output onto (0, 0.5).
#[inline]
pub fn flip_probability<S: Scalar>(raw: S) -> S {
    S::fp(0.5) * sigmoid(raw)
}

/// Smoothed target x + (1-2x)*q: x=1 maps to 1-q, x=0 maps to q.
#[inline]
pub fn smoothed_target<S: Scalar>(x: S, q: S) -> S {
    x + (S::one() - S::fp(2.0) * x) * q
}

/// Base loss applied to the probability q (not a logit) against the hard
/// disagreement target z, composed so that ln q never saturates:
/// -ln q = softplus(-raw) + ln 2.
fn flip_nll<S: Scalar>(base: BaseLoss, raw: S, q: S, z: bool) -> S {
    let nll_pos = softplus(-raw) + S::fp(std::f64::consts::LN_2); // -ln q
    let nll_neg = -(-q).ln_1p(); // -ln(1-q), q < 0.5
    match (base, z) {
        (BaseLoss::Bce, true) => nll_pos,
        (BaseLoss::Bce, false) => nll_neg,
        (BaseLoss::Focal { gamma }, true) => (S::one() - q).powf(S::fp(gamma)) * nll_pos,
        (BaseLoss::Focal { gamma }, false) => q.powf(S::fp(gamma)) * nll_neg,
    }
}

/// Label-flip loss at one voxel-task: base loss against the q-smoothed
/// target, plus the base loss of q against z = [prediction disagrees with
/// the label]. z is thresholded at p = 0.5 and carries no gradient.
///
/// `x` must be exactly 0 or 1.
pub fn label_flip_loss<S: Scalar>(logit_p: S, raw_q: S, x: S, base: BaseLoss) -> Result<S> {
    debug_assert!(x == S::zero() || x == S::one(), "label {x} not binary");
    let q = flip_probability(raw_q);
    let term1 = base_soft(base, logit_p, smoothed_target(x, q))?;
    let z = (sigmoid(logit_p) > S::fp(0.5)) != (x == S::one());
    Ok(term1 + flip_nll(base, raw_q, q, z))
}

/// sigma = exp(clamp(s)/2).
#[inline]
pub fn clamped_sigma<S: Scalar>(s: S) -> S {
    let (lo, hi) = LOG_VAR_CLAMP;
    (s.max(S::fp(lo)).min(S::fp(hi)) * S::fp(0.5)).exp()
}

/// Predictive-variance loss with the noise draws supplied explicitly:
/// (1/T) * sum_k base(logit_mu + sigma * eps_k, x). The deterministic core
/// behind [`predictive_variance_loss`]; tests and the trainer hand it
/// draws so runs are replayable.
pub fn predictive_variance_loss_with_draws<S: Scalar>(
    logit_mu: S,
    log_var: S,
    x: S,
    draws: &[S],
    base: BaseLoss,
) -> Result<S> {
    if draws.is_empty() {
        return Err(Error::Contract("predictive variance loss needs >= 1 draw".into()));
    }
    let sigma = clamped_sigma(log_var);
    let mut acc = S::zero();
    for &eps in draws {
        acc += base_soft(base, logit_mu + sigma * eps, x)?;
    }
    Ok(acc / S::from_count(draws.len()))
}

/// Standard-normal draws for the MC estimator, in antithetic pairs
/// (eps, -eps). Pairing cancels the first-order term of the perturbation,
/// so the sigma -> 0 limit recovers the base loss to second order instead
/// of first; an odd trailing draw is taken at eps = 0 for the same
/// reason (T=1 degenerates to the unperturbed base loss).
pub fn mc_draws<S: Scalar, R: Rng>(t_samples: usize, rng: &mut R) -> Vec<S> {
    let mut draws = Vec::with_capacity(t_samples);
    for _ in 0..t_samples / 2 {
        let eps: f64 = rng.sample(StandardNormal);
        draws.push(S::fp(eps));
        draws.push(S::fp(-eps));
    }
    if t_samples % 2 == 1 {
        draws.push(S::zero());
    }
    draws
}

/// Monte-Carlo predictive-variance loss: the base loss averaged over
/// `t_samples` perturbations of the logit at scale sigma = exp(s/2),
/// via the reparameterization logit + sigma * eps.
pub fn predictive_variance_loss<S: Scalar, R: Rng>(
    logit_mu: S,
    log_var: S,
    x: S,
    t_samples: usize,
    rng: &mut R,
    base: BaseLoss,
) -> Result<S> {
    if t_samples == 0 {
        return Err(Error::Contract("predictive variance loss needs T >= 1".into()));
    }
    predictive_variance_loss_with_draws(logit_mu, log_var, x, &mc_draws(t_samples, rng), base)
}

// ---------------------------------------------------------------------------
// Tape graph forms.

/// Focal exponent as the tape ops expect it: None selects plain BCE.
fn gamma_of<S: Scalar>(base: BaseLoss) -> Option<S> {
    match base {
        BaseLoss::Bce => None,
        BaseLoss::Focal { gamma } => Some(S::fp(gamma)),
    }
}

/// Per-element BCE graph, matching `bce_soft` elementwise.
pub fn bce_graph<S: Scalar>(tape: &mut Tape<S>, logit: Var, target: Var) -> Var {
    tape.base_logit_loss(logit, target, None)
}

/// Per-element focal graph, matching `focal_soft` elementwise.
pub fn focal_graph<S: Scalar>(tape: &mut Tape<S>, logit: Var, target: Var, gamma: f64) -> Var {
    tape.base_logit_loss(logit, target, Some(S::fp(gamma)))
}

pub fn base_graph<S: Scalar>(tape: &mut Tape<S>, base: BaseLoss, logit: Var, target: Var) -> Var {
    tape.base_logit_loss(logit, target, gamma_of(base))
}

/// q = 0.5 * sigmoid(raw) as a graph node.
pub fn flip_q_graph<S: Scalar>(tape: &mut Tape<S>, raw_q: Var) -> Var {
    let s = tape.sigmoid(raw_q);
    tape.scale(s, S::fp(0.5))
}

/// Per-element label-flip loss graph over a batch of voxel-tasks.
///
/// `labels` holds the hard x in {0,1}. The disagreement indicator z is
/// computed from the *current* value of `logit_p` and enters the graph as
/// a constant, so no gradient flows through the thresholding.
pub fn label_flip_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logit_p: Var,
    raw_q: Var,
    labels: &Tensor<S>,
    base: BaseLoss,
) -> Var {
    let half = S::fp(0.5);
    let z_data: Vec<S> = tape
        .value(logit_p)
        .data
        .iter()
        .zip(&labels.data)
        .map(|(&l, &x)| if (sigmoid(l) > half) != (x == S::one()) { S::one() } else { S::zero() })
        .collect();
    let z = tape.constant(Tensor::new(labels.shape.clone(), z_data));
    let x = tape.constant(labels.clone());

    // term1: base loss against the smoothed target x + (1-2x)*q.
    let q = flip_q_graph(tape, raw_q);
    let x2 = tape.scale(x, S::fp(-2.0));
    let one_minus_2x = tape.add_scalar(x2, S::one());
    let shift = tape.mul(one_minus_2x, q);
    let target = tape.add(x, shift);
    let term1 = base_graph(tape, base, logit_p, target);

    // term2: base loss of the probability q against constant z.
    let term2 = tape.flip_nll(raw_q, z, gamma_of(base));
    tape.add(term1, term2)
}

/// Per-element predictive-variance loss graph: mean over the supplied
/// draw tensors of base(logit_mu + sigma * eps, x).
pub fn predictive_variance_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logit_mu: Var,
    log_var: Var,
    labels: &Tensor<S>,
    draws: &[Tensor<S>],
    base: BaseLoss,
) -> Var {
    assert!(!draws.is_empty(), "predictive variance graph needs >= 1 draw");
    let n = labels.len();
    let t = draws.len();
    // Interleave to [element][draw] so the fused op streams sequentially.
    let mut flat = vec![S::zero(); n * t];
    for (k, d) in draws.iter().enumerate() {
        assert_eq!(d.shape, labels.shape, "draw shape mismatch");
        for i in 0..n {
            flat[i * t + k] = d.data[i];
        }
    }
    predictive_variance_graph_flat(tape, logit_mu, log_var, labels, Tensor::new(vec![n, t], flat), base)
}

/// [`predictive_variance_graph`] with the draws already interleaved
/// [element][draw] as one [n, T] tensor (see [`mc_draw_block`]).
pub fn predictive_variance_graph_flat<S: Scalar>(
    tape: &mut Tape<S>,
    logit_mu: Var,
    log_var: Var,
    labels: &Tensor<S>,
    draw_block: Tensor<S>,
    base: BaseLoss,
) -> Var {
    let x = tape.constant(labels.clone());
    let dr = tape.constant(draw_block);
    let (lo, hi) = LOG_VAR_CLAMP;
    tape.predictive_variance(logit_mu, log_var, x, dr, S::fp(lo), S::fp(hi), gamma_of(base))
}

/// `mc_draws` for a whole batch: an [n, T] block of standard-normal
/// draws, antithetic within each element's row, laid out for
/// [`predictive_variance_graph_flat`].
pub fn mc_draw_block<S: Scalar, R: Rng>(n: usize, t_samples: usize, rng: &mut R) -> Tensor<S> {
    let mut data = Vec::with_capacity(n * t_samples);
    for _ in 0..n {
        for _ in 0..t_samples / 2 {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(S::fp(eps));
            data.push(S::fp(-eps));
        }
        if t_samples % 2 == 1 {
            data.push(S::zero());
        }
    }
    Tensor::new(vec![n, t_samples], data)
}

/// Masked mean: sum(loss * m) / max(sum m, 1), with the denominator a
/// constant. Masked entries contribute exactly zero to value and
/// gradient; an all-masked batch yields 0 (logged, no division by zero).
pub fn masked_mean_graph<S: Scalar>(tape: &mut Tape<S>, per_voxel: Var, mask: &Tensor<S>) -> Var {
    assert_eq!(
        tape.value(per_voxel).shape,
        mask.shape,
        "loss / mask shape mismatch"
    );
    let count = mask.data.iter().filter(|&&m| m != S::zero()).count();
    if count == 0 {
        log::warn!("masked mean over an all-masked batch; loss fixed at 0");
    }
    let m = tape.constant(mask.clone());
    let masked = tape.mul(per_voxel, m);
    let total = tape.reduce_sum(masked);
    tape.scale(total, S::one() / S::from_count(count.max(1)))
}
