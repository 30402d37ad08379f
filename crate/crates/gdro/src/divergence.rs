//! f-divergence penalties on the probability simplex and the regularized
//! simplex argmax behind the dual update.
//!
//! For group weights `lambda` and the uniform weighting `u = 1/K`, the penalty
//! is `d_f(lambda, u) = sum_i u_i f(lambda_i / u_i)` with `f` convex and
//! `f(1) = 0`:
//!
//! * KL:          `d_f = sum_i lambda_i ln(K lambda_i)`  (with `0 ln 0 = 0`)
//! * chi-squared: `d_f = K * sum_i (lambda_i - 1/K)^2`
//!
//! The Bregman divergence of `phi(lambda) = d_f(lambda, u)` is invariant to
//! the affine part of `phi`, so it reduces to `sum a_i ln(a_i/b_i)` for KL and
//! `K * sum (a_i - b_i)^2` for chi-squared.
//!
//! The dual step maximizes `step * (<lambda, scores> - nu * d_f(lambda, u)) -
//! breg_weight * D_phi(lambda, anchor)` over the simplex. For KL this has a
//! closed form (a geometric interpolation between the anchor and the uniform
//! vector, tilted by the scores); for chi-squared it is a strictly concave
//! quadratic solved by bisection on the KKT multiplier of the sum constraint
//! with nonnegativity clamping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the simplex sum, enforced after every operation.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// Floor applied to KL anchors before taking logs. Mirror steps keep anchors
/// positive analytically; the floor only guards floating-point underflow.
const KL_ANCHOR_FLOOR: f64 = 1e-300;

/// Which f-divergence penalizes deviation from uniform group weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    #[serde(rename = "chi2")]
    ChiSquared,
    None,
}

impl DivergenceKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "kl" => Ok(DivergenceKind::Kl),
            "chi2" => Ok(DivergenceKind::ChiSquared),
            "none" => Ok(DivergenceKind::None),
            other => Err(Error::InvalidParameter(format!(
                "unknown divergence {other:?} (expected \"kl\", \"chi2\", or \"none\")"
            ))),
        }
    }
}

/// An f-divergence penalty `d_f(., 1/K)` over the K-simplex.
///
/// Kind `None` is only legal with `nu = 0` (unregularized group DRO); its
/// Bregman base for dual steps defaults to KL so the update stays well-posed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergencePenalty {
    pub kind: DivergenceKind,
    pub k: usize,
}

impl DivergencePenalty {
    pub fn new(kind: DivergenceKind, k: usize) -> Self {
        assert!(k >= 1, "need at least one group");
        DivergencePenalty { kind, k }
    }

    /// Bregman base actually used for proximal steps: KL when kind is `None`.
    fn bregman_kind(&self) -> DivergenceKind {
        match self.kind {
            DivergenceKind::None => DivergenceKind::Kl,
            other => other,
        }
    }
}

/// A point of the probability simplex: nonnegative entries summing to one
/// within [`SIMPLEX_SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector {
    entries: Vec<f64>,
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexVector::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Vec<f64> {
        v.entries
    }
}

impl SimplexVector {
    /// Validate `entries` as a simplex point.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty simplex vector".into()));
        }
        if entries.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidInput(format!(
                "simplex entries must be finite and nonnegative, got {entries:?}"
            )));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "simplex entries sum to {sum}, expected 1"
            )));
        }
        Ok(SimplexVector { entries })
    }

    /// The uniform weighting `1/K`.
    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1);
        SimplexVector {
            entries: vec![1.0 / k as f64; k],
        }
    }

    /// Indicator of coordinate `i`.
    pub fn indicator(k: usize, i: usize) -> Self {
        assert!(i < k);
        let mut entries = vec![0.0; k];
        entries[i] = 1.0;
        SimplexVector { entries }
    }

    /// Clamp negatives to zero and renormalize. Used to repair clamped KKT
    /// solutions and extrapolated vectors before they re-enter the simplex.
    pub fn project_clamped(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidInput("empty simplex vector".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry".into()));
        }
        let clamped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
        let sum: f64 = clamped.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidInput(
                "all entries nonpositive; cannot renormalize".into(),
            ));
        }
        Ok(SimplexVector {
            entries: clamped.iter().map(|&x| x / sum).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries[i]
    }

    /// Exact renormalization, restoring the sum invariant after arithmetic.
    fn renormalized(mut entries: Vec<f64>) -> Self {
        let sum: f64 = entries.iter().sum();
        debug_assert!(sum > 0.0);
        for x in &mut entries {
            *x /= sum;
        }
        SimplexVector { entries }
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

/// `d_f(lambda, 1/K)`.
pub fn penalty_value(p: &DivergencePenalty, lambda: &SimplexVector) -> f64 {
    debug_assert_eq!(lambda.len(), p.k);
    let k = p.k as f64;
    match p.kind {
        DivergenceKind::Kl => lambda
            .as_slice()
            .iter()
            .map(|&x| if x > 0.0 { x * (k * x).ln() } else { 0.0 })
            .sum(),
        DivergenceKind::ChiSquared => {
            k * lambda
                .as_slice()
                .iter()
                .map(|&x| (x - 1.0 / k).powi(2))
                .sum::<f64>()
        }
        DivergenceKind::None => 0.0,
    }
}

/// Bregman divergence `D_phi(a, b)` of `phi = d_f(., 1/K)`.
///
/// KL returns `+inf` when some `b_i = 0 < a_i` (an infinite-divergence
/// signal, not an error). Kind `None` uses the KL base.
pub fn bregman(p: &DivergencePenalty, a: &SimplexVector, b: &SimplexVector) -> f64 {
    debug_assert_eq!(a.len(), p.k);
    debug_assert_eq!(b.len(), p.k);
    match p.bregman_kind() {
        DivergenceKind::Kl => {
            let mut total = 0.0;
            for (&ai, &bi) in a.as_slice().iter().zip(b.as_slice()) {
                if ai > 0.0 {
                    if bi <= 0.0 {
                        return f64::INFINITY;
                    }
                    total += ai * (ai / bi).ln();
                }
            }
            total.max(0.0)
        }
        DivergenceKind::ChiSquared => {
            let k = p.k as f64;
            k * a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&ai, &bi)| (ai - bi).powi(2))
                .sum::<f64>()
        }
        DivergenceKind::None => unreachable!(),
    }
}

/// Maximize `step * (<lambda, scores> - nu * d_f(lambda, u)) -
/// breg_weight * D_phi(lambda, anchor)` over the simplex.
pub fn regularized_argmax(
    p: &DivergencePenalty,
    scores: &[f64],
    step: f64,
    nu: f64,
    breg_weight: f64,
    anchor: &SimplexVector,
) -> Result<SimplexVector> {
    if scores.len() != p.k || anchor.len() != p.k {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: K={}, scores={}, anchor={}",
            p.k,
            scores.len(),
            anchor.len()
        )));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite scores {scores:?}")));
    }
    if !(step >= 0.0 && nu >= 0.0 && breg_weight > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need step >= 0, nu >= 0, breg_weight > 0; got step={step}, nu={nu}, breg_weight={breg_weight}"
        )));
    }
    if p.kind == DivergenceKind::None && nu > 0.0 {
        return Err(Error::InvalidParameter(
            "divergence kind \"none\" requires nu = 0".into(),
        ));
    }
    if step == 0.0 {
        // Objective reduces to -breg_weight * D_phi(lambda, anchor).
        return Ok(anchor.clone());
    }
    match p.bregman_kind() {
        DivergenceKind::Kl => Ok(kl_argmax(p.k, scores, step, nu, breg_weight, anchor)),
        DivergenceKind::ChiSquared => Ok(chi2_argmax(p.k, scores, step, nu, breg_weight, anchor)),
        DivergenceKind::None => unreachable!(),
    }
}

/// KL closed form, from the first-order conditions:
/// `lambda_i ∝ anchor_i^(c/(c+s nu)) * (1/K)^(s nu/(c+s nu)) * exp(s
/// scores_i/(c+s nu))` with `s = step`, `c = breg_weight`. Computed in log
/// space with max subtraction.
fn kl_argmax(
    k: usize,
    scores: &[f64],
    step: f64,
    nu: f64,
    breg_weight: f64,
    anchor: &SimplexVector,
) -> SimplexVector {
    let denom = breg_weight + step * nu;
    let anchor_pow = breg_weight / denom;
    let uniform_pow = step * nu / denom;
    let log_uniform = -(k as f64).ln();
    let logits: Vec<f64> = scores
        .iter()
        .zip(anchor.as_slice())
        .map(|(&s, &a)| {
            anchor_pow * a.max(KL_ANCHOR_FLOOR).ln() + uniform_pow * log_uniform + step * s / denom
        })
        .collect();
    softmax(&logits)
}

pub(crate) fn softmax(logits: &[f64]) -> SimplexVector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    SimplexVector::renormalized(exps)
}

/// Chi-squared KKT water-filling. The objective
/// `sum_i [ s*scores_i*lambda_i - s*nu*K*(lambda_i - 1/K)^2 - c*K*(lambda_i -
/// anchor_i)^2 ]` has stationarity conditions `lambda_i(mu) = max(0, (b_i -
/// mu) / (2K(s nu + c)))` with `b_i = s*scores_i + 2 s nu + 2 c K anchor_i`;
/// bisection finds the multiplier `mu` with `sum_i lambda_i(mu) = 1`.
fn chi2_argmax(
    k: usize,
    scores: &[f64],
    step: f64,
    nu: f64,
    breg_weight: f64,
    anchor: &SimplexVector,
) -> SimplexVector {
    let kf = k as f64;
    let quad = 2.0 * kf * (step * nu + breg_weight);
    let b: Vec<f64> = scores
        .iter()
        .zip(anchor.as_slice())
        .map(|(&s, &a)| step * s + 2.0 * step * nu + 2.0 * breg_weight * kf * a)
        .collect();
    let coords =
        |mu: f64| -> Vec<f64> { b.iter().map(|&bi| ((bi - mu) / quad).max(0.0)).collect() };
    let total = |mu: f64| -> f64 { coords(mu).iter().sum() };

    // sum(mu) is continuous and non-increasing; bracket the root.
    let b_max = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let b_min = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = b_max; // sum = 0 here
    let mut lo = b_min - quad; // each coordinate >= quad/quad... sum >= 1 here
    debug_assert!(total(lo) >= 1.0);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let s = total(mid);
        if (s - 1.0).abs() < SIMPLEX_SUM_TOL {
            break;
        }
        if s > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    SimplexVector::project_clamped(&coords(mid)).expect("clamped KKT point renormalizes")
}

/// Worst-case group weights: `argmax_lambda <lambda, losses> - nu * d_f` and
/// the attained value.
///
/// `nu = 0` (or kind `None`) puts all mass on the max-loss group, ties broken
/// to the lowest index. KL has the soft-max closed form with value
/// `nu * ln((1/K) sum exp(losses_i / nu))`; chi-squared reuses the KKT
/// bisection.
pub fn worst_case_weights(
    p: &DivergencePenalty,
    losses: &[f64],
    nu: f64,
) -> Result<(SimplexVector, f64)> {
    if losses.len() != p.k {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: K={}, losses={}",
            p.k,
            losses.len()
        )));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite losses {losses:?}")));
    }
    if nu == 0.0 || p.kind == DivergenceKind::None {
        let mut best = 0usize;
        for (i, &l) in losses.iter().enumerate() {
            if l > losses[best] {
                best = i;
            }
        }
        return Ok((SimplexVector::indicator(p.k, best), losses[best]));
    }
    match p.kind {
        DivergenceKind::Kl => {
            let k = p.k as f64;
            let logits: Vec<f64> = losses.iter().map(|&l| l / nu).collect();
            let weights = softmax(&logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            let value = nu * (lse - k.ln());
            Ok((weights, value))
        }
        DivergenceKind::ChiSquared => {
            // argmax <lambda, losses> - nu*K*sum (lambda_i - 1/K)^2: the KKT
            // system of chi2_argmax with the anchor term switched off
            // (breg_weight -> 0 limit folded into the nu term).
            let kf = p.k as f64;
            let quad = 2.0 * kf * nu;
            let b: Vec<f64> = losses.iter().map(|&l| l + 2.0 * nu).collect();
            let coords =
                |mu: f64| -> Vec<f64> { b.iter().map(|&bi| ((bi - mu) / quad).max(0.0)).collect() };
            let total = |mu: f64| -> f64 { coords(mu).iter().sum() };
            let b_max = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let b_min = b.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut hi = b_max;
            let mut lo = b_min - quad;
            let mut mid = 0.5 * (lo + hi);
            for _ in 0..200 {
                mid = 0.5 * (lo + hi);
                let s = total(mid);
                if (s - 1.0).abs() < SIMPLEX_SUM_TOL {
                    break;
                }
                if s > 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let weights = SimplexVector::project_clamped(&coords(mid))?;
            let value = dot(weights.as_slice(), losses) - nu * penalty_value(p, &weights);
            Ok((weights, value))
        }
        DivergenceKind::None => unreachable!(),
    }
}

/// Claim-style total-variation bound: `(sum |a_i - b_i|)^2 <= 2 D_phi(a, b)`.
pub fn tv_squared_bound_check(a: &SimplexVector, b: &SimplexVector, p: &DivergencePenalty) -> bool {
    let l1: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    let rhs = 2.0 * bregman(p, a, b);
    l1 * l1 <= rhs + 1e-12
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
