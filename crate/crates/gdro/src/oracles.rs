//! Reference and brute-force computations that ground every derived value:
//! empirical benchmarks at the target parameter, the gap function, exhaustive
//! grid search at tiny dimension, sharpness and moment certificates, a
//! generic numeric simplex maximizer, and per-iteration trajectory checks.
//!
//! Everything here is deliberately simple and independent of the production
//! code paths it validates: the simplex maximizer runs projected gradient
//! ascent with a sort-based Euclidean projection (no closed forms, no KKT
//! bisection), and the divergence formulas it needs are written out locally.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::activation::Activation;
use crate::data::GroupDataset;
use crate::divergence::{
    bregman, penalty_value, worst_case_weights, DivergenceKind, DivergencePenalty, SimplexVector,
};
use crate::error::{Error, Result};
use crate::solver::{
    self, evaluate_losses, IterationView, SolverConfig, SolverObserver, TraceFlags,
};

/// `lhs <= rhs` up to a relative tolerance.
pub fn leq_rel(lhs: f64, rhs: f64, tol: f64) -> bool {
    lhs <= rhs + tol * lhs.abs().max(rhs.abs()).max(1.0)
}

/// Empirical benchmarks at the target parameter.
#[derive(Debug, Clone, Serialize)]
pub struct Benchmarks {
    /// Worst per-group empirical loss at `w_star`.
    pub opt_hat: f64,
    /// Worst-case group weighting for `w_star`.
    pub lambda_hat_star: SimplexVector,
    /// Initial potential `0.5 ||w_0 - w_star||^2 + nu0 D_phi(lambda*, lambda_0)`
    /// with `w_0 = 0` and uniform `lambda_0`.
    pub d0: f64,
    /// Per-group empirical losses at `w_star`.
    pub losses_at_wstar: Vec<f64>,
}

/// Compute [`Benchmarks`] for a dataset and target parameter.
pub fn compute_benchmarks(
    ds: &GroupDataset,
    activation: &Activation,
    w_star: &[f64],
    divergence: DivergenceKind,
    nu: f64,
    nu0: f64,
) -> Result<Benchmarks> {
    let losses = evaluate_losses(ds, activation, w_star);
    let opt_hat = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p = DivergencePenalty::new(divergence, ds.k);
    let (lambda_hat_star, _) = worst_case_weights(&p, &losses, nu)?;
    let uniform = SimplexVector::uniform(ds.k);
    let d0 = 0.5 * w_star.iter().map(|x| x * x).sum::<f64>()
        + nu0 * bregman(&p, &lambda_hat_star, &uniform);
    Ok(Benchmarks {
        opt_hat,
        lambda_hat_star,
        d0,
        losses_at_wstar: losses,
    })
}

/// The regularized loss `L(w, lambda) = sum lambda_i loss_i(w) - nu d_f(lambda, u)`.
pub fn regularized_loss(
    ds: &GroupDataset,
    activation: &Activation,
    divergence: DivergenceKind,
    nu: f64,
    w: &[f64],
    lambda: &SimplexVector,
) -> f64 {
    let losses = evaluate_losses(ds, activation, w);
    let p = DivergencePenalty::new(divergence, ds.k);
    dot(lambda.as_slice(), &losses) - nu * penalty_value(&p, lambda)
}

/// Gap function `L(w, lambda*) - L(w_star, lambda)` against the hybrid
/// reference point. Can be negative: the loss is nonconvex in `w`.
#[allow(clippy::too_many_arguments)]
pub fn gap(
    ds: &GroupDataset,
    activation: &Activation,
    divergence: DivergenceKind,
    nu: f64,
    w: &[f64],
    lambda: &SimplexVector,
    w_star: &[f64],
    lambda_hat_star: &SimplexVector,
) -> f64 {
    regularized_loss(ds, activation, divergence, nu, w, lambda_hat_star)
        - regularized_loss(ds, activation, divergence, nu, w_star, lambda)
}

/// Default per-axis resolution for [`brute_force_w_star`]: localizes the
/// minimizer to about `1e-2 * W` at `d <= 2` in well under a second.
pub const DEFAULT_GRID_RESOLUTION: usize = 201;

/// Exhaustive DRO-risk minimization over a uniform grid of the feasible
/// ball. Only for validation at tiny dimension; refuses `d > 3`.
pub fn brute_force_w_star(
    ds: &GroupDataset,
    activation: &Activation,
    divergence: DivergenceKind,
    nu: f64,
    w_radius: f64,
    grid_resolution: usize,
) -> Result<(Vec<f64>, f64)> {
    if ds.d > 3 {
        return Err(Error::InvalidParameter(format!(
            "grid search is exponential in d; refusing d = {} > 3",
            ds.d
        )));
    }
    if grid_resolution < 2 {
        return Err(Error::InvalidParameter(
            "grid resolution must be >= 2".into(),
        ));
    }
    let d = ds.d;
    let n = grid_resolution;
    let coord = |i: usize| -> f64 { -w_radius + 2.0 * w_radius * i as f64 / (n - 1) as f64 };
    let mut best_w = vec![0.0; d];
    let mut best_risk = f64::INFINITY;
    let mut idx = vec![0usize; d];
    loop {
        let w: Vec<f64> = idx.iter().map(|&i| coord(i)).collect();
        if w.iter().map(|x| x * x).sum::<f64>() <= w_radius * w_radius {
            let risk = solver::dro_risk(ds, activation, &w, divergence, nu)?;
            if risk < best_risk {
                best_risk = risk;
                best_w = w;
            }
        }
        // odometer increment
        let mut dim = 0;
        loop {
            if dim == d {
                return Ok((best_w, best_risk));
            }
            idx[dim] += 1;
            if idx[dim] < n {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
    }
}

/// Report of [`empirical_sharpness_check`].
#[derive(Debug, Clone, Serialize)]
pub struct SharpnessReport {
    pub n_probes: usize,
    pub violations: usize,
    /// Smallest observed `E[(sigma(w.x) - sigma(w*.x)) ((w - w*).x)] -
    /// (c0/2)||w - w*||^2` over probes and groups.
    pub worst_margin: f64,
}

/// Probe the empirical sharpness inequality at random parameters
/// `w in B(3||w_star||)` with `||w - w_star|| >= sqrt(eps)`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_sharpness_check(
    ds: &GroupDataset,
    activation: &Activation,
    w_star: &[f64],
    c0: f64,
    eps: f64,
    n_probes: usize,
    seed: u64,
) -> Result<SharpnessReport> {
    if !(c0 > 0.0) {
        return Err(Error::InvalidParameter("c0 must be positive".into()));
    }
    ds.validate()?;
    let d = ds.d;
    let radius = 3.0 * w_star.iter().map(|x| x * x).sum::<f64>().sqrt();
    let min_dist = eps.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < n_probes {
        attempts += 1;
        if attempts > 100 * n_probes + 1000 {
            return Err(Error::InvalidParameter(
                "could not sample probes outside the exclusion radius".into(),
            ));
        }
        let w = random_in_ball(&mut rng, d, radius);
        if solver::dist_sq(&w, w_star) < min_dist * min_dist {
            continue; // inside the sqrt(eps) exclusion
        }
        accepted += 1;
        let dist_sq = solver::dist_sq(&w, w_star);
        for g in &ds.groups {
            let mut acc = 0.0;
            for j in 0..g.len() {
                let x = g.x(j, d);
                let zw = dot(&w, x);
                let zs = dot(w_star, x);
                acc += (activation.value(zw) - activation.value(zs)) * (zw - zs);
            }
            let margin = acc / g.len() as f64 - 0.5 * c0 * dist_sq;
            worst = worst.min(margin);
            if margin < 0.0 {
                violations += 1;
            }
        }
    }
    Ok(SharpnessReport {
        n_probes,
        violations,
        worst_margin: worst,
    })
}

/// Report of [`moment_check`].
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub tau: u32,
    pub bound: f64,
    pub max_moment_per_group: Vec<f64>,
    pub violations: usize,
}

/// Check `E[(u.x)^tau] <= bound` per group over random unit directions.
pub fn moment_check(
    ds: &GroupDataset,
    tau: u32,
    bound: f64,
    n_directions: usize,
    seed: u64,
) -> Result<MomentReport> {
    if tau != 2 && tau != 4 {
        return Err(Error::InvalidParameter(format!(
            "tau must be 2 or 4, got {tau}"
        )));
    }
    if !(bound > 0.0) {
        return Err(Error::InvalidParameter("bound must be positive".into()));
    }
    ds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_per_group = vec![0.0f64; ds.k];
    let mut violations = 0;
    for _ in 0..n_directions.max(1) {
        let u = random_unit(&mut rng, ds.d);
        for (gi, g) in ds.groups.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..g.len() {
                acc += dot(g.x(j, ds.d), &u).powi(tau as i32);
            }
            let moment = acc / g.len() as f64;
            max_per_group[gi] = max_per_group[gi].max(moment);
            if moment > bound {
                violations += 1;
            }
        }
    }
    Ok(MomentReport {
        tau,
        bound,
        max_moment_per_group: max_per_group,
        violations,
    })
}

/// Population proxies evaluated on a held-out sample (conventionally 10x the
/// training size). The mixture uses the *empirical* worst-case weights of
/// `w_star`, standing in for the unknown population weighting.
#[derive(Debug, Clone, Serialize)]
pub struct HoldoutEval {
    pub opt_holdout: f64,
    pub mixture_loss_holdout: f64,
}

/// Report of [`risk_vs_opt_certificate`].
#[derive(Debug, Clone, Serialize)]
pub struct RiskCertificate {
    pub dist_to_wstar: f64,
    pub opt_hat: f64,
    /// Loss of `w_hat` under the worst-case mixture weights of `w_star`.
    pub mixture_loss: f64,
    pub dist_bound_lhs: f64,
    pub dist_bound_rhs: f64,
    pub dist_bound_ok: bool,
    pub mixture_bound_lhs: f64,
    pub mixture_bound_rhs: f64,
    pub mixture_bound_ok: bool,
    /// `lhs / rhs` of the distance bound; how loose the constants are.
    pub dist_bound_ratio: f64,
    pub holdout: Option<HoldoutEval>,
}

/// Check the end-to-end guarantees: `||w_hat - w_star|| <= C3 (sqrt(OPT_hat)
/// + sqrt(eps))` and the mixture-loss bound
/// `(2 + 20 B beta^2 C3^2) OPT_hat + 20 beta^2 C3^2 B eps`.
pub fn risk_vs_opt_certificate(
    w_hat: &[f64],
    ds: &GroupDataset,
    activation: &Activation,
    cfg: &SolverConfig,
    w_star: &[f64],
    holdout_ds: Option<&GroupDataset>,
) -> Result<RiskCertificate> {
    let c = cfg.constants();
    let bench = compute_benchmarks(ds, activation, w_star, cfg.divergence, cfg.nu, c.nu0)?;
    let dist = solver::dist_sq(w_hat, w_star).sqrt();
    let losses_hat = evaluate_losses(ds, activation, w_hat);
    let mixture_loss = dot(bench.lambda_hat_star.as_slice(), &losses_hat);

    let holdout = match holdout_ds {
        Some(h) => {
            let losses_star = evaluate_losses(h, activation, w_star);
            let losses_w = evaluate_losses(h, activation, w_hat);
            Some(HoldoutEval {
                opt_holdout: losses_star
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max),
                mixture_loss_holdout: dot(bench.lambda_hat_star.as_slice(), &losses_w),
            })
        }
        None => None,
    };

    let dist_rhs = c.c3 * (bench.opt_hat.sqrt() + cfg.eps.sqrt());
    let mix_rhs = (2.0 + 20.0 * cfg.b_tail * cfg.beta * cfg.beta * c.c3 * c.c3) * bench.opt_hat
        + 20.0 * cfg.beta * cfg.beta * c.c3 * c.c3 * cfg.b_tail * cfg.eps;
    Ok(RiskCertificate {
        dist_to_wstar: dist,
        opt_hat: bench.opt_hat,
        mixture_loss,
        dist_bound_lhs: dist,
        dist_bound_rhs: dist_rhs,
        dist_bound_ok: leq_rel(dist, dist_rhs, 1e-12),
        mixture_bound_lhs: mixture_loss,
        mixture_bound_rhs: mix_rhs,
        mixture_bound_ok: leq_rel(mixture_loss, mix_rhs, 1e-12),
        dist_bound_ratio: if dist_rhs > 0.0 {
            dist / dist_rhs
        } else {
            f64::INFINITY
        },
        holdout,
    })
}

// ---------------------------------------------------------------------------
// Generic numeric simplex maximizer (reference oracle)
// ---------------------------------------------------------------------------

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut rho = 0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            rho = j + 1;
            theta = candidate;
        }
    }
    debug_assert!(rho > 0);
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Parameters of the dual-step objective, restated locally so the oracle
/// shares no code with `divergence::regularized_argmax`.
#[derive(Debug, Clone)]
pub struct DualObjective {
    pub kind: DivergenceKind,
    pub scores: Vec<f64>,
    pub step: f64,
    pub nu: f64,
    pub breg_weight: f64,
    pub anchor: Vec<f64>,
}

impl DualObjective {
    fn k(&self) -> usize {
        self.scores.len()
    }

    /// `step (<lambda, scores> - nu d_f(lambda, u)) - breg_weight D_phi(lambda, anchor)`.
    pub fn value(&self, lam: &[f64]) -> f64 {
        let k = self.k() as f64;
        let mut v = self.step * dot(lam, &self.scores);
        match self.kind {
            DivergenceKind::Kl | DivergenceKind::None => {
                let df: f64 = lam
                    .iter()
                    .map(|&x| if x > 0.0 { x * (k * x).ln() } else { 0.0 })
                    .sum();
                let dphi: f64 = lam
                    .iter()
                    .zip(&self.anchor)
                    .map(|(&x, &a)| if x > 0.0 { x * (x / a).ln() } else { 0.0 })
                    .sum();
                if self.kind == DivergenceKind::Kl {
                    v -= self.step * self.nu * df;
                }
                v -= self.breg_weight * dphi;
            }
            DivergenceKind::ChiSquared => {
                let df: f64 = lam.iter().map(|&x| (x - 1.0 / k).powi(2)).sum::<f64>() * k;
                let dphi: f64 = lam
                    .iter()
                    .zip(&self.anchor)
                    .map(|(&x, &a)| (x - a).powi(2))
                    .sum::<f64>()
                    * k;
                v -= self.step * self.nu * df;
                v -= self.breg_weight * dphi;
            }
        }
        v
    }

    pub fn gradient(&self, lam: &[f64]) -> Vec<f64> {
        let k = self.k() as f64;
        match self.kind {
            DivergenceKind::Kl | DivergenceKind::None => lam
                .iter()
                .zip(&self.scores)
                .zip(&self.anchor)
                .map(|((&x, &s), &a)| {
                    let xf = x.max(1e-18);
                    let mut g = self.step * s;
                    if self.kind == DivergenceKind::Kl {
                        g -= self.step * self.nu * ((k * xf).ln() + 1.0);
                    }
                    g - self.breg_weight * ((xf / a).ln() + 1.0)
                })
                .collect(),
            DivergenceKind::ChiSquared => lam
                .iter()
                .zip(&self.scores)
                .zip(&self.anchor)
                .map(|((&x, &s), &a)| {
                    self.step * s
                        - 2.0 * self.step * self.nu * k * (x - 1.0 / k)
                        - 2.0 * self.breg_weight * k * (x - a)
                })
                .collect(),
        }
    }

    /// Diagonal of the negated Hessian (both objectives are separable).
    pub fn neg_hessian_diag(&self, lam: &[f64]) -> Vec<f64> {
        let k = self.k() as f64;
        match self.kind {
            DivergenceKind::Kl | DivergenceKind::None => {
                let coeff = self.step
                    * if self.kind == DivergenceKind::Kl {
                        self.nu
                    } else {
                        0.0
                    }
                    + self.breg_weight;
                lam.iter().map(|&x| coeff / x.max(1e-18)).collect()
            }
            DivergenceKind::ChiSquared => {
                let coeff = 2.0 * k * (self.step * self.nu + self.breg_weight);
                vec![coeff; lam.len()]
            }
        }
    }
}

/// First-order (KKT) residual of a candidate maximizer on the simplex: the
/// gradient must be constant on the support and no larger off it. Invariant
/// to the additive gauge freedom of the constraint multiplier.
fn kkt_residual(lam: &[f64], g: &[f64]) -> f64 {
    const SUPPORT: f64 = 1e-15;
    let mut mu = 0.0;
    let mut n = 0usize;
    for (&x, &gi) in lam.iter().zip(g) {
        if x > SUPPORT {
            mu += gi;
            n += 1;
        }
    }
    mu /= n.max(1) as f64;
    let mut r = 0.0f64;
    for (&x, &gi) in lam.iter().zip(g) {
        if x > SUPPORT {
            r = r.max((gi - mu).abs());
        } else {
            r = r.max((gi - mu).max(0.0));
        }
    }
    r
}

/// Maximize a concave objective over the simplex numerically: projected
/// gradient ascent with an Armijo backtracking line search until it stalls
/// at rounding scale, then an active-set Newton polish (the Hessians here
/// are diagonal) until the first-order residual falls below `grad_tol`.
///
/// The polish solves the stationarity system by local linearization, so it
/// shares no algebra with the closed forms it is used to validate.
pub fn numeric_simplex_maximizer(
    objective: &DualObjective,
    grad_tol: f64,
    max_iters: usize,
) -> Vec<f64> {
    let mut lam: Vec<f64> = objective.anchor.clone();
    let mut eta = 1.0f64;

    // Phase 1: globally convergent ascent. Stops once true improvements sink
    // below floating-point resolution of the objective, leaving an iterate
    // near the optimum with (at worst) a slightly wrong active set.
    for _ in 0..max_iters {
        let g = objective.gradient(&lam);
        if kkt_residual(&lam, &g) <= grad_tol {
            break;
        }
        let f0 = objective.value(&lam);
        let mut stepped = false;
        while eta > 1e-18 {
            let cand_pt: Vec<f64> = lam.iter().zip(&g).map(|(&x, &gi)| x + eta * gi).collect();
            let cand = project_simplex(&cand_pt);
            if objective.value(&cand) > f0 {
                lam = cand;
                stepped = true;
                break;
            }
            eta *= 0.5;
        }
        if !stepped {
            break;
        }
        eta = (eta * 2.0).min(1e6);
    }

    // Phase 2: active-set Newton on the diagonal KKT system. With negated
    // Hessian diag h and multiplier mu, the step on the support is
    // d_i = (g_i - mu)/h_i with mu chosen so that sum(d) = 0; off-support
    // coordinates re-enter when their gradient exceeds mu.
    let mut support: Vec<bool> = lam.iter().map(|&x| x > 0.0).collect();
    for _ in 0..200 {
        let g = objective.gradient(&lam);
        let h = objective.neg_hessian_diag(&lam);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..lam.len() {
            if support[i] {
                num += g[i] / h[i];
                den += 1.0 / h[i];
            }
        }
        let mu = num / den;

        // Re-enter the worst off-support violator, if any.
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..lam.len() {
            if !support[i] && g[i] > mu + grad_tol && worst.is_none_or(|(_, v)| g[i] - mu > v) {
                worst = Some((i, g[i] - mu));
            }
        }
        if let Some((i, _)) = worst {
            support[i] = true;
            lam[i] = 1e-12;
            continue;
        }

        // Damped Newton step on the support.
        let mut step_dir = vec![0.0; lam.len()];
        let mut max_rel = 0.0f64;
        for i in 0..lam.len() {
            if support[i] {
                step_dir[i] = (g[i] - mu) / h[i];
                max_rel = max_rel.max(-step_dir[i] / lam[i]);
            }
        }
        // Keep every support coordinate strictly positive.
        let damp = if max_rel > 0.9 { 0.9 / max_rel } else { 1.0 };
        let mut moved = 0.0f64;
        for i in 0..lam.len() {
            if support[i] {
                lam[i] += damp * step_dir[i];
                moved = moved.max(step_dir[i].abs());
                if lam[i] <= 0.0 {
                    lam[i] = 0.0;
                    support[i] = false;
                }
            }
        }
        if kkt_residual(&lam, &objective.gradient(&lam)) <= grad_tol && moved < 1e-9 {
            break;
        }
    }

    for x in &mut lam {
        *x = x.max(0.0);
    }
    let sum: f64 = lam.iter().sum();
    lam.iter_mut().for_each(|x| *x /= sum);
    lam
}

// ---------------------------------------------------------------------------
// Trajectory checks
// ---------------------------------------------------------------------------

/// Which per-iteration inequalities [`TrajectoryChecker`] verifies.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryChecks {
    /// The running potential bound with the published 120-coefficient form.
    pub potential: bool,
    /// The gap lower bound.
    pub gap_lower_bound: bool,
    /// The per-group linearization inequality.
    pub linearization: bool,
    /// Iterate containment `||w_t|| <= 3 ||w_star||`.
    pub containment: bool,
}

impl Default for TrajectoryChecks {
    fn default() -> Self {
        TrajectoryChecks {
            potential: true,
            gap_lower_bound: true,
            linearization: true,
            containment: true,
        }
    }
}

/// Aggregated outcome of the trajectory checks over a run.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryReport {
    pub iterations: usize,
    pub potential_violations: usize,
    /// Stricter intermediate form of the potential bound (40-coefficient,
    /// no epsilon slack); reported alongside the published form.
    pub potential_strict_violations: usize,
    pub gap_lb_violations: usize,
    pub linearization_violations: usize,
    pub containment_violations: usize,
    pub worst_potential_margin: f64,
    pub worst_gap_lb_margin: f64,
    pub worst_linearization_margin: f64,
}

impl TrajectoryReport {
    pub fn all_ok(&self) -> bool {
        self.potential_violations == 0
            && self.gap_lb_violations == 0
            && self.linearization_violations == 0
            && self.containment_violations == 0
    }
}

/// A [`SolverObserver`] that verifies the convergence-analysis inequalities
/// at every iterate, against precomputed benchmarks at `w_star`.
pub struct TrajectoryChecker {
    cfg: SolverConfig,
    penalty: DivergencePenalty,
    checks: TrajectoryChecks,
    tol_rel: f64,
    w_star: Vec<f64>,
    w_star_norm: f64,
    bench: Benchmarks,
    penalty_at_lambda_star: f64,
    /// Per-group `w_star . x_j`.
    dots_star: Vec<Vec<f64>>,
    /// Per-group `sigma(w_star . x_j) - y_j`.
    resid_star: Vec<Vec<f64>>,
    pub report: TrajectoryReport,
}

impl TrajectoryChecker {
    pub fn new(
        cfg: &SolverConfig,
        ds: &GroupDataset,
        activation: &Activation,
        w_star: &[f64],
        checks: TrajectoryChecks,
        tol_rel: f64,
    ) -> Result<Self> {
        let c = cfg.constants();
        let bench = compute_benchmarks(ds, activation, w_star, cfg.divergence, cfg.nu, c.nu0)?;
        let penalty = cfg.penalty();
        let penalty_at_lambda_star = penalty_value(&penalty, &bench.lambda_hat_star);
        let mut dots_star = Vec::with_capacity(ds.k);
        let mut resid_star = Vec::with_capacity(ds.k);
        for g in &ds.groups {
            let mut zs = Vec::with_capacity(g.len());
            let mut rs = Vec::with_capacity(g.len());
            for j in 0..g.len() {
                let z = dot(w_star, g.x(j, ds.d));
                zs.push(z);
                rs.push(activation.value(z) - g.ys[j]);
            }
            dots_star.push(zs);
            resid_star.push(rs);
        }
        Ok(TrajectoryChecker {
            cfg: cfg.clone(),
            penalty,
            checks,
            tol_rel,
            w_star: w_star.to_vec(),
            w_star_norm: w_star.iter().map(|x| x * x).sum::<f64>().sqrt(),
            bench,
            penalty_at_lambda_star,
            dots_star,
            resid_star,
            report: TrajectoryReport {
                iterations: 0,
                potential_violations: 0,
                potential_strict_violations: 0,
                gap_lb_violations: 0,
                linearization_violations: 0,
                containment_violations: 0,
                worst_potential_margin: f64::INFINITY,
                worst_gap_lb_margin: f64::INFINITY,
                worst_linearization_margin: f64::INFINITY,
            },
        })
    }

    pub fn benchmarks(&self) -> &Benchmarks {
        &self.bench
    }
}

impl SolverObserver for TrajectoryChecker {
    fn observe(&mut self, view: &IterationView<'_>) -> TraceFlags {
        let cfg = &self.cfg;
        let c = cfg.constants();
        let beta = cfg.beta;
        let b = cfg.b_tail;
        let c1 = cfg.c1;
        let dist_sq = solver::dist_sq(view.w, &self.w_star);
        self.report.iterations = view.t;

        let mut flags = TraceFlags::default();

        if self.checks.containment {
            let norm = view.w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 3.0 * self.w_star_norm * (1.0 + 1e-12) {
                self.report.containment_violations += 1;
            }
        }

        // Divergence of the reference weights from the current iterate, in
        // the direction the analysis uses: D_phi(lambda*, lambda_t).
        let d_star_curr = bregman(&self.penalty, &self.bench.lambda_hat_star, view.lambda);

        if self.checks.potential {
            let lhs = (1.0 + 0.5 * c1 * view.a_cum) / 4.0 * dist_sq
                + (c.nu0 + cfg.nu * view.a_cum) * d_star_curr;
            let rhs = self.bench.d0
                + 120.0 * beta * beta * b / c1 * view.a_cum * (self.bench.opt_hat + cfg.eps);
            let ok = leq_rel(lhs, rhs, self.tol_rel);
            if !ok {
                self.report.potential_violations += 1;
            }
            self.report.worst_potential_margin = self.report.worst_potential_margin.min(rhs - lhs);
            flags.eq5_ok = Some(ok);

            let rhs_strict =
                self.bench.d0 + 40.0 * beta * beta * b / c1 * view.a_cum * self.bench.opt_hat;
            if !leq_rel(lhs, rhs_strict, self.tol_rel) {
                self.report.potential_strict_violations += 1;
            }
        }

        if self.checks.gap_lower_bound {
            // Gap(w_t, lambda_t) with both regularized losses assembled from
            // cached per-group quantities.
            let l_w_lambda_star = dot(self.bench.lambda_hat_star.as_slice(), view.losses)
                - cfg.nu * self.penalty_at_lambda_star;
            let l_wstar_lambda = dot(view.lambda.as_slice(), &self.bench.losses_at_wstar)
                - cfg.nu * penalty_value(&self.penalty, view.lambda);
            let gap = l_w_lambda_star - l_wstar_lambda;
            let rhs = -12.0 * beta * beta * b / c1 * self.bench.opt_hat
                + 0.5 * c1 * dist_sq
                + cfg.nu * d_star_curr;
            let ok = leq_rel(rhs, gap, self.tol_rel);
            if !ok {
                self.report.gap_lb_violations += 1;
            }
            self.report.worst_gap_lb_margin = self.report.worst_gap_lb_margin.min(gap - rhs);
            flags.gap_lb_ok = Some(ok);
        }

        if self.checks.linearization {
            let err_term = 24.0 * beta * beta * b * self.bench.opt_hat / c1 + 0.25 * c1 * dist_sq;
            for gi in 0..self.dots_star.len() {
                let rs_t = &view.residuals[gi];
                let zs_t = &view.dots[gi];
                let rs_s = &self.resid_star[gi];
                let zs_s = &self.dots_star[gi];
                let n = rs_t.len() as f64;
                let mut lhs = 0.0;
                let mut lin = 0.0;
                for j in 0..rs_t.len() {
                    // sigma(w*.x) - sigma(w_t.x) = resid_star - resid_t.
                    lhs += 2.0 * rs_t[j] * (rs_s[j] - rs_t[j]);
                    lin += 2.0 * beta * rs_t[j] * (zs_s[j] - zs_t[j]);
                }
                lhs /= n;
                lin /= n;
                let rhs = lin - err_term;
                if !leq_rel(rhs, lhs, self.tol_rel) {
                    self.report.linearization_violations += 1;
                }
                self.report.worst_linearization_margin =
                    self.report.worst_linearization_margin.min(lhs - rhs);
            }
        }

        flags
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn random_in_ball(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<f64> {
    let u = random_unit(rng, d);
    let r: f64 = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    u.iter().map(|x| x * r).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
