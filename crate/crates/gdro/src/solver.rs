//! The primal-dual group DRO solver.
//!
//! Each iteration advances an accelerated step size `a_t` (cumulative `A_t`),
//! extrapolates the *dual* group weights,
//!
//! ```text
//! lambda_bar_{t-1} = lambda_{t-1} + (a_{t-1}/a_t) (lambda_{t-1} - lambda_{t-2}),
//! ```
//!
//! takes a ball-projected primal prox step against the lambda_bar-weighted
//! surrogate gradient `v(w; x, y) = 2 beta (sigma(w.x) - y) x`, re-evaluates
//! the per-group losses at the new iterate, and finishes with a Bregman
//! proximal dual ascent step over the simplex. The extrapolated weights may
//! leave the simplex (negative entries are expected); only the dual argmax
//! output is a simplex point.
//!
//! The step-size schedule is
//!
//! ```text
//! a_t = min{ (1 + c1/(8 C4))^{t-1} / (4 C4),
//!            max{ (1 + sqrt(c1 nu)/(4 sqrt(2) C'_W))^{t-1} sqrt(nu0)/(4 C'_W),
//!                 c1 nu0 t / (4 sqrt(2) C'_W)^2 } }
//! ```
//!
//! with the geometric branches evaluated in log space so large `t` cannot
//! overflow.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::GroupDataset;
use crate::divergence::{self, DivergenceKind, DivergencePenalty, SimplexVector};
use crate::error::{Error, Result};

/// Solver parameters. Derived constants are recomputed on demand by
/// [`SolverConfig::constants`], so they can never drift from the primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Divergence-penalty weight `nu >= 0`.
    pub nu: f64,
    /// Target accuracy.
    pub eps: f64,
    /// Radius of the feasible ball.
    pub w_radius: f64,
    /// Activation Lipschitz constant.
    pub beta: f64,
    /// Tail parameter of the x-marginals.
    pub b_tail: f64,
    /// Sharpness constant; see [`sharpness_constants`] for the default route.
    pub c1: f64,
    /// Truncation constant.
    pub c_m: f64,
    /// Number of groups.
    pub k: usize,
    /// Hard cap used by callers that derive iteration counts.
    pub max_iters: usize,
    pub divergence: DivergenceKind,
}

/// Constants derived from the config primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Constants {
    /// `nu0 = eps / (4K)`.
    pub nu0: f64,
    /// `C3 = 31 beta sqrt(B) / c1`.
    pub c3: f64,
    /// `C4 = 27 c1 + 2163 beta^4 B^2 / c1`.
    pub c4: f64,
    /// `C_W = sqrt(6 beta^2 + C_M^2 B ln^2(beta B W / eps))`.
    pub c_w: f64,
    /// `C'_W = 2 sqrt(3) C_W beta W B`.
    pub c_w_prime: f64,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps", self.eps),
            ("w_radius", self.w_radius),
            ("beta", self.beta),
            ("b_tail", self.b_tail),
            ("c1", self.c1),
            ("c_m", self.c_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nu must be >= 0, got {}",
                self.nu
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.divergence == DivergenceKind::None && self.nu > 0.0 {
            return Err(Error::InvalidParameter(
                "divergence \"none\" requires nu = 0".into(),
            ));
        }
        Ok(())
    }

    pub fn constants(&self) -> Constants {
        let nu0 = self.eps / (4.0 * self.k as f64);
        let c3 = 31.0 * self.beta * self.b_tail.sqrt() / self.c1;
        let c4 = 27.0 * self.c1 + 2163.0 * self.beta.powi(4) * self.b_tail.powi(2) / self.c1;
        let log_term = (self.beta * self.b_tail * self.w_radius / self.eps).ln();
        let c_w = (6.0 * self.beta * self.beta
            + self.c_m * self.c_m * self.b_tail * log_term * log_term)
            .sqrt();
        let c_w_prime = 2.0 * 3.0_f64.sqrt() * c_w * self.beta * self.w_radius * self.b_tail;
        Constants {
            nu0,
            c3,
            c4,
            c_w,
            c_w_prime,
        }
    }

    pub fn penalty(&self) -> DivergencePenalty {
        DivergencePenalty::new(self.divergence, self.k)
    }
}

/// Sharpness constants from the margin parameters:
/// `c0 = gamma zeta alpha / (6 B ln(20 B / zeta^2))` and `c1 = c0^2 / (24 B)`.
///
/// This is the default route for `c1` when nothing better is known; the
/// constant is very conservative, so callers may override `c1` with an
/// empirically certified value (see the sharpness checker in `oracles`).
pub fn sharpness_constants(gamma: f64, zeta: f64, alpha: f64, b_tail: f64) -> (f64, f64) {
    let c0 = gamma * zeta * alpha / (6.0 * b_tail * (20.0 * b_tail / (zeta * zeta)).ln());
    (c0, c0 * c0 / (24.0 * b_tail))
}

/// The step size `a_t`, `t >= 1`.
pub fn step_size(cfg: &SolverConfig, t: usize) -> f64 {
    assert!(t >= 1, "step index starts at 1");
    let c = cfg.constants();
    let tm1 = (t - 1) as f64;
    let sqrt2 = std::f64::consts::SQRT_2;

    let contraction = (tm1 * (cfg.c1 / (8.0 * c.c4)).ln_1p() - (4.0 * c.c4).ln()).exp();
    let geometric = (tm1 * ((cfg.c1 * cfg.nu).sqrt() / (4.0 * sqrt2 * c.c_w_prime)).ln_1p()
        + (c.nu0.sqrt() / (4.0 * c.c_w_prime)).ln())
    .exp();
    let linear = cfg.c1 * c.nu0 * t as f64 / (4.0 * sqrt2 * c.c_w_prime).powi(2);

    contraction.min(geometric.max(linear))
}

/// Surrogate gradient `v(w; x, y) = 2 beta (sigma(w.x) - y) x`.
pub fn surrogate_gradient(
    activation: &Activation,
    w: &[f64],
    x: &[f64],
    y: f64,
    beta: f64,
) -> Vec<f64> {
    let coeff = 2.0 * beta * (activation.value(dot(w, x)) - y);
    x.iter().map(|&xi| coeff * xi).collect()
}

/// `sum_i weights_i * mean_{group i} v(w; x, y)`. Weights may be negative
/// (extrapolated duals). Samples within a group accumulate in index order, so
/// results are bit-stable.
pub fn averaged_gradient(
    ds: &GroupDataset,
    activation: &Activation,
    w: &[f64],
    weights: &[f64],
    beta: f64,
) -> Vec<f64> {
    assert_eq!(weights.len(), ds.k);
    assert_eq!(w.len(), ds.d);
    let mut g = vec![0.0; ds.d];
    for (gi, group) in ds.groups.iter().enumerate() {
        if weights[gi] == 0.0 {
            continue;
        }
        let scale = weights[gi] * 2.0 * beta / group.len() as f64;
        for j in 0..group.len() {
            let x = group.x(j, ds.d);
            let coeff = scale * (activation.value(dot(w, x)) - group.ys[j]);
            axpy(&mut g, coeff, x);
        }
    }
    g
}

/// Dual extrapolation `lambda_bar = curr + (a_prev/a_curr)(curr - prev)`.
/// The output is not renormalized and may have negative entries.
pub fn extrapolate_dual(
    lambda_curr: &SimplexVector,
    lambda_prev: &SimplexVector,
    a_prev: f64,
    a_curr: f64,
) -> Vec<f64> {
    assert!(a_curr > 0.0);
    let m = a_prev / a_curr;
    lambda_curr
        .as_slice()
        .iter()
        .zip(lambda_prev.as_slice())
        .map(|(&c, &p)| c + m * (c - p))
        .collect()
}

/// Euclidean projection onto the ball of radius `w_radius`.
pub fn project_ball(w: &mut [f64], w_radius: f64) {
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > w_radius {
        let scale = w_radius / norm;
        for x in w.iter_mut() {
            *x *= scale;
        }
    }
}

/// Closed-form primal step: `Pi_B(W)( w_prev - (a_t / (1 + 0.5 c1 A_t)) g )`.
/// This is the exact minimizer of the linearized prox objective over the
/// ball.
pub fn primal_step(
    cfg: &SolverConfig,
    w_prev: &[f64],
    g: &[f64],
    a_t: f64,
    a_cum: f64,
) -> Vec<f64> {
    let eta = a_t / (1.0 + 0.5 * cfg.c1 * a_cum);
    let mut w: Vec<f64> = w_prev
        .iter()
        .zip(g)
        .map(|(&wi, &gi)| wi - eta * gi)
        .collect();
    project_ball(&mut w, cfg.w_radius);
    w
}

/// Bregman dual step (one regularized simplex argmax). The Bregman weight
/// uses `A_{t-1}` while the loss term uses `a_t`.
pub fn dual_step(
    cfg: &SolverConfig,
    anchor: &SimplexVector,
    group_losses: &[f64],
    a_t: f64,
    a_cum_prev: f64,
) -> Result<SimplexVector> {
    let c = cfg.constants();
    divergence::regularized_argmax(
        &cfg.penalty(),
        group_losses,
        a_t,
        cfg.nu,
        c.nu0 + cfg.nu * a_cum_prev,
        anchor,
    )
}

/// Per-group empirical mean squared loss at `w`.
pub fn evaluate_losses(ds: &GroupDataset, activation: &Activation, w: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), ds.d);
    ds.groups
        .iter()
        .map(|g| {
            let mut acc = 0.0;
            for j in 0..g.len() {
                let r = activation.value(dot(w, g.x(j, ds.d))) - g.ys[j];
                acc += r * r;
            }
            acc / g.len() as f64
        })
        .collect()
}

/// The DRO risk `max_lambda <lambda, losses> - nu d_f(lambda, u)` at `w`.
pub fn dro_risk(
    ds: &GroupDataset,
    activation: &Activation,
    w: &[f64],
    divergence: DivergenceKind,
    nu: f64,
) -> Result<f64> {
    let losses = evaluate_losses(ds, activation, w);
    let p = DivergencePenalty::new(divergence, ds.k);
    Ok(divergence::worst_case_weights(&p, &losses, nu)?.1)
}

/// One per-iteration trace row. The CSV layout is pinned: `t, a_t, A_t,
/// loss_1..loss_K, lambda_1..lambda_K, dist_sq_to_wstar, gap_lb_ok, eq5_ok`
/// (the last three empty when unknown).
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub t: usize,
    pub a_t: f64,
    pub a_cum: f64,
    pub losses: Vec<f64>,
    pub lambda: Vec<f64>,
    pub dist_sq_to_wstar: Option<f64>,
    pub gap_lb_ok: Option<bool>,
    pub eq5_ok: Option<bool>,
    /// Seconds since the run started; kept out of the CSV so reruns stay
    /// byte-identical.
    pub wall_clock: f64,
}

/// Render trace rows in the pinned CSV layout.
pub fn trace_to_csv(trace: &[TraceRecord], k: usize) -> String {
    let mut out = String::new();
    out.push_str("t,a_t,A_t");
    for i in 1..=k {
        out.push_str(&format!(",loss_{i}"));
    }
    for i in 1..=k {
        out.push_str(&format!(",lambda_{i}"));
    }
    out.push_str(",dist_sq_to_wstar,gap_lb_ok,eq5_ok\n");
    for r in trace {
        out.push_str(&format!("{},{},{}", r.t, r.a_t, r.a_cum));
        for l in &r.losses {
            out.push_str(&format!(",{l}"));
        }
        for l in &r.lambda {
            out.push_str(&format!(",{l}"));
        }
        match r.dist_sq_to_wstar {
            Some(d) => out.push_str(&format!(",{d}")),
            None => out.push(','),
        }
        for flag in [r.gap_lb_ok, r.eq5_ok] {
            match flag {
                Some(b) => out.push_str(&format!(",{b}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Everything an observer may inspect after one full iteration (primal step,
/// loss evaluation, dual step).
pub struct IterationView<'a> {
    pub t: usize,
    pub a_t: f64,
    /// `A_t`.
    pub a_cum: f64,
    /// `A_{t-1}`.
    pub a_cum_prev: f64,
    pub w: &'a [f64],
    pub lambda: &'a SimplexVector,
    pub losses: &'a [f64],
    /// Per-group inner products `w_t . x_j` at the current iterate.
    pub dots: &'a [Vec<f64>],
    /// Per-group residuals `sigma(w_t . x_j) - y_j`.
    pub residuals: &'a [Vec<f64>],
}

/// Flags an observer may attach to the trace row of the iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TraceFlags {
    pub gap_lb_ok: Option<bool>,
    pub eq5_ok: Option<bool>,
}

/// Per-iteration hook, e.g. the trajectory checks in `oracles`.
pub trait SolverObserver {
    fn observe(&mut self, view: &IterationView<'_>) -> TraceFlags;
}

/// Run controls. `run` always executes exactly `n_iters` iterations unless
/// the caller explicitly opts into distance-based early stopping.
#[derive(Default)]
pub struct RunOptions {
    /// Planted parameter; enables the `dist_sq_to_wstar` trace column.
    pub w_star: Option<Vec<f64>>,
    /// Stop once `||w_t - w_star||^2 <= tol` (requires `w_star`).
    pub dist_sq_target: Option<f64>,
    /// Record one `TraceRecord` per iteration.
    pub record_trace: bool,
    /// The analysis assumes labels were truncated; runs on raw datasets must
    /// opt out explicitly.
    pub allow_untruncated: bool,
}

/// Result of a solver run.
pub struct RunResult {
    pub w: Vec<f64>,
    pub lambda: SimplexVector,
    pub trace: Vec<TraceRecord>,
    pub iterations: usize,
    pub stopped_early: bool,
}

/// Execute the primal-dual loop for `n_iters` iterations.
pub fn run(
    cfg: &SolverConfig,
    ds: &GroupDataset,
    activation: &Activation,
    n_iters: usize,
    options: &RunOptions,
) -> Result<RunResult> {
    run_with_observer(cfg, ds, activation, n_iters, options, None)
}

/// [`run`] with an optional per-iteration observer.
pub fn run_with_observer(
    cfg: &SolverConfig,
    ds: &GroupDataset,
    activation: &Activation,
    n_iters: usize,
    options: &RunOptions,
    mut observer: Option<&mut dyn SolverObserver>,
) -> Result<RunResult> {
    cfg.validate()?;
    ds.validate()?;
    if ds.k != cfg.k {
        return Err(Error::InvalidInput(format!(
            "config expects K = {}, dataset has K = {}",
            cfg.k, ds.k
        )));
    }
    if n_iters == 0 {
        return Err(Error::InvalidParameter("n_iters must be >= 1".into()));
    }
    if options.dist_sq_target.is_some() && options.w_star.is_none() {
        return Err(Error::InvalidParameter(
            "dist_sq_target requires w_star".into(),
        ));
    }
    if ds.meta.truncation_m.is_none() && !options.allow_untruncated {
        return Err(Error::InvalidParameter(
            "dataset labels are not truncated; set allow_untruncated to run anyway".into(),
        ));
    }
    let started = Instant::now();
    let d = ds.d;
    let beta = cfg.beta;

    let mut w_prev = vec![0.0; d];
    let mut lambda_prev = SimplexVector::uniform(cfg.k);
    let mut lambda_curr = SimplexVector::uniform(cfg.k);
    let mut a_prev = 0.0;
    let mut a_cum = 0.0;

    // Residuals and inner products at w_{t-1}; seeded at w_0 = 0.
    let mut dots: Vec<Vec<f64>> = ds.groups.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut residuals: Vec<Vec<f64>> = ds
        .groups
        .iter()
        .map(|g| {
            let s0 = activation.value(0.0);
            g.ys.iter().map(|&y| s0 - y).collect()
        })
        .collect();

    let mut trace = Vec::new();
    let mut gradient = vec![0.0; d];
    let mut stopped_early = false;
    let mut iterations = 0;

    for t in 1..=n_iters {
        let a_t = step_size(cfg, t);
        let a_cum_prev = a_cum;
        a_cum += a_t;

        let lambda_bar = extrapolate_dual(&lambda_curr, &lambda_prev, a_prev, a_t);

        // Weighted surrogate gradient at w_{t-1} from cached residuals.
        gradient.iter_mut().for_each(|gd| *gd = 0.0);
        for (gi, group) in ds.groups.iter().enumerate() {
            if lambda_bar[gi] == 0.0 {
                continue;
            }
            let scale = lambda_bar[gi] * 2.0 * beta / group.len() as f64;
            for (j, &r) in residuals[gi].iter().enumerate() {
                axpy(&mut gradient, scale * r, group.x(j, d));
            }
        }

        let w = primal_step(cfg, &w_prev, &gradient, a_t, a_cum);

        // Losses at w_t; refresh the caches for the next gradient.
        let mut losses = Vec::with_capacity(cfg.k);
        for (gi, group) in ds.groups.iter().enumerate() {
            let mut acc = 0.0;
            let (zs, rs) = (&mut dots[gi], &mut residuals[gi]);
            for j in 0..group.len() {
                let z = dot(&w, group.x(j, d));
                let r = activation.value(z) - group.ys[j];
                zs[j] = z;
                rs[j] = r;
                acc += r * r;
            }
            losses.push(acc / group.len() as f64);
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                iteration: t,
                what: "per-group loss".into(),
            });
        }

        let lambda_next = dual_step(cfg, &lambda_curr, &losses, a_t, a_cum_prev)?;

        lambda_prev = std::mem::replace(&mut lambda_curr, lambda_next);
        w_prev = w;
        a_prev = a_t;
        iterations = t;

        let dist_sq = options.w_star.as_deref().map(|ws| dist_sq(&w_prev, ws));
        let flags = if let Some(obs) = observer.as_deref_mut() {
            obs.observe(&IterationView {
                t,
                a_t,
                a_cum,
                a_cum_prev,
                w: &w_prev,
                lambda: &lambda_curr,
                losses: &losses,
                dots: &dots,
                residuals: &residuals,
            })
        } else {
            TraceFlags::default()
        };

        if options.record_trace {
            trace.push(TraceRecord {
                t,
                a_t,
                a_cum,
                losses,
                lambda: lambda_curr.as_slice().to_vec(),
                dist_sq_to_wstar: dist_sq,
                gap_lb_ok: flags.gap_lb_ok,
                eq5_ok: flags.eq5_ok,
                wall_clock: started.elapsed().as_secs_f64(),
            });
        }

        if let (Some(target), Some(dsq)) = (options.dist_sq_target, dist_sq) {
            if dsq <= target {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(RunResult {
        w: w_prev,
        lambda: lambda_curr,
        trace,
        iterations,
        stopped_early,
    })
}

/// Iteration budget implied by the convergence bound: the smallest `n` with
/// `4 D0 / (1 + 0.5 c1 A_n) <= eps`, where `D0 = W^2/2 + nu0 * D_max` uses
/// the feasible radius as a proxy for the unknown `||w_star||` and `D_max`
/// bounds the initial dual divergence (`ln K` for KL, `K - 1` for
/// chi-squared). Returns `None` when the cap is exhausted first.
pub fn compute_iteration_budget(cfg: &SolverConfig, cap: usize) -> Option<usize> {
    let c = cfg.constants();
    let d_max = match cfg.divergence {
        DivergenceKind::ChiSquared => cfg.k as f64 - 1.0,
        _ => (cfg.k as f64).ln(),
    };
    let d0 = cfg.w_radius * cfg.w_radius / 2.0 + c.nu0 * d_max;
    let mut a_cum = 0.0;
    for t in 1..=cap {
        a_cum += step_size(cfg, t);
        if 4.0 * d0 / (1.0 + 0.5 * cfg.c1 * a_cum) <= cfg.eps {
            return Some(t);
        }
    }
    None
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
fn axpy(acc: &mut [f64], coeff: f64, x: &[f64]) {
    for (a, &xi) in acc.iter_mut().zip(x) {
        *a += coeff * xi;
    }
}

/// Squared Euclidean distance.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig, Marginal, NoiseModel};
    use approx::assert_abs_diff_eq;

    fn test_cfg(k: usize) -> SolverConfig {
        SolverConfig {
            nu: 0.0,
            eps: 1e-3,
            w_radius: 2.0,
            beta: 1.0,
            b_tail: 1.0,
            c1: 0.25,
            c_m: 1.0,
            k,
            max_iters: 100_000,
            divergence: DivergenceKind::Kl,
        }
    }

    fn gaussian_ds(k: usize, w_star: &[f64], n: usize, seed: u64) -> GroupDataset {
        let cfg = GeneratorConfig {
            marginal: Marginal::StandardGaussian,
            noise: NoiseModel::None,
            b_tail: 1.0,
            gamma: 0.5,
            zeta: 0.25,
            w_radius: 2.0,
            seed,
        };
        generate(&cfg, k, w_star, &Activation::relu(), n).unwrap()
    }

    #[test]
    fn constants_match_formulas() {
        let cfg = test_cfg(5);
        let c = cfg.constants();
        assert_eq!(c.nu0, cfg.eps / 20.0);
        assert_abs_diff_eq!(c.c3, 31.0 / 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c4, 27.0 * 0.25 + 2163.0 / 0.25, epsilon = 1e-9);
        let log_term = (2.0f64 / 1e-3).ln();
        assert_abs_diff_eq!(c.c_w, (6.0 + log_term * log_term).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            c.c_w_prime,
            2.0 * 3.0f64.sqrt() * c.c_w * 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn step_size_t1_closed_form() {
        let cfg = test_cfg(5);
        let c = cfg.constants();
        let expect = (1.0 / (4.0 * c.c4)).min(
            (c.nu0.sqrt() / (4.0 * c.c_w_prime))
                .max(cfg.c1 * c.nu0 / (32.0 * c.c_w_prime * c.c_w_prime)),
        );
        assert_abs_diff_eq!(step_size(&cfg, 1), expect, epsilon = 1e-18);
    }

    #[test]
    fn step_size_non_decreasing() {
        for (nu, c1, eps) in [(0.0, 0.25, 1e-3), (0.5, 1e-4, 1e-2), (2.0, 0.01, 1e-4)] {
            let mut cfg = test_cfg(4);
            cfg.nu = nu;
            cfg.c1 = c1;
            cfg.eps = eps;
            let mut prev = 0.0;
            for t in 1..=10_000 {
                let a = step_size(&cfg, t);
                assert!(a >= prev, "a_t decreased at t={t} for nu={nu}");
                prev = a;
            }
        }
    }

    #[test]
    fn step_size_nu_zero_linear_branch_dominates_eventually() {
        let mut cfg = test_cfg(4);
        cfg.nu = 0.0;
        let c = cfg.constants();
        // With nu = 0 the geometric-in-nu branch degenerates to the constant
        // sqrt(nu0)/(4 C'_W); the linear branch grows past it.
        let geo_const = c.nu0.sqrt() / (4.0 * c.c_w_prime);
        let slope = cfg.c1 * c.nu0 / (32.0 * c.c_w_prime * c.c_w_prime);
        let t_late = (geo_const / slope).ceil() as usize + 10;
        let linear_late = slope * t_late as f64;
        assert!(linear_late > geo_const);
    }

    #[test]
    fn surrogate_gradient_hand_case() {
        let g = surrogate_gradient(&Activation::relu(), &[1.0, 0.0], &[2.0, 1.0], 1.0, 1.0);
        assert_eq!(g, vec![4.0, 2.0]);
    }

    #[test]
    fn surrogate_gradient_zero_cases() {
        let act = Activation::relu();
        // Zero residual.
        let g = surrogate_gradient(&act, &[1.0], &[3.0], 3.0, 1.0);
        assert_eq!(g, vec![0.0]);
        // Zero covariate.
        let g = surrogate_gradient(&act, &[1.0, 1.0], &[0.0, 0.0], 1.0, 1.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn averaged_gradient_linearity() {
        let ds = gaussian_ds(2, &[0.4, -0.2], 30, 3);
        let act = Activation::relu();
        let w = [0.1, 0.1];
        let g1 = averaged_gradient(&ds, &act, &w, &[1.0, 0.0], 1.0);
        let g2 = averaged_gradient(&ds, &act, &w, &[0.0, 1.0], 1.0);
        let combo = averaged_gradient(&ds, &act, &w, &[2.0, -1.0], 1.0);
        for i in 0..2 {
            assert_abs_diff_eq!(combo[i], 2.0 * g1[i] - g2[i], epsilon = 1e-12);
        }
        let zero = averaged_gradient(&ds, &act, &w, &[0.0, 0.0], 1.0);
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn extrapolation_cases() {
        let curr = SimplexVector::new(vec![0.9, 0.1]).unwrap();
        let prev = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        // Zero momentum at t = 1.
        assert_eq!(extrapolate_dual(&curr, &prev, 0.0, 0.5), curr.as_slice());
        // Equal steps: 2 curr - prev, leaving the simplex.
        let bar = extrapolate_dual(&curr, &prev, 0.5, 0.5);
        assert_abs_diff_eq!(bar[0], 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(bar[1], -0.3, epsilon = 1e-15);
        // No movement.
        assert_eq!(extrapolate_dual(&curr, &curr, 0.7, 0.9), curr.as_slice());
    }

    #[test]
    fn primal_step_projection() {
        let cfg = test_cfg(2);
        // Zero gradient keeps the point.
        let w = primal_step(&cfg, &[0.5, 0.5], &[0.0, 0.0], 0.1, 0.1);
        assert_eq!(w, vec![0.5, 0.5]);
        // A huge step lands on the boundary.
        let g = vec![-4.0 * cfg.w_radius / 0.1, 0.0];
        let w = primal_step(&cfg, &[0.0, 0.0], &g, 0.1, 0.0);
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert_abs_diff_eq!(norm, cfg.w_radius, epsilon = 1e-12);
    }

    #[test]
    fn dual_step_kl_closed_form() {
        // K=2, nu=0, nu0=0.5, a_t=1, uniform anchor, losses=(1,0):
        // lambda ∝ exp(l_i / nu0) -> (e^2, 1).
        let mut cfg = test_cfg(2);
        cfg.eps = 4.0; // nu0 = eps/(4K) = 0.5
        let out = dual_step(&cfg, &SimplexVector::uniform(2), &[1.0, 0.0], 1.0, 0.0).unwrap();
        let e2 = (2.0f64).exp();
        assert_abs_diff_eq!(out[0], e2 / (e2 + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.0 / (e2 + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn dual_step_equal_losses_keeps_anchor() {
        let cfg = test_cfg(3);
        let anchor = SimplexVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let out = dual_step(&cfg, &anchor, &[0.7, 0.7, 0.7], 0.05, 0.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(out[i], anchor[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn dual_step_chi2_large_nu_near_uniform() {
        // At t = 1 the Bregman weight is only nu0, so a large nu makes the
        // uniform-pulling penalty dominate both the losses and the anchor.
        let mut cfg = test_cfg(3);
        cfg.divergence = DivergenceKind::ChiSquared;
        cfg.nu = 500.0;
        let anchor = SimplexVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let out = dual_step(&cfg, &anchor, &[1.0, 0.0, 0.5], 1.0, 0.0).unwrap();
        for i in 0..3 {
            assert!((out[i] - 1.0 / 3.0).abs() < 1e-3, "out = {out:?}");
        }
    }

    #[test]
    fn losses_at_w_star_vanish_on_realizable_data() {
        let w_star = vec![0.7, -0.4, 0.2];
        let ds = gaussian_ds(3, &w_star, 100, 9);
        let losses = evaluate_losses(&ds, &Activation::relu(), &w_star);
        assert!(losses.iter().all(|&l| l <= 1e-24), "losses = {losses:?}");
    }

    #[test]
    fn losses_at_zero_equal_mean_square_labels() {
        let ds = gaussian_ds(2, &[0.5, 0.5], 50, 21);
        let losses = evaluate_losses(&ds, &Activation::relu(), &[0.0, 0.0]);
        for (gi, g) in ds.groups.iter().enumerate() {
            let expect = g.ys.iter().map(|y| y * y).sum::<f64>() / g.len() as f64;
            assert_abs_diff_eq!(losses[gi], expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn risk_reductions() {
        let ds = gaussian_ds(3, &[0.5, 0.5], 40, 33);
        let act = Activation::relu();
        let w = [0.1, 0.0];
        let losses = evaluate_losses(&ds, &act, &w);
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let r0 = dro_risk(&ds, &act, &w, DivergenceKind::Kl, 0.0).unwrap();
        assert_eq!(r0, max);
        // KL with nu=1 is the log-mean-exp of the losses.
        let r1 = dro_risk(&ds, &act, &w, DivergenceKind::Kl, 1.0).unwrap();
        let lme = (losses.iter().map(|l| l.exp()).sum::<f64>() / 3.0).ln();
        assert_abs_diff_eq!(r1, lme, epsilon = 1e-12);
    }

    #[test]
    fn run_zero_dataset_stays_at_zero() {
        let mut ds = gaussian_ds(2, &[0.5, 0.5], 10, 1);
        for g in &mut ds.groups {
            g.xs.iter_mut().for_each(|x| *x = 0.0);
            g.ys.iter_mut().for_each(|y| *y = 0.0);
        }
        let cfg = test_cfg(2);
        let opts = RunOptions {
            allow_untruncated: true,
            ..Default::default()
        };
        let out = run(&cfg, &ds, &Activation::relu(), 50, &opts).unwrap();
        assert!(out.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn run_single_group_keeps_unit_dual() {
        let ds = gaussian_ds(1, &[0.5], 30, 5);
        let cfg = test_cfg(1);
        let opts = RunOptions {
            allow_untruncated: true,
            ..Default::default()
        };
        let out = run(&cfg, &ds, &Activation::relu(), 20, &opts).unwrap();
        assert_eq!(out.lambda.as_slice(), &[1.0]);
    }

    #[test]
    fn run_is_deterministic() {
        let ds = gaussian_ds(3, &[0.4, 0.3], 60, 77);
        let cfg = test_cfg(3);
        let opts = RunOptions {
            record_trace: true,
            allow_untruncated: true,
            ..Default::default()
        };
        let a = run(&cfg, &ds, &Activation::relu(), 200, &opts).unwrap();
        let b = run(&cfg, &ds, &Activation::relu(), 200, &opts).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(trace_to_csv(&a.trace, 3), trace_to_csv(&b.trace, 3));
    }

    #[test]
    fn run_feasibility_invariant() {
        let ds = gaussian_ds(2, &[1.2, 0.9], 100, 13);
        let mut cfg = test_cfg(2);
        cfg.w_radius = 2.0;
        let opts = RunOptions {
            record_trace: true,
            allow_untruncated: true,
            ..Default::default()
        };
        let out = run(&cfg, &ds, &Activation::relu(), 500, &opts).unwrap();
        let norm = out.w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= cfg.w_radius + 1e-12);
    }

    #[test]
    fn gradient_cache_matches_direct_computation() {
        // One iteration by hand: the run's first primal step must equal the
        // public building blocks composed directly.
        let ds = gaussian_ds(2, &[0.6, -0.3], 40, 55);
        let act = Activation::relu();
        let cfg = test_cfg(2);
        let opts = RunOptions {
            allow_untruncated: true,
            ..Default::default()
        };
        let out = run(&cfg, &ds, &act, 1, &opts).unwrap();

        let a1 = step_size(&cfg, 1);
        let lambda_bar = vec![0.5, 0.5];
        let g = averaged_gradient(&ds, &act, &[0.0, 0.0], &lambda_bar, cfg.beta);
        let w1 = primal_step(&cfg, &[0.0, 0.0], &g, a1, a1);
        for (a, b) in out.w.iter().zip(&w1) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let ds = gaussian_ds(2, &[0.5, 0.2], 20, 2);
        let cfg = test_cfg(2);
        let opts = RunOptions {
            record_trace: true,
            w_star: Some(vec![0.5, 0.2]),
            allow_untruncated: true,
            ..Default::default()
        };
        let out = run(&cfg, &ds, &Activation::relu(), 3, &opts).unwrap();
        let csv = trace_to_csv(&out.trace, 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,a_t,A_t,loss_1,loss_2,lambda_1,lambda_2,dist_sq_to_wstar,gap_lb_ok,eq5_ok"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        assert!(
            first.ends_with(",,"),
            "flags empty when no observer ran: {first}"
        );
    }

    #[test]
    fn run_aborts_on_non_finite_loss() {
        let mut ds = gaussian_ds(2, &[0.5, 0.5], 10, 1);
        ds.groups[0].ys[0] = 1e308; // squared residual overflows
        let cfg = test_cfg(2);
        let opts = RunOptions {
            allow_untruncated: true,
            ..Default::default()
        };
        match run(&cfg, &ds, &Activation::relu(), 10, &opts) {
            Err(crate::error::Error::NonFinite { iteration, .. }) => assert_eq!(iteration, 1),
            Err(e) => panic!("expected NonFinite error, got {e}"),
            Ok(_) => panic!("expected NonFinite error, got success"),
        }
    }

    #[test]
    fn run_requires_truncation_or_optout() {
        let ds = gaussian_ds(2, &[0.5, 0.5], 10, 1);
        let cfg = test_cfg(2);
        assert!(run(&cfg, &ds, &Activation::relu(), 5, &RunOptions::default()).is_err());
        let truncated = crate::data::truncate_labels(&ds, 2.0, 1.0, 1.0, 1e-3, 1.0).unwrap();
        assert!(run(
            &cfg,
            &truncated,
            &Activation::relu(),
            5,
            &RunOptions::default()
        )
        .is_ok());
    }

    #[test]
    fn budget_is_finite_for_reasonable_configs() {
        let cfg = test_cfg(5);
        let n = compute_iteration_budget(&cfg, 100_000_000).unwrap();
        assert!(n > 1000);
    }
}
