//! Comparison reweighters and a toy multi-domain streaming harness.
//!
//! `pdkl_update` is the practical dual update used for on-the-fly domain
//! reweighting: a log-space ascent step followed by a softmax, dual-side
//! extrapolation, and uniform mixing,
//!
//! ```text
//! z       = ln(lambda + floor_eps) + eta * diff
//! next    = softmax(z)
//! extra   = next + extrapolation_factor * (next - lambda)
//! result  = (1 - mix_c) * extra + mix_c / K
//! ```
//!
//! The extrapolated vector can leave the simplex before mixing; the default
//! mode clamps negatives and renormalizes so downstream samplers always see
//! valid proportions, while the strict mode reproduces the arithmetic above
//! verbatim. With `extrapolation_factor = 0`, `mix_c = 0`, and the floor
//! removed, the update collapses to the exponential-ascent rule
//! `lambda_i ∝ lambda_i exp(eta diff_i)`.
//!
//! The stream simulator trains one-dimensional least-squares domains with
//! log-uniform condition numbers under a shared compute budget: the weight a
//! reweighter assigns to a domain scales that domain's effective step size,
//! so persistently slow domains only catch up if the reweighter shifts mass
//! toward them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::GroupDataset;
use crate::divergence::SimplexVector;
use crate::error::{Error, Result};
use crate::solver::{averaged_gradient, project_ball};

/// Dual learning rate, extrapolation and mixing knobs of the PD-KL rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweighterConfig {
    pub eta: f64,
    pub extrapolation_factor: f64,
    /// Uniform-mixing coefficient in `[0, 1)`.
    pub mix_c: f64,
    /// Positivity floor inside the log.
    pub floor_eps: f64,
}

impl Default for ReweighterConfig {
    fn default() -> Self {
        ReweighterConfig {
            eta: 0.1,
            extrapolation_factor: 0.0,
            mix_c: 0.0,
            floor_eps: 1e-6,
        }
    }
}

impl ReweighterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidParameter("eta must be positive".into()));
        }
        if !(self.extrapolation_factor >= 0.0) {
            return Err(Error::InvalidParameter(
                "extrapolation_factor must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mix_c) {
            return Err(Error::InvalidParameter("mix_c must lie in [0, 1)".into()));
        }
        if !(self.floor_eps >= 0.0) {
            return Err(Error::InvalidParameter("floor_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// Current and previous domain weights of a running reweighter.
///
/// In strict-listing mode the stored weights may carry negative entries;
/// everywhere else they are valid simplex vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub current: Vec<f64>,
    pub previous: Vec<f64>,
    pub step: usize,
}

impl StreamState {
    pub fn uniform(k: usize) -> Self {
        let u = vec![1.0 / k as f64; k];
        StreamState {
            current: u.clone(),
            previous: u,
            step: 0,
        }
    }
}

fn softmax_inplace(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// The listing arithmetic shared by both PD-KL modes: returns the mixed
/// weights before any clamping.
fn pdkl_raw(cfg: &ReweighterConfig, state: &StreamState, diff: &[f64]) -> Result<Vec<f64>> {
    cfg.validate()?;
    if diff.len() != state.current.len() {
        return Err(Error::InvalidInput(
            "diff length != number of domains".into(),
        ));
    }
    if diff.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite diff".into()));
    }
    let k = diff.len() as f64;
    let mut z: Vec<f64> = state
        .current
        .iter()
        .zip(diff)
        .map(|(&lam, &d)| (lam + cfg.floor_eps).ln() + cfg.eta * d)
        .collect();
    softmax_inplace(&mut z);
    Ok(z.iter()
        .zip(&state.current)
        .map(|(&next, &curr)| {
            let extra = next + cfg.extrapolation_factor * (next - curr);
            (1.0 - cfg.mix_c) * extra + cfg.mix_c / k
        })
        .collect())
}

/// PD-KL reweighting update. Clamps negatives and renormalizes after mixing,
/// then advances the state (previous <- current, current <- result).
pub fn pdkl_update(
    cfg: &ReweighterConfig,
    state: &mut StreamState,
    diff: &[f64],
) -> Result<SimplexVector> {
    let mixed = pdkl_raw(cfg, state, diff)?;
    let result = SimplexVector::project_clamped(&mixed)?;
    state.previous = std::mem::replace(&mut state.current, result.as_slice().to_vec());
    state.step += 1;
    Ok(result)
}

/// PD-KL update reproducing the listing verbatim: no clamp, no
/// renormalization, so the result may leave the simplex when extrapolating.
pub fn pdkl_update_strict(
    cfg: &ReweighterConfig,
    state: &mut StreamState,
    diff: &[f64],
) -> Result<Vec<f64>> {
    let mixed = pdkl_raw(cfg, state, diff)?;
    state.previous = std::mem::replace(&mut state.current, mixed.clone());
    state.step += 1;
    Ok(mixed)
}

/// Exponential-ascent (multiplicative-weights) baseline:
/// `lambda_i ∝ lambda_i exp(eta diff_i)`.
pub fn exp_ascent_update(eta: f64, state: &mut StreamState, diff: &[f64]) -> Result<SimplexVector> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter("eta must be positive".into()));
    }
    if diff.len() != state.current.len() {
        return Err(Error::InvalidInput(
            "diff length != number of domains".into(),
        ));
    }
    if diff.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite diff".into()));
    }
    let mut z: Vec<f64> = state
        .current
        .iter()
        .zip(diff)
        .map(|(&lam, &d)| lam.ln() + eta * d)
        .collect();
    softmax_inplace(&mut z);
    let result = SimplexVector::new(z.clone()).or_else(|_| SimplexVector::project_clamped(&z))?;
    state.previous = std::mem::replace(&mut state.current, result.as_slice().to_vec());
    state.step += 1;
    Ok(result)
}

/// Naive baseline: projected surrogate-gradient descent on the
/// uniform-mixture loss.
pub fn uniform_sgd(
    ds: &GroupDataset,
    activation: &Activation,
    step: f64,
    n_iters: usize,
    w_radius: f64,
) -> Result<Vec<f64>> {
    if !(step >= 0.0) {
        return Err(Error::InvalidParameter("step must be >= 0".into()));
    }
    ds.validate()?;
    let weights = vec![1.0 / ds.k as f64; ds.k];
    let mut w = vec![0.0; ds.d];
    for _ in 0..n_iters {
        let g = averaged_gradient(ds, activation, &w, &weights, activation.beta());
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= step * gi;
        }
        project_ball(&mut w, w_radius);
    }
    Ok(w)
}

/// Reweighting policy driving a stream run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweighterKind {
    PdKl,
    ExpAscent,
    Uniform,
}

impl ReweighterKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pd-kl" => Ok(ReweighterKind::PdKl),
            "exp-ascent" => Ok(ReweighterKind::ExpAscent),
            "uniform" => Ok(ReweighterKind::Uniform),
            other => Err(Error::InvalidParameter(format!(
                "unknown reweighter {other:?} (expected \"pd-kl\", \"exp-ascent\", or \"uniform\")"
            ))),
        }
    }
}

/// Configuration of the toy multi-domain stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub k: usize,
    pub horizon: usize,
    /// Base learning rate of the per-domain models.
    pub lr: f64,
    /// Domain curvatures are drawn log-uniformly from this range; small
    /// curvature means slow convergence, i.e. a persistently hard domain.
    pub kappa_range: (f64, f64),
    /// Per-domain targets are drawn uniformly from this range.
    pub target_range: (f64, f64),
    pub reweighter: ReweighterConfig,
    /// EMA decay for the per-domain loss baselines defining `diff`.
    pub ema_decay: f64,
    /// Run the PD-KL rule verbatim (no clamping) instead of the repaired
    /// form.
    #[serde(default)]
    pub strict_listing: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            k: 8,
            horizon: 5000,
            lr: 2e-4,
            kappa_range: (1.0, 100.0),
            target_range: (0.5, 2.0),
            reweighter: ReweighterConfig::default(),
            ema_decay: 0.9,
            strict_listing: false,
            seed: 0,
        }
    }
}

/// One recorded stream step.
#[derive(Debug, Clone, Serialize)]
pub struct StreamStep {
    pub step: usize,
    pub worst_domain_loss: f64,
    pub mean_loss: f64,
    pub weights: Vec<f64>,
}

/// Simulate `horizon` steps of weighted training across `K` synthetic
/// domains. Each domain is a 1-d least-squares problem `loss_i = 0.5 kappa_i
/// (theta_i - target_i)^2`; per step every domain takes one gradient step
/// with effective rate `lr * K * weight_i`, the per-domain excess losses
/// over an EMA baseline form `diff`, and the selected reweighter updates the
/// weights. Deterministic given the config (the seed fixes curvatures and
/// targets).
pub fn simulate_stream(cfg: &StreamConfig, kind: ReweighterKind) -> Result<Vec<StreamStep>> {
    cfg.reweighter.validate()?;
    if cfg.horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::InvalidParameter(
            "need lr > 0 and ema_decay in [0,1)".into(),
        ));
    }
    let (kap_lo, kap_hi) = cfg.kappa_range;
    if !(kap_lo > 0.0 && kap_hi >= kap_lo) {
        return Err(Error::InvalidParameter("bad kappa_range".into()));
    }
    let (tgt_lo, tgt_hi) = cfg.target_range;
    if !(tgt_hi >= tgt_lo) {
        return Err(Error::InvalidParameter("bad target_range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k;
    let kappas: Vec<f64> = (0..k)
        .map(|_| (kap_lo.ln() + rng.gen::<f64>() * (kap_hi.ln() - kap_lo.ln())).exp())
        .collect();
    let targets: Vec<f64> = (0..k)
        .map(|_| tgt_lo + (tgt_hi - tgt_lo) * rng.gen::<f64>())
        .collect();

    let mut theta = vec![0.0f64; k];
    let mut state = StreamState::uniform(k);
    let mut ema: Option<Vec<f64>> = None;
    let mut trace = Vec::with_capacity(cfg.horizon);

    for step in 1..=cfg.horizon {
        // One gradient step per domain under the current weights.
        for i in 0..k {
            let rate = cfg.lr * k as f64 * state.current[i].max(0.0);
            theta[i] -= rate * kappas[i] * (theta[i] - targets[i]);
        }
        let losses: Vec<f64> = (0..k)
            .map(|i| 0.5 * kappas[i] * (theta[i] - targets[i]).powi(2))
            .collect();

        let baseline = ema.get_or_insert_with(|| losses.clone());
        let diff: Vec<f64> = losses
            .iter()
            .zip(baseline.iter())
            .map(|(&l, &b)| l - b)
            .collect();
        for (b, &l) in baseline.iter_mut().zip(&losses) {
            *b = cfg.ema_decay * *b + (1.0 - cfg.ema_decay) * l;
        }

        match kind {
            ReweighterKind::PdKl => {
                if cfg.strict_listing {
                    pdkl_update_strict(&cfg.reweighter, &mut state, &diff)?;
                } else {
                    pdkl_update(&cfg.reweighter, &mut state, &diff)?;
                }
            }
            ReweighterKind::ExpAscent => {
                exp_ascent_update(cfg.reweighter.eta, &mut state, &diff)?;
            }
            ReweighterKind::Uniform => {
                state.step += 1;
            }
        }

        let worst = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = losses.iter().sum::<f64>() / k as f64;
        trace.push(StreamStep {
            step,
            worst_domain_loss: worst,
            mean_loss: mean,
            weights: state.current.clone(),
        });
    }
    Ok(trace)
}

/// Render a stream trace as CSV: `step, worst_domain_loss, mean_loss,
/// w_1..w_K`.
pub fn stream_trace_to_csv(trace: &[StreamStep], k: usize) -> String {
    let mut out = String::from("step,worst_domain_loss,mean_loss");
    for i in 1..=k {
        out.push_str(&format!(",w_{i}"));
    }
    out.push('\n');
    for s in trace {
        out.push_str(&format!(
            "{},{},{}",
            s.step, s.worst_domain_loss, s.mean_loss
        ));
        for w in &s.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    out
}
