//! Synthetic K-group datasets: generation, corruption, truncation,
//! assumption certificates, and persistence.
//!
//! Generated data follows the single-neuron model `y = sigma(w_star . x)`
//! per group, with the x-marginal drawn from a configurable family (standard
//! Gaussian, per-group mean-shifted Gaussian, or uniform on `{-1,0,1}^d`) and
//! labels optionally perturbed by zero-mean Gaussian noise or adversarial
//! corruption. All randomness flows from one 64-bit seed, and generation is
//! single-threaded, so the same config reproduces the same dataset bit for
//! bit.
//!
//! The certificates here are sampling-based checks of the generator's
//! distributional assumptions (sub-exponential tails; a uniformly
//! well-conditioned second moment on margin regions), not proofs.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};

/// x-marginal family for the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    StandardGaussian,
    /// Gaussian with a per-group mean shift.
    ShiftedGaussian {
        shifts: Vec<Vec<f64>>,
    },
    /// Uniform on `{-1, 0, 1}^d`.
    UniformTernary,
}

/// Label noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    Gaussian {
        sigma: f64,
    },
    /// Replace a deterministic `eta` fraction of each group's labels with
    /// `-sign(sigma(w_star . x)) * magnitude` (worst direction, maximal
    /// magnitude within the truncation bound).
    Adversarial {
        eta: f64,
        magnitude: f64,
    },
}

/// Everything needed to synthesize a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub marginal: Marginal,
    pub noise: NoiseModel,
    /// Tail parameter the marginal is expected to satisfy.
    pub b_tail: f64,
    /// Margin parameters to validate (both in `(0, 1]`).
    pub gamma: f64,
    pub zeta: f64,
    /// Radius of the feasible parameter ball.
    pub w_radius: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if let NoiseModel::Gaussian { sigma } = self.noise {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "sigma_noise must be >= 0, got {sigma}"
                )));
            }
        }
        if let NoiseModel::Adversarial { eta, magnitude } = self.noise {
            if !(0.0..1.0).contains(&eta) {
                return Err(Error::InvalidParameter(format!(
                    "eta_corrupt must lie in [0,1), got {eta}"
                )));
            }
            if !(magnitude >= 0.0) {
                return Err(Error::InvalidParameter(
                    "corruption magnitude must be >= 0".into(),
                ));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("zeta", self.zeta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in (0,1], got {v}"
                )));
            }
        }
        if !(self.b_tail > 0.0) {
            return Err(Error::InvalidParameter("b_tail must be positive".into()));
        }
        if !(self.w_radius > 0.0) {
            return Err(Error::InvalidParameter("w_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Samples of one group, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Flattened `n x d` covariates.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn x(&self, j: usize, d: usize) -> &[f64] {
        &self.xs[j * d..(j + 1) * d]
    }
}

/// Generation provenance carried with the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorConfig,
    pub activation: String,
    pub n_per_group: usize,
    pub w_star: Option<Vec<f64>>,
    pub eta_corrupt: f64,
    /// Truncation bound `M`, once applied.
    pub truncation_m: Option<f64>,
}

/// K groups of labeled examples in dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDataset {
    pub k: usize,
    pub d: usize,
    pub groups: Vec<Group>,
    pub meta: DatasetMeta,
}

impl GroupDataset {
    pub fn validate(&self) -> Result<()> {
        if self.groups.len() != self.k || self.k == 0 {
            return Err(Error::InvalidDataset(format!(
                "expected {} non-empty groups, found {}",
                self.k,
                self.groups.len()
            )));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidDataset(format!("group {i} is empty")));
            }
            if g.xs.len() != g.len() * self.d {
                return Err(Error::InvalidDataset(format!(
                    "group {i}: covariate buffer has {} entries, expected {}",
                    g.xs.len(),
                    g.len() * self.d
                )));
            }
            if let Some(m) = self.meta.truncation_m {
                if g.ys.iter().any(|y| y.abs() > m) {
                    return Err(Error::InvalidDataset(format!(
                        "group {i}: label exceeds recorded truncation bound {m}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

fn draw_x(rng: &mut ChaCha8Rng, marginal: &Marginal, group: usize, d: usize, out: &mut Vec<f64>) {
    match marginal {
        Marginal::StandardGaussian => {
            for _ in 0..d {
                out.push(StandardNormal.sample(rng));
            }
        }
        Marginal::ShiftedGaussian { shifts } => {
            for &offset in shifts[group].iter().take(d) {
                let z: f64 = StandardNormal.sample(rng);
                out.push(z + offset);
            }
        }
        Marginal::UniformTernary => {
            for _ in 0..d {
                out.push(rng.gen_range(-1i8..=1) as f64);
            }
        }
    }
}

/// Generate `n_per_group` labeled samples for each of K groups.
///
/// K is the number of shift vectors for the shifted-Gaussian marginal;
/// otherwise it must be supplied via `k`. Labels are `sigma(w_star . x)` plus
/// the configured noise. Adversarial corruption flips the labels of the first
/// `round(eta * n)` indices of a seeded permutation of each group.
pub fn generate(
    cfg: &GeneratorConfig,
    k: usize,
    w_star: &[f64],
    activation: &Activation,
    n_per_group: usize,
) -> Result<GroupDataset> {
    cfg.validate()?;
    if n_per_group == 0 {
        return Err(Error::InvalidParameter("n_per_group must be >= 1".into()));
    }
    let d = w_star.len();
    if d == 0 {
        return Err(Error::InvalidParameter("w_star must be non-empty".into()));
    }
    let norm = w_star.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > cfg.w_radius {
        return Err(Error::InvalidParameter(format!(
            "||w_star|| = {norm} exceeds the feasible radius W = {}",
            cfg.w_radius
        )));
    }
    if let Marginal::ShiftedGaussian { shifts } = &cfg.marginal {
        if shifts.len() != k || shifts.iter().any(|s| s.len() != d) {
            return Err(Error::InvalidParameter(
                "shift vectors must be one per group, each of dimension d".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::with_capacity(k);
    let mut eta_corrupt = 0.0;
    for gi in 0..k {
        let mut xs = Vec::with_capacity(n_per_group * d);
        let mut ys = Vec::with_capacity(n_per_group);
        for j in 0..n_per_group {
            draw_x(&mut rng, &cfg.marginal, gi, d, &mut xs);
            let z = dot(&xs[j * d..(j + 1) * d], w_star);
            let clean = activation.value(z);
            let y = match cfg.noise {
                NoiseModel::None | NoiseModel::Adversarial { .. } => clean,
                NoiseModel::Gaussian { sigma } => {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    clean + sigma * e
                }
            };
            ys.push(y);
        }
        if let NoiseModel::Adversarial { eta, magnitude } = cfg.noise {
            eta_corrupt = eta;
            let n_corrupt = (eta * n_per_group as f64).round() as usize;
            let mut perm: Vec<usize> = (0..n_per_group).collect();
            // Fisher-Yates from the same stream keeps selection reproducible.
            for i in (1..n_per_group).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            for &j in perm.iter().take(n_corrupt) {
                let clean = activation.value(dot(&xs[j * d..(j + 1) * d], w_star));
                ys[j] = -clean.signum() * magnitude;
            }
        }
        groups.push(Group { xs, ys });
    }

    let ds = GroupDataset {
        k,
        d,
        groups,
        meta: DatasetMeta {
            generator: cfg.clone(),
            activation: activation.name().to_string(),
            n_per_group,
            w_star: Some(w_star.to_vec()),
            eta_corrupt,
            truncation_m: None,
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// The truncation bound `M = C_M * W * B * beta * ln(beta * B * W / eps)`.
pub fn truncation_bound(w: f64, b: f64, beta: f64, eps: f64, c_m: f64) -> Result<f64> {
    for (name, v) in [
        ("W", w),
        ("B", b),
        ("beta", beta),
        ("eps", eps),
        ("C_M", c_m),
    ] {
        if !(v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    let ratio = beta * b * w / eps;
    if ratio <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "beta*B*W/eps = {ratio} <= 1 makes the truncation bound non-positive"
        )));
    }
    Ok(c_m * w * b * beta * ratio.ln())
}

/// Clip every label to `[-M, M]` and record `M` in the metadata.
///
/// Clipping (`y' = sign(y) min(|y|, M)`) is the reading consistent with
/// labels being bounded by `M` after pre-processing.
pub fn truncate_labels(
    ds: &GroupDataset,
    w: f64,
    b: f64,
    beta: f64,
    eps: f64,
    c_m: f64,
) -> Result<GroupDataset> {
    let m = truncation_bound(w, b, beta, eps, c_m)?;
    let mut out = ds.clone();
    for g in &mut out.groups {
        for y in &mut g.ys {
            *y = y.signum() * y.abs().min(m);
        }
    }
    out.meta.truncation_m = Some(m);
    Ok(out)
}

/// Report of [`margin_certificate`].
#[derive(Debug, Clone, Serialize)]
pub struct MarginReport {
    pub gamma: f64,
    /// Minimum restricted second-moment eigenvalue per group, over directions.
    pub zeta_hat_per_group: Vec<f64>,
    /// Overall minimum over groups and directions.
    pub zeta_hat: f64,
    /// Set when some direction produced an empty margin region.
    pub empty_region_warning: bool,
}

/// Estimate the margin constant: for random unit directions `w`, the minimum
/// eigenvalue of the empirical second moment restricted to
/// `{x : w . x >= gamma}` per group.
pub fn margin_certificate(
    ds: &GroupDataset,
    gamma: f64,
    n_directions: usize,
    seed: u64,
) -> Result<MarginReport> {
    ds.validate()?;
    if n_directions == 0 {
        return Err(Error::InvalidParameter("n_directions must be >= 1".into()));
    }
    let d = ds.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zeta_hat_per_group = vec![f64::INFINITY; ds.k];
    let mut warning = false;

    for _ in 0..n_directions {
        let dir = random_unit(&mut rng, d);
        for (gi, g) in ds.groups.iter().enumerate() {
            let mut second = nalgebra::DMatrix::<f64>::zeros(d, d);
            let mut count = 0usize;
            for j in 0..g.len() {
                let x = g.x(j, d);
                if dot(x, &dir) >= gamma {
                    for a in 0..d {
                        for b in 0..d {
                            second[(a, b)] += x[a] * x[b];
                        }
                    }
                    count += 1;
                }
            }
            let min_eig = if count == 0 {
                warning = true;
                0.0
            } else {
                second /= g.len() as f64;
                nalgebra::SymmetricEigen::new(second)
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
            };
            zeta_hat_per_group[gi] = zeta_hat_per_group[gi].min(min_eig);
        }
    }
    let zeta_hat = zeta_hat_per_group
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(MarginReport {
        gamma,
        zeta_hat_per_group,
        zeta_hat,
        empty_region_warning: warning,
    })
}

/// Report of [`tail_certificate`].
#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    /// Smallest `B` per group such that `Pr(|u.x| >= r) <= exp(-r/B)` holds
    /// at the grid radii for all sampled directions.
    pub b_hat_per_group: Vec<f64>,
    pub b_hat: f64,
    pub radii: Vec<f64>,
}

/// Fit the sub-exponential tail parameter on grid radii `r in {1, 2, 4, 8}`
/// over random unit directions.
pub fn tail_certificate(ds: &GroupDataset, n_directions: usize, seed: u64) -> Result<TailReport> {
    ds.validate()?;
    if n_directions == 0 {
        return Err(Error::InvalidParameter("n_directions must be >= 1".into()));
    }
    let radii = vec![1.0, 2.0, 4.0, 8.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b_hat_per_group = vec![0.0f64; ds.k];
    for _ in 0..n_directions {
        let dir = random_unit(&mut rng, ds.d);
        for (gi, g) in ds.groups.iter().enumerate() {
            let n = g.len() as f64;
            for &r in &radii {
                let exceed = (0..g.len())
                    .filter(|&j| dot(g.x(j, ds.d), &dir).abs() >= r)
                    .count() as f64;
                let p = exceed / n;
                if p > 0.0 {
                    // exp(-r/B) >= p  <=>  B >= r / (-ln p).
                    b_hat_per_group[gi] = b_hat_per_group[gi].max(r / -p.ln());
                }
            }
        }
    }
    let b_hat = b_hat_per_group.iter().cloned().fold(0.0, f64::max);
    Ok(TailReport {
        b_hat_per_group,
        b_hat,
        radii,
    })
}

/// Heuristic per-group sample size with the uniform-convergence shape
/// `W^4 / eps^2 * (d ln(d W / eps) + ln(K / delta))`, constant 1.
///
/// The theory pins only this shape, not usable constants, so treat the result
/// as a starting point and scale as budget allows.
pub fn suggested_samples_per_group(d: usize, w: f64, eps: f64, k: usize, delta: f64) -> usize {
    let df = d as f64;
    let log_term = (df * w / eps).max(std::f64::consts::E).ln();
    let n = w.powi(4) / (eps * eps) * (df * log_term + (k as f64 / delta).ln());
    n.ceil().max(1.0) as usize
}

fn format_float(v: f64) -> String {
    // 17 significant digits round-trip any finite f64.
    format!("{v:.16e}")
}

/// Write the dataset: one JSON metadata header line, then CSV rows
/// `group_id, x_1..x_d, y` in 17-significant-digit decimal.
pub fn save(ds: &GroupDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut out = String::new();
    let header = serde_json::json!({
        "k": ds.k,
        "d": ds.d,
        "meta": ds.meta,
    });
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    out.push_str("group_id");
    for i in 1..=ds.d {
        write!(out, ",x_{i}").unwrap();
    }
    out.push_str(",y\n");
    for (gi, g) in ds.groups.iter().enumerate() {
        for j in 0..g.len() {
            write!(out, "{gi}").unwrap();
            for &x in g.x(j, ds.d) {
                out.push(',');
                out.push_str(&format_float(x));
            }
            out.push(',');
            out.push_str(&format_float(g.ys[j]));
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Inverse of [`save`]; fails with the offending line on malformed records.
pub fn load(path: &Path) -> Result<GroupDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header: serde_json::Value = serde_json::from_str(header).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad JSON header: {e}"),
    })?;
    let k = header["k"].as_u64().ok_or_else(|| Error::Parse {
        line: 1,
        message: "header missing integer field \"k\"".into(),
    })? as usize;
    let d = header["d"].as_u64().ok_or_else(|| Error::Parse {
        line: 1,
        message: "header missing integer field \"d\"".into(),
    })? as usize;
    let meta: DatasetMeta =
        serde_json::from_value(header["meta"].clone()).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad metadata: {e}"),
        })?;

    let (_, columns) = lines.next().ok_or_else(|| Error::Parse {
        line: 2,
        message: "missing column header".into(),
    })?;
    let expected_cols = d + 2;
    if columns.split(',').count() != expected_cols {
        return Err(Error::Parse {
            line: 2,
            message: format!("expected {expected_cols} columns for d = {d}"),
        });
    }

    let mut groups: Vec<Group> = (0..k)
        .map(|_| Group {
            xs: Vec::new(),
            ys: Vec::new(),
        })
        .collect();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {expected_cols} fields, found {}", fields.len()),
            });
        }
        let gi: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad group id {:?}", fields[0]),
        })?;
        if gi >= k {
            return Err(Error::Parse {
                line: lineno,
                message: format!("group id {gi} out of range (K = {k})"),
            });
        }
        let g = &mut groups[gi];
        for f in &fields[1..=d] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad float {f:?}"),
            })?;
            g.xs.push(v);
        }
        let y: f64 = fields[d + 1].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad float {:?}", fields[d + 1]),
        })?;
        g.ys.push(y);
    }

    let ds = GroupDataset { k, d, groups, meta };
    ds.validate()?;
    Ok(ds)
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

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
