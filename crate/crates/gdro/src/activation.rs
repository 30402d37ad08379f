//! `(alpha, beta)`-unbounded activation functions.
//!
//! An activation `sigma` qualifies when it is non-decreasing, `beta`-Lipschitz,
//! grows at least linearly with slope `alpha > 0` on the nonnegative axis, and
//! satisfies `sigma(0) = 0`. The solver additionally relies on convexity and on
//! a subderivative selection with values in `[0, beta]`. Validity is certified
//! on a user grid rather than symbolically, so user-supplied activations with
//! no closed form can be checked too.

use std::fmt;
use std::sync::Arc;

use crate::error::Error;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A concrete activation together with its contract constants.
///
/// Immutable after construction; cheap to clone and safe to share across
/// threads.
#[derive(Clone)]
pub struct Activation {
    name: String,
    alpha: f64,
    beta: f64,
    value: ScalarFn,
    subderivative: ScalarFn,
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Activation")
            .field("name", &self.name)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .finish()
    }
}

impl Activation {
    /// ReLU: `sigma(t) = max(0, t)`, with `alpha = beta = 1`.
    ///
    /// The subderivative at the kink is tie-broken to the left limit, i.e.
    /// `subderivative(0) = 0`, so runs are deterministic. Any element of the
    /// subdifferential is valid for the analysis.
    pub fn relu() -> Self {
        Activation {
            name: "relu".to_string(),
            alpha: 1.0,
            beta: 1.0,
            value: Arc::new(|t| t.max(0.0)),
            subderivative: Arc::new(|t| if t > 0.0 { 1.0 } else { 0.0 }),
        }
    }

    /// Leaky ReLU: identity on `t >= 0`, slope `slope` on `t < 0`.
    ///
    /// On the nonnegative axis the growth slope is 1, so the contract
    /// constants are `alpha = beta = 1` regardless of `slope`.
    pub fn leaky_relu(slope: f64) -> Result<Self, Error> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        Ok(Activation {
            name: format!("leaky_relu:{slope}"),
            alpha: 1.0,
            beta: 1.0,
            value: Arc::new(move |t| if t >= 0.0 { t } else { slope * t }),
            subderivative: Arc::new(move |t| if t > 0.0 { 1.0 } else { slope }),
        })
    }

    /// Build an activation with custom value/subderivative maps.
    ///
    /// The caller asserts the contract constants; `validate` can check them
    /// on a grid afterwards.
    pub fn custom<F, G>(name: &str, alpha: f64, beta: f64, value: F, subderivative: G) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Activation {
            name: name.to_string(),
            alpha,
            beta,
            value: Arc::new(value),
            subderivative: Arc::new(subderivative),
        }
    }

    /// Parse a CLI name: `"relu"` or `"leaky_relu:<slope>"`.
    pub fn from_name(name: &str) -> Result<Self, Error> {
        if name == "relu" {
            return Ok(Self::relu());
        }
        if let Some(rest) = name.strip_prefix("leaky_relu:") {
            let slope: f64 = rest
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad leaky_relu slope {rest:?}")))?;
            return Self::leaky_relu(slope);
        }
        Err(Error::InvalidParameter(format!(
            "unknown activation {name:?} (expected \"relu\" or \"leaky_relu:<slope>\")"
        )))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Lower growth slope on the nonnegative axis.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Global Lipschitz constant.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        (self.value)(t)
    }

    #[inline]
    pub fn subderivative(&self, t: f64) -> f64 {
        (self.subderivative)(t)
    }
}

/// Outcome of one grid check in [`validate_activation`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// First violating grid pair `(t1, t2)` when the check failed. Pointwise
    /// checks store the offending point in both slots.
    pub first_violation: Option<(f64, f64)>,
}

/// Grid-certified report for the activation contract.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ActivationReport {
    pub checks: Vec<CheckResult>,
}

impl ActivationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Check the activation contract over all pairs of grid points, within `tol`.
///
/// Certifies: zero at the origin, monotonicity, `beta`-Lipschitzness,
/// `alpha`-growth on the nonnegative axis, convexity (via midpoint-style
/// interpolation at lambda in {1/4, 1/2, 3/4}), the subderivative range
/// `[0, beta]`, and the subgradient inequality
/// `value(s) >= value(t) + subderivative(t) * (s - t)`.
///
/// Certification is limited to the supplied grid; Lipschitzness outside it is
/// not checked.
pub fn validate_activation(spec: &Activation, grid: &[f64], tol: f64) -> ActivationReport {
    assert!(!grid.is_empty(), "validation grid must be non-empty");
    assert!(tol > 0.0, "tolerance must be positive");

    let mut checks = Vec::new();

    let zero = spec.value(0.0);
    checks.push(CheckResult {
        name: "zero_at_origin",
        passed: zero.abs() <= tol,
        first_violation: if zero.abs() <= tol {
            None
        } else {
            Some((0.0, 0.0))
        },
    });

    let mut monotone = CheckResult {
        name: "non_decreasing",
        passed: true,
        first_violation: None,
    };
    let mut lipschitz = CheckResult {
        name: "beta_lipschitz",
        passed: true,
        first_violation: None,
    };
    let mut growth = CheckResult {
        name: "alpha_unbounded",
        passed: true,
        first_violation: None,
    };
    let mut convex = CheckResult {
        name: "convexity",
        passed: true,
        first_violation: None,
    };
    let mut subgrad = CheckResult {
        name: "subgradient",
        passed: true,
        first_violation: None,
    };

    for &t1 in grid {
        for &t2 in grid {
            let v1 = spec.value(t1);
            let v2 = spec.value(t2);
            if t1 >= t2 {
                if monotone.passed && v1 < v2 - tol {
                    monotone.passed = false;
                    monotone.first_violation = Some((t1, t2));
                }
                if growth.passed && t2 >= 0.0 && v1 - v2 < spec.alpha() * (t1 - t2) - tol {
                    growth.passed = false;
                    growth.first_violation = Some((t1, t2));
                }
            }
            if lipschitz.passed && (v1 - v2).abs() > spec.beta() * (t1 - t2).abs() + tol {
                lipschitz.passed = false;
                lipschitz.first_violation = Some((t1, t2));
            }
            if convex.passed {
                for lam in [0.25, 0.5, 0.75] {
                    let mid = lam * t1 + (1.0 - lam) * t2;
                    if spec.value(mid) > lam * v1 + (1.0 - lam) * v2 + tol {
                        convex.passed = false;
                        convex.first_violation = Some((t1, t2));
                        break;
                    }
                }
            }
            if subgrad.passed && v1 < v2 + spec.subderivative(t2) * (t1 - t2) - tol {
                subgrad.passed = false;
                subgrad.first_violation = Some((t1, t2));
            }
        }
    }

    let mut subrange = CheckResult {
        name: "subderivative_range",
        passed: true,
        first_violation: None,
    };
    for &t in grid {
        let s = spec.subderivative(t);
        if !(-tol..=spec.beta() + tol).contains(&s) {
            subrange.passed = false;
            subrange.first_violation = Some((t, t));
            break;
        }
    }

    checks.push(monotone);
    checks.push(lipschitz);
    checks.push(growth);
    checks.push(convex);
    checks.push(subrange);
    checks.push(subgrad);
    ActivationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (-40..=40).map(|i| i as f64 * 0.25).collect()
    }

    #[test]
    fn relu_definition() {
        let a = Activation::relu();
        assert_eq!(a.value(-3.0), 0.0);
        assert_eq!(a.value(2.5), 2.5);
        assert_eq!(a.subderivative(0.0), 0.0);
        assert_eq!(a.alpha(), 1.0);
        assert_eq!(a.beta(), 1.0);
    }

    #[test]
    fn leaky_relu_definition() {
        let a = Activation::leaky_relu(0.1).unwrap();
        assert!((a.value(-2.0) - (-0.2)).abs() < 1e-15);
        assert_eq!(a.value(3.0), 3.0);
        assert!((a.subderivative(-1.0) - 0.1).abs() < 1e-15);
        assert_eq!(a.alpha(), 1.0);
        assert_eq!(a.beta(), 1.0);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        assert!(Activation::leaky_relu(0.0).is_err());
        assert!(Activation::leaky_relu(1.0).is_err());
        assert!(Activation::leaky_relu(-0.5).is_err());
    }

    #[test]
    fn relu_validates_on_grid() {
        let report = validate_activation(&Activation::relu(), &grid(), 1e-12);
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn leaky_relu_validates_on_grid() {
        let a = Activation::leaky_relu(0.3).unwrap();
        let report = validate_activation(&a, &grid(), 1e-12);
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn quadratic_fails_lipschitz() {
        let a = Activation::custom("square", 1.0, 1.0, |t| t * t, |t| 2.0 * t);
        let report = validate_activation(&a, &grid(), 1e-12);
        assert!(!report.check("beta_lipschitz").unwrap().passed);
    }

    #[test]
    fn shifted_fails_zero_at_origin() {
        let a = Activation::custom(
            "shifted",
            1.0,
            1.0,
            |t| t.max(0.0) + 1.0,
            |t| {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let report = validate_activation(&a, &grid(), 1e-12);
        assert!(!report.check("zero_at_origin").unwrap().passed);
    }

    #[test]
    fn relu_growth_is_exact_on_nonnegatives() {
        let a = Activation::relu();
        for i in 0..50 {
            for j in 0..=i {
                let t1 = i as f64 * 0.3;
                let t2 = j as f64 * 0.3;
                assert!(a.value(t1) - a.value(t2) >= 1.0 * (t1 - t2) - 0.0);
            }
        }
    }

    #[test]
    fn from_name_roundtrip() {
        assert_eq!(Activation::from_name("relu").unwrap().name(), "relu");
        let l = Activation::from_name("leaky_relu:0.2").unwrap();
        assert!((l.value(-1.0) + 0.2).abs() < 1e-15);
        assert!(Activation::from_name("sigmoid").is_err());
        assert!(Activation::from_name("leaky_relu:abc").is_err());
    }
}
