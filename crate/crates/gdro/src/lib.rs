//! Group distributionally robust learning of a single neuron.
//!
//! The library solves, over the empirical group distributions, the saddle-point
//! problem
//!
//! ```text
//! min_{||w|| <= W}  max_{lambda in simplex}
//!     sum_i lambda_i * E_i[(sigma(w.x) - y)^2]  -  nu * d_f(lambda, 1/K)
//! ```
//!
//! with a primal-dual method that extrapolates on the low-dimensional dual
//! (group-weight) side. The crate is organized around that pipeline:
//!
//! * [`activation`]: the `(alpha, beta)`-unbounded activation contract and
//!   concrete instances (ReLU, leaky ReLU), plus grid-based validity checks.
//! * [`divergence`]: simplex vectors, KL / chi-squared penalties, Bregman
//!   divergences, and the regularized simplex argmax used by the dual update.
//! * [`data`]: synthetic K-group dataset generation, adversarial label
//!   corruption, label truncation, margin/tail certificates, and persistence.
//! * [`solver`]: the primal-dual loop itself: step-size schedule, surrogate
//!   gradients, ball-projected primal steps, Bregman dual steps, traces.
//! * [`oracles`]: brute-force and reference computations that ground every
//!   derived quantity: empirical benchmarks, the gap function, grid search,
//!   sharpness/moment certificates, and a generic numeric simplex maximizer.
//! * [`baselines`]: uniform-weight SGD, exponential-ascent reweighting, the
//!   practical PD-KL reweighting rule, and a toy multi-domain stream simulator.

// Validators use negated comparisons (`!(x > 0.0)`) on purpose: they must
// reject NaN, which plain `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod baselines;
pub mod data;
pub mod divergence;
pub mod error;
pub mod oracles;
pub mod solver;

pub use error::{Error, Result};

pub use activation::Activation;
pub use data::{GeneratorConfig, GroupDataset};
pub use divergence::{DivergenceKind, DivergencePenalty, SimplexVector};
pub use solver::{SolverConfig, TraceRecord};
