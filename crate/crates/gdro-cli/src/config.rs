//! JSON config documents consumed by the subcommands.

use serde::{Deserialize, Serialize};

use gdro::baselines::ReweighterConfig;
use gdro::data::GeneratorConfig;
use gdro::solver::SolverConfig;

/// How the target parameter is chosen when generating data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WStarSpec {
    /// Explicit vector.
    Vector { vector: Vec<f64> },
    /// A deterministic direction of the given norm, derived from the seed.
    Norm { norm: f64 },
}

/// Optional label truncation applied right after generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncateSpec {
    pub eps: f64,
    pub c_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub generator: GeneratorConfig,
    pub k: usize,
    pub d: usize,
    pub n_per_group: usize,
    pub activation: String,
    pub w_star: WStarSpec,
    #[serde(default)]
    pub truncate: Option<TruncateSpec>,
    /// Output file name inside the --out directory.
    #[serde(default = "default_dataset_name")]
    pub out_name: String,
}

fn default_dataset_name() -> String {
    "dataset.csv".to_string()
}

/// Where a command gets its dataset from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path { path: String },
    Inline { generate: Box<GenerateConfig> },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckSpec {
    #[serde(default)]
    pub eq5: bool,
    #[serde(default)]
    pub gap_lb: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    pub dataset: DatasetSource,
    pub solver: SolverConfig,
    /// Iterations to run; defaults to min(budget, solver.max_iters).
    #[serde(default)]
    pub n_iters: Option<usize>,
    /// Stop once dist^2 to the planted parameter reaches solver.eps
    /// (requires a dataset with a recorded w_star).
    #[serde(default)]
    pub stop_at_eps: bool,
    /// Explicit opt-out for running on datasets whose labels were never
    /// truncated.
    #[serde(default)]
    pub allow_untruncated: bool,
    #[serde(default)]
    pub checks: CheckSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharpnessSpec {
    /// Sharpness constant to verify; when absent it is derived from the
    /// generator's margin parameters.
    #[serde(default)]
    pub c0: Option<f64>,
    pub eps: f64,
    pub n_probes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub dataset: DatasetSource,
    pub gamma: f64,
    pub n_directions: usize,
    #[serde(default = "default_moment_bound")]
    pub moment_bound: f64,
    #[serde(default)]
    pub sharpness: Option<SharpnessSpec>,
    pub seed: u64,
}

fn default_moment_bound() -> f64 {
    6.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamCmdConfig {
    pub k: usize,
    pub horizon: usize,
    pub lr: f64,
    pub kappa_range: (f64, f64),
    pub target_range: (f64, f64),
    pub reweighter: ReweighterConfig,
    pub ema_decay: f64,
    /// Reweighters to compare, by name.
    pub reweighters: Vec<String>,
    /// Seeds 0..repeat are run and summarized by their median.
    pub repeat: usize,
    pub seed: u64,
}
