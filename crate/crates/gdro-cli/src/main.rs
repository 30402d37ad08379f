//! Experiment runner and verification harness.
//!
//! Subcommands: `generate` (synthesize a dataset), `solve` (run the
//! primal-dual solver, emit a trace CSV and summary JSON), `verify` (run the
//! distributional-assumption certificates), `stream` (compare reweighters on
//! the toy multi-domain stream), and `plot` (render traces as SVG).
//!
//! Exit codes are a stable contract: 0 success, 2 config/input error, 3 an
//! enabled invariant check failed, 4 numeric failure inside the solver.

mod config;
mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use gdro::activation::Activation;
use gdro::baselines::{simulate_stream, ReweighterKind, StreamConfig};
use gdro::data::{self, GroupDataset};
use gdro::oracles::{
    compute_benchmarks, empirical_sharpness_check, moment_check, TrajectoryChecker,
    TrajectoryChecks,
};
use gdro::solver::{self, sharpness_constants, RunOptions, SolverConfig};

use config::{
    DatasetSource, GenerateConfig, SolveConfig, StreamCmdConfig, VerifyConfig, WStarSpec,
};

#[derive(Parser)]
#[command(
    name = "gdro",
    about = "Group DRO single-neuron experiment harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// Config file path; bare names resolve against ./configs/<name>.json.
    #[arg(long)]
    config: String,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from a generator config.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the solver; write trace.csv and summary.json.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Check the running potential bound at every iteration.
        #[arg(long)]
        check_eq5: bool,
        /// Check the gap lower bound at every iteration.
        #[arg(long)]
        check_gap_lb: bool,
    },
    /// Run margin/tail/moment/sharpness certificates; write report.json.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare reweighters on the toy multi-domain stream.
    Stream {
        #[command(flatten)]
        common: CommonArgs,
        /// Reproduce the reweighting listing verbatim (no clamping).
        #[arg(long)]
        strict_listing: bool,
    },
    /// Render trace CSVs to SVG files.
    Plot {
        /// Trace files to render.
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

struct CmdError {
    code: i32,
    message: String,
}

impl CmdError {
    fn config(message: impl Into<String>) -> Self {
        CmdError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<gdro::Error> for CmdError {
    fn from(e: gdro::Error) -> Self {
        let code = match e {
            gdro::Error::NonFinite { .. } => 4,
            _ => 2,
        };
        CmdError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CmdError {
    fn from(e: serde_json::Error) -> Self {
        CmdError {
            code: 2,
            message: format!("config parse error: {e}"),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => cmd_generate(&common),
        Command::Solve {
            common,
            check_eq5,
            check_gap_lb,
        } => cmd_solve(&common, check_eq5, check_gap_lb),
        Command::Verify { common } => cmd_verify(&common),
        Command::Stream {
            common,
            strict_listing,
        } => cmd_stream(&common, strict_listing),
        Command::Plot { traces, out } => cmd_plot(&traces, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn resolve_config(path: &str) -> Result<PathBuf, CmdError> {
    let p = PathBuf::from(path);
    if p.exists() {
        return Ok(p);
    }
    if !path.contains('/') && !path.ends_with(".json") {
        let named = PathBuf::from("configs").join(format!("{path}.json"));
        if named.exists() {
            return Ok(named);
        }
    }
    Err(CmdError::config(format!("config not found: {path}")))
}

fn load_config<T: serde::de::DeserializeOwned>(common: &CommonArgs) -> Result<T, CmdError> {
    let path = resolve_config(&common.config)?;
    let text = std::fs::read_to_string(&path)?;
    let value: T = serde_json::from_str(&text)?;
    Ok(value)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CmdError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn derive_w_star(spec: &WStarSpec, d: usize, seed: u64) -> Result<Vec<f64>, CmdError> {
    match spec {
        WStarSpec::Vector { vector } => {
            if vector.len() != d {
                return Err(CmdError::config(format!(
                    "w_star has dimension {}, expected {d}",
                    vector.len()
                )));
            }
            Ok(vector.clone())
        }
        WStarSpec::Norm { norm } => {
            use rand::SeedableRng;
            use rand_distr::Distribution;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5741_5354_4152u64);
            let v: Vec<f64> = (0..d)
                .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            Ok(v.iter().map(|x| x * norm / n).collect())
        }
    }
}

fn build_dataset(
    cfg: &GenerateConfig,
    seed_override: Option<u64>,
) -> Result<GroupDataset, CmdError> {
    let mut generator = cfg.generator.clone();
    if let Some(seed) = seed_override {
        generator.seed = seed;
    }
    let activation = Activation::from_name(&cfg.activation)?;
    let w_star = derive_w_star(&cfg.w_star, cfg.d, generator.seed)?;
    let ds = data::generate(&generator, cfg.k, &w_star, &activation, cfg.n_per_group)?;
    if let Some(t) = &cfg.truncate {
        Ok(data::truncate_labels(
            &ds,
            generator.w_radius,
            generator.b_tail,
            activation.beta(),
            t.eps,
            t.c_m,
        )?)
    } else {
        Ok(ds)
    }
}

fn resolve_dataset(
    source: &DatasetSource,
    seed_override: Option<u64>,
) -> Result<GroupDataset, CmdError> {
    match source {
        DatasetSource::Path { path } => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(CmdError::config(format!("dataset not found: {path}")));
            }
            Ok(data::load(p)?)
        }
        DatasetSource::Inline { generate } => build_dataset(generate, seed_override),
    }
}

fn cmd_generate(common: &CommonArgs) -> Result<(), CmdError> {
    let cfg: GenerateConfig = load_config(common)?;
    let ds = build_dataset(&cfg, common.seed)?;
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join(&cfg.out_name);
    data::save(&ds, &path)?;
    println!(
        "wrote {} (K={} d={} N={} corruption={:.3})",
        path.display(),
        ds.k,
        ds.d,
        ds.total_samples(),
        ds.meta.eta_corrupt
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    solver: &'a SolverConfig,
    constants: solver::Constants,
    n_iters_requested: usize,
    iterations: usize,
    stopped_early: bool,
    budget: Option<usize>,
    final_losses: Vec<f64>,
    final_lambda: Vec<f64>,
    final_risk: f64,
    dist_sq_to_wstar: Option<f64>,
    opt_hat: Option<f64>,
    eq5_ok: Option<bool>,
    gap_lb_ok: Option<bool>,
    eq5_violations: Option<usize>,
    gap_lb_violations: Option<usize>,
}

fn cmd_solve(common: &CommonArgs, check_eq5: bool, check_gap_lb: bool) -> Result<(), CmdError> {
    let mut cfg: SolveConfig = load_config(common)?;
    cfg.checks.eq5 |= check_eq5;
    cfg.checks.gap_lb |= check_gap_lb;
    let ds = resolve_dataset(&cfg.dataset, common.seed)?;
    let activation = Activation::from_name(ds.meta.activation.as_str())?;
    let solver_cfg = cfg.solver.clone();
    solver_cfg.validate()?;
    if ds.k != solver_cfg.k {
        return Err(CmdError::config(format!(
            "solver config expects K={}, dataset has K={}",
            solver_cfg.k, ds.k
        )));
    }

    let w_star = ds.meta.w_star.clone();
    let any_check = cfg.checks.eq5 || cfg.checks.gap_lb;
    if any_check && w_star.is_none() {
        return Err(CmdError::config(
            "trajectory checks need a dataset with a recorded w_star".to_string(),
        ));
    }
    if cfg.stop_at_eps && w_star.is_none() {
        return Err(CmdError::config(
            "stop_at_eps needs a recorded w_star".to_string(),
        ));
    }

    let budget = solver::compute_iteration_budget(&solver_cfg, 100_000_000);
    let n_iters = cfg.n_iters.unwrap_or_else(|| {
        budget
            .unwrap_or(solver_cfg.max_iters)
            .min(solver_cfg.max_iters)
    });

    let mut checker = match &w_star {
        Some(ws) if any_check => Some(TrajectoryChecker::new(
            &solver_cfg,
            &ds,
            &activation,
            ws,
            TrajectoryChecks {
                potential: cfg.checks.eq5,
                gap_lower_bound: cfg.checks.gap_lb,
                linearization: false,
                containment: false,
            },
            1e-9,
        )?),
        _ => None,
    };

    let opts = RunOptions {
        w_star: w_star.clone(),
        dist_sq_target: if cfg.stop_at_eps {
            Some(solver_cfg.eps)
        } else {
            None
        },
        record_trace: true,
        allow_untruncated: cfg.allow_untruncated,
    };
    let started = std::time::Instant::now();
    let out = solver::run_with_observer(
        &solver_cfg,
        &ds,
        &activation,
        n_iters,
        &opts,
        checker
            .as_mut()
            .map(|c| c as &mut dyn solver::SolverObserver),
    )?;
    eprintln!(
        "solve: {} iterations in {:.2}s",
        out.iterations,
        started.elapsed().as_secs_f64()
    );

    let trace_csv = solver::trace_to_csv(&out.trace, solver_cfg.k);
    let trace_path = write_out(&common.out, "trace.csv", &trace_csv)?;

    let final_risk = solver::dro_risk(
        &ds,
        &activation,
        &out.w,
        solver_cfg.divergence,
        solver_cfg.nu,
    )?;
    let report = checker.as_ref().map(|c| c.report.clone());
    let summary = SolveSummary {
        solver: &solver_cfg,
        constants: solver_cfg.constants(),
        n_iters_requested: n_iters,
        iterations: out.iterations,
        stopped_early: out.stopped_early,
        budget,
        final_losses: solver::evaluate_losses(&ds, &activation, &out.w),
        final_lambda: out.lambda.as_slice().to_vec(),
        final_risk,
        dist_sq_to_wstar: w_star.as_deref().map(|ws| solver::dist_sq(&out.w, ws)),
        opt_hat: match &w_star {
            Some(ws) => Some(
                compute_benchmarks(
                    &ds,
                    &activation,
                    ws,
                    solver_cfg.divergence,
                    solver_cfg.nu,
                    solver_cfg.constants().nu0,
                )?
                .opt_hat,
            ),
            None => None,
        },
        eq5_ok: report
            .as_ref()
            .map(|r| r.potential_violations == 0)
            .filter(|_| cfg.checks.eq5),
        gap_lb_ok: report
            .as_ref()
            .map(|r| r.gap_lb_violations == 0)
            .filter(|_| cfg.checks.gap_lb),
        eq5_violations: report
            .as_ref()
            .map(|r| r.potential_violations)
            .filter(|_| cfg.checks.eq5),
        gap_lb_violations: report
            .as_ref()
            .map(|r| r.gap_lb_violations)
            .filter(|_| cfg.checks.gap_lb),
    };
    let summary_path = write_out(
        &common.out,
        "summary.json",
        &format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    println!(
        "wrote {} and {}",
        trace_path.display(),
        summary_path.display()
    );

    if summary.eq5_ok == Some(false) || summary.gap_lb_ok == Some(false) {
        return Err(CmdError {
            code: 3,
            message: "enabled invariant checks failed".into(),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    margin: data::MarginReport,
    tail: data::TailReport,
    moment2: gdro::oracles::MomentReport,
    moment4: gdro::oracles::MomentReport,
    sharpness: Option<gdro::oracles::SharpnessReport>,
    sharpness_skipped_reason: Option<String>,
    all_passed: bool,
}

fn cmd_verify(common: &CommonArgs) -> Result<(), CmdError> {
    let cfg: VerifyConfig = load_config(common)?;
    let ds = resolve_dataset(&cfg.dataset, common.seed)?;
    let activation = Activation::from_name(ds.meta.activation.as_str())?;

    let margin = data::margin_certificate(&ds, cfg.gamma, cfg.n_directions, cfg.seed)?;
    let tail = data::tail_certificate(&ds, cfg.n_directions, cfg.seed.wrapping_add(1))?;
    let moment2 = moment_check(
        &ds,
        2,
        cfg.moment_bound,
        cfg.n_directions,
        cfg.seed.wrapping_add(2),
    )?;
    let moment4 = moment_check(
        &ds,
        4,
        cfg.moment_bound,
        cfg.n_directions,
        cfg.seed.wrapping_add(3),
    )?;

    let (sharpness, skipped) = match (&cfg.sharpness, &ds.meta.w_star) {
        (Some(spec), Some(w_star)) => {
            let c0 = spec.c0.unwrap_or_else(|| {
                sharpness_constants(
                    ds.meta.generator.gamma,
                    ds.meta.generator.zeta,
                    activation.alpha(),
                    ds.meta.generator.b_tail,
                )
                .0
            });
            let report = empirical_sharpness_check(
                &ds,
                &activation,
                w_star,
                c0,
                spec.eps,
                spec.n_probes,
                cfg.seed.wrapping_add(4),
            )?;
            (Some(report), None)
        }
        (Some(_), None) => (
            None,
            Some("dataset has no recorded w_star; sharpness check skipped".to_string()),
        ),
        (None, _) => (None, None),
    };

    let all_passed = margin.zeta_hat > 0.0
        && !margin.empty_region_warning
        && moment2.violations == 0
        && moment4.violations == 0
        && sharpness.as_ref().is_none_or(|s| s.violations == 0);
    let report = VerifyReport {
        margin,
        tail,
        moment2,
        moment4,
        sharpness,
        sharpness_skipped_reason: skipped,
        all_passed,
    };
    let path = write_out(
        &common.out,
        "report.json",
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )?;
    println!(
        "wrote {} (all_passed={})",
        path.display(),
        report.all_passed
    );
    Ok(())
}

fn cmd_stream(common: &CommonArgs, strict_listing: bool) -> Result<(), CmdError> {
    let cfg: StreamCmdConfig = load_config(common)?;
    if cfg.repeat == 0 {
        return Err(CmdError::config("repeat must be >= 1".to_string()));
    }
    let kinds: Vec<(String, ReweighterKind)> = cfg
        .reweighters
        .iter()
        .map(|name| ReweighterKind::from_name(name).map(|k| (name.clone(), k)))
        .collect::<Result<_, _>>()?;

    let base_seed = common.seed.unwrap_or(cfg.seed);
    std::fs::create_dir_all(&common.out)?;
    for (name, kind) in kinds {
        let seeds: Vec<u64> = (0..cfg.repeat as u64).map(|r| base_seed + r).collect();
        let traces = parallel_map(&seeds, |&seed| {
            let run_cfg = StreamConfig {
                k: cfg.k,
                horizon: cfg.horizon,
                lr: cfg.lr,
                kappa_range: cfg.kappa_range,
                target_range: cfg.target_range,
                reweighter: cfg.reweighter.clone(),
                ema_decay: cfg.ema_decay,
                strict_listing,
                seed,
            };
            simulate_stream(&run_cfg, kind)
        });
        let mut curves = Vec::with_capacity(traces.len());
        for t in traces {
            curves.push(t?);
        }
        // Per-step median of the worst-domain loss across seeds.
        let mut csv = String::from("step,median_worst_domain_loss\n");
        for step in 0..cfg.horizon {
            let mut vals: Vec<f64> = curves.iter().map(|c| c[step].worst_domain_loss).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = if vals.len() % 2 == 1 {
                vals[vals.len() / 2]
            } else {
                0.5 * (vals[vals.len() / 2 - 1] + vals[vals.len() / 2])
            };
            csv.push_str(&format!("{},{}\n", step + 1, m));
        }
        let path = write_out(&common.out, &format!("stream_{name}.csv"), &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Deterministic parallel map with the worker count capped by GDRO_THREADS.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::env::var("GDRO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .clamp(1, items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    out.into_iter().map(|r| r.unwrap()).collect()
}

fn cmd_plot(traces: &[PathBuf], out: &Path) -> Result<(), CmdError> {
    if traces.is_empty() {
        return Err(CmdError::config("no trace files given".to_string()));
    }
    let mut stream_series: Vec<plot::Series> = Vec::new();
    std::fs::create_dir_all(out)?;
    let mut wrote = Vec::new();
    for path in traces {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::config(format!("{}: {e}", path.display())))?;
        let table = plot::parse_csv(&text)
            .map_err(|e| CmdError::config(format!("{}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("trace")
            .to_string();

        if table.columns.iter().any(|c| c == "dist_sq_to_wstar") {
            // Solver trace: distance curve (when known) plus loss and weight
            // curves.
            let t = table
                .column("t")
                .ok_or_else(|| CmdError::config("missing t column".to_string()))?;
            if let Some(dist) = table.column("dist_sq_to_wstar") {
                if dist.iter().any(|d| d.is_finite()) {
                    let svg = plot::render_svg(
                        &format!("{stem}: distance to target"),
                        "iteration",
                        "dist_sq",
                        &[plot::Series {
                            label: "dist_sq_to_wstar".into(),
                            xs: t.clone(),
                            ys: dist,
                        }],
                    )
                    .map_err(|e| CmdError::config(e.to_string()))?;
                    wrote.push(write_out(out, &format!("{stem}_dist.svg"), &svg)?);
                }
            }
            let losses = table.columns_with_prefix("loss_");
            if !losses.is_empty() {
                let series: Vec<plot::Series> = losses
                    .into_iter()
                    .map(|(label, ys)| plot::Series {
                        label,
                        xs: t.clone(),
                        ys,
                    })
                    .collect();
                let svg = plot::render_svg(
                    &format!("{stem}: per-group losses"),
                    "iteration",
                    "loss",
                    &series,
                )
                .map_err(|e| CmdError::config(e.to_string()))?;
                wrote.push(write_out(out, &format!("{stem}_losses.svg"), &svg)?);
            }
            let lambdas = table.columns_with_prefix("lambda_");
            if !lambdas.is_empty() {
                let series: Vec<plot::Series> = lambdas
                    .into_iter()
                    .map(|(label, ys)| plot::Series {
                        label,
                        xs: t.clone(),
                        ys,
                    })
                    .collect();
                let svg = plot::render_svg(
                    &format!("{stem}: group weights"),
                    "iteration",
                    "lambda",
                    &series,
                )
                .map_err(|e| CmdError::config(e.to_string()))?;
                wrote.push(write_out(out, &format!("{stem}_weights.svg"), &svg)?);
            }
        } else if let Some(col) = table
            .columns
            .iter()
            .find(|c| c.contains("worst_domain_loss"))
            .cloned()
        {
            let steps = table
                .column("step")
                .ok_or_else(|| CmdError::config("missing step column".to_string()))?;
            let ys = table.column(&col).unwrap();
            stream_series.push(plot::Series {
                label: stem,
                xs: steps,
                ys,
            });
        } else {
            return Err(CmdError::config(format!(
                "{}: unrecognized trace layout",
                path.display()
            )));
        }
    }
    if !stream_series.is_empty() {
        let svg = plot::render_svg(
            "stream comparison: worst-domain loss",
            "step",
            "worst-domain loss",
            &stream_series,
        )
        .map_err(|e| CmdError::config(e.to_string()))?;
        wrote.push(write_out(out, "stream_comparison.svg", &svg)?);
    }
    for p in &wrote {
        println!("wrote {}", p.display());
    }
    Ok(())
}
