//! Property tests for the standing invariants: simplex validity and
//! optimality of the dual argmax, the total-variation bound, step-size
//! monotonicity, label truncation, dataset persistence, and the
//! concentration of empirical benchmarks under resampling.

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gdro::activation::Activation;
use gdro::data::{generate, load, save, truncate_labels, GeneratorConfig, Marginal, NoiseModel};
use gdro::divergence::{
    bregman, penalty_value, regularized_argmax, tv_squared_bound_check, worst_case_weights,
    DivergenceKind, DivergencePenalty, SimplexVector, SIMPLEX_SUM_TOL,
};
use gdro::oracles::DualObjective;
use gdro::solver::{evaluate_losses, sharpness_constants, step_size, SolverConfig};

fn simplex_strategy(k: usize) -> impl Strategy<Value = SimplexVector> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|mut v| {
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            v[0] = 1.0;
        }
        SimplexVector::project_clamped(&v).unwrap()
    })
}

fn kind_strategy() -> impl Strategy<Value = DivergenceKind> {
    prop_oneof![Just(DivergenceKind::Kl), Just(DivergenceKind::ChiSquared)]
}

proptest! {
    /// The dual argmax always lands on the simplex: nonnegative entries
    /// summing to one within the global tolerance.
    #[test]
    fn argmax_output_is_simplex(
        kind in kind_strategy(),
        scores in prop::collection::vec(-3.0f64..3.0, 2..10),
        step in 0.0f64..3.0,
        nu in 0.0f64..1.0,
        breg in 0.05f64..3.0,
        seed in 0u64..1000,
    ) {
        let k = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor: Vec<f64> = (0..k).map(|_| 0.01 + rng.gen::<f64>()).collect();
        let anchor = SimplexVector::project_clamped(&anchor).unwrap();
        let p = DivergencePenalty::new(kind, k);
        let out = regularized_argmax(&p, &scores, step, nu, breg, &anchor).unwrap();
        prop_assert!(out.as_slice().iter().all(|&x| x >= 0.0));
        let sum: f64 = out.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() <= SIMPLEX_SUM_TOL);
    }

    /// Global-maximizer certificate: the argmax attains an objective value
    /// at least that of many random simplex points (up to 1e-9 slack).
    #[test]
    fn argmax_dominates_random_points(
        kind in kind_strategy(),
        scores in prop::collection::vec(-2.0f64..2.0, 2..8),
        step in 0.1f64..2.0,
        nu in 0.0f64..0.5,
        breg in 0.1f64..2.0,
        seed in 0u64..1000,
    ) {
        let k = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor: Vec<f64> = (0..k).map(|_| 0.05 + rng.gen::<f64>()).collect();
        let anchor = SimplexVector::project_clamped(&anchor).unwrap();
        let p = DivergencePenalty::new(kind, k);
        let out = regularized_argmax(&p, &scores, step, nu, breg, &anchor).unwrap();
        let obj = DualObjective {
            kind,
            scores: scores.clone(),
            step,
            nu,
            breg_weight: breg,
            anchor: anchor.as_slice().to_vec(),
        };
        let best = obj.value(out.as_slice());
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
            let cand = SimplexVector::project_clamped(&cand).unwrap();
            prop_assert!(
                obj.value(cand.as_slice()) <= best + 1e-9,
                "random point beats argmax: {} > {}",
                obj.value(cand.as_slice()),
                best
            );
        }
    }

    /// The l1/Bregman bound holds on every random pair, for both divergences.
    #[test]
    fn tv_squared_bound_holds(
        a in simplex_strategy(6),
        b in simplex_strategy(6),
        kind in kind_strategy(),
    ) {
        let p = DivergencePenalty::new(kind, 6);
        prop_assert!(tv_squared_bound_check(&a, &b, &p));
    }

    /// Penalties are nonnegative and vanish only at uniform for both kinds.
    #[test]
    fn penalty_nonnegative_zero_at_uniform(lambda in simplex_strategy(5), kind in kind_strategy()) {
        let p = DivergencePenalty::new(kind, 5);
        let v = penalty_value(&p, &lambda);
        prop_assert!(v >= -1e-15);
        let u = SimplexVector::uniform(5);
        prop_assert!(penalty_value(&p, &u).abs() <= 1e-15);
        prop_assert!(bregman(&p, &lambda, &lambda).abs() <= 1e-15);
    }

    /// Step sizes are non-decreasing in t across random valid configs.
    #[test]
    fn step_size_monotone(
        beta in 0.5f64..2.0,
        b_tail in 0.5f64..3.0,
        gamma in 0.05f64..0.9,
        zeta in 0.05f64..0.9,
        w_radius in 0.5f64..4.0,
        eps_exp in -4.0f64..-1.0,
        k in 2usize..12,
        nu in prop_oneof![Just(0.0), 1e-3f64..2.0],
    ) {
        let (_c0, c1) = sharpness_constants(gamma, zeta, beta, b_tail);
        let cfg = SolverConfig {
            nu,
            eps: 10f64.powf(eps_exp),
            w_radius,
            beta,
            b_tail,
            c1,
            c_m: 1.0,
            k,
            max_iters: 0,
            divergence: DivergenceKind::Kl,
        };
        let mut prev = 0.0;
        for t in 1..=10_000 {
            let a = step_size(&cfg, t);
            prop_assert!(a.is_finite() && a > 0.0);
            prop_assert!(a >= prev, "a_t decreased at t={t}");
            prev = a;
        }
    }

    /// Worst-case weights maximize the penalized objective against random
    /// competitors.
    #[test]
    fn worst_case_weights_dominate(
        kind in kind_strategy(),
        losses in prop::collection::vec(0.0f64..4.0, 2..8),
        nu in 1e-3f64..2.0,
        seed in 0u64..500,
    ) {
        let k = losses.len();
        let p = DivergencePenalty::new(kind, k);
        let (w, value) = worst_case_weights(&p, &losses, nu).unwrap();
        let objective = |lam: &SimplexVector| -> f64 {
            lam.as_slice().iter().zip(&losses).map(|(&l, &x)| l * x).sum::<f64>()
                - nu * penalty_value(&p, lam)
        };
        prop_assert!((objective(&w) - value).abs() <= 1e-9 * (1.0 + value.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..300 {
            let cand: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
            let cand = SimplexVector::project_clamped(&cand).unwrap();
            prop_assert!(objective(&cand) <= value + 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Same config and seed reproduce the dataset; truncation clamps every
    /// label and leaves in-range labels untouched.
    #[test]
    fn generation_reproducible_and_truncation_clamps(
        seed in 0u64..10_000,
        k in 1usize..4,
        d in 1usize..5,
        n in 1usize..40,
        sigma in 0.0f64..2.0,
    ) {
        let cfg = GeneratorConfig {
            marginal: Marginal::StandardGaussian,
            noise: if sigma > 0.0 { NoiseModel::Gaussian { sigma } } else { NoiseModel::None },
            b_tail: 1.0,
            gamma: 0.5,
            zeta: 0.25,
            w_radius: 2.0,
            seed,
        };
        let w_star = vec![1.0 / (d as f64).sqrt(); d];
        let act = Activation::relu();
        let a = generate(&cfg, k, &w_star, &act, n).unwrap();
        let b = generate(&cfg, k, &w_star, &act, n).unwrap();
        prop_assert_eq!(&a, &b);

        let t = truncate_labels(&a, 2.0, 1.0, 1.0, 1e-2, 1.0).unwrap();
        let m = t.meta.truncation_m.unwrap();
        for (ga, gt) in a.groups.iter().zip(&t.groups) {
            for (&ya, &yt) in ga.ys.iter().zip(&gt.ys) {
                prop_assert!(yt.abs() <= m);
                if ya.abs() <= m {
                    prop_assert_eq!(ya, yt);
                }
            }
        }
    }

    /// Datasets survive a save/load round trip bit for bit.
    #[test]
    fn save_load_roundtrip(seed in 0u64..10_000, k in 1usize..4, d in 1usize..4, n in 1usize..20) {
        let cfg = GeneratorConfig {
            marginal: Marginal::UniformTernary,
            noise: NoiseModel::Gaussian { sigma: 0.37 },
            b_tail: 1.0,
            gamma: 0.5,
            zeta: 0.25,
            w_radius: 2.0,
            seed,
        };
        let w_star = vec![0.9 / (d as f64).sqrt(); d];
        let ds = generate(&cfg, k, &w_star, &Activation::relu(), n).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save(&ds, &path).unwrap();
        prop_assert_eq!(load(&path).unwrap(), ds);
    }
}

/// Empirical benchmark concentration: the spread of the worst per-group loss
/// at the target across independent resamples shrinks like 1/sqrt(N), within
/// a factor of 3.
#[test]
fn opt_hat_concentrates_under_resampling() {
    let act = Activation::relu();
    let w_star = [0.6, -0.3, 0.4];
    let opt_hat_std = |n: usize, base_seed: u64| -> f64 {
        let vals: Vec<f64> = (0..20)
            .map(|r| {
                let cfg = GeneratorConfig {
                    marginal: Marginal::StandardGaussian,
                    noise: NoiseModel::Gaussian { sigma: 0.3 },
                    b_tail: 1.0,
                    gamma: 0.5,
                    zeta: 0.25,
                    w_radius: 2.0,
                    seed: base_seed + r,
                };
                let ds = generate(&cfg, 3, &w_star, &act, n).unwrap();
                let losses = evaluate_losses(&ds, &act, &w_star);
                losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    };
    let s_small = opt_hat_std(500, 100);
    let s_large = opt_hat_std(2000, 900);
    // Quadrupling N should halve the spread, within a factor 3 either way.
    let ratio = s_small / s_large;
    assert!(
        (2.0 / 3.0..=6.0).contains(&ratio),
        "std ratio {ratio} outside [2/3, 6] (s_small={s_small:.3e}, s_large={s_large:.3e})"
    );
}

/// The benchmark weights maximize the penalized objective against ten
/// thousand random simplex points.
#[test]
fn benchmark_weights_are_maximizers() {
    use gdro::oracles::compute_benchmarks;
    let act = Activation::relu();
    let w_star = [0.5, -0.2, 0.3];
    let cfg = GeneratorConfig {
        marginal: Marginal::StandardGaussian,
        noise: NoiseModel::Gaussian { sigma: 0.4 },
        b_tail: 1.0,
        gamma: 0.5,
        zeta: 0.25,
        w_radius: 2.0,
        seed: 77,
    };
    let ds = generate(&cfg, 4, &w_star, &act, 300).unwrap();
    for (kind, nu) in [
        (DivergenceKind::Kl, 0.0),
        (DivergenceKind::Kl, 0.3),
        (DivergenceKind::ChiSquared, 0.3),
    ] {
        let bench = compute_benchmarks(&ds, &act, &w_star, kind, nu, 1e-3).unwrap();
        let p = DivergencePenalty::new(kind, 4);
        let losses = evaluate_losses(&ds, &act, &w_star);
        let objective = |lam: &SimplexVector| -> f64 {
            lam.as_slice()
                .iter()
                .zip(&losses)
                .map(|(&l, &x)| l * x)
                .sum::<f64>()
                - nu * penalty_value(&p, lam)
        };
        let best = objective(&bench.lambda_hat_star);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let cand: Vec<f64> = (0..4).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
            let cand = SimplexVector::project_clamped(&cand).unwrap();
            assert!(objective(&cand) <= best + 1e-9, "{kind:?} nu={nu}");
        }
    }
}

/// End-to-end guarantee certificate on a corrupted run: both bounds hold,
/// with plenty of slack since the constants are loose.
#[test]
fn risk_certificate_on_corrupted_run() {
    use gdro::oracles::risk_vs_opt_certificate;
    use gdro::solver::{run, RunOptions, SolverConfig};
    let act = Activation::relu();
    let w_star = [0.7, -0.5, 0.3, 0.2];
    let gen = GeneratorConfig {
        marginal: Marginal::StandardGaussian,
        noise: NoiseModel::Adversarial {
            eta: 0.1,
            magnitude: 8.0,
        },
        b_tail: 1.0,
        gamma: 0.5,
        zeta: 0.25,
        w_radius: 2.0,
        seed: 123,
    };
    let ds = generate(&gen, 3, &w_star, &act, 400).unwrap();
    let ds = truncate_labels(&ds, 2.0, 1.0, 1.0, 1e-3, 1.0).unwrap();
    let cfg = SolverConfig {
        nu: 0.0,
        eps: 1e-3,
        w_radius: 2.0,
        beta: 1.0,
        b_tail: 1.0,
        c1: 0.25,
        c_m: 1.0,
        k: 3,
        max_iters: 10_000,
        divergence: DivergenceKind::Kl,
    };
    let out = run(&cfg, &ds, &act, cfg.max_iters, &RunOptions::default()).unwrap();
    // Held-out proxy for the population quantities: a fresh 10x sample from
    // the same generator.
    let mut holdout_gen = gen.clone();
    holdout_gen.seed = gen.seed.wrapping_add(1);
    let holdout = generate(&holdout_gen, 3, &w_star, &act, 4000).unwrap();
    let holdout = truncate_labels(&holdout, 2.0, 1.0, 1.0, 1e-3, 1.0).unwrap();
    let cert = risk_vs_opt_certificate(&out.w, &ds, &act, &cfg, &w_star, Some(&holdout)).unwrap();
    assert!(cert.dist_bound_ok, "{cert:?}");
    assert!(cert.mixture_bound_ok, "{cert:?}");
    assert!(
        cert.dist_bound_ratio < 0.1,
        "constants should be loose: {cert:?}"
    );
    let h = cert.holdout.as_ref().unwrap();
    // The held-out estimate tracks the training benchmark at this scale.
    assert!(
        (h.opt_holdout - cert.opt_hat).abs() / cert.opt_hat < 0.5,
        "{cert:?}"
    );
}

/// Realizable generation puts the planted parameter at zero loss, so the
/// solver-facing benchmarks see an exactly realizable problem.
#[test]
fn realizable_benchmarks_are_exact() {
    let act = Activation::relu();
    let w_star = [0.5, 0.5];
    let cfg = GeneratorConfig {
        marginal: Marginal::StandardGaussian,
        noise: NoiseModel::None,
        b_tail: 1.0,
        gamma: 0.5,
        zeta: 0.25,
        w_radius: 2.0,
        seed: 11,
    };
    let ds = generate(&cfg, 4, &w_star, &act, 256).unwrap();
    let losses = evaluate_losses(&ds, &act, &w_star);
    assert!(losses.iter().all(|&l| l <= 1e-24));
}
