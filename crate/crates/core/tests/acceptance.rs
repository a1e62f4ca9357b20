//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary is printed even
//! when everything passes. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use dfm_guidance::approximator::{Activation, ApproximatorConfig};
use dfm_guidance::ctmc::{kolmogorov_integrate_range, sample_unguided, InitialState, SamplerConfig};
use dfm_guidance::energy2d::{
    empirical_on_grid, guided_target, median, regularization_sweep, ClassifierKind, EnergyProblem,
    RegularizationConfig, RunSpec, Shape,
};
use dfm_guidance::guidance::{
    call_count, guided_posterior, posterior_guided_rate_matrix, rate_guided_rate_matrix, sample_guided,
    unguided_rate_matrix, ExactGuidance, GuidanceKind, GuidanceModels, GuidanceScheme, PosteriorGuidance,
    RateMode,
};
use dfm_guidance::optim::OptimizerConfig;
use dfm_guidance::paths::{ConditionalPath, Init, Scheduler};
use dfm_guidance::posterior::{ExactPosterior, PosteriorModel};
use dfm_guidance::statespace::{DensityRatio, Pmf, StateSpace, Symbol};
use dfm_guidance::training::{check_loss_gradients, fit_guidance, GuidanceData, LossKind, SampleSource};
use dfm_guidance::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rings() -> EnergyProblem {
    EnergyProblem::new(Shape::Rings, 200_000, 0, ClassifierKind::ShapeDensity).expect("rings problem")
}

fn random_pmf(space: StateSpace, rng: &mut ChaCha8Rng, zero_fraction: f64) -> Pmf {
    let n = space.num_states() as usize;
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < zero_fraction { 0.0 } else { rng.random::<f64>() + 0.01 })
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        w[0] = 1.0;
    }
    Pmf::from_unnormalized(space, w).expect("positive mass")
}

fn random_ratio(space: StateSpace, rng: &mut ChaCha8Rng) -> DensityRatio {
    let n = space.num_states() as usize;
    DensityRatio::tabulated(space, (0..n).map(|_| 0.1 + 5.0 * rng.random::<f64>()).collect()).unwrap()
}

/// Exact posterior, exact guidance, 256 steps, 1e5 chains on rings.
fn exact_fidelity() -> Result<Outcome> {
    let problem = rings();
    let chains = 100_000;
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    let mut lines = Vec::new();
    for gamma in [0.0, 3.0] {
        let (target, _) = guided_target(&problem.p1, &problem.energy, gamma)?;
        // Noise floor: two independent exact sample sets of the same size.
        let draw = |seed: u64| -> Result<Pmf> {
            let sampler = target.sampler();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = vec![0.0; target.weights().len()];
            for _ in 0..chains {
                counts[sampler.sample_index(rng.random::<f64>())] += 1.0;
            }
            Pmf::from_unnormalized(*target.space(), counts)
        };
        let floor = draw(11)?.total_variation(&draw(12)?)?;
        for init in [Init::Masked, Init::Uniform] {
            let start = Instant::now();
            let run = RunSpec {
                gamma,
                scheme: GuidanceScheme::PosteriorBased,
                init,
                steps: 256,
                chains,
                seed: 7,
                rate_mode: None,
            };
            let record = problem.run(&run)?;
            let secs = start.elapsed().as_secs_f64();
            slowest = slowest.max(secs);
            worst = worst.max(record.tv);
            worst_excess = worst_excess.max(record.tv - floor);
            lines.push(format!("g={gamma} {}: tv {:.4} floor {:.4} {:.1}s", init.name(), record.tv, floor, secs));
        }
    }
    let pass = worst < 0.05 && worst_excess < 0.02 && slowest < 120.0;
    Ok(outcome(pass, lines.join("; ")))
}

/// Predictor guidance misses the exact target at large gamma.
fn predictor_mismatch() -> Result<Outcome> {
    let problem = rings();
    let mut pass = true;
    let mut lines = Vec::new();
    for gamma in [10.0, 20.0] {
        let tv = |scheme: GuidanceScheme| -> Result<f64> {
            let runs: Result<Vec<f64>> = (0..5)
                .map(|seed| {
                    let spec =
                        RunSpec { gamma, scheme, init: Init::Masked, steps: 64, chains: 20_000, seed, rate_mode: None };
                    Ok(problem.run(&spec)?.tv)
                })
                .collect();
            Ok(median(&runs?))
        };
        let predictor = tv(GuidanceScheme::Predictor { gamma })?;
        let posterior = tv(GuidanceScheme::PosteriorBased)?;
        pass &= predictor > posterior;
        lines.push(format!("g={gamma}: predictor {predictor:.4} vs posterior {posterior:.4}"));
    }
    Ok(outcome(pass, lines.join("; ")))
}

/// Instrumented guidance calls per step equal the table formula.
fn call_accounting() -> Result<Outcome> {
    let problem = rings();
    let schemes = [
        GuidanceScheme::PosteriorBased,
        GuidanceScheme::RateBased,
        GuidanceScheme::FirstOrder,
        GuidanceScheme::Predictor { gamma: 2.0 },
    ];
    let mut pass = true;
    let mut lines = Vec::new();
    for init in [Init::Masked, Init::Uniform] {
        for scheme in schemes {
            let spec = RunSpec { gamma: 2.0, scheme, init, steps: 8, chains: 50, seed: 3, rate_mode: None };
            let record = problem.run(&spec)?;
            let space = match init {
                Init::Masked => dfm_guidance::energy2d::masked_grid_space(),
                Init::Uniform => dfm_guidance::energy2d::grid_space(),
            };
            let expected = call_count(&scheme, &space, init) as f64;
            let got = record.guidance_calls_per_step.unwrap_or(f64::NAN);
            pass &= got == expected;
            lines.push(format!("{scheme}/{}={got}", init.name()));
        }
    }
    Ok(outcome(pass, lines.join(" ")))
}

/// RK4 integration of the marginal generator matches the analytic path.
fn marginalization() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let t1 = 1.0 - dfm_guidance::paths::TERMINAL_MARGIN;
    for k in 0..4 {
        let s = 3 + k % 3;
        let masked = k % 2 == 1;
        let (space, path) = if masked {
            let space = StateSpace::with_mask(2, s)?;
            (space, ConditionalPath::mixture(space, Scheduler::Cosine, Init::Masked)?)
        } else {
            let space = StateSpace::new(2, s + 2)?;
            (space, ConditionalPath::mixture(space, Scheduler::Linear, Init::Uniform)?)
        };
        let data = if masked { StateSpace::new(2, s)? } else { space };
        let p1 = random_pmf(data, &mut rng, 0.3).embed(&space)?;
        let posterior = ExactPosterior::new(p1.clone(), path)?;
        let q0 = analytic_marginal(&p1, &path, 0.0)?;
        let traj = kolmogorov_integrate_range(|t| unguided_rate_matrix(&posterior, &path, t), &q0, 0.0, t1, 2048)?;
        for (t, pmf) in traj.times.iter().zip(&traj.pmfs).step_by(256) {
            let exact = analytic_marginal(&p1, &path, *t)?;
            for (a, b) in pmf.weights().iter().zip(exact.weights()) {
                worst = worst.max((a - b).abs());
            }
        }
        let exact = analytic_marginal(&p1, &path, t1)?;
        for (a, b) in traj.last().weights().iter().zip(exact.weights()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(worst < 1e-5 && secs < 10.0, format!("max abs error {worst:.2e}, {secs:.1}s")))
}

/// `p_t(x) = sum_{x1} p1(x1) prod_d p_t(x^d | x1^d)` by direct summation.
fn analytic_marginal(p1: &Pmf, path: &ConditionalPath, t: f64) -> Result<Pmf> {
    let space = *p1.space();
    let n = space.num_states() as usize;
    let mut out = vec![0.0; n];
    let (mut x, mut x1) = (vec![0 as Symbol; 2], vec![0 as Symbol; 2]);
    for i in 0..n {
        space.state_at(i, &mut x);
        for j in p1.support() {
            space.state_at(j, &mut x1);
            let mut w = p1.weights()[j];
            for d in 0..2 {
                w *= path.cond_prob_at(t, x[d], x1[d])?;
            }
            out[i] += w;
        }
    }
    Pmf::from_unnormalized(space, out)
}

/// Posterior- and rate-based guided generators coincide on masked paths.
fn masked_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let dims = 2 + k % 2;
        let s = 2 + k % 3;
        let space = StateSpace::with_mask(dims, s)?;
        let data = StateSpace::new(dims, s)?;
        let p1 = random_pmf(data, &mut rng, 0.25).embed(&space)?;
        let r = random_ratio(space, &mut rng);
        let scheduler = if k % 2 == 0 { Scheduler::Cosine } else { Scheduler::Linear };
        let path = ConditionalPath::mixture(space, scheduler, Init::Masked)?;
        let posterior = ExactPosterior::new(p1.clone(), path)?;
        let guidance = ExactGuidance::new(p1, r, path)?;
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let a = posterior_guided_rate_matrix(&posterior, &guidance, &path, t)?;
        let b = rate_guided_rate_matrix(&posterior, &guidance, &path, t, 1.0)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(outcome(worst < 1e-9, format!("max entrywise difference {worst:.2e} over 100 instances")))
}

/// Tabular guidance recovers exact h; every loss passes a gradient check.
fn training_recovery() -> Result<Outcome> {
    let data = StateSpace::new(2, 3)?;
    let space = StateSpace::with_mask(2, 3)?;
    let p1 = Pmf::new(data, vec![0.05, 0.1, 0.05, 0.2, 0.05, 0.1, 0.15, 0.1, 0.2])?.embed(&space)?;
    let r = DensityRatio::tabulated(space, (0..16).map(|i| 0.5 + 0.25 * (i % 5) as f64).collect())?;
    let path = ConditionalPath::mixture(space, Scheduler::Cosine, Init::Masked)?;
    let source = SampleSource::from_pmf(&p1);
    let problem = GuidanceData {
        path: &path,
        source: &source,
        ratio: &r,
        target: None,
        posterior: None,
        exact_source: Some(&p1),
    };
    let opt = OptimizerConfig {
        steps: 4000,
        batch_size: 512,
        learning_rate: Some(0.05),
        final_lr_fraction: 0.02,
        ..OptimizerConfig::default()
    };
    let tabular = ApproximatorConfig::Tabular { time_buckets: 1 };
    let (learned, report) = fit_guidance(GuidanceKind::PosteriorBased, &problem, &tabular, &opt)?;
    // Independent comparison over every reachable state.
    let exact = ExactGuidance::new(p1.clone(), r.clone(), path)?;
    let posterior = ExactPosterior::new(p1.clone(), path)?;
    let mut gap: f64 = 0.0;
    let mut x = vec![0 as Symbol; 2];
    for i in 0..space.num_states() as usize {
        space.state_at(i, &mut x);
        let Ok(post) = posterior.evaluate(0.5, &x) else { continue };
        let a = learned.h_matrix(0.5, &x)?;
        let b = exact.h_matrix(0.5, &x)?;
        for (k, (&ha, &hb)) in a.iter().zip(&b).enumerate() {
            if post.as_slice()[k] >= 0.05 {
                gap = gap.max((ha - hb).abs());
            }
        }
    }

    let mlp = ApproximatorConfig::Mlp { hidden: vec![16, 16], activation: Activation::Tanh };
    let mut grad = 0.0f64;
    for kind in LossKind::ALL {
        for cfg in [&ApproximatorConfig::Tabular { time_buckets: 4 }, &mlp] {
            grad = grad.max(check_loss_gradients(kind, cfg, &p1, &r, &path, 9)?.max_rel_error);
        }
    }
    Ok(outcome(
        gap < 2e-2 && grad < 1e-4,
        format!("max abs gap {gap:.3e} (report {:.3e}), worst gradient rel error {grad:.2e}", report.gap_to_exact.unwrap_or(f64::NAN)),
    ))
}

/// Larger lambda brings the guided samples closer to the target.
fn regularization_trend() -> Result<Outcome> {
    let start = Instant::now();
    let report = regularization_sweep(&RegularizationConfig::default())?;
    let medians: Vec<String> = report.medians.iter().map(|m| format!("{m:.4}")).collect();
    Ok(outcome(
        report.inversions <= 1,
        format!("medians [{}], {} inversions, {:.0}s", medians.join(", "), report.inversions, start.elapsed().as_secs_f64()),
    ))
}

/// Constant ratios leave the posterior unchanged; gamma = 0 is unguided.
fn identities() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let space = StateSpace::new(2, 3 + k % 3)?;
        let p1 = random_pmf(space, &mut rng, 0.2);
        let path = ConditionalPath::mixture(space, Scheduler::Cosine, Init::Uniform)?;
        let c = 0.1 + 10.0 * rng.random::<f64>();
        let g = ExactGuidance::new(p1.clone(), DensityRatio::constant(space, c)?, path)?;
        let t = rng.random::<f64>() * 0.95;
        let mut x = vec![0 as Symbol; 2];
        space.state_at(rng.random_range(0..space.num_states() as usize), &mut x);
        let base = ExactPosterior::new(p1, path)?.evaluate(t, &x)?;
        let guided = guided_posterior(&base, &g.h_matrix(t, &x)?)?;
        worst = worst.max(guided.max_abs_diff(&base));
    }

    let problem = rings();
    let mut identical = true;
    for init in [Init::Masked, Init::Uniform] {
        let space =
            if init == Init::Masked { dfm_guidance::energy2d::masked_grid_space() } else { dfm_guidance::energy2d::grid_space() };
        let path = ConditionalPath::mixture(space, Scheduler::Cosine, init)?;
        let p1 = problem.p1.embed(&space)?;
        let posterior = ExactPosterior::new(p1.clone(), path)?.with_marginal_fallback()?;
        let config = SamplerConfig::new(32, 2000, InitialState::from_path(&path), 21);
        let plain = sample_unguided(&posterior, &path, &config)?;
        let ratio = problem.energy.density_ratio(space, 0.0);
        let exact = ExactGuidance::new(p1.clone(), ratio, path)?.with_marginal_fallback()?;
        let classifier =
            ExactGuidance::new(p1, problem.energy.density_ratio(space, 1.0), path)?.with_marginal_fallback()?;
        let models = GuidanceModels { posterior_based: Some(&exact), rate_based: Some(&classifier) };
        // Rate-kernel schemes use endpoint mode: the full-neighborhood
        // step agrees with unguided sampling in law but draws differently.
        let runs = [
            (GuidanceScheme::PosteriorBased, None),
            (GuidanceScheme::Predictor { gamma: 0.0 }, Some(RateMode::Endpoint)),
        ];
        for (scheme, mode) in runs {
            let out = sample_guided(&scheme, &posterior, models, &path, &config, mode)?;
            identical &= out.batch.as_slice() == plain.batch.as_slice();
        }
        let models = GuidanceModels { posterior_based: None, rate_based: Some(&exact) };
        let out =
            sample_guided(&GuidanceScheme::RateBased, &posterior, models, &path, &config, Some(RateMode::Endpoint))?;
        identical &= out.batch.as_slice() == plain.batch.as_slice();
        empirical_on_grid(&out.batch)?;
    }
    Ok(outcome(
        worst < 1e-14 && identical,
        format!("constant-ratio deviation {worst:.1e}; gamma=0 bit-identical: {identical}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 8] = [
        ("exact-guidance fidelity", exact_fidelity),
        ("predictor mismatch", predictor_mismatch),
        ("function-call accounting", call_accounting),
        ("marginalization identity", marginalization),
        ("masked-path equivalence", masked_equivalence),
        ("training recovery", training_recovery),
        ("regularization trend", regularization_trend),
        ("scale invariance and identities", identities),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {} ({name})", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{label}: {} [{:.1}s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
