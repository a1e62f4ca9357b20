//! Independent-route checks: dense generators integrated forward against
//! closed-form marginals, and samplers against exact targets.

use dfm_guidance::ctmc::{kolmogorov_integrate_range, InitialState, SamplerConfig};
use dfm_guidance::energy2d::{generate_dataset, local_maxima, smooth3x3, Shape, GRID};
use dfm_guidance::guidance::{
    guided_posterior, posterior_guided_rate_matrix, rate_guided_rate_matrix, sample_guided, unguided_rate_matrix,
    ExactGuidance, GuidanceModels, GuidanceScheme, PosteriorGuidance, RateGuidance, RateMode,
};
use dfm_guidance::paths::{ConditionalPath, Init, Scheduler, TERMINAL_MARGIN};
use dfm_guidance::posterior::{ExactPosterior, PosteriorModel};
use dfm_guidance::statespace::{empirical_pmf, DensityRatio, Pmf, StateSpace, Symbol};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pmf(space: StateSpace, rng: &mut ChaCha8Rng) -> Pmf {
    let n = space.num_states() as usize;
    let w = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() + 0.05 }).collect();
    Pmf::from_unnormalized(space, w).unwrap()
}

fn random_ratio(space: StateSpace, rng: &mut ChaCha8Rng) -> DensityRatio {
    let n = space.num_states() as usize;
    DensityRatio::tabulated(space, (0..n).map(|_| 0.2 + 3.0 * rng.random::<f64>()).collect()).unwrap()
}

/// `sum_{x1} p1(x1) prod_d q_{t|1}(x^d | x1^d)`.
fn path_marginal(p1: &Pmf, path: &ConditionalPath, t: f64) -> Vec<f64> {
    let space = *p1.space();
    let d = space.dims();
    let n = space.num_states() as usize;
    let (mut x, mut x1) = (vec![0 as Symbol; d], vec![0 as Symbol; d]);
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        space.state_at(i, &mut x);
        for j in p1.support() {
            space.state_at(j, &mut x1);
            let mut w = p1.weights()[j];
            for k in 0..d {
                w *= path.cond_prob_at(t, x[k], x1[k]).unwrap();
            }
            *slot += w;
        }
    }
    out
}

fn reweighted(p1: &Pmf, r: &DensityRatio) -> Pmf {
    let space = *p1.space();
    let mut x = vec![0 as Symbol; space.dims()];
    let w = p1
        .weights()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            space.state_at(i, &mut x);
            p * r.eval(&x)
        })
        .collect();
    Pmf::from_unnormalized(space, w).unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn instance(seed: u64, masked: bool) -> (Pmf, DensityRatio, ConditionalPath) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if masked {
        let data = StateSpace::new(2, 3).unwrap();
        let space = StateSpace::with_mask(2, 3).unwrap();
        let p1 = random_pmf(data, &mut rng).embed(&space).unwrap();
        let r = random_ratio(space, &mut rng);
        (p1, r, ConditionalPath::mixture(space, Scheduler::Cosine, Init::Masked).unwrap())
    } else {
        let space = StateSpace::new(2, 4).unwrap();
        let p1 = random_pmf(space, &mut rng);
        let r = random_ratio(space, &mut rng);
        (p1, r, ConditionalPath::mixture(space, Scheduler::Linear, Init::Uniform).unwrap())
    }
}

#[test]
fn posterior_guided_generator_transports_to_reweighted_target() {
    for (seed, masked) in [(1, false), (2, true), (3, false)] {
        let (p1, r, path) = instance(seed, masked);
        let posterior = ExactPosterior::new(p1.clone(), path).unwrap();
        let guidance = ExactGuidance::new(p1.clone(), r.clone(), path).unwrap();
        let target = reweighted(&p1, &r);
        let q0 = Pmf::new(*p1.space(), path_marginal(&target, &path, 0.0)).unwrap();
        let t1 = 1.0 - TERMINAL_MARGIN;
        let traj = kolmogorov_integrate_range(
            |t| posterior_guided_rate_matrix(&posterior, &guidance, &path, t),
            &q0,
            0.0,
            t1,
            1024,
        )
        .unwrap();
        let gap = max_gap(traj.last().weights(), &path_marginal(&target, &path, t1));
        assert!(gap < 1e-6, "seed {seed}: {gap}");
    }
}

/// Forward-integrates the rate-guided generator from the guided marginal at
/// t = 0 and returns the largest deviation from the guided path marginal.
fn rate_guided_drift(seed: u64, masked: bool) -> f64 {
    let (p1, r, path) = instance(seed, masked);
    let posterior = ExactPosterior::new(p1.clone(), path).unwrap();
    let guidance = ExactGuidance::new(p1.clone(), r.clone(), path).unwrap();
    let target = reweighted(&p1, &r);
    let q0 = Pmf::new(*p1.space(), path_marginal(&target, &path, 0.0)).unwrap();
    let t1 = 1.0 - TERMINAL_MARGIN;
    let traj = kolmogorov_integrate_range(
        |t| rate_guided_rate_matrix(&posterior, &guidance, &path, t, 1.0),
        &q0,
        0.0,
        t1,
        1024,
    )
    .unwrap();
    traj.times
        .iter()
        .zip(&traj.pmfs)
        .step_by(64)
        .map(|(t, pmf)| max_gap(pmf.weights(), &path_marginal(&target, &path, *t)))
        .fold(0.0, f64::max)
}

#[test]
fn rate_guided_generator_transports_on_masked_paths() {
    for seed in [5, 9] {
        let gap = rate_guided_drift(seed, true);
        assert!(gap < 1e-6, "seed {seed}: {gap}");
    }
}

// With a uniform source the noising rate depends on the endpoint, so the
// h-ratio correction of the marginal rate no longer tracks the guided path.
#[test]
fn rate_guided_generator_drifts_on_uniform_paths() {
    let gap = rate_guided_drift(4, false);
    assert!(gap > 1e-3, "{gap}");
}

#[test]
fn metric_path_generator_reproduces_path_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let space = StateSpace::new(2, 5).unwrap();
    let p1 = random_pmf(space, &mut rng);
    let path = ConditionalPath::metric(space, Scheduler::Cosine).unwrap();
    let posterior = ExactPosterior::new(p1.clone(), path).unwrap();
    let t0 = 0.05;
    let t1 = 0.9;
    let q0 = Pmf::new(space, path_marginal(&p1, &path, t0)).unwrap();
    let traj = kolmogorov_integrate_range(|t| unguided_rate_matrix(&posterior, &path, t), &q0, t0, t1, 2048).unwrap();
    let gap = max_gap(traj.last().weights(), &path_marginal(&p1, &path, t1));
    assert!(gap < 1e-6, "{gap}");
}

#[test]
fn masked_exact_guidance_is_time_independent() {
    let (p1, r, path) = instance(7, true);
    let g = ExactGuidance::new(p1, r, path).unwrap();
    let space = *path.space();
    let mut x = vec![0 as Symbol; 2];
    for i in 0..space.num_states() as usize {
        space.state_at(i, &mut x);
        let (Ok(a), Ok(b)) = (g.h_matrix(0.2, &x), g.h_matrix(0.85, &x)) else { continue };
        assert!(max_gap(&a, &b) < 1e-9);
        assert!((g.h_value(0.2, &x).unwrap() - g.h_value(0.85, &x).unwrap()).abs() < 1e-9);
    }
}

/// Chi-square style bound: with n draws, per-state deviations beyond
/// `5 sqrt(p (1 - p) / n) + 2e-3` are very unlikely.
fn assert_close_to(empirical: &Pmf, exact: &Pmf, n: usize, label: &str) {
    for (e, p) in empirical.weights().iter().zip(exact.weights()) {
        let tol = 5.0 * (p * (1.0 - p) / n as f64).sqrt() + 2e-3;
        assert!((e - p).abs() < tol, "{label}: empirical {e} vs exact {p}");
    }
}

#[test]
fn guided_samplers_hit_the_reweighted_target() {
    let chains = 40_000;
    for masked in [false, true] {
        let (p1, r, path) = instance(8, masked);
        let space = *path.space();
        let posterior = ExactPosterior::new(p1.clone(), path).unwrap().with_marginal_fallback().unwrap();
        let guidance = ExactGuidance::new(p1.clone(), r.clone(), path).unwrap().with_marginal_fallback().unwrap();
        let target = reweighted(&p1, &r);
        let config = SamplerConfig::new(400, chains, InitialState::from_path(&path), 11);
        let models = GuidanceModels { posterior_based: Some(&guidance), rate_based: Some(&guidance) };
        let mut runs = vec![(GuidanceScheme::PosteriorBased, None)];
        if masked {
            runs.push((GuidanceScheme::RateBased, Some(RateMode::Endpoint)));
            runs.push((GuidanceScheme::RateBased, Some(RateMode::FullNeighborhood)));
        }
        for (scheme, mode) in runs {
            let out = sample_guided(&scheme, &posterior, models, &path, &config, mode).unwrap();
            let empirical = empirical_pmf(&out.batch, &space).unwrap();
            assert_close_to(&empirical, &target, chains, &format!("{scheme:?}/{mode:?} masked={masked}"));
        }
    }
}

#[test]
fn checkerboard_occupies_alternating_cells() {
    let data = generate_dataset(Shape::Checkerboard, 20_000, 3).unwrap();
    // Squares have side 2; floor(x/2) + floor(y/2) is even on the occupied ones.
    let cell = |v: f64| (v / 2.0).floor() as i64;
    let parity: Vec<i64> = data.raw.iter().map(|p| (cell(p[0]) + cell(p[1])).rem_euclid(2)).collect();
    assert!(parity.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn eight_gaussians_have_eight_modes() {
    let pmf = generate_dataset(Shape::EightGaussians, 200_000, 5).unwrap().pmf().unwrap();
    let smooth = smooth3x3(pmf.weights());
    assert_eq!(smooth.len(), GRID * GRID);
    assert_eq!(local_maxima(&smooth, 0.3).len(), 8);
}

#[test]
fn datasets_are_deterministic() {
    for shape in Shape::ALL {
        let a = generate_dataset(shape, 500, 9).unwrap();
        let b = generate_dataset(shape, 500, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.raw, generate_dataset(shape, 500, 10).unwrap().raw);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn guided_posterior_ignores_ratio_scale(seed in 0u64..1000, c in 0.01f64..100.0, t in 0.05f64..0.95) {
        let (p1, r, path) = instance(seed, seed % 2 == 0);
        let space = *path.space();
        let scaled = DensityRatio::tabulated(space, (0..space.num_states() as usize).map(|i| {
            let mut x = vec![0 as Symbol; 2];
            space.state_at(i, &mut x);
            c * r.eval(&x)
        }).collect()).unwrap();
        let a = ExactGuidance::new(p1.clone(), r, path).unwrap();
        let b = ExactGuidance::new(p1.clone(), scaled, path).unwrap();
        let posterior = ExactPosterior::new(p1, path).unwrap();
        let mut x = vec![0 as Symbol; 2];
        for i in 0..space.num_states() as usize {
            space.state_at(i, &mut x);
            let Ok(base) = posterior.evaluate(t, &x) else { continue };
            let ga = guided_posterior(&base, &a.h_matrix(t, &x).unwrap()).unwrap();
            let gb = guided_posterior(&base, &b.h_matrix(t, &x).unwrap()).unwrap();
            prop_assert!(ga.max_abs_diff(&gb) < 1e-12);
        }
    }

    #[test]
    fn guided_posterior_rows_are_distributions(seed in 0u64..1000, t in 0.05f64..0.95) {
        let (p1, r, path) = instance(seed, seed % 2 == 1);
        let g = ExactGuidance::new(p1.clone(), r, path).unwrap();
        let posterior = ExactPosterior::new(p1, path).unwrap();
        let space = *path.space();
        let s = space.alphabet_size();
        let mut x = vec![0 as Symbol; 2];
        for i in 0..space.num_states() as usize {
            space.state_at(i, &mut x);
            let Ok(base) = posterior.evaluate(t, &x) else { continue };
            let q = guided_posterior(&base, &g.h_matrix(t, &x).unwrap()).unwrap();
            for d in 0..2 {
                let row = &q.as_slice()[d * s..(d + 1) * s];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                // Guidance never puts mass where the base posterior has none.
                for (k, &v) in row.iter().enumerate() {
                    if base.get(d, k as Symbol) == 0.0 {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}
