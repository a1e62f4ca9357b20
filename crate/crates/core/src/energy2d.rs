//! Two-dimensional energy-guided sampling on the `{0, ..., 32}^2` grid.
//!
//! Shapes are the usual synthetic 2-D densities, mapped from `[-4, 4]^2` to
//! the grid. The default classifier `p(y = 1 | x)` is the 3x3-smoothed,
//! max-normalized histogram of the same shape, floored at `1e-4`, so the
//! guided target `p_1(x) p(y = 1 | x)^gamma` sharpens the shape as `gamma`
//! grows.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximator::ApproximatorConfig;
use crate::ctmc::{CallCounts, InitialState, SamplerConfig};
use crate::error::{Error, Result};
use crate::guidance::{
    sample_guided, ExactGuidance, GuidanceKind, GuidanceModels, GuidanceScheme, RateMode,
};
use crate::optim::OptimizerConfig;
use crate::paths::{ConditionalPath, Init, Scheduler};
use crate::posterior::ExactPosterior;
use crate::statespace::{empirical_pmf, DensityRatio, Pmf, SampleBatch, StateSpace, Symbol};
use crate::training::{fit_guidance, fit_ratio, GuidanceData, SampleSource};

/// Grid points per axis.
pub const GRID: usize = 33;

/// Lower bound on classifier probabilities.
pub const CLASSIFIER_FLOOR: f64 = 1e-4;

/// Half-width of the raw coordinate box mapped onto the grid.
const BOX: f64 = 4.0;

/// The data space `{0, ..., 32}^2`.
pub fn grid_space() -> StateSpace {
    StateSpace::new(2, GRID).expect("grid space is valid")
}

/// The data space extended by a mask symbol (34 symbols).
pub fn masked_grid_space() -> StateSpace {
    StateSpace::with_mask(2, GRID).expect("grid space is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    #[serde(rename = "rings")]
    Rings,
    #[serde(rename = "moons")]
    Moons,
    #[serde(rename = "8gaussians")]
    EightGaussians,
    #[serde(rename = "2spirals")]
    TwoSpirals,
    #[serde(rename = "checkerboard")]
    Checkerboard,
    #[serde(rename = "swissroll")]
    SwissRoll,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Rings,
        Shape::Moons,
        Shape::EightGaussians,
        Shape::TwoSpirals,
        Shape::Checkerboard,
        Shape::SwissRoll,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Rings => "rings",
            Shape::Moons => "moons",
            Shape::EightGaussians => "8gaussians",
            Shape::TwoSpirals => "2spirals",
            Shape::Checkerboard => "checkerboard",
            Shape::SwissRoll => "swissroll",
        }
    }

    /// One raw point in roughly `[-4, 4]^2`.
    fn draw(&self, rng: &mut ChaCha8Rng, index: usize, n: usize) -> [f64; 2] {
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        match self {
            Shape::Rings => {
                // Four concentric circles with evenly spaced angles, radii
                // 3, 2.25, 1.5, 0.75.
                let quarter = (n / 4).max(1);
                let ring = (index / quarter).min(3);
                let count = if ring == 3 { n - 3 * quarter } else { quarter }.max(1);
                let k = index - ring * quarter;
                let angle = 2.0 * PI * k as f64 / count as f64;
                let radius = 3.0 * (1.0 - 0.25 * ring as f64);
                [
                    radius * angle.cos() + 0.08 * normal(rng),
                    radius * angle.sin() + 0.08 * normal(rng),
                ]
            }
            Shape::Moons => {
                let upper = index < n / 2 + n % 2;
                let a = PI * rng.random::<f64>();
                let (x, y) = if upper { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
                [
                    2.0 * (x + 0.1 * normal(rng)) - 1.0,
                    2.0 * (y + 0.1 * normal(rng)) - 0.2,
                ]
            }
            Shape::EightGaussians => {
                const CENTERS: [(f64, f64); 8] = [
                    (1.0, 0.0),
                    (-1.0, 0.0),
                    (0.0, 1.0),
                    (0.0, -1.0),
                    (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
                    (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
                    (-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
                    (-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
                ];
                let (cx, cy) = CENTERS[rng.random_range(0..8)];
                [
                    (4.0 * cx + 0.5 * normal(rng)) / 1.414,
                    (4.0 * cy + 0.5 * normal(rng)) / 1.414,
                ]
            }
            Shape::TwoSpirals => {
                let t = rng.random::<f64>().sqrt() * 540.0 * (2.0 * PI) / 360.0;
                let mut x = -t.cos() * t + 0.5 * rng.random::<f64>();
                let mut y = t.sin() * t + 0.5 * rng.random::<f64>();
                if index % 2 == 1 {
                    x = -x;
                    y = -y;
                }
                [x / 3.0 + 0.1 * normal(rng), y / 3.0 + 0.1 * normal(rng)]
            }
            Shape::Checkerboard => {
                let x1 = 4.0 * rng.random::<f64>() - 2.0;
                let x2 = rng.random::<f64>() - 2.0 * rng.random_range(0..2) as f64;
                let x2 = x2 + x1.floor().rem_euclid(2.0);
                [2.0 * x1, 2.0 * x2]
            }
            Shape::SwissRoll => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let x = t * t.cos() + normal(rng);
                let z = t * t.sin() + normal(rng);
                [x / 5.0, z / 5.0]
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL.into_iter().find(|shape| shape.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Shape::ALL.iter().map(|s| s.name()).collect();
            Error::InvalidConfig(format!("unknown dataset '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Maps a raw coordinate in `[-4, 4]` to the nearest grid index.
pub fn quantize(v: f64) -> Symbol {
    let g = ((v + BOX) / (2.0 * BOX) * (GRID - 1) as f64).round();
    g.clamp(0.0, (GRID - 1) as f64) as Symbol
}

/// Raw and quantized draws from a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDataset {
    pub shape: Shape,
    pub seed: u64,
    pub raw: Vec<[f64; 2]>,
    pub quantized: Vec<[Symbol; 2]>,
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn to_batch(&self) -> SampleBatch {
        let states = self.quantized.iter().flat_map(|p| p.iter().copied()).collect();
        SampleBatch::new(2, states, 1.0).expect("two coordinates per point")
    }

    /// Normalized histogram over the grid.
    pub fn pmf(&self) -> Result<Pmf> {
        empirical_pmf(&self.to_batch(), &grid_space())
    }
}

pub fn generate_dataset(shape: Shape, n: usize, seed: u64) -> Result<ShapeDataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<[f64; 2]> = (0..n).map(|i| shape.draw(&mut rng, i, n)).collect();
    let quantized = raw.iter().map(|p| [quantize(p[0]), quantize(p[1])]).collect();
    Ok(ShapeDataset { shape, seed, raw, quantized })
}

/// Mean over the in-grid cells of each 3x3 neighborhood.
pub fn smooth3x3(values: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), GRID * GRID);
    let mut out = vec![0.0; GRID * GRID];
    for i in 0..GRID {
        for j in 0..GRID {
            let (mut sum, mut count) = (0.0, 0.0);
            for a in i.saturating_sub(1)..=(i + 1).min(GRID - 1) {
                for b in j.saturating_sub(1)..=(j + 1).min(GRID - 1) {
                    sum += values[a * GRID + b];
                    count += 1.0;
                }
            }
            out[i * GRID + j] = sum / count;
        }
    }
    out
}

/// Cells strictly above all in-grid neighbors and at least `fraction` of
/// the maximum.
pub fn local_maxima(values: &[f64], fraction: f64) -> Vec<(usize, usize)> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for i in 0..GRID {
        for j in 0..GRID {
            let v = values[i * GRID + j];
            if v < fraction * max {
                continue;
            }
            let mut is_max = true;
            for a in i.saturating_sub(1)..=(i + 1).min(GRID - 1) {
                for b in j.saturating_sub(1)..=(j + 1).min(GRID - 1) {
                    if (a, b) != (i, j) && values[a * GRID + b] >= v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                out.push((i, j));
            }
        }
    }
    out
}

/// Which classifier defines the energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Smoothed, max-normalized histogram of the shape.
    ShapeDensity,
    /// `exp(-|x - c|^2 / (2 sigma^2))` in grid units.
    Radial { center: [f64; 2], sigma: f64 },
}

impl Default for ClassifierKind {
    fn default() -> Self {
        ClassifierKind::ShapeDensity
    }
}

/// A classifier `p(y = 1 | x)` on the grid and its energy `-log p`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyFunction {
    probs: Vec<f64>,
}

impl EnergyFunction {
    pub fn from_grid(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != GRID * GRID {
            return Err(Error::Precondition(format!("classifier needs {} values", GRID * GRID)));
        }
        if probs.iter().any(|p| !(*p >= CLASSIFIER_FLOOR && *p <= 1.0)) {
            return Err(Error::Precondition(format!(
                "classifier probabilities must lie in [{CLASSIFIER_FLOOR}, 1]"
            )));
        }
        Ok(Self { probs })
    }

    /// The default classifier built from `n` draws of `shape`.
    pub fn from_shape(shape: Shape, n: usize, seed: u64) -> Result<Self> {
        let pmf = generate_dataset(shape, n, seed)?.pmf()?;
        Self::from_density(pmf.weights())
    }

    /// `max(floor, smooth(density) / max)`.
    pub fn from_density(density: &[f64]) -> Result<Self> {
        let smooth = smooth3x3(density);
        let max = smooth.iter().cloned().fold(0.0, f64::max);
        if !(max > 0.0) {
            return Err(Error::Precondition("density has no mass".into()));
        }
        Self::from_grid(smooth.iter().map(|v| (v / max).max(CLASSIFIER_FLOOR)).collect())
    }

    pub fn radial(center: [f64; 2], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidConfig("radial classifier needs sigma > 0".into()));
        }
        let mut probs = Vec::with_capacity(GRID * GRID);
        for i in 0..GRID {
            for j in 0..GRID {
                let d2 = (i as f64 - center[0]).powi(2) + (j as f64 - center[1]).powi(2);
                probs.push((-d2 / (2.0 * sigma * sigma)).exp().max(CLASSIFIER_FLOOR));
            }
        }
        Self::from_grid(probs)
    }

    pub fn build(kind: ClassifierKind, shape: Shape, n: usize, seed: u64) -> Result<Self> {
        match kind {
            ClassifierKind::ShapeDensity => Self::from_shape(shape, n, seed),
            ClassifierKind::Radial { center, sigma } => Self::radial(center, sigma),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `p(y = 1 | x)`; 1 when a coordinate is not a data symbol.
    pub fn prob(&self, x: &[Symbol]) -> f64 {
        match x {
            [a, b] if (*a as usize) < GRID && (*b as usize) < GRID => {
                self.probs[*a as usize * GRID + *b as usize]
            }
            _ => 1.0,
        }
    }

    pub fn energy(&self, x: &[Symbol]) -> f64 {
        -self.prob(x).ln()
    }

    /// `r(x) = p(y = 1 | x)^gamma` on `space` (the grid, possibly masked).
    pub fn density_ratio(&self, space: StateSpace, gamma: f64) -> DensityRatio {
        let probs = self.clone();
        DensityRatio::from_fn(space, move |x| probs.prob(x).powf(gamma))
    }
}

/// `p_1^(gamma) ∝ p_1 p(y = 1 | x)^gamma` and the ratio `p(y = 1 | x)^gamma`.
pub fn guided_target(p1: &Pmf, energy: &EnergyFunction, gamma: f64) -> Result<(Pmf, DensityRatio)> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
    }
    let space = *p1.space();
    let ratio = energy.density_ratio(space, gamma);
    if gamma == 0.0 {
        return Ok((p1.clone(), ratio));
    }
    let mut x = vec![0 as Symbol; space.dims()];
    let weights: Vec<f64> = p1
        .weights()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if w == 0.0 {
                return 0.0;
            }
            space.state_at(i, &mut x);
            w * ratio.eval(&x)
        })
        .collect();
    Ok((Pmf::from_unnormalized(space, weights)?, ratio))
}

/// A source distribution on the grid with its classifier.
#[derive(Debug, Clone)]
pub struct EnergyProblem {
    pub shape: Shape,
    pub p1: Pmf,
    pub energy: EnergyFunction,
}

impl EnergyProblem {
    /// `p_1` is the histogram of `n` draws; the classifier uses an
    /// independent set of `n` draws.
    pub fn new(shape: Shape, n: usize, seed: u64, classifier: ClassifierKind) -> Result<Self> {
        let p1 = generate_dataset(shape, n, seed)?.pmf()?;
        let energy = EnergyFunction::build(classifier, shape, n, seed ^ 0xC1A5)?;
        Ok(Self { shape, p1, energy })
    }

    /// Path, source pmf and ratio expressed on the sampling space of `init`.
    fn setup(&self, init: Init, gamma: f64) -> Result<(ConditionalPath, Pmf, DensityRatio)> {
        let space = match init {
            Init::Masked => masked_grid_space(),
            Init::Uniform => grid_space(),
        };
        let path = ConditionalPath::mixture(space, Scheduler::Cosine, init)?;
        let p1 = self.p1.embed(&space)?;
        Ok((path, p1, self.energy.density_ratio(space, gamma)))
    }

    /// Samples with exact posterior and exact guidance and scores against
    /// the exact target.
    pub fn run(&self, run: &RunSpec) -> Result<RunRecord> {
        let (path, p1, ratio) = self.setup(run.init, run.gamma)?;
        let (target, _) = guided_target(&self.p1, &self.energy, run.gamma)?;
        let posterior = ExactPosterior::new(p1.clone(), path)?.with_marginal_fallback()?;
        // The predictor uses the classifier expectation raised to gamma.
        let rate_ratio = match run.scheme {
            GuidanceScheme::Predictor { .. } => self.energy.density_ratio(*path.space(), 1.0),
            _ => ratio.clone(),
        };
        let matrix = ExactGuidance::new(p1.clone(), ratio, path)?.with_marginal_fallback()?;
        let scalar = ExactGuidance::new(p1, rate_ratio, path)?.with_marginal_fallback()?;
        let config = SamplerConfig::new(run.steps, run.chains, InitialState::from_path(&path), run.seed);
        let models = GuidanceModels { posterior_based: Some(&matrix), rate_based: Some(&scalar) };
        let out = sample_guided(&run.scheme, &posterior, models, &path, &config, run.rate_mode)?;
        let empirical = empirical_on_grid(&out.batch)?;
        let kl = empirical.kl_divergence(&target)?;
        Ok(RunRecord {
            shape: self.shape,
            gamma: run.gamma,
            scheme: run.scheme.to_string(),
            init: run.init.name().to_string(),
            seed: run.seed,
            steps: run.steps,
            chains: run.chains,
            tv: empirical.total_variation(&target)?,
            kl: kl.is_finite().then_some(kl),
            calls: out.calls,
            guidance_calls_per_step: out.guidance_calls_per_step(),
            empirical: Some(empirical),
        })
    }
}

/// Histogram of final states on the unmasked grid; states that still carry
/// a mask symbol are an error.
pub fn empirical_on_grid(batch: &SampleBatch) -> Result<Pmf> {
    let grid = grid_space();
    if batch.iter().any(|x| !grid.contains(x)) {
        return Err(Error::Numeric("a chain ended outside the data grid".into()));
    }
    empirical_pmf(batch, &grid)
}

/// One sampling configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub gamma: f64,
    pub scheme: GuidanceScheme,
    pub init: Init,
    pub steps: usize,
    pub chains: usize,
    pub seed: u64,
    #[serde(default)]
    pub rate_mode: Option<RateMode>,
}

/// Metrics for one sampling run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub shape: Shape,
    pub gamma: f64,
    pub scheme: String,
    pub init: String,
    pub seed: u64,
    pub steps: usize,
    pub chains: usize,
    pub tv: f64,
    /// `KL(empirical || target)`; `None` when infinite.
    pub kl: Option<f64>,
    pub calls: CallCounts,
    pub guidance_calls_per_step: Option<f64>,
    #[serde(skip)]
    pub empirical: Option<Pmf>,
}

/// Grid of runs over gamma, scheme, init and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shape: Shape,
    pub data_size: usize,
    pub data_seed: u64,
    pub classifier: ClassifierKind,
    pub gammas: Vec<f64>,
    pub schemes: Vec<GuidanceScheme>,
    pub inits: Vec<Init>,
    pub steps: usize,
    pub chains: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shape: Shape::Rings,
            data_size: 200_000,
            data_seed: 0,
            classifier: ClassifierKind::ShapeDensity,
            gammas: vec![0.0, 3.0, 10.0, 20.0],
            schemes: vec![GuidanceScheme::PosteriorBased],
            inits: vec![Init::Masked, Init::Uniform],
            steps: 64,
            chains: 100_000,
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &gamma in &self.gammas {
            for &scheme in &self.schemes {
                for &init in &self.inits {
                    for &seed in &self.seeds {
                        out.push(RunSpec {
                            gamma,
                            scheme,
                            init,
                            steps: self.steps,
                            chains: self.chains,
                            seed,
                            rate_mode: None,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Runs every configuration in order; each run is parallel internally.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let problem = EnergyProblem::new(config.shape, config.data_size, config.data_seed, config.classifier)?;
    config.runs().iter().map(|run| problem.run(run)).collect()
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Number of adjacent pairs where the sequence increases.
pub fn count_increases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Sweep of the regularization weight on a source/target pair with a
/// learned density ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationConfig {
    pub source: Shape,
    pub target: Shape,
    /// Mass of the uniform component mixed into the source so the target is
    /// absolutely continuous with respect to it.
    pub source_floor: f64,
    /// Histogram size for the exact source and target pmfs.
    pub pmf_size: usize,
    /// Finite sample sets used to fit the ratio model.
    pub ratio_samples: usize,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub guidance_model: ApproximatorConfig,
    pub guidance_optimizer: OptimizerConfig,
    pub ratio_model: ApproximatorConfig,
    pub ratio_optimizer: OptimizerConfig,
    pub steps: usize,
    pub chains: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            source: Shape::EightGaussians,
            target: Shape::Rings,
            source_floor: 0.05,
            pmf_size: 200_000,
            ratio_samples: 20_000,
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
            guidance_model: ApproximatorConfig::Tabular { time_buckets: 8 },
            guidance_optimizer: OptimizerConfig {
                learning_rate: Some(0.05),
                steps: 1500,
                batch_size: 256,
                lambda: 0.5,
                ..OptimizerConfig::default()
            },
            ratio_model: ApproximatorConfig::Tabular { time_buckets: 1 },
            ratio_optimizer: OptimizerConfig {
                learning_rate: Some(0.05),
                steps: 500,
                batch_size: 512,
                ..OptimizerConfig::default()
            },
            steps: 64,
            chains: 20_000,
        }
    }
}

/// TV to the target for every `(lambda, seed)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizationReport {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `tv[l][k]` for lambda `l` and seed `k`.
    pub tv: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
    /// Adjacent lambda pairs whose median TV increases.
    pub inversions: usize,
}

/// The source `(1 - floor) p_shape + floor * uniform` and the target histogram.
pub fn mismatch_pair(config: &RegularizationConfig) -> Result<(Pmf, Pmf)> {
    let space = grid_space();
    let base = generate_dataset(config.source, config.pmf_size, 0x50)?.pmf()?;
    let uniform = 1.0 / (GRID * GRID) as f64;
    let floor = config.source_floor;
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::InvalidConfig("source_floor must lie in (0, 1)".into()));
    }
    let source = Pmf::new(space, base.weights().iter().map(|w| (1.0 - floor) * w + floor * uniform).collect())?;
    let target = generate_dataset(config.target, config.pmf_size, 0x7A)?.pmf()?;
    Ok((source, target))
}

pub fn regularization_sweep(config: &RegularizationConfig) -> Result<RegularizationReport> {
    let (source, target) = mismatch_pair(config)?;
    let space = grid_space();
    let path = ConditionalPath::mixture(space, Scheduler::Cosine, Init::Uniform)?;
    let posterior = ExactPosterior::new(source.clone(), path)?.with_marginal_fallback()?;
    let source_draws = SampleSource::from_pmf(&source);
    let target_draws = SampleSource::from_pmf(&target);
    let mut tv = vec![vec![0.0; config.seeds.len()]; config.lambdas.len()];
    for (k, &seed) in config.seeds.iter().enumerate() {
        let finite = |pmf: &Pmf, salt: u64| -> Result<SampleSource> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
            let sampler = pmf.sampler();
            let mut states = vec![0 as Symbol; 2 * config.ratio_samples];
            for x in states.chunks_mut(2) {
                sampler.sample_into(rng.random::<f64>(), x);
            }
            SampleSource::from_samples(space, SampleBatch::new(2, states, 1.0)?)
        };
        let ratio_opt = OptimizerConfig { seed, ..config.ratio_optimizer.clone() };
        let (ratio, _) = fit_ratio(&finite(&source, 0xA1)?, &finite(&target, 0xB2)?, &config.ratio_model, &ratio_opt)?;
        let ratio = ratio.to_density_ratio();
        for (l, &lambda) in config.lambdas.iter().enumerate() {
            let data = GuidanceData {
                path: &path,
                source: &source_draws,
                ratio: &ratio,
                target: Some(&target_draws),
                posterior: Some(&posterior),
                exact_source: None,
            };
            let opt = OptimizerConfig { seed, lambda, ..config.guidance_optimizer.clone() };
            let (guidance, _) = fit_guidance(GuidanceKind::PosteriorBased, &data, &config.guidance_model, &opt)?;
            let sampler = SamplerConfig::new(config.steps, config.chains, InitialState::Uniform, seed);
            let models = GuidanceModels { posterior_based: Some(&guidance), rate_based: None };
            let out = sample_guided(&GuidanceScheme::PosteriorBased, &posterior, models, &path, &sampler, None)?;
            tv[l][k] = empirical_on_grid(&out.batch)?.total_variation(&target)?;
            log::info!("lambda {lambda} seed {seed}: tv {:.4}", tv[l][k]);
        }
    }
    let medians: Vec<f64> = tv.iter().map(|row| median(row)).collect();
    Ok(RegularizationReport {
        lambdas: config.lambdas.clone(),
        seeds: config.seeds.clone(),
        inversions: count_increases(&medians),
        tv,
        medians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_bounds() {
        assert_eq!(quantize(-4.0), 0);
        assert_eq!(quantize(4.0), 32);
        assert_eq!(quantize(0.0), 16);
        assert_eq!(quantize(-100.0), 0);
        assert_eq!(quantize(1e9), 32);
    }

    #[test]
    fn shape_names_round_trip() {
        for s in Shape::ALL {
            assert_eq!(s.name().parse::<Shape>().unwrap(), s);
        }
        let err = "blob".parse::<Shape>().unwrap_err().to_string();
        assert!(err.contains("checkerboard"));
    }

    #[test]
    fn classifier_floor_and_range() {
        let e = EnergyFunction::from_shape(Shape::Moons, 20_000, 3).unwrap();
        assert!(e.probs().iter().all(|&p| (CLASSIFIER_FLOOR..=1.0).contains(&p)));
        assert!(e.probs().iter().any(|&p| p == 1.0));
        assert_eq!(e.prob(&[33, 0]), 1.0);
        assert!(EnergyFunction::from_grid(vec![0.0; GRID * GRID]).is_err());
    }

    #[test]
    fn guided_target_identity_and_formula() {
        let problem = EnergyProblem::new(Shape::Rings, 20_000, 1, ClassifierKind::ShapeDensity).unwrap();
        let (same, _) = guided_target(&problem.p1, &problem.energy, 0.0).unwrap();
        assert_eq!(same, problem.p1);
        let (t3, r) = guided_target(&problem.p1, &problem.energy, 3.0).unwrap();
        let mut x = [0 as Symbol; 2];
        let mut z = 0.0;
        for i in 0..GRID * GRID {
            grid_space().state_at(i, &mut x);
            z += problem.p1.weights()[i] * problem.energy.prob(&x).powi(3);
        }
        for i in 0..GRID * GRID {
            grid_space().state_at(i, &mut x);
            let expected = problem.p1.weights()[i] * problem.energy.prob(&x).powi(3) / z;
            assert!((t3.weights()[i] - expected).abs() < 1e-15);
            assert!((r.eval(&x) - problem.energy.prob(&x).powi(3)).abs() < 1e-15);
        }
        assert!(guided_target(&problem.p1, &problem.energy, -1.0).is_err());
    }

    #[test]
    fn medians_and_inversions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(count_increases(&[5.0, 4.0, 4.0, 4.5, 3.0]), 1);
    }
}
