//! Training loops and losses for guidance and density-ratio models.
//!
//! Guidance models are log-parameterized: the approximator outputs `log h`,
//! so `h > 0` holds by construction. The Bregman losses drop the constant
//! that does not depend on the parameters, so reported values are shifted
//! relative to the divergence itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, ApproximatorConfig, GradAccumulator, GradBuffer};
use crate::error::{Error, Result};
use crate::guidance::{ExactGuidance, GuidanceKind, LearnedGuidance, PosteriorGuidance, RateGuidance};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::paths::ConditionalPath;
use crate::posterior::{PosteriorModel, LOG_CLAMP};
use crate::rng::{mix_key, sample_weighted};
use crate::statespace::{DensityRatio, Pmf, PmfSampler, SampleBatch, StateSpace, Symbol};

/// Items per parallel work unit; fixed so the reduction order does not
/// depend on the thread count.
const CHUNK: usize = 32;

/// Coordinates compared by [`grad_check`].
pub const GRAD_CHECK_COORDS: usize = 64;

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Posterior entries below this mass are left out of the reported gap to the
/// exact guidance; they receive almost no training signal.
pub const GAP_MASS_FLOOR: f64 = 1e-2;

/// Triples `(t, x1, x_t)` stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    dims: usize,
    times: Vec<f64>,
    x1: Vec<Symbol>,
    xt: Vec<Symbol>,
}

impl TrainingBatch {
    pub fn new(dims: usize, times: Vec<f64>, x1: Vec<Symbol>, xt: Vec<Symbol>) -> Result<Self> {
        if dims == 0 || x1.len() != times.len() * dims || xt.len() != x1.len() {
            return Err(Error::Precondition("training batch arrays have inconsistent lengths".into()));
        }
        Ok(Self { dims, times, x1, xt })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn x1(&self, i: usize) -> &[Symbol] {
        &self.x1[i * self.dims..(i + 1) * self.dims]
    }

    pub fn xt(&self, i: usize) -> &[Symbol] {
        &self.xt[i * self.dims..(i + 1) * self.dims]
    }
}

/// Anything with a number of items a training loop can iterate over.
pub trait Batch: Sync {
    fn len(&self) -> usize;
}

impl Batch for TrainingBatch {
    fn len(&self) -> usize {
        self.times.len()
    }
}

/// Recorded training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<usize>,
    /// Weighted total per recorded step.
    pub values: Vec<f64>,
    /// Names of the individual terms, empty for single-term objectives.
    pub term_names: Vec<String>,
    /// `terms[k][j]` is term `k` at recorded step `j`, unweighted.
    pub terms: Vec<Vec<f64>>,
}

impl LossCurve {
    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// CSV with columns `step,loss` followed by one column per term.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss");
        for name in &self.term_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (j, (s, v)) in self.steps.iter().zip(&self.values).enumerate() {
            out.push_str(&format!("{s},{v:e}"));
            for term in &self.terms {
                out.push_str(&format!(",{:e}", term[j]));
            }
            out.push('\n');
        }
        out
    }
}

/// Random stream for the batch drawn at `step`.
pub fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(&[seed, step]))
}

/// Where endpoint samples `x1` come from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    /// Exact draws from a pmf.
    Pmf(PmfSampler),
    /// Uniform draws with replacement from a fixed sample set.
    Samples { space: StateSpace, batch: SampleBatch },
}

impl SampleSource {
    pub fn from_pmf(pmf: &Pmf) -> Self {
        SampleSource::Pmf(pmf.sampler())
    }

    pub fn from_samples(space: StateSpace, batch: SampleBatch) -> Result<Self> {
        batch.validate(&space)?;
        if batch.is_empty() {
            return Err(Error::Precondition("sample source is empty".into()));
        }
        Ok(SampleSource::Samples { space, batch })
    }

    pub fn space(&self) -> &StateSpace {
        match self {
            SampleSource::Pmf(s) => s.space(),
            SampleSource::Samples { space, .. } => space,
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [Symbol]) {
        match self {
            SampleSource::Pmf(s) => s.sample_into(rng.random::<f64>(), out),
            SampleSource::Samples { batch, .. } => {
                let i = rng.random_range(0..batch.len());
                out.copy_from_slice(batch.state(i));
            }
        }
    }
}

impl From<PmfSampler> for SampleSource {
    fn from(s: PmfSampler) -> Self {
        SampleSource::Pmf(s)
    }
}

/// Draws `x_t ~ p_{t|1}(. | x1)` coordinate-wise.
pub fn sample_conditional(path: &ConditionalPath, t: f64, x1: &[Symbol], rng: &mut ChaCha8Rng, out: &mut [Symbol]) {
    let s = path.space().alphabet_size();
    let mut row = vec![0.0; s];
    for (d, &b) in x1.iter().enumerate() {
        for (a, v) in row.iter_mut().enumerate() {
            *v = path.prob_unchecked(t, a as Symbol, b);
        }
        out[d] = sample_weighted(&row, rng.random::<f64>()).map_or(b, |a| a as Symbol);
    }
}

/// Batch of `(t, x1, x_t)` with stratified times `t_i = (i + u_i) / n`.
pub fn sample_training_batch<S>(
    source: &S,
    path: &ConditionalPath,
    batch_size: usize,
    _step: usize,
    rng: &mut ChaCha8Rng,
) -> TrainingBatch
where
    S: EndpointDraw + ?Sized,
{
    let dims = path.space().dims();
    let mut times = Vec::with_capacity(batch_size);
    let mut x1 = vec![0 as Symbol; batch_size * dims];
    let mut xt = vec![0 as Symbol; batch_size * dims];
    for i in 0..batch_size {
        let t = ((i as f64 + rng.random::<f64>()) / batch_size as f64).min(1.0);
        times.push(t);
        let (a, b) = (i * dims, (i + 1) * dims);
        source.draw_endpoint(rng, &mut x1[a..b]);
        sample_conditional(path, t, &x1[a..b], rng, &mut xt[a..b]);
    }
    TrainingBatch { dims, times, x1, xt }
}

/// Source of endpoint draws for [`sample_training_batch`].
pub trait EndpointDraw {
    fn draw_endpoint(&self, rng: &mut ChaCha8Rng, out: &mut [Symbol]);
}

impl EndpointDraw for PmfSampler {
    fn draw_endpoint(&self, rng: &mut ChaCha8Rng, out: &mut [Symbol]) {
        self.sample_into(rng.random::<f64>(), out);
    }
}

impl EndpointDraw for SampleSource {
    fn draw_endpoint(&self, rng: &mut ChaCha8Rng, out: &mut [Symbol]) {
        self.draw(rng, out);
    }
}

/// Single-term training loop; see [`run_training_terms`].
pub fn run_training<S, B, FM, FB, FL>(
    state: &mut S,
    optimizer: &OptimizerConfig,
    model: FM,
    batch: FB,
    item: FL,
) -> Result<LossCurve>
where
    S: Sync,
    B: Batch,
    FM: Fn(&mut S) -> &mut Approximator,
    FB: FnMut(usize, &mut ChaCha8Rng) -> B,
    FL: Fn(&S, &B, usize, &mut GradAccumulator) -> f64 + Sync,
{
    run_training_terms(state, optimizer, model, batch, &[], [1.0, 0.0], |s, b, i, acc| [item(s, b, i, acc), 0.0])
}

/// Minimizes the batch mean of per-item losses.
///
/// `item` returns up to two unweighted terms and accumulates the gradient of
/// `weights[0] * term0 + weights[1] * term1`. Items are processed in fixed
/// chunks in parallel and merged in order, so results do not depend on the
/// number of threads.
pub fn run_training_terms<S, B, FM, FB, FL>(
    state: &mut S,
    optimizer: &OptimizerConfig,
    model: FM,
    mut batch: FB,
    term_names: &[&str],
    weights: [f64; 2],
    item: FL,
) -> Result<LossCurve>
where
    S: Sync,
    B: Batch,
    FM: Fn(&mut S) -> &mut Approximator,
    FB: FnMut(usize, &mut ChaCha8Rng) -> B,
    FL: Fn(&S, &B, usize, &mut GradAccumulator) -> [f64; 2] + Sync,
{
    optimizer.validate()?;
    let (proto, num_params, tabular) = {
        let m = model(state);
        (m.new_accumulator(), m.num_params(), m.is_tabular())
    };
    let mut opt = Optimizer::new(optimizer, num_params, tabular);
    let mut buffer = GradBuffer::new(num_params);
    let every = (optimizer.steps / 200).max(1);
    let mut curve = LossCurve {
        term_names: term_names.iter().map(|s| s.to_string()).collect(),
        terms: vec![Vec::new(); term_names.len()],
        ..LossCurve::default()
    };

    for step in 0..optimizer.steps {
        let mut rng = batch_rng(optimizer.seed, step as u64);
        let b = batch(step, &mut rng);
        let n = b.len();
        if n == 0 {
            return Err(Error::Precondition("training batch is empty".into()));
        }
        let shared: &S = state;
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let chunks: Vec<(GradAccumulator, [f64; 2])> = starts
            .par_iter()
            .map(|&start| {
                let mut acc = proto.clone();
                let mut sums = [0.0; 2];
                for i in start..(start + CHUNK).min(n) {
                    let v = item(shared, &b, i, &mut acc);
                    sums[0] += v[0];
                    sums[1] += v[1];
                }
                (acc, sums)
            })
            .collect();
        buffer.clear();
        let scale = 1.0 / n as f64;
        let mut terms = [0.0; 2];
        for (acc, sums) in &chunks {
            buffer.merge(acc, scale);
            terms[0] += sums[0] * scale;
            terms[1] += sums[1] * scale;
        }
        let total = weights[0] * terms[0] + weights[1] * terms[1];
        if !total.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss is {total}") });
        }
        if buffer.touched().iter().any(|&i| !buffer.values()[i].is_finite()) {
            return Err(Error::Divergence { step, detail: "non-finite gradient".into() });
        }
        if step % every == 0 || step + 1 == optimizer.steps {
            curve.steps.push(step);
            curve.values.push(total);
            for (k, series) in curve.terms.iter_mut().enumerate() {
                series.push(terms[k]);
            }
        }
        let m = model(state);
        opt.step(m.params_mut(), &buffer);
    }
    Ok(curve)
}

/// Result of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` to central differences of `loss` on up to 64
/// coordinates, preferring those with a nonzero analytic gradient.
///
/// The relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(loss: F, params: &[f64], analytic: &[f64], seed: u64) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    let mut rng = batch_rng(seed, 0x6AAD);
    let mut touched: Vec<usize> = (0..params.len()).filter(|&i| analytic[i] != 0.0).collect();
    let mut rest: Vec<usize> = (0..params.len()).filter(|&i| analytic[i] == 0.0).collect();
    shuffle(&mut touched, &mut rng);
    shuffle(&mut rest, &mut rng);
    let coords: Vec<usize> = touched.into_iter().chain(rest).take(GRAD_CHECK_COORDS).collect();
    let mut p = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + GRAD_CHECK_STEP;
        let up = loss(&p);
        p[i] = orig - GRAD_CHECK_STEP;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel_error = max_rel_error.max(rel);
    }
    GradCheck { max_rel_error, coords_checked: coords.len() }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Gradient check of the batch-mean objective `item` at the current
/// parameters of `model`.
pub fn objective_grad_check<F>(model: &Approximator, n: usize, item: F, seed: u64) -> GradCheck
where
    F: Fn(&Approximator, usize, &mut GradAccumulator) -> f64,
{
    let mut buffer = GradBuffer::new(model.num_params());
    for i in 0..n {
        let mut acc = model.new_accumulator();
        item(model, i, &mut acc);
        buffer.merge(&acc, 1.0 / n as f64);
    }
    let loss = |p: &[f64]| probe_loss(&mut model.clone(), p, n, &item);
    grad_check(loss, model.params(), buffer.values(), seed)
}

fn probe_loss<F>(probe: &mut Approximator, params: &[f64], n: usize, item: &F) -> f64
where
    F: Fn(&Approximator, usize, &mut GradAccumulator) -> f64,
{
    probe.params_mut().copy_from_slice(params);
    let mut sink = probe.new_accumulator();
    (0..n).map(|i| item(probe, i, &mut sink)).sum::<f64>() / n as f64
}

fn check_ratio_values(r: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Precondition("empty training batch".into()));
    }
    if r.len() != n {
        return Err(Error::Precondition("one ratio value per batch item is required".into()));
    }
    if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Precondition("ratio values must be finite and >= 0".into()));
    }
    Ok(())
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

/// `mean_i sum_d [h^d(x1^d, x_t) - r(x1) log h^d(x1^d, x_t)]`.
pub fn bregman_loss_posterior(h: &dyn PosteriorGuidance, batch: &TrainingBatch, r: &[f64]) -> Result<f64> {
    check_ratio_values(r, batch.len())?;
    let s = h.space().alphabet_size();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let m = h.h_matrix(batch.time(i), batch.xt(i))?;
        for (d, &b) in batch.x1(i).iter().enumerate() {
            let v = m[d * s + b as usize];
            total += v - r[i] * v.ln();
        }
    }
    finite(total / batch.len() as f64, "Bregman loss")
}

/// `mean_i [h(x_t) - r(x1) log h(x_t)]`.
pub fn bregman_loss_rate(h: &dyn RateGuidance, batch: &TrainingBatch, r: &[f64]) -> Result<f64> {
    check_ratio_values(r, batch.len())?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let v = h.h_value(batch.time(i), batch.xt(i))?;
        total += v - r[i] * v.ln();
    }
    finite(total / batch.len() as f64, "Bregman loss")
}

/// Guided posterior row `h p / sum(h p)` for coordinate `d`, with the
/// observed symbol's probability.
fn guided_row(h: &[f64], p: &[f64], observed: usize) -> Result<(Vec<f64>, f64)> {
    let w: Vec<f64> = h.iter().zip(p).map(|(a, b)| a * b).collect();
    let z: f64 = w.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Numeric("guided posterior normalizer is zero".into()));
    }
    let q: Vec<f64> = w.iter().map(|v| v / z).collect();
    let qo = q[observed];
    Ok((q, qo))
}

/// Cross-entropy of the guided posterior against target endpoints:
/// `mean_i -sum_d log [h^d(x1^d, x_t) / sum_s h^d(s, x_t) p^d(s | x_t)]`
/// with `p` frozen.
pub fn regularization_loss(
    h: &dyn PosteriorGuidance,
    posterior: &dyn PosteriorModel,
    batch: &TrainingBatch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let s = h.space().alphabet_size();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let m = h.h_matrix(batch.time(i), batch.xt(i))?;
        let p = posterior.evaluate(batch.time(i), batch.xt(i))?;
        for (d, &b) in batch.x1(i).iter().enumerate() {
            let (_, qo) = guided_row(&m[d * s..(d + 1) * s], p.row(d), b as usize)?;
            total -= qo.max(LOG_CLAMP).ln();
        }
    }
    finite(total / batch.len() as f64, "regularization loss")
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A learned density ratio `r = exp(model(x))`; time is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedRatio {
    model: Approximator,
}

impl LearnedRatio {
    /// The time input fed to the underlying model.
    const TIME: f64 = 1.0;

    pub fn new(model: Approximator) -> Result<Self> {
        if model.out_dim() != 1 {
            return Err(Error::Precondition("ratio model must have one output".into()));
        }
        Ok(Self { model })
    }

    pub fn model(&self) -> &Approximator {
        &self.model
    }

    pub fn into_model(self) -> Approximator {
        self.model
    }

    pub fn space(&self) -> &StateSpace {
        self.model.space()
    }

    pub fn log_ratio(&self, x: &[Symbol]) -> f64 {
        let mut out = [0.0];
        self.model.forward(Self::TIME, x, &mut out);
        out[0]
    }

    pub fn eval(&self, x: &[Symbol]) -> f64 {
        self.log_ratio(x).exp()
    }

    pub fn to_density_ratio(&self) -> DensityRatio {
        let model = self.clone();
        DensityRatio::from_fn(*self.space(), move |x| model.eval(x))
    }
}

/// `mean_p softplus(log r) + mean_q softplus(-log r)`, the logistic loss whose
/// population minimizer is `r = q_1 / p_1`.
pub fn density_ratio_loss(r: &LearnedRatio, batch_p: &SampleBatch, batch_q: &SampleBatch) -> Result<f64> {
    if batch_p.is_empty() || batch_q.is_empty() {
        return Err(Error::Precondition("density-ratio loss needs both batches".into()));
    }
    let lp: f64 = batch_p.iter().map(|x| softplus(r.log_ratio(x))).sum::<f64>() / batch_p.len() as f64;
    let lq: f64 = batch_q.iter().map(|x| softplus(-r.log_ratio(x))).sum::<f64>() / batch_q.len() as f64;
    finite(lp + lq, "density-ratio loss")
}

/// Result of [`fit_ratio`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioFitReport {
    pub curve: LossCurve,
    pub final_loss: f64,
    pub grad_check: GradCheck,
}

struct PairBatch {
    dims: usize,
    p: Vec<Symbol>,
    q: Vec<Symbol>,
}

impl Batch for PairBatch {
    fn len(&self) -> usize {
        self.p.len() / self.dims
    }
}

fn ratio_item(model: &Approximator, b: &PairBatch, i: usize, acc: &mut GradAccumulator) -> f64 {
    let (xp, xq) = (&b.p[i * b.dims..(i + 1) * b.dims], &b.q[i * b.dims..(i + 1) * b.dims]);
    let mut out = [0.0];
    model.forward(LearnedRatio::TIME, xp, &mut out);
    let tp = out[0];
    model.forward(LearnedRatio::TIME, xq, &mut out);
    let tq = out[0];
    model.backward(LearnedRatio::TIME, xp, &[sigmoid(tp)], acc);
    model.backward(LearnedRatio::TIME, xq, &[-sigmoid(-tq)], acc);
    softplus(tp) + softplus(-tq)
}

/// Trains `log r` by logistic discrimination between source and target draws.
pub fn fit_ratio(
    source: &SampleSource,
    target: &SampleSource,
    approximator: &ApproximatorConfig,
    optimizer: &OptimizerConfig,
) -> Result<(LearnedRatio, RatioFitReport)> {
    if source.space() != target.space() {
        return Err(Error::SpaceMismatch);
    }
    let space = *source.space();
    let dims = space.dims();
    let mut model = approximator.build(space, 1, optimizer.seed)?;
    let draw_pairs = |n: usize, rng: &mut ChaCha8Rng| {
        let mut p = vec![0 as Symbol; n * dims];
        let mut q = vec![0 as Symbol; n * dims];
        for i in 0..n {
            source.draw(rng, &mut p[i * dims..(i + 1) * dims]);
            target.draw(rng, &mut q[i * dims..(i + 1) * dims]);
        }
        PairBatch { dims, p, q }
    };
    let curve = run_training(
        &mut model,
        optimizer,
        |m| m,
        |_, rng| draw_pairs(optimizer.batch_size, rng),
        |m, b, i, acc| ratio_item(m, b, i, acc),
    )?;
    let check_batch = draw_pairs(16, &mut batch_rng(optimizer.seed ^ 0xC4EC, 0));
    let grad_check = objective_grad_check(&model, 16, |m, i, acc| ratio_item(m, &check_batch, i, acc), optimizer.seed);
    let final_loss = curve.last().unwrap_or(f64::NAN);
    Ok((LearnedRatio::new(model)?, RatioFitReport { curve, final_loss, grad_check }))
}

/// Data for [`fit_guidance`].
pub struct GuidanceData<'a> {
    pub path: &'a ConditionalPath,
    /// Draws of `x1 ~ p_1`.
    pub source: &'a SampleSource,
    /// The density ratio `r = q_1 / p_1` (possibly learned).
    pub ratio: &'a DensityRatio,
    /// Draws of `x1 ~ q_1`; required when `lambda > 0`.
    pub target: Option<&'a SampleSource>,
    /// Frozen source posterior used by the regularizer.
    pub posterior: Option<&'a dyn PosteriorModel>,
    /// Enumerable `p_1` for reporting the gap to the exact guidance.
    pub exact_source: Option<&'a Pmf>,
}

/// Result of [`fit_guidance`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceFitReport {
    pub curve: LossCurve,
    pub final_loss: f64,
    pub grad_check: GradCheck,
    /// Max-abs difference to the exact guidance on held-out draws, over
    /// entries whose exact posterior mass is at least [`GAP_MASS_FLOOR`].
    pub gap_to_exact: Option<f64>,
}

struct GuidanceBatch {
    source: TrainingBatch,
    r: Vec<f64>,
    target: Option<TrainingBatch>,
    /// Frozen posterior rows at each target `x_t`, row-major.
    target_posterior: Vec<f64>,
}

impl Batch for GuidanceBatch {
    fn len(&self) -> usize {
        self.source.len()
    }
}

fn guidance_item(
    model: &Approximator,
    kind: GuidanceKind,
    weights: [f64; 2],
    b: &GuidanceBatch,
    i: usize,
    acc: &mut GradAccumulator,
) -> [f64; 2] {
    let space = model.space();
    let s = space.alphabet_size();
    let mut theta = vec![0.0; model.out_dim()];
    let mut grad = vec![0.0; model.out_dim()];
    let (t, xt, x1, r) = (b.source.time(i), b.source.xt(i), b.source.x1(i), b.r[i]);
    model.forward(t, xt, &mut theta);
    let mut bregman = 0.0;
    match kind {
        GuidanceKind::PosteriorBased => {
            for (d, &sym) in x1.iter().enumerate() {
                let k = d * s + sym as usize;
                let h = theta[k].exp();
                bregman += h - r * theta[k];
                grad[k] += weights[0] * (h - r);
            }
        }
        GuidanceKind::RateBased => {
            let h = theta[0].exp();
            bregman = h - r * theta[0];
            grad[0] = weights[0] * (h - r);
        }
    }
    model.backward(t, xt, &grad, acc);

    let mut reg = 0.0;
    if let (Some(tb), GuidanceKind::PosteriorBased) = (&b.target, kind) {
        let lambda = weights[1];
        {
            let (t, xt, x1) = (tb.time(i), tb.xt(i), tb.x1(i));
            model.forward(t, xt, &mut theta);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let rows = &b.target_posterior[i * space.dims() * s..(i + 1) * space.dims() * s];
            for (d, &sym) in x1.iter().enumerate() {
                let th = &theta[d * s..(d + 1) * s];
                let p = &rows[d * s..(d + 1) * s];
                let max = (0..s).filter(|&k| p[k] > 0.0).map(|k| th[k]).fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    reg = f64::NAN;
                    continue;
                }
                let w: Vec<f64> = (0..s).map(|k| if p[k] > 0.0 { p[k] * (th[k] - max).exp() } else { 0.0 }).collect();
                let z: f64 = w.iter().sum();
                let q_obs = w[sym as usize] / z;
                reg -= q_obs.max(LOG_CLAMP).ln();
                for k in 0..s {
                    grad[d * s + k] = lambda * w[k] / z;
                }
                grad[d * s + sym as usize] -= lambda;
            }
            model.backward(t, xt, &grad, acc);
        }
    }
    [bregman, reg]
}

/// Trains guidance by minimizing the Bregman loss on source draws plus
/// `lambda` times the regularizer on target draws.
pub fn fit_guidance(
    kind: GuidanceKind,
    data: &GuidanceData<'_>,
    approximator: &ApproximatorConfig,
    optimizer: &OptimizerConfig,
) -> Result<(LearnedGuidance, GuidanceFitReport)> {
    optimizer.validate()?;
    let space = *data.path.space();
    if data.source.space() != &space || data.ratio.space() != &space {
        return Err(Error::SpaceMismatch);
    }
    let lambda = optimizer.lambda;
    let regularize = lambda > 0.0;
    if regularize {
        if kind != GuidanceKind::PosteriorBased {
            return Err(Error::InvalidConfig("the regularizer applies to posterior-based guidance only".into()));
        }
        if data.target.is_none() {
            return Err(Error::Precondition("lambda > 0 needs a target sampler".into()));
        }
        if data.posterior.is_none() {
            return Err(Error::Precondition("lambda > 0 needs the source posterior".into()));
        }
    }
    let mut model = approximator.build(space, kind.out_dim(&space), optimizer.seed)?;
    let stride = space.dims() * space.alphabet_size();

    let make_batch = |n: usize, rng: &mut ChaCha8Rng, with_target: bool| -> Result<GuidanceBatch> {
        let source = sample_training_batch(data.source, data.path, n, 0, rng);
        let r: Vec<f64> = (0..n).map(|i| data.ratio.eval(source.x1(i))).collect();
        check_ratio_values(&r, n)?;
        let (target, target_posterior) = match (with_target, data.target, data.posterior) {
            (true, Some(tsrc), Some(post)) => {
                let tb = sample_training_batch(tsrc, data.path, n, 0, rng);
                let rows: Vec<Vec<f64>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut row = vec![0.0; stride];
                        post.evaluate_into(tb.time(i), tb.xt(i), &mut row).map(|_| row)
                    })
                    .collect::<Result<_>>()?;
                (Some(tb), rows.concat())
            }
            _ => (None, Vec::new()),
        };
        Ok(GuidanceBatch { source, r, target, target_posterior })
    };

    let mut failure = None;
    let curve = run_training_terms(
        &mut model,
        optimizer,
        |m| m,
        |_, rng| match make_batch(optimizer.batch_size, rng, regularize) {
            Ok(b) => b,
            Err(e) => {
                failure.get_or_insert(e);
                GuidanceBatch { source: TrainingBatch::empty(space.dims()), r: Vec::new(), target: None, target_posterior: Vec::new() }
            }
        },
        &["bregman", "regularization"],
        [1.0, lambda],
        |m, b, i, acc| guidance_item(m, kind, [1.0, lambda], b, i, acc),
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let curve = curve?;

    let check = make_batch(16, &mut batch_rng(optimizer.seed ^ 0xC4EC, 0), regularize)?;
    let grad_check = objective_grad_check(
        &model,
        16,
        |m, i, acc| {
            let v = guidance_item(m, kind, [1.0, lambda], &check, i, acc);
            v[0] + lambda * v[1]
        },
        optimizer.seed,
    );
    let final_loss = curve.last().unwrap_or(f64::NAN);
    let learned = LearnedGuidance::new(model, kind)?;
    let gap_to_exact = match data.exact_source {
        Some(p1) => Some(guidance_gap(&learned, p1, data.ratio, data.path, optimizer.seed)?),
        None => None,
    };
    Ok((learned, GuidanceFitReport { curve, final_loss, grad_check, gap_to_exact }))
}

/// Losses covered by [`check_loss_gradients`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    BregmanPosterior,
    BregmanRate,
    Regularization,
    DensityRatio,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::CrossEntropy,
        LossKind::BregmanPosterior,
        LossKind::BregmanRate,
        LossKind::Regularization,
        LossKind::DensityRatio,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::BregmanPosterior => "bregman-posterior",
            LossKind::BregmanRate => "bregman-rate",
            LossKind::Regularization => "regularization",
            LossKind::DensityRatio => "density-ratio",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss '{s}'")))
    }
}

/// Gradient check of one loss at randomly perturbed parameters on a batch of
/// 16 draws from `p1` along `path`, with `r` as the ratio and `p1` itself as
/// the regularizer's target.
pub fn check_loss_gradients(
    kind: LossKind,
    approximator: &ApproximatorConfig,
    p1: &Pmf,
    ratio: &DensityRatio,
    path: &ConditionalPath,
    seed: u64,
) -> Result<GradCheck> {
    const N: usize = 16;
    let space = *path.space();
    let out_dim = match kind {
        LossKind::CrossEntropy | LossKind::BregmanPosterior | LossKind::Regularization => {
            space.dims() * space.alphabet_size()
        }
        LossKind::BregmanRate | LossKind::DensityRatio => 1,
    };
    let mut model = approximator.build(space, out_dim, seed)?;
    let mut rng = batch_rng(seed, 0x9C);
    for p in model.params_mut() {
        *p += 0.3 * (2.0 * rng.random::<f64>() - 1.0);
    }
    let sampler = p1.sampler();
    let check = match kind {
        LossKind::CrossEntropy => {
            let batch = sample_training_batch(&sampler, path, N, 0, &mut rng);
            let build = |m: &Approximator| crate::posterior::LearnedPosterior::new(m.clone(), *path);
            build(&model)?;
            objective_grad_check(
                &model,
                N,
                |m, i, acc| {
                    let p = build(m).expect("validated above");
                    crate::posterior::cross_entropy_item(&p, &batch, i, acc)
                },
                seed,
            )
        }
        LossKind::BregmanPosterior | LossKind::BregmanRate | LossKind::Regularization => {
            let source = sample_training_batch(&sampler, path, N, 0, &mut rng);
            let r: Vec<f64> = (0..N).map(|i| ratio.eval(source.x1(i))).collect();
            check_ratio_values(&r, N)?;
            let (gk, weights, target, target_posterior) = match kind {
                LossKind::BregmanRate => (GuidanceKind::RateBased, [1.0, 0.0], None, Vec::new()),
                LossKind::BregmanPosterior => (GuidanceKind::PosteriorBased, [1.0, 0.0], None, Vec::new()),
                _ => {
                    let tb = sample_training_batch(&sampler, path, N, 0, &mut rng);
                    let post = crate::posterior::ExactPosterior::new(p1.clone(), *path)?;
                    let mut rows = Vec::new();
                    for i in 0..N {
                        rows.extend_from_slice(post.evaluate(tb.time(i), tb.xt(i))?.as_slice());
                    }
                    (GuidanceKind::PosteriorBased, [0.0, 1.0], Some(tb), rows)
                }
            };
            let batch = GuidanceBatch { source, r, target, target_posterior };
            objective_grad_check(
                &model,
                N,
                |m, i, acc| {
                    let v = guidance_item(m, gk, weights, &batch, i, acc);
                    weights[0] * v[0] + weights[1] * v[1]
                },
                seed,
            )
        }
        LossKind::DensityRatio => {
            let dims = space.dims();
            let mut p = vec![0 as Symbol; N * dims];
            let mut q = vec![0 as Symbol; N * dims];
            for i in 0..N {
                sampler.sample_into(rng.random::<f64>(), &mut p[i * dims..(i + 1) * dims]);
                sampler.sample_into(rng.random::<f64>(), &mut q[i * dims..(i + 1) * dims]);
            }
            let batch = PairBatch { dims, p, q };
            objective_grad_check(&model, N, |m, i, acc| ratio_item(m, &batch, i, acc), seed)
        }
    };
    Ok(check)
}

impl TrainingBatch {
    fn empty(dims: usize) -> Self {
        Self { dims, times: Vec::new(), x1: Vec::new(), xt: Vec::new() }
    }
}

/// Max-abs gap between learned and exact guidance on 256 held-out draws.
pub fn guidance_gap(
    learned: &LearnedGuidance,
    p1: &Pmf,
    ratio: &DensityRatio,
    path: &ConditionalPath,
    seed: u64,
) -> Result<f64> {
    let exact = ExactGuidance::new(p1.clone(), ratio.clone(), *path)?;
    let mut rng = batch_rng(seed ^ 0x6A9, u64::MAX);
    let batch = sample_training_batch(&p1.sampler(), path, 256, 0, &mut rng);
    let s = path.space().alphabet_size();
    let mut gap: f64 = 0.0;
    for i in 0..batch.len() {
        let (t, x) = (batch.time(i), batch.xt(i));
        match learned.kind() {
            GuidanceKind::PosteriorBased => {
                let post = exact.posterior().evaluate(t, x)?;
                let a = PosteriorGuidance::h_matrix(learned, t, x)?;
                let b = PosteriorGuidance::h_matrix(&exact, t, x)?;
                for d in 0..x.len() {
                    for k in 0..s {
                        if post.row(d)[k] >= GAP_MASS_FLOOR {
                            gap = gap.max((a[d * s + k] - b[d * s + k]).abs());
                        }
                    }
                }
            }
            GuidanceKind::RateBased => {
                let a = RateGuidance::h_value(learned, t, x)?;
                let b = RateGuidance::h_value(&exact, t, x)?;
                gap = gap.max((a - b).abs());
            }
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::Activation;
    use crate::paths::{Init, Scheduler};

    fn toy() -> (Pmf, DensityRatio, ConditionalPath) {
        let space = StateSpace::new(1, 3).unwrap();
        let p1 = Pmf::new(space, vec![0.2, 0.3, 0.5]).unwrap();
        let r = DensityRatio::tabulated(space, vec![0.5, 1.0, 2.0]).unwrap();
        let path = ConditionalPath::mixture(space, Scheduler::Cosine, Init::Uniform).unwrap();
        (p1, r, path)
    }

    #[test]
    fn bregman_reference_values() {
        let (p1, _, path) = toy();
        let space = *p1.space();
        let batch = TrainingBatch::new(1, vec![0.3, 0.7], vec![0, 2], vec![1, 2]).unwrap();
        let one = ExactGuidance::new(p1.clone(), DensityRatio::constant(space, 1.0).unwrap(), path).unwrap();
        // r = h = 1 gives 1 per coordinate.
        assert!((bregman_loss_posterior(&one, &batch, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((bregman_loss_rate(&one, &batch, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(bregman_loss_posterior(&one, &batch, &[1.0]).is_err());
        let empty = TrainingBatch::new(1, vec![], vec![], vec![]).unwrap();
        assert!(bregman_loss_rate(&one, &empty, &[]).is_err());
    }

    #[test]
    fn bregman_at_the_pointwise_minimizer() {
        // At t = 1 the posterior is a point mass, so h^d(x1^d, x1) = r(x1).
        let (p1, r, path) = toy();
        let exact = ExactGuidance::new(p1, r.clone(), path).unwrap();
        let batch = TrainingBatch::new(1, vec![1.0, 1.0, 1.0], vec![0, 1, 2], vec![0, 1, 2]).unwrap();
        let rv: Vec<f64> = (0..3).map(|i| r.eval(batch.x1(i))).collect();
        let expected: f64 = rv.iter().map(|v| v - v * v.ln()).sum::<f64>() / 3.0;
        assert!((bregman_loss_posterior(&exact, &batch, &rv).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn regularization_reference_values() {
        let (p1, r, path) = toy();
        let space = *p1.space();
        let post = crate::posterior::ExactPosterior::new(p1.clone(), path).unwrap();
        let batch = TrainingBatch::new(1, vec![0.4], vec![2], vec![1]).unwrap();
        let one = ExactGuidance::new(p1.clone(), DensityRatio::constant(space, 1.0).unwrap(), path).unwrap();
        let unguided = post.evaluate(0.4, &[1]).unwrap();
        let expected = -unguided.get(0, 2).ln();
        assert!((regularization_loss(&one, &post, &batch).unwrap() - expected).abs() < 1e-14);
        // Exact guidance gives the target posterior's cross-entropy.
        let exact = ExactGuidance::new(p1.clone(), r.clone(), path).unwrap();
        let target = Pmf::from_unnormalized(space, vec![0.1, 0.3, 1.0]).unwrap();
        let q = crate::posterior::exact_posterior(&target, &path, 0.4, &[1]).unwrap();
        let got = regularization_loss(&exact, &post, &batch).unwrap();
        assert!((got + q.marginals.get(0, 2).ln()).abs() < 1e-12);
    }

    #[test]
    fn ratio_loss_reference_values() {
        let space = StateSpace::new(1, 3).unwrap();
        let model = ApproximatorConfig::Tabular { time_buckets: 1 }.build(space, 1, 0).unwrap();
        let ratio = LearnedRatio::new(model).unwrap();
        let p = SampleBatch::new(1, vec![0, 1, 2], 1.0).unwrap();
        let loss = density_ratio_loss(&ratio, &p, &p).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-15);
        let empty = SampleBatch::new(1, vec![], 1.0).unwrap();
        assert!(density_ratio_loss(&ratio, &p, &empty).is_err());
    }

    #[test]
    fn grad_check_constant_and_quadratic() {
        let c = grad_check(|_| 3.0, &[0.1, 0.2], &[0.0, 0.0], 1);
        assert_eq!(c.max_rel_error, 0.0);
        let q = grad_check(|p| p[0] * p[0] + 3.0 * p[1], &[0.5, -1.0], &[1.0, 3.0], 1);
        assert!(q.max_rel_error < 1e-8);
        assert_eq!(q.coords_checked, 2);
    }

    #[test]
    fn tabular_guidance_converges_to_the_ratio() {
        let (p1, r, path) = toy();
        let source = SampleSource::from_pmf(&p1);
        let data = GuidanceData {
            path: &path,
            source: &source,
            ratio: &r,
            target: None,
            posterior: None,
            exact_source: Some(&p1),
        };
        let approx = ApproximatorConfig::Tabular { time_buckets: 1 };
        let opt = OptimizerConfig { steps: 3000, batch_size: 256, final_lr_fraction: 0.05, ..Default::default() };
        let (model, report) = fit_guidance(GuidanceKind::PosteriorBased, &data, &approx, &opt).unwrap();
        // Near the optimum the gradients are tiny, so the relative error
        // is dominated by finite-difference noise.
        assert!(report.grad_check.max_rel_error < 1e-4, "{:?}", report.grad_check);
        // At D = 1 the guidance does not depend on x_t: h[s] = r(s).
        let h = PosteriorGuidance::h_matrix(&model, 0.5, &[0]).unwrap();
        for (a, b) in h.iter().zip([0.5, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-2, "{h:?}");
        }
    }

    #[test]
    fn lambda_without_target_is_rejected() {
        let (p1, r, path) = toy();
        let source = SampleSource::from_pmf(&p1);
        let data = GuidanceData { path: &path, source: &source, ratio: &r, target: None, posterior: None, exact_source: None };
        let opt = OptimizerConfig { lambda: 0.5, ..Default::default() };
        let err = fit_guidance(GuidanceKind::PosteriorBased, &data, &ApproximatorConfig::default(), &opt);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn mlp_objective_gradients() {
        let (p1, r, path) = toy();
        let source = SampleSource::from_pmf(&p1);
        let post = crate::posterior::ExactPosterior::new(p1.clone(), path).unwrap();
        let data = GuidanceData {
            path: &path,
            source: &source,
            ratio: &r,
            target: Some(&source),
            posterior: Some(&post),
            exact_source: None,
        };
        let approx = ApproximatorConfig::Mlp { hidden: vec![8, 8], activation: Activation::Tanh };
        let opt = OptimizerConfig { steps: 5, lambda: 0.7, ..Default::default() };
        let (_, report) = fit_guidance(GuidanceKind::PosteriorBased, &data, &approx, &opt).unwrap();
        assert!(report.grad_check.max_rel_error < 1e-4, "{:?}", report.grad_check);
        assert_eq!(report.curve.terms.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let (p1, r, path) = toy();
        let source = SampleSource::from_pmf(&p1);
        let data = GuidanceData { path: &path, source: &source, ratio: &r, target: None, posterior: None, exact_source: None };
        let approx = ApproximatorConfig::Mlp { hidden: vec![8], activation: Activation::Relu };
        let opt = OptimizerConfig { steps: 20, ..Default::default() };
        let a = fit_guidance(GuidanceKind::RateBased, &data, &approx, &opt).unwrap();
        let b = fit_guidance(GuidanceKind::RateBased, &data, &approx, &opt).unwrap();
        assert_eq!(a.0.model(), b.0.model());
        assert_eq!(a.1.curve, b.1.curve);
    }
}
