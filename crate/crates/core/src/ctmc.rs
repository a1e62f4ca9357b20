//! Continuous-time Markov chains on `S^D`: dense generators with a Runge-Kutta
//! integrator for the Kolmogorov forward equation, single-step transition
//! kernels, and the parallel jump sampler driving every guided and unguided
//! scheme.

use std::sync::atomic::{AtomicU64, Ordering};

use once_cell::sync::OnceCell;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{ConditionalPath, Init, PathKind};
use crate::posterior::PosteriorModel;
use crate::rng::{sample_weighted, CounterRng};
use crate::statespace::{Pmf, SampleBatch, StateSpace, Symbol, DEFAULT_ENUMERATION_CAP};

/// Tolerance on generator column sums.
pub const COLUMN_TOLERANCE: f64 = 1e-9;
/// Most negative weight tolerated in an integration step before failing.
pub const NEGATIVE_WEIGHT_LIMIT: f64 = -1e-8;
/// Largest lattice on which samplers memoize per-state evaluations.
pub const MEMO_CAP: u64 = 1 << 20;

/// Dense generator: `get(z, x)` is the rate of jumping from `x` to `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrixDense {
    space: StateSpace,
    n: usize,
    /// Row-major by destination: `entries[z * n + x]`.
    entries: Vec<f64>,
}

impl RateMatrixDense {
    pub fn zeros(space: StateSpace) -> Result<Self> {
        let n = space.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        if n > 1 << 14 {
            return Err(Error::EnumerationInfeasible { states: n as u128, cap: 1 << 14 });
        }
        Ok(Self { space, n, entries: vec![0.0; n * n] })
    }

    /// Validates off-diagonal signs and zero column sums.
    pub fn new(space: StateSpace, entries: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(space)?;
        if entries.len() != m.entries.len() {
            return Err(Error::Precondition("generator has the wrong size".into()));
        }
        m.entries = entries;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for x in 0..self.n {
            let mut sum = 0.0;
            for z in 0..self.n {
                let v = self.get(z, x);
                if !v.is_finite() || (z != x && v < 0.0) {
                    return Err(Error::Numeric(format!("generator entry ({z}, {x}) is {v}")));
                }
                sum += v;
            }
            if sum.abs() > COLUMN_TOLERANCE * (1.0 + self.get(x, x).abs()) {
                return Err(Error::Numeric(format!("generator column {x} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, z: usize, x: usize) -> f64 {
        self.entries[z * self.n + x]
    }

    #[inline]
    pub fn set(&mut self, z: usize, x: usize, v: f64) {
        self.entries[z * self.n + x] = v;
    }

    #[inline]
    pub fn add(&mut self, z: usize, x: usize, v: f64) {
        self.entries[z * self.n + x] += v;
    }

    /// Sets every diagonal entry to minus its column's off-diagonal sum.
    pub fn fill_diagonal(&mut self) {
        for x in 0..self.n {
            let mut off = 0.0;
            for z in 0..self.n {
                if z != x {
                    off += self.get(z, x);
                }
            }
            self.set(x, x, -off);
        }
    }

    /// `out = U q`, the right-hand side of the forward equation.
    pub fn apply(&self, q: &[f64], out: &mut [f64]) {
        for (z, slot) in out.iter_mut().enumerate() {
            let row = &self.entries[z * self.n..(z + 1) * self.n];
            *slot = row.iter().zip(q).map(|(u, p)| u * p).sum();
        }
    }

    pub fn max_abs_diff(&self, other: &RateMatrixDense) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Marginal generator `U(z, x) = sum_s rows_x[d, s] u^d(z^d, x^d | s)` for `z`
/// differing from `x` in coordinate `d` only.
///
/// `rows(x)` returns the (possibly guided) posterior marginals at `x`, or
/// `None` when `x` carries no mass; such columns stay zero.
pub fn marginal_rate_matrix<F>(path: &ConditionalPath, t: f64, rows: F) -> Result<RateMatrixDense>
where
    F: Fn(&[Symbol]) -> Result<Option<Vec<f64>>> + Sync,
{
    let space = *path.space();
    let mut u = RateMatrixDense::zeros(space)?;
    let (dims, s) = (space.dims(), space.alphabet_size());
    let c = path.rate_coefficient(t)?;
    let columns: Vec<Result<Vec<(usize, f64)>>> = (0..u.n)
        .into_par_iter()
        .map(|xi| {
            let mut x = vec![0 as Symbol; dims];
            space.state_at(xi, &mut x);
            let Some(post) = rows(&x)? else {
                return Ok(Vec::new());
            };
            let mut col = Vec::new();
            let mut rate = vec![0.0; s];
            let mut acc = vec![0.0; s];
            let mut z = x.clone();
            for d in 0..dims {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for b in 0..s {
                    let w = post[d * s + b];
                    if w == 0.0 {
                        continue;
                    }
                    path.rate_row_with_coefficient(c, t, x[d], b as Symbol, &mut rate);
                    for (a, r) in acc.iter_mut().zip(&rate) {
                        *a += w * r;
                    }
                }
                for (a, &v) in acc.iter().enumerate() {
                    if a as Symbol != x[d] && v != 0.0 {
                        z[d] = a as Symbol;
                        col.push((space.index_of(&z), v));
                    }
                }
                z[d] = x[d];
            }
            Ok(col)
        })
        .collect();
    for (xi, col) in columns.into_iter().enumerate() {
        for (zi, v) in col? {
            u.add(zi, xi, v);
        }
    }
    u.fill_diagonal();
    Ok(u)
}

/// Pmfs at the integration grid times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub pmfs: Vec<Pmf>,
    /// Largest `|sum - 1|` removed by per-step renormalization.
    pub max_renormalization: f64,
}

impl Trajectory {
    pub fn last(&self) -> &Pmf {
        self.pmfs.last().expect("trajectory has at least the initial pmf")
    }
}

/// RK4 integration of `dq/dt = U_t q` over `[0, 1]`.
pub fn kolmogorov_integrate<F>(rate_fn: F, q0: &Pmf, steps: usize) -> Result<Trajectory>
where
    F: Fn(f64) -> Result<RateMatrixDense>,
{
    kolmogorov_integrate_range(rate_fn, q0, 0.0, 1.0, steps)
}

/// RK4 integration of `dq/dt = U_t q` over `[t0, t1]` with `steps` equal steps.
/// Generators with a pole at `t = 1` need `t1 < 1`.
pub fn kolmogorov_integrate_range<F>(
    rate_fn: F,
    q0: &Pmf,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Trajectory>
where
    F: Fn(f64) -> Result<RateMatrixDense>,
{
    if steps == 0 {
        return Err(Error::Precondition("integration needs at least one step".into()));
    }
    if !(0.0..=1.0).contains(&t0) || !(0.0..=1.0).contains(&t1) || t1 < t0 {
        return Err(Error::InvalidTime(if (0.0..=1.0).contains(&t0) { t1 } else { t0 }));
    }
    let space = *q0.space();
    let n = q0.weights().len();
    let h = (t1 - t0) / steps as f64;
    let mut q = q0.weights().to_vec();
    let mut times = vec![t0];
    let mut pmfs = vec![q0.clone()];
    let mut max_renorm: f64 = 0.0;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let u0 = rate_fn(t)?;
        let um = rate_fn(t + 0.5 * h)?;
        let u1 = rate_fn(t + h)?;
        u0.apply(&q, &mut k1);
        for j in 0..n {
            tmp[j] = q[j] + 0.5 * h * k1[j];
        }
        um.apply(&tmp, &mut k2);
        for j in 0..n {
            tmp[j] = q[j] + 0.5 * h * k2[j];
        }
        um.apply(&tmp, &mut k3);
        for j in 0..n {
            tmp[j] = q[j] + h * k3[j];
        }
        u1.apply(&tmp, &mut k4);
        let mut total = 0.0;
        for j in 0..n {
            q[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            if q[j] < NEGATIVE_WEIGHT_LIMIT || !q[j].is_finite() {
                return Err(Error::Numeric(format!(
                    "integration produced weight {} at t = {}",
                    q[j],
                    t + h
                )));
            }
            q[j] = q[j].max(0.0);
            total += q[j];
        }
        max_renorm = max_renorm.max((total - 1.0).abs());
        q.iter_mut().for_each(|v| *v /= total);
        times.push(t + h);
        pmfs.push(Pmf::from_unnormalized(space, q.clone())?);
    }
    Ok(Trajectory { times, pmfs, max_renormalization: max_renorm })
}

/// First-order transition row `delta_current + h * rate_row`, valid only for
/// `h <= 1 / |rate_row[current]|`.
pub fn euler_step_prob(rate_row: &[f64], h: f64, current: Symbol) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {h}")));
    }
    let diag = rate_row[current as usize].abs();
    if diag > 0.0 && h > 1.0 / diag {
        return Err(Error::StepTooLarge { step: h, bound: 1.0 / diag });
    }
    let mut row: Vec<f64> = rate_row.iter().map(|&r| (h * r).max(0.0)).collect();
    row[current as usize] = (1.0 + h * rate_row[current as usize]).max(0.0);
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    Ok(row)
}

/// Always-valid jump for one coordinate: with probability `1 - exp(-h
/// lambda)`, where `lambda` is the total off-diagonal rate, move to a
/// destination drawn proportionally to `rates`. `rates[current]` is ignored.
#[inline]
pub fn jump_coordinate(rates: &[f64], current: Symbol, h: f64, rng: &mut CounterRng) -> Symbol {
    let lambda: f64 = rates
        .iter()
        .enumerate()
        .filter(|&(s, _)| s != current as usize)
        .map(|(_, &r)| r)
        .sum();
    let z = rng.uniform();
    if !(lambda > 0.0) || z > -(-h * lambda).exp_m1() {
        return current;
    }
    let u = rng.uniform();
    let target = u * lambda;
    let mut acc = 0.0;
    let mut last = current;
    for (s, &r) in rates.iter().enumerate() {
        if s == current as usize || r <= 0.0 {
            continue;
        }
        acc += r;
        last = s as Symbol;
        if target < acc {
            return last;
        }
    }
    last
}

/// Advances every coordinate of every chain by one always-valid step given
/// endpoint draws `x1_draws` (same layout as the batch).
pub fn jump_step(
    batch: &SampleBatch,
    x1_draws: &[Symbol],
    path: &ConditionalPath,
    t: f64,
    h: f64,
    seed: u64,
    step: u64,
) -> Result<SampleBatch> {
    if !(h > 0.0) || t + h > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!("invalid step h = {h} at t = {t}")));
    }
    if x1_draws.len() != batch.as_slice().len() {
        return Err(Error::Precondition("endpoint draws do not match the batch".into()));
    }
    let c = path.rate_coefficient(t)?;
    let dims = batch.dims();
    let s = path.space().alphabet_size();
    let mut states = batch.as_slice().to_vec();
    states
        .par_chunks_mut(dims)
        .zip(x1_draws.par_chunks(dims))
        .enumerate()
        .for_each(|(chain, (x, x1))| {
            let mut rates = vec![0.0; s];
            for d in 0..dims {
                let mut rng = CounterRng::for_site(seed, step, chain as u64, d as u64);
                path.rate_row_with_coefficient(c, t, x[d], x1[d], &mut rates);
                x[d] = jump_coordinate(&rates, x[d], h, &mut rng);
            }
        });
    SampleBatch::new(dims, states, (t + h).min(1.0))
}

/// Starting distribution of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Every coordinate equals the mask symbol.
    Masked,
    /// Independent uniform data symbols.
    Uniform,
    /// Full states drawn from a pmf.
    Custom(Pmf),
}

impl InitialState {
    /// The initial state implied by a path's noise distribution.
    pub fn from_path(path: &ConditionalPath) -> Self {
        match (path.kind(), path.init()) {
            (PathKind::Mixture, Init::Masked) => InitialState::Masked,
            _ => InitialState::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub chains: usize,
    pub initial: InitialState,
    pub seed: u64,
    pub final_posterior_draw: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, chains: usize, initial: InitialState, seed: u64) -> Self {
        Self { steps, chains, initial, seed, final_posterior_draw: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidConfig("chains must be >= 1".into()));
        }
        Ok(())
    }
}

/// Random stream addressing for one chain at one step.
#[derive(Debug, Clone, Copy)]
pub struct Site {
    pub seed: u64,
    pub step: u64,
    pub chain: u64,
}

impl Site {
    #[inline]
    pub fn rng(&self, coord: usize) -> CounterRng {
        CounterRng::for_site(self.seed, self.step, self.chain, coord as u64)
    }
}

/// Lazily filled per-state cache shared by all chains within a step.
#[derive(Debug)]
pub struct StateMemo<T> {
    space: StateSpace,
    cells: Option<Vec<OnceCell<T>>>,
}

impl<T> StateMemo<T> {
    /// A memo over the full lattice, or a pass-through when the lattice is
    /// larger than [`MEMO_CAP`].
    pub fn new(space: StateSpace) -> Self {
        let cells = space
            .is_enumerable(MEMO_CAP)
            .then(|| (0..space.num_states() as usize).map(|_| OnceCell::new()).collect());
        Self { space, cells }
    }

    /// Cached value at `x`, computing it with `f` on first use. Without a
    /// cache the value is computed and handed to `use_value` directly.
    pub fn with<R>(
        &self,
        x: &[Symbol],
        f: impl FnOnce() -> Result<T>,
        use_value: impl FnOnce(&T) -> R,
    ) -> Result<R> {
        match &self.cells {
            Some(cells) => {
                let cell = &cells[self.space.index_of(x)];
                Ok(use_value(cell.get_or_try_init(f)?))
            }
            None => Ok(use_value(&f()?)),
        }
    }
}

/// Per-chain logic of a sampler; the driver owns the time loop and the
/// parallel iteration over chains.
pub trait ChainKernel: Sync {
    /// State shared by all chains during one step (typically a memo).
    type Step<'s>: Sync
    where
        Self: 's;

    fn begin_step(&self, t: f64) -> Result<Self::Step<'_>>;

    /// One jump step from `t` to `t + h`, updating `x` in place.
    fn advance<'s>(&'s self, step: &Self::Step<'s>, site: Site, t: f64, h: f64, x: &mut [Symbol]) -> Result<()>;

    /// Final draw of the clean state from the state at time `t`.
    fn finish<'s>(&'s self, step: &Self::Step<'s>, site: Site, t: f64, x: &mut [Symbol]) -> Result<()>;
}

/// Guidance and posterior evaluations requested by a sampler, counted per
/// chain and step as the number of model inputs a batched implementation
/// would submit.
#[derive(Debug, Default)]
pub struct CallCounters {
    pub posterior: AtomicU64,
    pub guidance: AtomicU64,
    pub final_posterior: AtomicU64,
    pub final_guidance: AtomicU64,
}

impl CallCounters {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            posterior: self.posterior.load(Ordering::Relaxed),
            guidance: self.guidance.load(Ordering::Relaxed),
            final_posterior: self.final_posterior.load(Ordering::Relaxed),
            final_guidance: self.final_guidance.load(Ordering::Relaxed),
        }
    }

    #[inline]
    pub(crate) fn bump(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub posterior: u64,
    pub guidance: u64,
    pub final_posterior: u64,
    pub final_guidance: u64,
}

/// Output of a sampler run.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub batch: SampleBatch,
    pub calls: CallCounts,
    /// Number of jump steps taken (`steps - 1`).
    pub loop_steps: usize,
}

impl SampleOutput {
    /// Guidance evaluations per chain per jump step. `None` when no jump step ran.
    pub fn guidance_calls_per_step(&self) -> Option<f64> {
        let denom = (self.loop_steps * self.batch.len()) as f64;
        (self.loop_steps > 0).then(|| self.calls.guidance as f64 / denom)
    }
}

fn initial_states(space: &StateSpace, config: &SamplerConfig) -> Result<Vec<Symbol>> {
    let dims = space.dims();
    let mut states = vec![0 as Symbol; config.chains * dims];
    match &config.initial {
        InitialState::Masked => {
            let m = space
                .mask_symbol()
                .ok_or_else(|| Error::InvalidConfig("masked start needs a mask symbol".into()))?;
            states.iter_mut().for_each(|v| *v = m);
        }
        InitialState::Uniform => {
            let data: Vec<Symbol> = space.data_symbols().collect();
            states.par_chunks_mut(dims).enumerate().for_each(|(chain, x)| {
                for (d, slot) in x.iter_mut().enumerate() {
                    let mut rng = CounterRng::for_site(config.seed, u64::MAX, chain as u64, d as u64);
                    let i = ((rng.uniform() * data.len() as f64) as usize).min(data.len() - 1);
                    *slot = data[i];
                }
            });
        }
        InitialState::Custom(pmf) => {
            if pmf.space() != space {
                return Err(Error::SpaceMismatch);
            }
            let sampler = pmf.sampler();
            states.par_chunks_mut(dims).enumerate().for_each(|(chain, x)| {
                let mut rng = CounterRng::for_site(config.seed, u64::MAX, chain as u64, 0);
                sampler.sample_into(rng.uniform(), x);
            });
        }
    }
    Ok(states)
}

/// Runs `config.steps - 1` jump steps at `t = k / steps` followed by the final
/// draw at `t = (steps - 1) / steps`.
pub fn run_chains<K: ChainKernel>(
    kernel: &K,
    space: &StateSpace,
    config: &SamplerConfig,
    counters: &CallCounters,
) -> Result<SampleOutput> {
    config.validate()?;
    let dims = space.dims();
    let mut states = initial_states(space, config)?;
    let n = config.steps;
    let h = 1.0 / n as f64;
    for k in 0..n - 1 {
        let t = k as f64 / n as f64;
        let shared = kernel.begin_step(t)?;
        states.par_chunks_mut(dims).enumerate().try_for_each(|(chain, x)| {
            let site = Site { seed: config.seed, step: k as u64, chain: chain as u64 };
            kernel.advance(&shared, site, t, h, x)
        })?;
    }
    let t_final = (n - 1) as f64 / n as f64;
    if config.final_posterior_draw {
        let shared = kernel.begin_step(t_final)?;
        states.par_chunks_mut(dims).enumerate().try_for_each(|(chain, x)| {
            let site = Site { seed: config.seed, step: (n - 1) as u64, chain: chain as u64 };
            kernel.finish(&shared, site, t_final, x)
        })?;
    }
    let time = if config.final_posterior_draw { 1.0 } else { t_final };
    Ok(SampleOutput {
        batch: SampleBatch::new(dims, states, time)?,
        calls: counters.snapshot(),
        loop_steps: n - 1,
    })
}

/// Weight matrix provider used by [`EndpointKernel`]: unnormalized
/// per-coordinate weights from which `x1^d` is drawn.
pub trait EndpointWeights: Sync {
    fn space(&self) -> &StateSpace;

    /// Writes `D x |S|` non-negative weights at `(t, x)` into `out`.
    fn weights(&self, t: f64, x: &[Symbol], out: &mut Vec<f64>) -> Result<()>;

    /// Evaluations this provider represents per call, split into posterior
    /// and guidance calls.
    fn calls(&self) -> (u64, u64);

    fn is_time_independent(&self) -> bool;
}

/// Samples from the plain posterior.
pub struct PlainPosterior<'a>(pub &'a dyn PosteriorModel);

impl EndpointWeights for PlainPosterior<'_> {
    fn space(&self) -> &StateSpace {
        self.0.space()
    }

    fn weights(&self, t: f64, x: &[Symbol], out: &mut Vec<f64>) -> Result<()> {
        let space = self.0.space();
        out.resize(space.dims() * space.alphabet_size(), 0.0);
        self.0.evaluate_into(t, x, out)
    }

    fn calls(&self) -> (u64, u64) {
        (1, 0)
    }

    fn is_time_independent(&self) -> bool {
        self.0.is_time_independent()
    }
}

/// Draws `x1^d` from per-coordinate weights, then jumps with the conditional
/// rate of the path.
pub struct EndpointKernel<'a, W: EndpointWeights> {
    weights: W,
    path: &'a ConditionalPath,
    counters: &'a CallCounters,
    persistent: OnceCell<StateMemo<Vec<f64>>>,
}

impl<'a, W: EndpointWeights> EndpointKernel<'a, W> {
    pub fn new(weights: W, path: &'a ConditionalPath, counters: &'a CallCounters) -> Result<Self> {
        if weights.space() != path.space() {
            return Err(Error::SpaceMismatch);
        }
        Ok(Self { weights, path, counters, persistent: OnceCell::new() })
    }

    fn draw_endpoints(
        &self,
        memo: &StateMemo<Vec<f64>>,
        t: f64,
        x: &[Symbol],
        x1: &mut [Symbol],
        rngs: &mut [CounterRng],
    ) -> Result<()> {
        let s = self.path.space().alphabet_size();
        memo.with(
            x,
            || {
                let mut w = Vec::new();
                self.weights.weights(t, x, &mut w)?;
                Ok(w)
            },
            |w| {
                for d in 0..x.len() {
                    let row = &w[d * s..(d + 1) * s];
                    x1[d] = sample_weighted(row, rngs[d].uniform())
                        .map(|i| i as Symbol)
                        .ok_or(Error::Unreachable { t })?;
                }
                Ok::<(), Error>(())
            },
        )?
    }
}

/// Memo handle: either persistent across steps or fresh for one step.
pub enum MemoRef<'m, T> {
    Shared(&'m StateMemo<T>),
    Owned(StateMemo<T>),
}

impl<T> MemoRef<'_, T> {
    pub fn get(&self) -> &StateMemo<T> {
        match self {
            MemoRef::Shared(m) => m,
            MemoRef::Owned(m) => m,
        }
    }
}

impl<W: EndpointWeights> ChainKernel for EndpointKernel<'_, W> {
    type Step<'s>
        = (MemoRef<'s, Vec<f64>>, f64)
    where
        Self: 's;

    fn begin_step(&self, t: f64) -> Result<Self::Step<'_>> {
        let space = *self.path.space();
        // Coefficient is only needed for jump steps; the final draw may sit
        // closer to the pole, so failures are deferred to `advance`.
        let c = self.path.rate_coefficient(t).unwrap_or(f64::NAN);
        if self.weights.is_time_independent() {
            let memo = self.persistent.get_or_init(|| StateMemo::new(space));
            Ok((MemoRef::Shared(memo), c))
        } else {
            Ok((MemoRef::Owned(StateMemo::new(space)), c))
        }
    }

    fn advance<'s>(&'s self, step: &Self::Step<'s>, site: Site, t: f64, h: f64, x: &mut [Symbol]) -> Result<()> {
        let (memo, c) = step;
        if !c.is_finite() {
            return Err(Error::TerminalRate(t));
        }
        let dims = x.len();
        let s = self.path.space().alphabet_size();
        let mut rngs: Vec<CounterRng> = (0..dims).map(|d| site.rng(d)).collect();
        let mut x1 = vec![0 as Symbol; dims];
        self.draw_endpoints(memo.get(), t, x, &mut x1, &mut rngs)?;
        let (pc, gc) = self.weights.calls();
        CallCounters::bump(&self.counters.posterior, pc);
        CallCounters::bump(&self.counters.guidance, gc);
        let mut rates = vec![0.0; s];
        for d in 0..dims {
            self.path.rate_row_with_coefficient(*c, t, x[d], x1[d], &mut rates);
            x[d] = jump_coordinate(&rates, x[d], h, &mut rngs[d]);
        }
        Ok(())
    }

    fn finish<'s>(&'s self, step: &Self::Step<'s>, site: Site, t: f64, x: &mut [Symbol]) -> Result<()> {
        let dims = x.len();
        let mut rngs: Vec<CounterRng> = (0..dims).map(|d| site.rng(d)).collect();
        let mut x1 = vec![0 as Symbol; dims];
        self.draw_endpoints(step.0.get(), t, x, &mut x1, &mut rngs)?;
        let (pc, gc) = self.weights.calls();
        CallCounters::bump(&self.counters.final_posterior, pc);
        CallCounters::bump(&self.counters.final_guidance, gc);
        x.copy_from_slice(&x1);
        Ok(())
    }
}

/// Unguided sampling: draw `x1^d` from the posterior, jump, repeat, and
/// finish with a posterior draw.
pub fn sample_unguided(
    posterior: &dyn PosteriorModel,
    path: &ConditionalPath,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    let counters = CallCounters::default();
    let kernel = EndpointKernel::new(PlainPosterior(posterior), path, &counters)?;
    run_chains(&kernel, path.space(), config, &counters)
}
