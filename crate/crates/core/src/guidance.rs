//! Guidance towards a target `q_1 ∝ r p_1` from a model of the source `p_1`.
//!
//! * Posterior-based: reweight each posterior row by
//!   `h^d(s, x) = E[r(x_1) | x_1^d = s, x_t = x]` and sample as usual.
//! * Rate-based: multiply the marginal rate by `h(z) / h(x)` with
//!   `h(x) = E[r(x_1) | x_t = x]`.
//! * Predictor: the rate-based factor raised to a strength `gamma`.
//! * First-order: `exp(<z - x, grad log h(x)>)` on the integer embedding.
//!
//! Exact enumeration references exist for each, and the samplers count the
//! model evaluations they request.

use std::fmt;
use std::str::FromStr;

use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, Tabular};
use crate::ctmc::{
    jump_coordinate, marginal_rate_matrix, run_chains, CallCounters, ChainKernel, EndpointKernel,
    EndpointWeights, MemoRef, RateMatrixDense, SampleOutput, SamplerConfig, StateMemo,
};
use crate::error::{Error, Result};
use crate::paths::{ConditionalPath, Init, PathKind};
use crate::posterior::{ExactPosterior, PosteriorModel};
use crate::rng::{sample_weighted, CounterRng};
use crate::statespace::{DensityRatio, FactorizedPosterior, Pmf, StateSpace, Symbol};

/// Per-coordinate guidance `h^d(s, x)` for posterior reweighting.
pub trait PosteriorGuidance: Send + Sync {
    fn space(&self) -> &StateSpace;

    /// Writes the positive `D x |S|` matrix at `(t, x)` row-major into `out`.
    fn h_matrix_into(&self, t: f64, x: &[Symbol], out: &mut [f64]) -> Result<()>;

    fn h_matrix(&self, t: f64, x: &[Symbol]) -> Result<Vec<f64>> {
        let space = self.space();
        let mut out = vec![0.0; space.dims() * space.alphabet_size()];
        self.h_matrix_into(t, x, &mut out)?;
        Ok(out)
    }

    fn is_time_independent(&self) -> bool {
        false
    }
}

/// Scalar guidance `h(x) = E[r(x_1) | x_t = x]` for rate reweighting.
pub trait RateGuidance: Send + Sync {
    fn space(&self) -> &StateSpace;

    fn h_value(&self, t: f64, x: &[Symbol]) -> Result<f64>;

    fn is_time_independent(&self) -> bool {
        false
    }
}

/// Guidance computed by enumerating the support of `p1`.
#[derive(Debug, Clone)]
pub struct ExactGuidance {
    oracle: ExactPosterior,
    ratio: DensityRatio,
    /// `r` at each support state of the oracle.
    r_support: Vec<f64>,
    fallback: Option<Box<ExactGuidance>>,
}

impl ExactGuidance {
    pub fn new(p1: Pmf, ratio: DensityRatio, path: ConditionalPath) -> Result<Self> {
        if ratio.space() != p1.space() {
            return Err(Error::SpaceMismatch);
        }
        ratio.check_positive_on(&p1)?;
        let oracle = ExactPosterior::new(p1, path)?;
        let r_support = (0..oracle.support_len()).map(|i| ratio.eval(oracle.support_state(i))).collect();
        Ok(Self { oracle, ratio, r_support, fallback: None })
    }

    /// Zero-probability states are answered under the product of `p1`'s
    /// coordinate marginals, matching [`ExactPosterior::with_marginal_fallback`].
    pub fn with_marginal_fallback(mut self) -> Result<Self> {
        let product = self.oracle.p1().product_of_marginals();
        let inner = ExactGuidance::new(product, self.ratio.clone(), *self.oracle.path())?;
        self.oracle = self.oracle.with_marginal_fallback()?;
        self.fallback = Some(Box::new(inner));
        Ok(self)
    }

    pub fn ratio(&self) -> &DensityRatio {
        &self.ratio
    }

    pub fn posterior(&self) -> &ExactPosterior {
        &self.oracle
    }
}

impl PosteriorGuidance for ExactGuidance {
    fn space(&self) -> &StateSpace {
        self.oracle.p1().space()
    }

    fn h_matrix_into(&self, t: f64, x: &[Symbol], out: &mut [f64]) -> Result<()> {
        let space = self.oracle.p1().space();
        let (dims, s) = (space.dims(), space.alphabet_size());
        let mut w = Vec::new();
        match (self.oracle.joint_weights(t, x, &mut w), &self.fallback) {
            (Ok(_), _) => {}
            (Err(Error::Unreachable { .. }), Some(fb)) => return fb.h_matrix_into(t, x, out),
            (Err(e), _) => return Err(e),
        }
        let mut den = vec![0.0; dims * s];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let rw = self.r_support[i] * wi;
            for (d, &b) in self.oracle.support_state(i).iter().enumerate() {
                out[d * s + b as usize] += rw;
                den[d * s + b as usize] += wi;
            }
        }
        for (v, &dv) in out.iter_mut().zip(&den) {
            // Where the base posterior has no mass the value is multiplied
            // by zero; 1 keeps the row free of NaN.
            *v = if dv > 0.0 { *v / dv } else { 1.0 };
        }
        Ok(())
    }

    fn is_time_independent(&self) -> bool {
        self.oracle.path().is_masked()
    }
}

impl RateGuidance for ExactGuidance {
    fn space(&self) -> &StateSpace {
        self.oracle.p1().space()
    }

    fn h_value(&self, t: f64, x: &[Symbol]) -> Result<f64> {
        let mut w = Vec::new();
        let total = match (self.oracle.joint_weights(t, x, &mut w), &self.fallback) {
            (Ok(total), _) => total,
            (Err(Error::Unreachable { .. }), Some(fb)) => return fb.h_value(t, x),
            (Err(e), _) => return Err(e),
        };
        let num: f64 = w.iter().zip(&self.r_support).map(|(a, b)| a * b).sum();
        Ok(num / total)
    }

    fn is_time_independent(&self) -> bool {
        self.oracle.path().is_masked()
    }
}

/// Whether a learned guidance model predicts the matrix `h^d(s, x)` or the
/// scalar `h(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceKind {
    PosteriorBased,
    RateBased,
}

impl GuidanceKind {
    pub fn out_dim(&self, space: &StateSpace) -> usize {
        match self {
            GuidanceKind::PosteriorBased => space.dims() * space.alphabet_size(),
            GuidanceKind::RateBased => 1,
        }
    }
}

/// Guidance given by `exp` of an approximator's outputs.
#[derive(Debug, Clone)]
pub struct LearnedGuidance {
    model: Approximator,
    kind: GuidanceKind,
}

impl LearnedGuidance {
    pub fn new(model: Approximator, kind: GuidanceKind) -> Result<Self> {
        if model.out_dim() != kind.out_dim(model.space()) {
            return Err(Error::SpaceMismatch);
        }
        Ok(Self { model, kind })
    }

    pub fn kind(&self) -> GuidanceKind {
        self.kind
    }

    pub fn model(&self) -> &Approximator {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Approximator {
        &mut self.model
    }

    pub fn into_model(self) -> Approximator {
        self.model
    }
}

impl PosteriorGuidance for LearnedGuidance {
    fn space(&self) -> &StateSpace {
        self.model.space()
    }

    fn h_matrix_into(&self, t: f64, x: &[Symbol], out: &mut [f64]) -> Result<()> {
        if self.kind != GuidanceKind::PosteriorBased {
            return Err(Error::Precondition("scalar guidance cannot reweight posteriors".into()));
        }
        self.model.forward(t, x, out);
        out.iter_mut().for_each(|v| *v = v.exp());
        if out.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Numeric("guidance model output is not positive and finite".into()));
        }
        Ok(())
    }

    fn is_time_independent(&self) -> bool {
        self.model.is_time_independent()
    }
}

impl RateGuidance for LearnedGuidance {
    fn space(&self) -> &StateSpace {
        self.model.space()
    }

    fn h_value(&self, t: f64, x: &[Symbol]) -> Result<f64> {
        if self.kind != GuidanceKind::RateBased {
            return Err(Error::Precondition(
                "matrix guidance needs a posterior to give h(x); use MarginalizedGuidance".into(),
            ));
        }
        let mut out = [0.0];
        self.model.forward(t, x, &mut out);
        let h = out[0].exp();
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Numeric("guidance model output is not positive and finite".into()));
        }
        Ok(h)
    }

    fn is_time_independent(&self) -> bool {
        self.model.is_time_independent()
    }
}

/// `h(x) = sum_s h^d(s, x) p^d(s | x)` for a fixed coordinate `d`, turning
/// matrix guidance into scalar guidance.
pub struct MarginalizedGuidance<'a> {
    pub guidance: &'a dyn PosteriorGuidance,
    pub posterior: &'a dyn PosteriorModel,
    pub coordinate: usize,
}

impl RateGuidance for MarginalizedGuidance<'_> {
    fn space(&self) -> &StateSpace {
        self.guidance.space()
    }

    fn h_value(&self, t: f64, x: &[Symbol]) -> Result<f64> {
        let s = self.space().alphabet_size();
        let h = self.guidance.h_matrix(t, x)?;
        let p = self.posterior.evaluate(t, x)?;
        let d = self.coordinate;
        Ok((0..s).map(|b| h[d * s + b] * p.get(d, b as Symbol)).sum())
    }

    fn is_time_independent(&self) -> bool {
        self.guidance.is_time_independent() && self.posterior.is_time_independent()
    }
}

/// Row `d` proportional to `h[d, s] * p_post[d, s]`.
pub fn guided_posterior(p_post: &FactorizedPosterior, h: &[f64]) -> Result<FactorizedPosterior> {
    let (dims, s) = (p_post.dims(), p_post.alphabet_size());
    if h.len() != dims * s {
        return Err(Error::Precondition("guidance matrix has the wrong shape".into()));
    }
    let mut rows = Vec::with_capacity(dims * s);
    for d in 0..dims {
        let row = p_post.row(d);
        let start = rows.len();
        let mut total = 0.0;
        for b in 0..s {
            let hv = h[d * s + b];
            if !(hv > 0.0) || !hv.is_finite() {
                return Err(Error::Precondition(format!("guidance h[{d}, {b}] = {hv} is not positive")));
            }
            let v = hv * row[b];
            rows.push(v);
            total += v;
        }
        if !(total > 0.0) {
            return Err(Error::Numeric(format!("guided row {d} has zero mass")));
        }
        rows[start..].iter_mut().for_each(|v| *v /= total);
    }
    FactorizedPosterior::new(dims, s, rows)
}

/// `h[d, s] = E[r(x_1) | x_1^d = s, x_t = x]` by enumeration, with 1 where
/// the posterior marginal is zero.
pub fn exact_guidance_h(
    p1: &Pmf,
    r: &DensityRatio,
    path: &ConditionalPath,
    t: f64,
    x: &[Symbol],
) -> Result<Vec<f64>> {
    ExactGuidance::new(p1.clone(), r.clone(), *path)?.h_matrix(t, x)
}

fn single_difference(x: &[Symbol], z: &[Symbol]) -> Result<Option<usize>> {
    if x.len() != z.len() {
        return Err(Error::SpaceMismatch);
    }
    let mut diff = None;
    for (d, (a, b)) in x.iter().zip(z).enumerate() {
        if a != b {
            if diff.is_some() {
                return Err(Error::Precondition("z differs from x in more than one coordinate".into()));
            }
            diff = Some(d);
        }
    }
    Ok(diff)
}

/// `h(z) / h(x)` for a neighbor `z` of `x`; 1 when `z == x`.
pub fn rate_based_factor(h: &dyn RateGuidance, t: f64, x: &[Symbol], z: &[Symbol]) -> Result<f64> {
    if single_difference(x, z)?.is_none() {
        return Ok(1.0);
    }
    let hx = h.h_value(t, x)?;
    if !(hx > 0.0) {
        return Err(Error::Numeric("zero denominator in the rate-based factor".into()));
    }
    Ok(h.h_value(t, z)? / hx)
}

/// `[E_{p(.|z)} c(x_1) / E_{p(.|x)} c(x_1)]^gamma` where `classifier`
/// evaluates `E_{p_{1|t}(.|x)} p(y = 1 | x_1)`.
pub fn predictor_strength_factor(
    classifier: &dyn RateGuidance,
    gamma: f64,
    t: f64,
    x: &[Symbol],
    z: &[Symbol],
) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!("guidance strength must be >= 0, got {gamma}")));
    }
    Ok(rate_based_factor(classifier, t, x, z)?.powf(gamma))
}

/// `exp(<z - x, g>)` on the integer embedding of symbols.
pub fn first_order_factor(grad_log_h: &[f64], x: &[Symbol], z: &[Symbol]) -> f64 {
    let dot: f64 = x
        .iter()
        .zip(z)
        .zip(grad_log_h)
        .map(|((&a, &b), g)| (b as f64 - a as f64) * g)
        .sum();
    dot.exp()
}

/// Central differences of `log h` over the integer embedding with unit step,
/// one-sided at the alphabet boundary or next to states without mass.
pub fn log_h_gradient(h: &dyn RateGuidance, t: f64, x: &[Symbol], hx: f64) -> Result<Vec<f64>> {
    let s = h.space().alphabet_size();
    let log_hx = hx.ln();
    let mut grad = vec![0.0; x.len()];
    let mut z = x.to_vec();
    for d in 0..x.len() {
        let mut probe = |sym: Option<Symbol>| -> Result<Option<f64>> {
            let Some(sym) = sym else { return Ok(None) };
            z[d] = sym;
            let v = match h.h_value(t, &z) {
                Ok(v) if v > 0.0 => Some(v.ln()),
                Ok(_) | Err(Error::Unreachable { .. }) => None,
                Err(e) => return Err(e),
            };
            z[d] = x[d];
            Ok(v)
        };
        let up = probe(((x[d] as usize) + 1 < s).then(|| x[d] + 1))?;
        let down = probe(x[d].checked_sub(1))?;
        grad[d] = match (up, down) {
            (Some(u), Some(l)) => 0.5 * (u - l),
            (Some(u), None) => u - log_hx,
            (None, Some(l)) => log_hx - l,
            (None, None) => 0.0,
        };
        z[d] = x[d];
    }
    Ok(grad)
}

/// How the rate-based samplers query the guidance model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// Draw `x1^d` from the posterior and reweight the conditional rate
    /// towards `x^{d <- x1^d}`: `D + 1` guidance inputs on a mixture path.
    Endpoint,
    /// Reweight the full marginal rate over all single-coordinate neighbors:
    /// `D (|S| - 1) + 1` guidance inputs.
    FullNeighborhood,
}

impl RateMode {
    /// The default for a path: endpoint queries on the masked path, the full
    /// neighborhood otherwise.
    pub fn default_for(path: &ConditionalPath) -> Self {
        if path.is_masked() {
            RateMode::Endpoint
        } else {
            RateMode::FullNeighborhood
        }
    }
}

/// Sampling scheme selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum GuidanceScheme {
    None,
    PosteriorBased,
    RateBased,
    Predictor { gamma: f64 },
    FirstOrder,
}

impl GuidanceScheme {
    pub fn validate(&self) -> Result<()> {
        if let GuidanceScheme::Predictor { gamma } = self {
            if !(*gamma >= 0.0) || !gamma.is_finite() {
                return Err(Error::InvalidConfig(format!("predictor strength must be >= 0, got {gamma}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for GuidanceScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceScheme::None => f.write_str("none"),
            GuidanceScheme::PosteriorBased => f.write_str("posterior"),
            GuidanceScheme::RateBased => f.write_str("rate"),
            GuidanceScheme::Predictor { gamma } => write!(f, "predictor:{gamma}"),
            GuidanceScheme::FirstOrder => f.write_str("first-order"),
        }
    }
}

impl FromStr for GuidanceScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let scheme = match s {
            "none" => GuidanceScheme::None,
            "posterior" | "posterior-based" => GuidanceScheme::PosteriorBased,
            "rate" | "rate-based" => GuidanceScheme::RateBased,
            "first-order" => GuidanceScheme::FirstOrder,
            other => match other.strip_prefix("predictor:") {
                Some(g) => GuidanceScheme::Predictor {
                    gamma: g.parse().map_err(|_| {
                        Error::InvalidConfig(format!("cannot parse predictor strength '{g}'"))
                    })?,
                },
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown guidance '{other}' (expected none, posterior, rate, predictor:<gamma>, first-order)"
                    )))
                }
            },
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Guidance inputs requested per chain per jump step.
pub fn call_count(scheme: &GuidanceScheme, space: &StateSpace, init: Init) -> u64 {
    let d = space.dims() as u64;
    let s = space.alphabet_size() as u64;
    let rate_like = || match init {
        Init::Masked => d + 1,
        Init::Uniform => d * (s - 1) + 1,
    };
    match scheme {
        GuidanceScheme::None => 0,
        GuidanceScheme::PosteriorBased => 1,
        GuidanceScheme::RateBased | GuidanceScheme::Predictor { .. } => rate_like(),
        GuidanceScheme::FirstOrder => 2,
    }
}

/// Expected guidance inputs per step for a given rate mode on a mixture path.
fn rate_mode_calls(mode: RateMode, space: &StateSpace) -> u64 {
    let d = space.dims() as u64;
    match mode {
        RateMode::Endpoint => d + 1,
        RateMode::FullNeighborhood => d * (space.alphabet_size() as u64 - 1) + 1,
    }
}

/// Posterior rows multiplied by `h^d(s, x)`, left unnormalized so that
/// `h = 1` reproduces the unguided draws exactly.
pub struct GuidedPosteriorWeights<'a> {
    pub posterior: &'a dyn PosteriorModel,
    pub guidance: &'a dyn PosteriorGuidance,
}

impl EndpointWeights for GuidedPosteriorWeights<'_> {
    fn space(&self) -> &StateSpace {
        self.posterior.space()
    }

    fn weights(&self, t: f64, x: &[Symbol], out: &mut Vec<f64>) -> Result<()> {
        let space = self.posterior.space();
        let n = space.dims() * space.alphabet_size();
        out.resize(n, 0.0);
        self.posterior.evaluate_into(t, x, out)?;
        let mut h = vec![0.0; n];
        self.guidance.h_matrix_into(t, x, &mut h)?;
        for (w, hv) in out.iter_mut().zip(&h) {
            *w *= hv;
        }
        Ok(())
    }

    fn calls(&self) -> (u64, u64) {
        (1, 1)
    }

    fn is_time_independent(&self) -> bool {
        self.posterior.is_time_independent() && self.guidance.is_time_independent()
    }
}

/// Factor applied to off-diagonal rates by [`RateKernel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateFactor {
    /// `(h(z) / h(x))^exponent`; exponent 1 is rate-based guidance.
    Ratio { exponent: f64 },
    /// `exp(<z - x, grad log h(x)>)`.
    FirstOrder,
}

#[doc(hidden)]
pub struct RateStep<'s> {
    posterior: MemoRef<'s, Vec<f64>>,
    values: MemoRef<'s, Option<f64>>,
    gradients: MemoRef<'s, Vec<f64>>,
    coefficient: f64,
}

/// Sampler for rate-based, predictor and first-order guidance.
pub struct RateKernel<'a> {
    posterior: &'a dyn PosteriorModel,
    guidance: &'a dyn RateGuidance,
    factor: RateFactor,
    mode: RateMode,
    path: &'a ConditionalPath,
    counters: &'a CallCounters,
    persistent: OnceCell<(StateMemo<Vec<f64>>, StateMemo<Option<f64>>, StateMemo<Vec<f64>>)>,
}

impl<'a> RateKernel<'a> {
    pub fn new(
        posterior: &'a dyn PosteriorModel,
        guidance: &'a dyn RateGuidance,
        factor: RateFactor,
        mode: RateMode,
        path: &'a ConditionalPath,
        counters: &'a CallCounters,
    ) -> Result<Self> {
        if posterior.space() != path.space() || guidance.space() != path.space() {
            return Err(Error::SpaceMismatch);
        }
        Ok(Self { posterior, guidance, factor, mode, path, counters, persistent: OnceCell::new() })
    }

    fn time_independent(&self) -> bool {
        self.posterior.is_time_independent() && self.guidance.is_time_independent()
    }

    fn posterior_rows<'m>(&self, step: &'m RateStep<'_>, t: f64, x: &[Symbol]) -> Result<Vec<f64>> {
        step.posterior.get().with(
            x,
            || {
                let space = self.path.space();
                let mut w = vec![0.0; space.dims() * space.alphabet_size()];
                self.posterior.evaluate_into(t, x, &mut w)?;
                Ok(w)
            },
            |w| w.clone(),
        )
    }

    /// `h` at `z`, or `None` when `z` carries no mass under the path.
    fn value(&self, step: &RateStep<'_>, t: f64, z: &[Symbol]) -> Result<Option<f64>> {
        step.values.get().with(
            z,
            || match self.guidance.h_value(t, z) {
                Ok(v) => Ok(Some(v)),
                Err(Error::Unreachable { .. }) => Ok(None),
                Err(e) => Err(e),
            },
            |v| *v,
        )
    }

    fn factor_for(
        &self,
        step: &RateStep<'_>,
        t: f64,
        x: &[Symbol],
        hx: f64,
        grad: Option<&[f64]>,
        z: &[Symbol],
    ) -> Result<f64> {
        match self.factor {
            RateFactor::Ratio { exponent } => {
                let hz = self.value(step, t, z)?.unwrap_or(0.0);
                Ok((hz / hx).powf(exponent))
            }
            RateFactor::FirstOrder => Ok(first_order_factor(grad.expect("gradient computed"), x, z)),
        }
    }
}

impl ChainKernel for RateKernel<'_> {
    type Step<'s>
        = RateStep<'s>
    where
        Self: 's;

    fn begin_step(&self, t: f64) -> Result<RateStep<'_>> {
        let space = *self.path.space();
        let coefficient = self.path.rate_coefficient(t).unwrap_or(f64::NAN);
        // Reachability at t = 0 differs from the open interval, so values
        // seen there must not outlive the step.
        if self.time_independent() && t > 0.0 {
            let (p, v, g) = self.persistent.get_or_init(|| {
                (StateMemo::new(space), StateMemo::new(space), StateMemo::new(space))
            });
            Ok(RateStep {
                posterior: MemoRef::Shared(p),
                values: MemoRef::Shared(v),
                gradients: MemoRef::Shared(g),
                coefficient,
            })
        } else {
            Ok(RateStep {
                posterior: MemoRef::Owned(StateMemo::new(space)),
                values: MemoRef::Owned(StateMemo::new(space)),
                gradients: MemoRef::Owned(StateMemo::new(space)),
                coefficient,
            })
        }
    }

    fn advance<'s>(&'s self, step: &RateStep<'s>, site: crate::ctmc::Site, t: f64, h: f64, x: &mut [Symbol]) -> Result<()> {
        let c = step.coefficient;
        if !c.is_finite() {
            return Err(Error::TerminalRate(t));
        }
        let space = self.path.space();
        let (dims, s) = (space.dims(), space.alphabet_size());
        let mut rngs: Vec<CounterRng> = (0..dims).map(|d| site.rng(d)).collect();
        let post = self.posterior_rows(step, t, x)?;
        CallCounters::bump(&self.counters.posterior, 1);

        let hx = self.value(step, t, x)?.ok_or(Error::Unreachable { t })?;
        let mut guidance_calls = 1u64;
        let grad = match self.factor {
            RateFactor::FirstOrder => {
                guidance_calls += 1;
                Some(step.gradients.get().with(
                    x,
                    || log_h_gradient(self.guidance, t, x, hx),
                    |g| g.clone(),
                )?)
            }
            RateFactor::Ratio { .. } => None,
        };
        let counts_neighbors = matches!(self.factor, RateFactor::Ratio { .. });

        let x0 = x.to_vec();
        let mut z = x0.clone();
        let mut rates = vec![0.0; s];
        let mut cond = vec![0.0; s];
        for d in 0..dims {
            match self.mode {
                RateMode::Endpoint => {
                    let row = &post[d * s..(d + 1) * s];
                    let x1d = sample_weighted(row, rngs[d].uniform())
                        .map(|i| i as Symbol)
                        .ok_or(Error::Unreachable { t })?;
                    self.path.rate_row_with_coefficient(c, t, x0[d], x1d, &mut rates);
                    if self.path.kind() == PathKind::Mixture && counts_neighbors {
                        // The endpoint neighbor is always submitted, even
                        // when it coincides with x.
                        guidance_calls += 1;
                    }
                    for a in 0..s {
                        if a as Symbol == x0[d] || rates[a] <= 0.0 {
                            continue;
                        }
                        if self.path.kind() != PathKind::Mixture && counts_neighbors {
                            guidance_calls += 1;
                        }
                        z[d] = a as Symbol;
                        rates[a] *= self.factor_for(step, t, &x0, hx, grad.as_deref(), &z)?;
                    }
                }
                RateMode::FullNeighborhood => {
                    rates.iter_mut().for_each(|v| *v = 0.0);
                    for b in 0..s {
                        let w = post[d * s + b];
                        if w == 0.0 {
                            continue;
                        }
                        self.path.rate_row_with_coefficient(c, t, x0[d], b as Symbol, &mut cond);
                        for (r, cv) in rates.iter_mut().zip(&cond) {
                            *r += w * cv;
                        }
                    }
                    for a in 0..s {
                        if a as Symbol == x0[d] {
                            continue;
                        }
                        if counts_neighbors {
                            guidance_calls += 1;
                        }
                        z[d] = a as Symbol;
                        let f = self.factor_for(step, t, &x0, hx, grad.as_deref(), &z)?;
                        if rates[a] > 0.0 {
                            rates[a] *= f;
                        }
                    }
                }
            }
            z[d] = x0[d];
            x[d] = jump_coordinate(&rates, x0[d], h, &mut rngs[d]);
        }
        CallCounters::bump(&self.counters.guidance, guidance_calls);
        Ok(())
    }

    fn finish<'s>(&'s self, step: &RateStep<'s>, site: crate::ctmc::Site, t: f64, x: &mut [Symbol]) -> Result<()> {
        let s = self.path.space().alphabet_size();
        let post = self.posterior_rows(step, t, x)?;
        CallCounters::bump(&self.counters.final_posterior, 1);
        for d in 0..x.len() {
            let mut rng = site.rng(d);
            let row = &post[d * s..(d + 1) * s];
            x[d] = sample_weighted(row, rng.uniform()).map(|i| i as Symbol).ok_or(Error::Unreachable { t })?;
        }
        Ok(())
    }
}

/// Guidance models available to [`sample_guided`].
#[derive(Clone, Copy, Default)]
pub struct GuidanceModels<'a> {
    /// Required by the posterior-based scheme.
    pub posterior_based: Option<&'a dyn PosteriorGuidance>,
    /// Required by the rate-based and first-order schemes; for the predictor
    /// scheme this evaluates `E_{p(.|x)} p(y = 1 | x_1)`.
    pub rate_based: Option<&'a dyn RateGuidance>,
}

/// Runs a sampler for `scheme` and checks the guidance call count.
pub fn sample_guided(
    scheme: &GuidanceScheme,
    posterior: &dyn PosteriorModel,
    models: GuidanceModels<'_>,
    path: &ConditionalPath,
    config: &SamplerConfig,
    mode: Option<RateMode>,
) -> Result<SampleOutput> {
    scheme.validate()?;
    let space = path.space();
    let counters = CallCounters::default();
    let mode = mode.unwrap_or_else(|| RateMode::default_for(path));
    let rate_model = || {
        models
            .rate_based
            .ok_or_else(|| Error::Precondition(format!("scheme {scheme} needs a scalar guidance model")))
    };
    let out = match scheme {
        GuidanceScheme::None => crate::ctmc::sample_unguided(posterior, path, config)?,
        GuidanceScheme::PosteriorBased => {
            let guidance = models.posterior_based.ok_or_else(|| {
                Error::Precondition("posterior-based guidance needs a matrix guidance model".into())
            })?;
            let kernel = EndpointKernel::new(GuidedPosteriorWeights { posterior, guidance }, path, &counters)?;
            run_chains(&kernel, space, config, &counters)?
        }
        GuidanceScheme::RateBased | GuidanceScheme::Predictor { .. } | GuidanceScheme::FirstOrder => {
            let factor = match scheme {
                GuidanceScheme::RateBased => RateFactor::Ratio { exponent: 1.0 },
                GuidanceScheme::Predictor { gamma } => RateFactor::Ratio { exponent: *gamma },
                _ => RateFactor::FirstOrder,
            };
            let kernel = RateKernel::new(posterior, rate_model()?, factor, mode, path, &counters)?;
            run_chains(&kernel, space, config, &counters)?
        }
    };
    if path.kind() == PathKind::Mixture && out.loop_steps > 0 {
        let per_step = match scheme {
            GuidanceScheme::RateBased | GuidanceScheme::Predictor { .. } => rate_mode_calls(mode, space),
            other => call_count(other, space, path.init()),
        };
        let expected = per_step * (out.loop_steps * config.chains) as u64;
        if out.calls.guidance != expected {
            return Err(Error::Numeric(format!(
                "guidance call count {} differs from the expected {expected}",
                out.calls.guidance
            )));
        }
    }
    Ok(out)
}

/// Dense marginal generator of the posterior-based guided process.
pub fn posterior_guided_rate_matrix(
    posterior: &dyn PosteriorModel,
    guidance: &dyn PosteriorGuidance,
    path: &ConditionalPath,
    t: f64,
) -> Result<RateMatrixDense> {
    marginal_rate_matrix(path, t, |x| {
        let p = match posterior.evaluate(t, x) {
            Ok(p) => p,
            Err(Error::Unreachable { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let h = guidance.h_matrix(t, x)?;
        match guided_posterior(&p, &h) {
            Ok(q) => Ok(Some(q.as_slice().to_vec())),
            Err(Error::Numeric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })
}

/// Dense marginal generator of the unguided process.
pub fn unguided_rate_matrix(
    posterior: &dyn PosteriorModel,
    path: &ConditionalPath,
    t: f64,
) -> Result<RateMatrixDense> {
    marginal_rate_matrix(path, t, |x| match posterior.evaluate(t, x) {
        Ok(p) => Ok(Some(p.as_slice().to_vec())),
        Err(Error::Unreachable { .. }) => Ok(None),
        Err(e) => Err(e),
    })
}

/// Dense generator `U^p(z, x) (h(z) / h(x))^exponent` of the rate-based
/// (exponent 1) or predictor guided process.
pub fn rate_guided_rate_matrix(
    posterior: &dyn PosteriorModel,
    guidance: &dyn RateGuidance,
    path: &ConditionalPath,
    t: f64,
    exponent: f64,
) -> Result<RateMatrixDense> {
    let base = unguided_rate_matrix(posterior, path, t)?;
    let space = *path.space();
    let n = base.num_states();
    let dims = space.dims();
    let values: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let mut x = vec![0 as Symbol; dims];
            space.state_at(i, &mut x);
            match guidance.h_value(t, &x) {
                Ok(v) => Ok(Some(v)),
                Err(Error::Unreachable { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut out = RateMatrixDense::zeros(space)?;
    for xi in 0..n {
        for zi in 0..n {
            let u = base.get(zi, xi);
            if zi == xi || u == 0.0 {
                continue;
            }
            let (Some(hx), Some(hz)) = (values[xi], values[zi]) else {
                continue;
            };
            out.set(zi, xi, u * (hz / hx).powf(exponent));
        }
    }
    out.fill_diagonal();
    Ok(out)
}

/// Tabulates `log h` of an exact guidance at the midpoint of each time
/// bucket, giving a tabular model that can be stored and reloaded. States
/// with no mass under the path get `h = 1`.
pub fn tabulate_guidance(exact: &ExactGuidance, kind: GuidanceKind, time_buckets: usize) -> Result<LearnedGuidance> {
    let space = *PosteriorGuidance::space(exact);
    let out_dim = kind.out_dim(&space);
    let mut table = Tabular::new(space, time_buckets, out_dim)?;
    let num_states = space.checked_num_states(crate::statespace::DEFAULT_ENUMERATION_CAP)?;
    let mut params = vec![0.0; time_buckets * num_states * out_dim];
    let mut x = vec![0 as Symbol; space.dims()];
    let mut h = vec![0.0; out_dim];
    for b in 0..time_buckets {
        let t = (b as f64 + 0.5) / time_buckets as f64;
        for i in 0..num_states {
            space.state_at(i, &mut x);
            let res = match kind {
                GuidanceKind::PosteriorBased => exact.h_matrix_into(t, &x, &mut h),
                GuidanceKind::RateBased => exact.h_value(t, &x).map(|v| h[0] = v),
            };
            let row = &mut params[(b * num_states + i) * out_dim..(b * num_states + i + 1) * out_dim];
            match res {
                Ok(()) => row.iter_mut().zip(&h).for_each(|(p, v)| *p = v.ln()),
                Err(Error::Unreachable { .. }) => row.iter_mut().for_each(|p| *p = 0.0),
                Err(e) => return Err(e),
            }
        }
    }
    table = Tabular::from_params(space, table.time_buckets(), out_dim, params)?;
    LearnedGuidance::new(Approximator::Tabular(table), kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::Scheduler;

    fn one_dim() -> (Pmf, DensityRatio, ConditionalPath) {
        let space = StateSpace::new(1, 3).unwrap();
        let p1 = Pmf::new(space, vec![0.2, 0.3, 0.5]).unwrap();
        let r = DensityRatio::tabulated(space, vec![1.0, 2.0, 4.0]).unwrap();
        let path = ConditionalPath::mixture(space, Scheduler::Cosine, Init::Uniform).unwrap();
        (p1, r, path)
    }

    #[test]
    fn guided_posterior_hand_example() {
        let p = FactorizedPosterior::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let q = guided_posterior(&p, &[1.0, 2.0, 4.0]).unwrap();
        let expected = [0.2 / 2.8, 0.6 / 2.8, 2.0 / 2.8];
        for (a, b) in q.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Cross-check against the posterior of the reweighted target at t = 0.
        let (p1, r, path) = one_dim();
        let target = Pmf::from_unnormalized(*p1.space(), vec![0.2, 0.6, 2.0]).unwrap();
        let exact = crate::posterior::exact_posterior(&target, &path, 0.0, &[1]).unwrap();
        let h = exact_guidance_h(&p1, &r, &path, 0.0, &[1]).unwrap();
        let base = crate::posterior::exact_posterior(&p1, &path, 0.0, &[1]).unwrap();
        let guided = guided_posterior(&base.marginals, &h).unwrap();
        assert!(guided.max_abs_diff(&exact.marginals) < 1e-15);
    }

    #[test]
    fn identity_and_scale_cases() {
        let p = FactorizedPosterior::new(2, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        assert_eq!(guided_posterior(&p, &[1.0; 6]).unwrap(), p);
        let h = [1.0, 2.0, 3.0, 0.5, 4.0, 1.5];
        let scaled: Vec<f64> = h.iter().map(|v| v * 7.25).collect();
        let a = guided_posterior(&p, &h).unwrap();
        let b = guided_posterior(&p, &scaled).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
        assert!(guided_posterior(&p, &[0.0; 6]).is_err());
    }

    #[test]
    fn exact_h_special_cases() {
        let (p1, r, path) = one_dim();
        let h = exact_guidance_h(&p1, &r, &path, 0.4, &[2]).unwrap();
        assert_eq!(h, vec![1.0, 2.0, 4.0]);
        let c = DensityRatio::constant(*p1.space(), 3.5).unwrap();
        let h = exact_guidance_h(&p1, &c, &path, 0.4, &[0]).unwrap();
        assert!(h.iter().all(|&v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn factors_identity_cases() {
        let (p1, r, path) = one_dim();
        let g = ExactGuidance::new(p1.clone(), r, path).unwrap();
        assert_eq!(rate_based_factor(&g, 0.5, &[1], &[1]).unwrap(), 1.0);
        let one = ExactGuidance::new(p1, DensityRatio::constant(*path.space(), 1.0).unwrap(), path).unwrap();
        assert_eq!(rate_based_factor(&one, 0.5, &[1], &[2]).unwrap(), 1.0);
        assert_eq!(predictor_strength_factor(&g, 0.0, 0.5, &[0], &[2]).unwrap(), 1.0);
        let f1 = predictor_strength_factor(&g, 1.0, 0.5, &[0], &[2]).unwrap();
        assert!((f1 - rate_based_factor(&g, 0.5, &[0], &[2]).unwrap()).abs() < 1e-15);
        assert!(predictor_strength_factor(&g, -1.0, 0.5, &[0], &[2]).is_err());
        assert!(rate_based_factor(&g, 0.5, &[0], &[0, 1]).is_err());
    }

    #[test]
    fn first_order_is_exact_on_log_linear_guidance() {
        struct LogLinear(StateSpace);
        impl RateGuidance for LogLinear {
            fn space(&self) -> &StateSpace {
                &self.0
            }
            fn h_value(&self, _: f64, x: &[Symbol]) -> Result<f64> {
                Ok((0.3 * x[0] as f64 - 0.7 * x[1] as f64).exp())
            }
        }
        let g = LogLinear(StateSpace::new(2, 6).unwrap());
        for x in [[0u16, 0u16], [2, 3], [5, 5]] {
            let hx = g.h_value(0.5, &x).unwrap();
            let grad = log_h_gradient(&g, 0.5, &x, hx).unwrap();
            for z in [[x[0], 1], [4, x[1]]] {
                let exact = g.h_value(0.5, &z).unwrap() / hx;
                assert!((first_order_factor(&grad, &x, &z) - exact).abs() < 1e-12);
            }
        }
        assert_eq!(first_order_factor(&[0.4, -2.0], &[1, 1], &[1, 1]), 1.0);
    }

    #[test]
    fn table_of_call_counts() {
        let masked = StateSpace::with_mask(2, 33).unwrap();
        let plain = StateSpace::new(2, 33).unwrap();
        assert_eq!(call_count(&GuidanceScheme::PosteriorBased, &masked, Init::Masked), 1);
        assert_eq!(call_count(&GuidanceScheme::RateBased, &masked, Init::Masked), 3);
        assert_eq!(call_count(&GuidanceScheme::RateBased, &plain, Init::Uniform), 65);
        assert_eq!(call_count(&GuidanceScheme::RateBased, &masked, Init::Uniform), 67);
        assert_eq!(call_count(&GuidanceScheme::FirstOrder, &plain, Init::Uniform), 2);
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("posterior".parse::<GuidanceScheme>().unwrap(), GuidanceScheme::PosteriorBased);
        assert_eq!(
            "predictor:2.5".parse::<GuidanceScheme>().unwrap(),
            GuidanceScheme::Predictor { gamma: 2.5 }
        );
        assert!("predictor:-1".parse::<GuidanceScheme>().is_err());
        assert!("bogus".parse::<GuidanceScheme>().is_err());
        assert_eq!(GuidanceScheme::Predictor { gamma: 3.0 }.to_string(), "predictor:3");
    }

    #[test]
    fn tabulated_guidance_matches_exact_on_masked_path() {
        let data = StateSpace::new(2, 3).unwrap();
        let space = StateSpace::with_mask(2, 3).unwrap();
        let p1 = Pmf::new(data, vec![0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.2, 0.1, 0.1]).unwrap().embed(&space).unwrap();
        let r = DensityRatio::tabulated(space, (0..16).map(|i| 1.0 + (i % 4) as f64).collect()).unwrap();
        let path = ConditionalPath::mixture(space, crate::paths::Scheduler::Cosine, Init::Masked).unwrap();
        let exact = ExactGuidance::new(p1, r, path).unwrap();
        let table = tabulate_guidance(&exact, GuidanceKind::PosteriorBased, 1).unwrap();
        for x in [[3u16, 3], [0, 3], [3, 2]] {
            let a = table.h_matrix(0.3, &x).unwrap();
            let b = exact.h_matrix(0.3, &x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let scalar = tabulate_guidance(&exact, GuidanceKind::RateBased, 1).unwrap();
        assert!((scalar.h_value(0.8, &[0, 3]).unwrap() - exact.h_value(0.8, &[0, 3]).unwrap()).abs() < 1e-12);
    }

}
