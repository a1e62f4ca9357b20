//! Schedulers and coordinate-wise conditional probability paths together with
//! the conditional transition rates that generate them.
//!
//! Rates follow the column-generator convention: `rate(z, x)` is the intensity
//! of jumping from `x` to `z`. Off-diagonal entries are non-negative and the
//! diagonal holds minus the off-diagonal sum.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::{StateSpace, Symbol};

/// Margin kept away from `t = 1` when rates are integrated numerically.
pub const TERMINAL_MARGIN: f64 = 1e-3;

/// Monotone schedule `kappa: [0, 1] -> [0, 1]` with `kappa(0) = 0`, `kappa(1) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// `kappa(t) = t`.
    Linear,
    /// `kappa(t) = cos^2(pi/2 * (1 - t))`.
    Cosine,
}

impl Scheduler {
    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Linear => "linear",
            Scheduler::Cosine => "cosine",
        }
    }

    pub fn kappa(&self, t: f64) -> f64 {
        match self {
            Scheduler::Linear => t,
            Scheduler::Cosine => {
                // sin(pi/2 t) == cos(pi/2 (1 - t)), exact at both endpoints.
                let c = (FRAC_PI_2 * t).sin();
                c * c
            }
        }
    }

    pub fn kappa_dot(&self, t: f64) -> f64 {
        match self {
            Scheduler::Linear => 1.0,
            Scheduler::Cosine => FRAC_PI_2 * (PI * (1.0 - t)).sin(),
        }
    }

    /// `kappa_dot / (1 - kappa)`, the common factor of every mixture rate.
    /// Infinite at `t = 1`.
    pub fn rate_coefficient(&self, t: f64) -> f64 {
        match self {
            Scheduler::Linear => 1.0 / (1.0 - t),
            Scheduler::Cosine => {
                let a = FRAC_PI_2 * (1.0 - t);
                PI * a.cos() / a.sin()
            }
        }
    }

    /// Checks the boundary values and monotonicity on a uniform grid of
    /// `points` times.
    pub fn validate(&self, points: usize) -> Result<()> {
        if self.kappa(0.0).abs() > 1e-15 || (self.kappa(1.0) - 1.0).abs() > 1e-15 {
            return Err(Error::InvalidConfig(format!("{} violates kappa(0)=0, kappa(1)=1", self.name())));
        }
        let mut prev = self.kappa(0.0);
        for i in 1..=points {
            let t = i as f64 / points as f64;
            let k = self.kappa(t);
            if k < prev - 1e-15 || self.kappa_dot(t) < -1e-15 {
                return Err(Error::InvalidConfig(format!("{} is not monotone at t={t}", self.name())));
            }
            prev = k;
        }
        Ok(())
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Scheduler::Linear),
            "cosine" => Ok(Scheduler::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown scheduler '{other}' (expected linear or cosine)"
            ))),
        }
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-coordinate noise distribution at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Uniform over the data symbols.
    Uniform,
    /// Point mass on the mask symbol.
    Masked,
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Uniform => "uniform",
            Init::Masked => "masked",
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Init::Uniform),
            "masked" | "mask" => Ok(Init::Masked),
            other => Err(Error::InvalidConfig(format!(
                "unknown initialization '{other}' (expected uniform or masked)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    /// `(1 - kappa) q_0 + kappa delta_{x1}`.
    Mixture,
    /// `softmax(-beta_t |a - x1|)` over the data symbols with
    /// `beta_t = -ln(1 - kappa_t)`.
    MetricInduced,
}

/// A coordinate-wise conditional path `q_{t|1}^d(. | x1^d)` on a given space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPath {
    kind: PathKind,
    scheduler: Scheduler,
    init: Init,
    space: StateSpace,
}

impl ConditionalPath {
    pub fn mixture(space: StateSpace, scheduler: Scheduler, init: Init) -> Result<Self> {
        if init == Init::Masked && space.mask_symbol().is_none() {
            return Err(Error::InvalidConfig("masked initialization needs a mask symbol".into()));
        }
        Ok(Self { kind: PathKind::Mixture, scheduler, init, space })
    }

    /// Metric-induced path with `d(a, b) = |a - b|` over the data symbols.
    /// Starts from the uniform distribution.
    pub fn metric(space: StateSpace, scheduler: Scheduler) -> Result<Self> {
        if space.mask_symbol().is_some() {
            return Err(Error::InvalidConfig("the metric path is defined on unmasked spaces".into()));
        }
        Ok(Self { kind: PathKind::MetricInduced, scheduler, init: Init::Uniform, space })
    }

    /// Builds a path from its configuration name: `mixture-uniform`,
    /// `mixture-masked` or `metric`.
    pub fn from_name(name: &str, space: StateSpace, scheduler: Scheduler) -> Result<Self> {
        match name {
            "mixture-uniform" => Self::mixture(space, scheduler, Init::Uniform),
            "mixture-masked" => Self::mixture(space, scheduler, Init::Masked),
            "metric" => Self::metric(space, scheduler),
            other => Err(Error::InvalidConfig(format!(
                "unknown path '{other}' (expected mixture-uniform, mixture-masked or metric)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.kind, self.init) {
            (PathKind::Mixture, Init::Uniform) => "mixture-uniform",
            (PathKind::Mixture, Init::Masked) => "mixture-masked",
            (PathKind::MetricInduced, _) => "metric",
        }
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    pub fn init(&self) -> Init {
        self.init
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    /// True for the masked mixture path, whose posteriors do not depend on time.
    pub fn is_masked(&self) -> bool {
        self.kind == PathKind::Mixture && self.init == Init::Masked
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime(t));
        }
        Ok(())
    }

    /// Noise probability `q_0^d(a)`.
    pub fn init_prob(&self, a: Symbol) -> f64 {
        match self.init {
            Init::Masked => f64::from(u8::from(self.space.is_mask(a))),
            Init::Uniform => {
                if self.space.is_mask(a) {
                    0.0
                } else {
                    1.0 / self.space.num_data_symbols() as f64
                }
            }
        }
    }

    /// `q_{t|1}^d(a | x1d)` for a single symbol `a`.
    pub fn cond_prob_at(&self, t: f64, a: Symbol, x1d: Symbol) -> Result<f64> {
        Self::check_time(t)?;
        Ok(self.prob_unchecked(t, a, x1d))
    }

    /// Same as [`cond_prob_at`](Self::cond_prob_at) without the time check,
    /// for hot loops that validated `t` already.
    #[inline]
    pub fn prob_unchecked(&self, t: f64, a: Symbol, x1d: Symbol) -> f64 {
        match self.kind {
            PathKind::Mixture => {
                let k = self.scheduler.kappa(t);
                let delta = if a == x1d { k } else { 0.0 };
                (1.0 - k) * self.init_prob(a) + delta
            }
            PathKind::MetricInduced => {
                let mut row = vec![0.0; self.space.alphabet_size()];
                self.metric_row(t, x1d, &mut row);
                row[a as usize]
            }
        }
    }

    /// Fills `out` (length `|S|`) with the pmf `q_{t|1}^d(. | x1d)`.
    pub fn cond_prob(&self, t: f64, x1d: Symbol, out: &mut [f64]) -> Result<()> {
        Self::check_time(t)?;
        debug_assert_eq!(out.len(), self.space.alphabet_size());
        match self.kind {
            PathKind::Mixture => {
                let k = self.scheduler.kappa(t);
                for (a, slot) in out.iter_mut().enumerate() {
                    *slot = (1.0 - k) * self.init_prob(a as Symbol);
                }
                out[x1d as usize] += k;
            }
            PathKind::MetricInduced => self.metric_row(t, x1d, out),
        }
        Ok(())
    }

    /// Convenience wrapper returning the row as a vector.
    pub fn cond_prob_row(&self, t: f64, x1d: Symbol) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.space.alphabet_size()];
        self.cond_prob(t, x1d, &mut out)?;
        Ok(out)
    }

    fn metric_row(&self, t: f64, x1d: Symbol, out: &mut [f64]) {
        let k = self.scheduler.kappa(t);
        if k >= 1.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[x1d as usize] = 1.0;
            return;
        }
        let beta = -(1.0 - k).ln();
        let mut total = 0.0;
        for (a, slot) in out.iter_mut().enumerate() {
            let dist = (a as f64 - x1d as f64).abs();
            *slot = (-beta * dist).exp();
            total += *slot;
        }
        out.iter_mut().for_each(|v| *v /= total);
    }

    fn coefficient(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let c = self.scheduler.rate_coefficient(t);
        if self.scheduler.kappa(t) >= 1.0 || !c.is_finite() {
            return Err(Error::TerminalRate(t));
        }
        Ok(c)
    }

    /// Conditional rate entry `u_t^d(zd, xd | x1d)`. The diagonal entry
    /// `zd == xd` is minus the off-diagonal sum.
    pub fn cond_rate(&self, t: f64, zd: Symbol, xd: Symbol, x1d: Symbol) -> Result<f64> {
        let mut row = vec![0.0; self.space.alphabet_size()];
        self.cond_rate_row(t, xd, x1d, &mut row)?;
        Ok(row[zd as usize])
    }

    /// Fills `out[z]` with the rate of jumping from `xd` to `z`, including the
    /// diagonal.
    pub fn cond_rate_row(&self, t: f64, xd: Symbol, x1d: Symbol, out: &mut [f64]) -> Result<()> {
        let c = self.coefficient(t)?;
        self.rate_row_with_coefficient(c, t, xd, x1d, out);
        Ok(())
    }

    /// Rate row given a precomputed `kappa_dot / (1 - kappa)`.
    #[inline]
    pub(crate) fn rate_row_with_coefficient(
        &self,
        c: f64,
        t: f64,
        xd: Symbol,
        x1d: Symbol,
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if xd == x1d {
            return;
        }
        match self.kind {
            PathKind::Mixture => {
                out[x1d as usize] = c;
                out[xd as usize] = -c;
            }
            PathKind::MetricInduced => {
                // beta_dot = kappa_dot / (1 - kappa). Mass moves only towards
                // strictly closer symbols, weighted by their probability under
                // the path at time t.
                let mut prob = vec![0.0; out.len()];
                self.metric_row(t, x1d, &mut prob);
                let dx = (xd as f64 - x1d as f64).abs();
                let mut total = 0.0;
                for (z, slot) in out.iter_mut().enumerate() {
                    let dz = (z as f64 - x1d as f64).abs();
                    if dz < dx {
                        *slot = c * prob[z] * (dx - dz);
                        total += *slot;
                    }
                }
                out[xd as usize] = -total;
            }
        }
    }

    /// The rate coefficient, failing at the terminal pole.
    pub fn rate_coefficient(&self, t: f64) -> Result<f64> {
        self.coefficient(t)
    }
}
