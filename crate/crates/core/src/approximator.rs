//! Function approximators mapping `(t, x)` to a vector of unconstrained
//! log-values: a lookup table over `(time bucket, state)` and a small MLP with
//! hand-written backpropagation.
//!
//! Every consumer exponentiates or softmaxes the outputs, so positivity holds
//! by construction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::{StateSpace, Symbol, DEFAULT_ENUMERATION_CAP};

/// Default number of uniform time buckets of a table.
pub const DEFAULT_TIME_BUCKETS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative(self, pre: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Backend selection and shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum ApproximatorConfig {
    Tabular {
        #[serde(default = "default_time_buckets")]
        time_buckets: usize,
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

fn default_time_buckets() -> usize {
    DEFAULT_TIME_BUCKETS
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ApproximatorConfig {
    fn default() -> Self {
        ApproximatorConfig::Tabular { time_buckets: DEFAULT_TIME_BUCKETS }
    }
}

impl ApproximatorConfig {
    pub fn is_tabular(&self) -> bool {
        matches!(self, ApproximatorConfig::Tabular { .. })
    }

    pub fn build(&self, space: StateSpace, out_dim: usize, seed: u64) -> Result<Approximator> {
        match self {
            ApproximatorConfig::Tabular { time_buckets } => {
                Ok(Approximator::Tabular(Tabular::new(space, *time_buckets, out_dim)?))
            }
            ApproximatorConfig::Mlp { hidden, activation } => {
                Ok(Approximator::Mlp(Mlp::new(space, hidden, *activation, out_dim, seed)?))
            }
        }
    }
}

/// Lookup table `theta[bucket(t), index(x), o]`, initialized to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabular {
    space: StateSpace,
    time_buckets: usize,
    num_states: usize,
    out_dim: usize,
    params: Vec<f64>,
}

impl Tabular {
    pub fn new(space: StateSpace, time_buckets: usize, out_dim: usize) -> Result<Self> {
        if time_buckets == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("table needs time_buckets >= 1 and out_dim >= 1".into()));
        }
        let num_states = space.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        let len = time_buckets
            .checked_mul(num_states)
            .and_then(|v| v.checked_mul(out_dim))
            .filter(|&v| v <= 1 << 28)
            .ok_or_else(|| Error::InvalidConfig("table too large".into()))?;
        Ok(Self { space, time_buckets, num_states, out_dim, params: vec![0.0; len] })
    }

    pub fn from_params(
        space: StateSpace,
        time_buckets: usize,
        out_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut table = Self::new(space, time_buckets, out_dim)?;
        if params.len() != table.params.len() {
            return Err(Error::Container(format!(
                "table expects {} parameters, got {}",
                table.params.len(),
                params.len()
            )));
        }
        table.params = params;
        Ok(table)
    }

    pub fn time_buckets(&self) -> usize {
        self.time_buckets
    }

    #[inline]
    pub fn bucket(&self, t: f64) -> usize {
        ((t * self.time_buckets as f64) as usize).min(self.time_buckets - 1)
    }

    #[inline]
    fn offset(&self, t: f64, x: &[Symbol]) -> usize {
        (self.bucket(t) * self.num_states + self.space.index_of(x)) * self.out_dim
    }
}

/// Fully connected network on a one-hot encoding of `x` plus the time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    space: StateSpace,
    /// Layer widths from input to output.
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(
        space: StateSpace,
        hidden: &[usize],
        activation: Activation,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let widths = Self::layer_widths(&space, hidden, out_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let layers = widths.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            // Glorot-uniform hidden layers; the output layer starts near zero
            // so that initial outputs are close to exp(0) = 1.
            let scale = if l + 1 == layers {
                1e-2
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-scale..scale));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { space, widths, activation, params })
    }

    pub fn from_params(
        space: StateSpace,
        hidden: &[usize],
        activation: Activation,
        out_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let widths = Self::layer_widths(&space, hidden, out_dim)?;
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::Container(format!(
                "mlp expects {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { space, widths, activation, params })
    }

    fn layer_widths(space: &StateSpace, hidden: &[usize], out_dim: usize) -> Result<Vec<usize>> {
        if out_dim == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let input = space.dims() * space.alphabet_size() + 1;
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        Ok(widths)
    }

    pub fn hidden(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Offsets of the weight matrix (row-major `out x in`) and bias of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.widths[k] * self.widths[k + 1] + self.widths[k + 1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    /// Runs the network, keeping pre-activations and activations per layer.
    fn forward_trace(&self, t: f64, x: &[Symbol]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let s = self.space.alphabet_size();
        let layers = self.widths.len() - 1;
        let mut pres = Vec::with_capacity(layers);
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let (w_off, b_off) = self.layer_offsets(l);
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut pre = self.params[b_off..b_off + fan_out].to_vec();
            if l == 0 {
                // Sparse product with the one-hot input.
                for (o, slot) in pre.iter_mut().enumerate() {
                    let row = &self.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    let mut acc = row[fan_in - 1] * t;
                    for (d, &sym) in x.iter().enumerate() {
                        acc += row[d * s + sym as usize];
                    }
                    *slot += acc;
                }
            } else {
                let input = &acts[l - 1];
                for (o, slot) in pre.iter_mut().enumerate() {
                    let row = &self.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    *slot += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                }
            }
            let act = if l + 1 == layers {
                pre.clone()
            } else {
                pre.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pres.push(pre);
            acts.push(act);
        }
        (pres, acts)
    }
}

/// Gradient contributions from one or more samples.
#[derive(Debug, Clone)]
pub enum GradAccumulator {
    Sparse(Vec<(usize, f64)>),
    Dense(Vec<f64>),
}

impl GradAccumulator {
    #[inline]
    fn add(&mut self, i: usize, v: f64) {
        match self {
            GradAccumulator::Sparse(e) => e.push((i, v)),
            GradAccumulator::Dense(g) => g[i] += v,
        }
    }
}

/// Dense gradient storage that remembers which entries were written, so a
/// sparse optimizer can restrict its update to them.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    values: Vec<f64>,
    touched: Vec<usize>,
    flags: Vec<bool>,
}

impl GradBuffer {
    pub fn new(len: usize) -> Self {
        Self { values: vec![0.0; len], touched: Vec::new(), flags: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn add(&mut self, i: usize, v: f64) {
        if !self.flags[i] {
            self.flags[i] = true;
            self.touched.push(i);
        }
        self.values[i] += v;
    }

    pub fn merge(&mut self, acc: &GradAccumulator, scale: f64) {
        match acc {
            GradAccumulator::Sparse(entries) => {
                for &(i, v) in entries {
                    self.add(i, v * scale);
                }
            }
            GradAccumulator::Dense(g) => {
                for (i, &v) in g.iter().enumerate() {
                    if v != 0.0 {
                        self.add(i, v * scale);
                    }
                }
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices written since the last [`clear`](Self::clear), in first-write order.
    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i] = 0.0;
            self.flags[i] = false;
        }
        self.touched.clear();
    }
}

/// A trainable map `(t, x) -> R^out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub enum Approximator {
    Tabular(Tabular),
    Mlp(Mlp),
}

impl Approximator {
    pub fn space(&self) -> &StateSpace {
        match self {
            Approximator::Tabular(m) => &m.space,
            Approximator::Mlp(m) => &m.space,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Approximator::Tabular(m) => m.out_dim,
            Approximator::Mlp(m) => *m.widths.last().expect("mlp has layers"),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Approximator::Tabular(m) => &m.params,
            Approximator::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Approximator::Tabular(m) => &mut m.params,
            Approximator::Mlp(m) => &mut m.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// True when outputs ignore `t`.
    pub fn is_time_independent(&self) -> bool {
        matches!(self, Approximator::Tabular(m) if m.time_buckets == 1)
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Approximator::Tabular(_))
    }

    pub fn new_accumulator(&self) -> GradAccumulator {
        match self {
            Approximator::Tabular(_) => GradAccumulator::Sparse(Vec::new()),
            Approximator::Mlp(m) => GradAccumulator::Dense(vec![0.0; m.params.len()]),
        }
    }

    /// Writes the outputs at `(t, x)` into `out`.
    pub fn forward(&self, t: f64, x: &[Symbol], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.out_dim());
        match self {
            Approximator::Tabular(m) => {
                let off = m.offset(t, x);
                out.copy_from_slice(&m.params[off..off + m.out_dim]);
            }
            Approximator::Mlp(m) => {
                let (_, acts) = m.forward_trace(t, x);
                out.copy_from_slice(acts.last().expect("mlp has layers"));
            }
        }
    }

    /// Accumulates `d loss / d params` given `grad_out = d loss / d outputs`
    /// at `(t, x)`.
    pub fn backward(&self, t: f64, x: &[Symbol], grad_out: &[f64], acc: &mut GradAccumulator) {
        match self {
            Approximator::Tabular(m) => {
                let off = m.offset(t, x);
                for (o, &g) in grad_out.iter().enumerate() {
                    if g != 0.0 {
                        acc.add(off + o, g);
                    }
                }
            }
            Approximator::Mlp(m) => {
                let (pres, acts) = m.forward_trace(t, x);
                let s = m.space.alphabet_size();
                let layers = m.widths.len() - 1;
                let mut delta = grad_out.to_vec();
                for l in (0..layers).rev() {
                    let (w_off, b_off) = m.layer_offsets(l);
                    let fan_in = m.widths[l];
                    if l + 1 != layers {
                        for (o, d) in delta.iter_mut().enumerate() {
                            *d *= m.activation.derivative(pres[l][o], acts[l][o]);
                        }
                    }
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        acc.add(b_off + o, d);
                        let row = w_off + o * fan_in;
                        if l == 0 {
                            for (k, &sym) in x.iter().enumerate() {
                                acc.add(row + k * s + sym as usize, d);
                            }
                            acc.add(row + fan_in - 1, d * t);
                        } else {
                            for (i, &a) in acts[l - 1].iter().enumerate() {
                                acc.add(row + i, d * a);
                            }
                        }
                    }
                    if l > 0 {
                        let mut next = vec![0.0; fan_in];
                        for (o, &d) in delta.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            let row = &m.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                            for (n, &w) in next.iter_mut().zip(row) {
                                *n += d * w;
                            }
                        }
                        delta = next;
                    }
                }
            }
        }
    }

    /// Numeric tag used by the model container.
    pub fn backend_tag(&self) -> u32 {
        match self {
            Approximator::Tabular(_) => 1,
            Approximator::Mlp(_) => 2,
        }
    }

    /// Shape header written to the model container.
    pub fn shape(&self) -> Vec<u64> {
        match self {
            Approximator::Tabular(m) => {
                vec![m.time_buckets as u64, m.num_states as u64, m.out_dim as u64]
            }
            Approximator::Mlp(m) => m.widths.iter().map(|&w| w as u64).collect(),
        }
    }

    pub fn config(&self) -> ApproximatorConfig {
        match self {
            Approximator::Tabular(m) => ApproximatorConfig::Tabular { time_buckets: m.time_buckets },
            Approximator::Mlp(m) => ApproximatorConfig::Mlp {
                hidden: m.hidden().to_vec(),
                activation: m.activation,
            },
        }
    }
}
