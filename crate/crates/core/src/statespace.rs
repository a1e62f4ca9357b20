//! Finite state spaces `S^D`, dense pmfs over them, factorized posteriors and
//! sample batches.
//!
//! States are stored as slices of [`Symbol`]s. The flat index of a state is
//! its position in lexicographic order (first coordinate slowest), which is
//! also the order produced by [`enumerate_states`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One coordinate value, an index into the per-dimension alphabet.
pub type Symbol = u16;

/// Default limit on `|S|^D` for anything that materializes the full lattice.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;

/// Tolerance on the total mass of a constructed pmf.
pub const PMF_TOLERANCE: f64 = 1e-12;
/// Deviation from unit mass that [`Pmf::new`] silently renormalizes.
pub const PMF_RENORMALIZE_LIMIT: f64 = 1e-9;
/// Tolerance on each row of a [`FactorizedPosterior`].
pub const ROW_TOLERANCE: f64 = 1e-10;

/// The lattice `S^D`, optionally with one alphabet index reserved as an
/// absorbing mask symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSpace {
    dims: usize,
    alphabet_size: usize,
    mask_symbol: Option<Symbol>,
}

impl StateSpace {
    pub fn new(dims: usize, alphabet_size: usize) -> Result<Self> {
        Self::build(dims, alphabet_size, None)
    }

    /// A space with `data_symbols` ordinary symbols followed by one mask
    /// symbol, so `alphabet_size = data_symbols + 1`.
    pub fn with_mask(dims: usize, data_symbols: usize) -> Result<Self> {
        let mask = Symbol::try_from(data_symbols)
            .map_err(|_| Error::InvalidSpace(format!("alphabet of {data_symbols} too large")))?;
        Self::build(dims, data_symbols + 1, Some(mask))
    }

    /// A space whose mask symbol sits at an arbitrary index.
    pub fn with_mask_at(dims: usize, alphabet_size: usize, mask: Symbol) -> Result<Self> {
        Self::build(dims, alphabet_size, Some(mask))
    }

    fn build(dims: usize, alphabet_size: usize, mask_symbol: Option<Symbol>) -> Result<Self> {
        if dims < 1 {
            return Err(Error::InvalidSpace("dims must be >= 1".into()));
        }
        if alphabet_size < 2 {
            return Err(Error::InvalidSpace("alphabet_size must be >= 2".into()));
        }
        if alphabet_size > Symbol::MAX as usize + 1 {
            return Err(Error::InvalidSpace(format!(
                "alphabet_size {alphabet_size} exceeds symbol width"
            )));
        }
        if let Some(m) = mask_symbol {
            if m as usize >= alphabet_size {
                return Err(Error::InvalidSpace(format!(
                    "mask symbol {m} outside alphabet of size {alphabet_size}"
                )));
            }
            if alphabet_size < 3 {
                return Err(Error::InvalidSpace(
                    "a masked alphabet needs at least two data symbols".into(),
                ));
            }
        }
        Ok(Self { dims, alphabet_size, mask_symbol })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn mask_symbol(&self) -> Option<Symbol> {
        self.mask_symbol
    }

    pub fn is_mask(&self, s: Symbol) -> bool {
        self.mask_symbol == Some(s)
    }

    /// Number of non-mask symbols.
    pub fn num_data_symbols(&self) -> usize {
        self.alphabet_size - usize::from(self.mask_symbol.is_some())
    }

    /// The non-mask symbols in increasing order.
    pub fn data_symbols(&self) -> impl Iterator<Item = Symbol> + '_ {
        (0..self.alphabet_size as Symbol).filter(move |&s| !self.is_mask(s))
    }

    /// `|S|^D`, or `None` if it overflows 128 bits.
    pub fn num_states(&self) -> u128 {
        (0..self.dims).fold(1u128, |acc, _| acc.saturating_mul(self.alphabet_size as u128))
    }

    /// `|S|^D` as a `usize`, failing if it exceeds `cap`.
    pub fn checked_num_states(&self, cap: u64) -> Result<usize> {
        let n = self.num_states();
        if n > cap as u128 {
            return Err(Error::EnumerationInfeasible { states: n, cap });
        }
        Ok(n as usize)
    }

    pub fn is_enumerable(&self, cap: u64) -> bool {
        self.num_states() <= cap as u128
    }

    pub fn contains(&self, x: &[Symbol]) -> bool {
        x.len() == self.dims && x.iter().all(|&s| (s as usize) < self.alphabet_size)
    }

    /// Lexicographic index of `x`.
    #[inline]
    pub fn index_of(&self, x: &[Symbol]) -> usize {
        debug_assert_eq!(x.len(), self.dims);
        x.iter().fold(0usize, |acc, &s| acc * self.alphabet_size + s as usize)
    }

    /// Writes the state with lexicographic index `idx` into `out`.
    #[inline]
    pub fn state_at(&self, mut idx: usize, out: &mut [Symbol]) {
        debug_assert_eq!(out.len(), self.dims);
        for slot in out.iter_mut().rev() {
            *slot = (idx % self.alphabet_size) as Symbol;
            idx /= self.alphabet_size;
        }
    }

    /// The same lattice with a mask symbol appended to the alphabet.
    pub fn masked_extension(&self) -> Result<Self> {
        if self.mask_symbol.is_some() {
            return Ok(*self);
        }
        Self::with_mask(self.dims, self.alphabet_size)
    }
}

impl fmt::Display for StateSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S^{} with |S| = {}", self.dims, self.alphabet_size)?;
        if let Some(m) = self.mask_symbol {
            write!(f, " (mask = {m})")?;
        }
        Ok(())
    }
}

/// All states of a space in lexicographic order, stored flat.
#[derive(Debug, Clone)]
pub struct EnumeratedStates {
    space: StateSpace,
    symbols: Vec<Symbol>,
}

impl EnumeratedStates {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.symbols.len() / self.space.dims
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, idx: usize) -> &[Symbol] {
        let d = self.space.dims;
        &self.symbols[idx * d..(idx + 1) * d]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[Symbol]> {
        self.symbols.chunks_exact(self.space.dims)
    }
}

/// Lists every state of `space` in lexicographic order.
pub fn enumerate_states(space: &StateSpace, cap: u64) -> Result<EnumeratedStates> {
    let n = space.checked_num_states(cap)?;
    let d = space.dims;
    let mut symbols = vec![0 as Symbol; n * d];
    for (idx, chunk) in symbols.chunks_exact_mut(d).enumerate() {
        space.state_at(idx, chunk);
    }
    Ok(EnumeratedStates { space: *space, symbols })
}

/// A dense probability mass function over `S^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    space: StateSpace,
    weights: Vec<f64>,
}

impl Pmf {
    /// Validates `weights`: non-negative, finite, and summing to one up to
    /// [`PMF_RENORMALIZE_LIMIT`] (small deviations are renormalized away).
    pub fn new(space: StateSpace, weights: Vec<f64>) -> Result<Self> {
        Self::check_shape(&space, &weights)?;
        let total = Self::check_weights(&weights)?;
        if (total - 1.0).abs() >= PMF_RENORMALIZE_LIMIT {
            return Err(Error::InvalidPmf(format!("weights sum to {total}, not 1")));
        }
        Ok(Self::normalized(space, weights, total))
    }

    /// Normalizes arbitrary non-negative weights with positive total mass.
    pub fn from_unnormalized(space: StateSpace, weights: Vec<f64>) -> Result<Self> {
        Self::check_shape(&space, &weights)?;
        let total = Self::check_weights(&weights)?;
        if !(total > 0.0) {
            return Err(Error::InvalidPmf("total mass is zero".into()));
        }
        Ok(Self::normalized(space, weights, total))
    }

    pub fn delta(space: StateSpace, x: &[Symbol]) -> Result<Self> {
        let n = space.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        if !space.contains(x) {
            return Err(Error::InvalidPmf("delta location outside the space".into()));
        }
        let mut weights = vec![0.0; n];
        weights[space.index_of(x)] = 1.0;
        Ok(Self { space, weights })
    }

    pub fn uniform(space: StateSpace) -> Result<Self> {
        let n = space.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        Ok(Self { space, weights: vec![1.0 / n as f64; n] })
    }

    fn check_shape(space: &StateSpace, weights: &[f64]) -> Result<()> {
        let n = space.num_states();
        if n > DEFAULT_ENUMERATION_CAP as u128 && weights.len() as u128 != n {
            return Err(Error::EnumerationInfeasible { states: n, cap: DEFAULT_ENUMERATION_CAP });
        }
        if weights.len() as u128 != n {
            return Err(Error::InvalidPmf(format!(
                "expected {n} weights, got {}",
                weights.len()
            )));
        }
        Ok(())
    }

    fn check_weights(weights: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidPmf(format!("weight {i} is {w}")));
            }
            total += w;
        }
        Ok(total)
    }

    fn normalized(space: StateSpace, mut weights: Vec<f64>, total: f64) -> Self {
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Self { space, weights }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn prob(&self, x: &[Symbol]) -> f64 {
        self.weights[self.space.index_of(x)]
    }

    /// Indices with strictly positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i)
    }

    pub fn total_variation(&self, other: &Pmf) -> Result<f64> {
        pmf_total_variation(self, other)
    }

    /// `KL(self || other)`; infinite when `self` charges a null set of `other`.
    pub fn kl_divergence(&self, other: &Pmf) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::SpaceMismatch);
        }
        let mut kl = 0.0;
        for (&p, &q) in self.weights.iter().zip(&other.weights) {
            if p > 0.0 {
                if q <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                kl += p * (p / q).ln();
            }
        }
        Ok(kl.max(0.0))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.weights.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
    }

    /// Per-coordinate marginals as a `D x |S|` row-stochastic matrix.
    pub fn marginals(&self) -> FactorizedPosterior {
        let d = self.space.dims;
        let s = self.space.alphabet_size;
        let mut rows = vec![0.0; d * s];
        let mut x = vec![0 as Symbol; d];
        for (idx, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.space.state_at(idx, &mut x);
            for (k, &sym) in x.iter().enumerate() {
                rows[k * s + sym as usize] += w;
            }
        }
        FactorizedPosterior::from_weights(d, s, rows).expect("pmf marginals are normalizable")
    }

    /// Product of the coordinate marginals, on the same space.
    pub fn product_of_marginals(&self) -> Pmf {
        let m = self.marginals();
        let d = self.space.dims;
        let mut x = vec![0 as Symbol; d];
        let weights = (0..self.weights.len())
            .map(|idx| {
                self.space.state_at(idx, &mut x);
                x.iter().enumerate().map(|(k, &sym)| m.get(k, sym)).product()
            })
            .collect();
        Pmf::from_unnormalized(self.space, weights).expect("product of marginals has mass")
    }

    /// Re-expresses this pmf on `target`, a space with the same dimensions
    /// whose alphabet extends this one (typically by a mask symbol).
    pub fn embed(&self, target: &StateSpace) -> Result<Pmf> {
        if target.dims != self.space.dims || target.alphabet_size < self.space.alphabet_size {
            return Err(Error::SpaceMismatch);
        }
        let n = target.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        let mut weights = vec![0.0; n];
        let mut x = vec![0 as Symbol; self.space.dims];
        for (idx, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                self.space.state_at(idx, &mut x);
                if x.iter().any(|&s| target.is_mask(s)) {
                    return Err(Error::InvalidPmf("source mass on the target's mask symbol".into()));
                }
                weights[target.index_of(&x)] = w;
            }
        }
        Ok(Pmf { space: *target, weights })
    }

    /// Restricts to `target` (same dims, smaller alphabet), failing if mass
    /// would be dropped.
    pub fn restrict(&self, target: &StateSpace) -> Result<Pmf> {
        if target.dims != self.space.dims || target.alphabet_size > self.space.alphabet_size {
            return Err(Error::SpaceMismatch);
        }
        let n = target.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        let mut weights = vec![0.0; n];
        let mut x = vec![0 as Symbol; self.space.dims];
        for (idx, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                self.space.state_at(idx, &mut x);
                if !target.contains(&x) {
                    return Err(Error::InvalidPmf("mass outside the restricted space".into()));
                }
                weights[target.index_of(&x)] = w;
            }
        }
        Ok(Pmf { space: *target, weights })
    }

    pub fn sampler(&self) -> PmfSampler {
        PmfSampler::new(self)
    }
}

/// Inverse-CDF sampler for a [`Pmf`].
#[derive(Debug, Clone)]
pub struct PmfSampler {
    space: StateSpace,
    cdf: Vec<f64>,
}

impl PmfSampler {
    pub fn new(pmf: &Pmf) -> Self {
        let mut acc = 0.0;
        let cdf = pmf
            .weights
            .iter()
            .map(|&w| {
                acc += w;
                acc
            })
            .collect();
        Self { space: pmf.space, cdf }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    /// Index of the state selected by the uniform draw `u`.
    pub fn sample_index(&self, u: f64) -> usize {
        let total = *self.cdf.last().expect("non-empty pmf");
        let target = u * total;
        let idx = self.cdf.partition_point(|&c| c <= target);
        let mut idx = idx.min(self.cdf.len() - 1);
        // Never land on a zero-mass state through rounding at the upper end.
        while idx > 0 && self.cdf[idx] == self.cdf[idx - 1] {
            idx -= 1;
        }
        idx
    }

    pub fn sample_into(&self, u: f64, out: &mut [Symbol]) {
        self.space.state_at(self.sample_index(u), out);
    }
}

/// `TV(a, b) = 1/2 sum_x |a(x) - b(x)|`.
pub fn pmf_total_variation(a: &Pmf, b: &Pmf) -> Result<f64> {
    if a.space != b.space {
        return Err(Error::SpaceMismatch);
    }
    let sum: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum();
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

/// Histogram of a batch of states, normalized by the batch size.
pub fn empirical_pmf(batch: &SampleBatch, space: &StateSpace) -> Result<Pmf> {
    if batch.is_empty() {
        return Err(Error::Precondition("empirical pmf of an empty batch".into()));
    }
    if batch.dims() != space.dims {
        return Err(Error::SpaceMismatch);
    }
    let n = space.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
    let mut counts = vec![0u64; n];
    for x in batch.iter() {
        if !space.contains(x) {
            return Err(Error::Precondition("batch contains a state outside the space".into()));
        }
        counts[space.index_of(x)] += 1;
    }
    let total = batch.len() as f64;
    let weights = counts.into_iter().map(|c| c as f64 / total).collect();
    Pmf::from_unnormalized(*space, weights)
}

/// Per-coordinate posterior marginals: a `D x |S|` matrix whose row `d` is
/// the distribution of coordinate `d` of the clean state.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPosterior {
    dims: usize,
    alphabet_size: usize,
    rows: Vec<f64>,
}

impl FactorizedPosterior {
    /// Validates an already row-stochastic matrix.
    pub fn new(dims: usize, alphabet_size: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != dims * alphabet_size {
            return Err(Error::InvalidPmf("posterior matrix has the wrong shape".into()));
        }
        for (d, row) in rows.chunks_exact(alphabet_size).enumerate() {
            let mut total = 0.0;
            for &w in row {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidPmf(format!("row {d} has entry {w}")));
                }
                total += w;
            }
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidPmf(format!("row {d} sums to {total}")));
            }
        }
        Ok(Self { dims, alphabet_size, rows })
    }

    /// Normalizes each row of a non-negative weight matrix.
    pub fn from_weights(dims: usize, alphabet_size: usize, mut rows: Vec<f64>) -> Result<Self> {
        if rows.len() != dims * alphabet_size {
            return Err(Error::InvalidPmf("posterior matrix has the wrong shape".into()));
        }
        for (d, row) in rows.chunks_exact_mut(alphabet_size).enumerate() {
            let total: f64 = row.iter().sum();
            if !(total > 0.0) || !total.is_finite() || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidPmf(format!("row {d} cannot be normalized")));
            }
            row.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { dims, alphabet_size, rows })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.rows[d * self.alphabet_size..(d + 1) * self.alphabet_size]
    }

    pub fn get(&self, d: usize, s: Symbol) -> f64 {
        self.rows[d * self.alphabet_size + s as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn max_abs_diff(&self, other: &FactorizedPosterior) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `N` states of dimension `D` observed at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dims: usize,
    states: Vec<Symbol>,
    time: f64,
}

impl SampleBatch {
    pub fn new(dims: usize, states: Vec<Symbol>, time: f64) -> Result<Self> {
        if dims == 0 || states.len() % dims != 0 {
            return Err(Error::Precondition("batch length is not a multiple of dims".into()));
        }
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::InvalidTime(time));
        }
        Ok(Self { dims, states, time })
    }

    /// Checks that every entry lies inside `space`.
    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        if self.dims != space.dims() {
            return Err(Error::SpaceMismatch);
        }
        if self.states.iter().any(|&s| s as usize >= space.alphabet_size()) {
            return Err(Error::Precondition("symbol outside the alphabet".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self, i: usize) -> &[Symbol] {
        &self.states[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[Symbol]> {
        self.states.chunks_exact(self.dims)
    }

    pub fn as_slice(&self) -> &[Symbol] {
        &self.states
    }

    pub fn into_states(self) -> Vec<Symbol> {
        self.states
    }
}

type RatioFn = dyn Fn(&[Symbol]) -> f64 + Send + Sync;

/// A density ratio `r(x) = q_1(x) / p_1(x)`, known up to a positive constant.
#[derive(Clone)]
pub struct DensityRatio {
    space: StateSpace,
    eval: Arc<RatioFn>,
}

impl fmt::Debug for DensityRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityRatio").field("space", &self.space).finish_non_exhaustive()
    }
}

impl DensityRatio {
    pub fn from_fn<F>(space: StateSpace, f: F) -> Self
    where
        F: Fn(&[Symbol]) -> f64 + Send + Sync + 'static,
    {
        Self { space, eval: Arc::new(f) }
    }

    pub fn constant(space: StateSpace, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Precondition(format!("constant ratio must be positive, got {c}")));
        }
        Ok(Self::from_fn(space, move |_| c))
    }

    /// A ratio given by one value per lattice state.
    pub fn tabulated(space: StateSpace, values: Vec<f64>) -> Result<Self> {
        let n = space.checked_num_states(DEFAULT_ENUMERATION_CAP)?;
        if values.len() != n {
            return Err(Error::Precondition(format!("expected {n} ratio values")));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition("ratio values must be finite and >= 0".into()));
        }
        let values = Arc::new(values);
        Ok(Self::from_fn(space, move |x| values[space.index_of(x)]))
    }

    /// The exact ratio `q / p` on the support of `p`. Fails when `q` charges
    /// a state outside the support of `p`.
    pub fn from_pmfs(target: &Pmf, source: &Pmf) -> Result<Self> {
        if target.space != source.space {
            return Err(Error::SpaceMismatch);
        }
        let mut values = Vec::with_capacity(source.weights.len());
        for (&q, &p) in target.weights.iter().zip(&source.weights) {
            if p > 0.0 {
                values.push(q / p);
            } else if q > 0.0 {
                return Err(Error::Precondition(
                    "target is not absolutely continuous with respect to source".into(),
                ));
            } else {
                values.push(1.0);
            }
        }
        Self::tabulated(source.space, values)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    #[inline]
    pub fn eval(&self, x: &[Symbol]) -> f64 {
        (self.eval)(x)
    }

    /// Checks `r > 0` on the support of `p1`.
    pub fn check_positive_on(&self, p1: &Pmf) -> Result<()> {
        let mut x = vec![0 as Symbol; self.space.dims()];
        for idx in p1.support() {
            p1.space.state_at(idx, &mut x);
            let r = self.eval(&x);
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Precondition(format!("ratio is {r} on the source support")));
            }
        }
        Ok(())
    }

    /// Values at every lattice state.
    pub fn tabulate(&self) -> Result<Vec<f64>> {
        let states = enumerate_states(&self.space, DEFAULT_ENUMERATION_CAP)?;
        Ok(states.iter().map(|x| self.eval(x)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp(d: usize, s: usize) -> StateSpace {
        StateSpace::new(d, s).unwrap()
    }

    #[test]
    fn space_invariants_are_enforced() {
        assert!(StateSpace::new(0, 3).is_err());
        assert!(StateSpace::new(2, 1).is_err());
        assert!(StateSpace::with_mask_at(2, 3, 3).is_err());
        let m = StateSpace::with_mask(2, 33).unwrap();
        assert_eq!(m.alphabet_size(), 34);
        assert_eq!(m.mask_symbol(), Some(33));
        assert_eq!(m.num_data_symbols(), 33);
        assert_eq!(m.data_symbols().count(), 33);
    }

    #[test]
    fn enumerate_small_spaces() {
        let one = enumerate_states(&sp(1, 3), DEFAULT_ENUMERATION_CAP).unwrap();
        let got: Vec<Vec<Symbol>> = one.iter().map(|x| x.to_vec()).collect();
        assert_eq!(got, vec![vec![0], vec![1], vec![2]]);

        let two = enumerate_states(&sp(2, 2), DEFAULT_ENUMERATION_CAP).unwrap();
        let got: Vec<Vec<Symbol>> = two.iter().map(|x| x.to_vec()).collect();
        assert_eq!(got, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);

        let grid = enumerate_states(&sp(2, 33), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(grid.len(), 1089);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let err = enumerate_states(&sp(5, 33), DEFAULT_ENUMERATION_CAP).unwrap_err();
        assert!(matches!(err, Error::EnumerationInfeasible { .. }));
    }

    #[test]
    fn tv_examples() {
        let s = sp(2, 2);
        let a = Pmf::delta(s, &[0, 0]).unwrap();
        let b = Pmf::delta(s, &[1, 1]).unwrap();
        assert_eq!(pmf_total_variation(&a, &a).unwrap(), 0.0);
        assert_eq!(pmf_total_variation(&a, &b).unwrap(), 1.0);
        let u = Pmf::uniform(s).unwrap();
        assert!((pmf_total_variation(&u, &a).unwrap() - 0.75).abs() < 1e-15);
        let other = Pmf::uniform(sp(1, 4)).unwrap();
        assert!(matches!(pmf_total_variation(&u, &other), Err(Error::SpaceMismatch)));
    }

    #[test]
    fn empirical_pmf_examples() {
        let s = sp(2, 2);
        let batch = SampleBatch::new(2, vec![0; 8], 1.0).unwrap();
        assert_eq!(empirical_pmf(&batch, &s).unwrap(), Pmf::delta(s, &[0, 0]).unwrap());

        let batch = SampleBatch::new(2, vec![0, 0, 0, 1, 0, 0, 0, 1], 1.0).unwrap();
        let p = empirical_pmf(&batch, &s).unwrap();
        assert_eq!(p.weights(), &[0.5, 0.5, 0.0, 0.0]);

        let empty = SampleBatch::new(2, vec![], 1.0).unwrap();
        assert!(empirical_pmf(&empty, &s).is_err());
    }

    #[test]
    fn pmf_construction_rules() {
        let s = sp(1, 3);
        assert!(Pmf::new(s, vec![0.5, -0.1, 0.6]).is_err());
        assert!(Pmf::new(s, vec![0.5, 0.2, 0.2]).is_err());
        let p = Pmf::new(s, vec![0.5, 0.2, 0.3 + 5e-10]).unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < PMF_TOLERANCE);
        assert!(Pmf::new(s, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn sampler_never_returns_zero_mass_states() {
        let s = sp(1, 4);
        let p = Pmf::new(s, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        let sampler = p.sampler();
        for u in [0.0, 0.25, 0.5, 0.75, 0.999_999_999_999, 1.0 - f64::EPSILON] {
            let i = sampler.sample_index(u);
            assert!(i == 1 || i == 2, "u={u} gave {i}");
        }
    }

    #[test]
    fn sampler_matches_pmf_statistically() {
        use crate::rng::CounterRng;
        let s = sp(2, 3);
        let w: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let p = Pmf::from_unnormalized(s, w).unwrap();
        let sampler = p.sampler();
        let mut rng = CounterRng::new(5);
        let n = 100_000;
        let mut states = Vec::with_capacity(2 * n);
        let mut x = [0 as Symbol; 2];
        for _ in 0..n {
            sampler.sample_into(rng.uniform(), &mut x);
            states.extend_from_slice(&x);
        }
        let batch = SampleBatch::new(2, states, 1.0).unwrap();
        let emp = empirical_pmf(&batch, &s).unwrap();
        assert!(emp.total_variation(&p).unwrap() < 0.02);
    }

    #[test]
    fn density_ratio_requires_absolute_continuity() {
        let s = sp(1, 3);
        let p = Pmf::new(s, vec![0.5, 0.5, 0.0]).unwrap();
        let q = Pmf::new(s, vec![0.2, 0.3, 0.5]).unwrap();
        assert!(DensityRatio::from_pmfs(&q, &p).is_err());
        let r = DensityRatio::from_pmfs(&p, &q).unwrap();
        assert!((r.eval(&[0]) - 2.5).abs() < 1e-12);
        assert_eq!(r.eval(&[2]), 0.0);
        assert!(DensityRatio::constant(s, 0.0).is_err());
    }

    #[test]
    fn embed_into_masked_space() {
        let s = sp(2, 3);
        let p = Pmf::from_unnormalized(s, (0..9).map(|i| i as f64 + 1.0).collect()).unwrap();
        let m = s.masked_extension().unwrap();
        let e = p.embed(&m).unwrap();
        assert_eq!(e.space().alphabet_size(), 4);
        assert!((e.prob(&[2, 1]) - p.prob(&[2, 1])).abs() < 1e-15);
        assert_eq!(e.prob(&[3, 0]), 0.0);
        assert_eq!(e.restrict(&s).unwrap(), p);
    }

    fn arb_space() -> impl Strategy<Value = StateSpace> {
        (1usize..=4, 2usize..=6).prop_map(|(d, s)| StateSpace::new(d, s).unwrap())
    }

    fn arb_pmf(space: StateSpace) -> impl Strategy<Value = Pmf> {
        let n = space.num_states() as usize;
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero mass", move |w| {
            Pmf::from_unnormalized(space, w).ok()
        })
    }

    proptest! {
        #[test]
        fn index_round_trip(space in arb_space()) {
            let states = enumerate_states(&space, DEFAULT_ENUMERATION_CAP).unwrap();
            let mut x = vec![0 as Symbol; space.dims()];
            for (i, st) in states.iter().enumerate() {
                prop_assert_eq!(space.index_of(st), i);
                space.state_at(i, &mut x);
                prop_assert_eq!(&x[..], st);
            }
        }

        #[test]
        fn tv_is_a_metric(
            (a, b, c) in arb_space().prop_flat_map(|s| (arb_pmf(s), arb_pmf(s), arb_pmf(s)))
        ) {
            let ab = a.total_variation(&b).unwrap();
            let ba = b.total_variation(&a).unwrap();
            let bc = b.total_variation(&c).unwrap();
            let ac = a.total_variation(&c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(a.total_variation(&a).unwrap(), 0.0);
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 0.0 {
                prop_assert_eq!(a.weights(), b.weights());
            }
        }
    }
}
