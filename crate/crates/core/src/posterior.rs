//! Posteriors `p_{1|t}(x_1 | x)`: the exact enumeration oracle, learned
//! factorized models, and the cross-entropy objective used to fit them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, ApproximatorConfig, GradAccumulator};
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::paths::ConditionalPath;
use crate::statespace::{FactorizedPosterior, Pmf, StateSpace, Symbol};
use crate::training::{self, LossCurve, TrainingBatch};

/// Probabilities below this are clamped inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// A model of the per-coordinate posterior marginals.
pub trait PosteriorModel: Send + Sync {
    fn space(&self) -> &StateSpace;

    /// Writes the `D x |S|` marginals at `(t, x)` row-major into `out`.
    fn evaluate_into(&self, t: f64, x: &[Symbol], out: &mut [f64]) -> Result<()>;

    fn evaluate(&self, t: f64, x: &[Symbol]) -> Result<FactorizedPosterior> {
        let space = self.space();
        let mut out = vec![0.0; space.dims() * space.alphabet_size()];
        self.evaluate_into(t, x, &mut out)?;
        FactorizedPosterior::new(space.dims(), space.alphabet_size(), out)
    }

    /// True when `evaluate` gives the same result at every `t` in `(0, 1)`.
    fn is_time_independent(&self) -> bool {
        false
    }
}

/// Brute-force posterior obtained from Bayes' rule over the support of `p1`.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    p1: Pmf,
    path: ConditionalPath,
    support: Vec<Symbol>,
    support_index: Vec<usize>,
    support_weight: Vec<f64>,
    fallback: Option<Box<ExactPosterior>>,
}

impl ExactPosterior {
    pub fn new(p1: Pmf, path: ConditionalPath) -> Result<Self> {
        if p1.space() != path.space() {
            return Err(Error::SpaceMismatch);
        }
        let space = *p1.space();
        let d = space.dims();
        let mut support = Vec::new();
        let mut support_index = Vec::new();
        let mut support_weight = Vec::new();
        let mut x = vec![0 as Symbol; d];
        for idx in p1.support() {
            space.state_at(idx, &mut x);
            support.extend_from_slice(&x);
            support_index.push(idx);
            support_weight.push(p1.weights()[idx]);
        }
        Ok(Self { p1, path, support, support_index, support_weight, fallback: None })
    }

    /// Answers states of zero probability with the posterior under the
    /// product of `p1`'s coordinate marginals instead of failing. Factorized
    /// samplers can land on such states when several coordinates move in
    /// one step.
    pub fn with_marginal_fallback(mut self) -> Result<Self> {
        let product = self.p1.product_of_marginals();
        self.fallback = Some(Box::new(ExactPosterior::new(product, self.path)?));
        Ok(self)
    }

    pub fn has_fallback(&self) -> bool {
        self.fallback.is_some()
    }

    pub fn p1(&self) -> &Pmf {
        &self.p1
    }

    pub fn path(&self) -> &ConditionalPath {
        &self.path
    }

    pub fn support_len(&self) -> usize {
        self.support_weight.len()
    }

    pub fn support_state(&self, i: usize) -> &[Symbol] {
        let d = self.p1.space().dims();
        &self.support[i * d..(i + 1) * d]
    }

    /// Lattice index of the `i`-th support state.
    pub fn support_index(&self, i: usize) -> usize {
        self.support_index[i]
    }

    /// Writes `q_{t|1}^d(x^d | b)` into `lik[d * |S| + b]`.
    pub(crate) fn likelihoods(&self, t: f64, x: &[Symbol], lik: &mut [f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime(t));
        }
        let s = self.p1.space().alphabet_size();
        for (d, &xd) in x.iter().enumerate() {
            for b in 0..s {
                lik[d * s + b] = self.path.prob_unchecked(t, xd, b as Symbol);
            }
        }
        Ok(())
    }

    /// Unnormalized joint weights `p1(x1) prod_d q_{t|1}(x^d | x1^d)`, one per
    /// support state, and their total. Fails when `x` has zero probability.
    pub(crate) fn joint_weights(&self, t: f64, x: &[Symbol], out: &mut Vec<f64>) -> Result<f64> {
        let space = self.p1.space();
        let (dims, s) = (space.dims(), space.alphabet_size());
        if !space.contains(x) {
            return Err(Error::Precondition("state outside the space".into()));
        }
        let mut lik = vec![0.0; dims * s];
        self.likelihoods(t, x, &mut lik)?;
        out.clear();
        out.reserve(self.support_weight.len());
        let mut total = 0.0;
        for (i, &p) in self.support_weight.iter().enumerate() {
            let x1 = &self.support[i * dims..(i + 1) * dims];
            let mut w = p;
            for (d, &b) in x1.iter().enumerate() {
                w *= lik[d * s + b as usize];
                if w == 0.0 {
                    break;
                }
            }
            out.push(w);
            total += w;
        }
        if !(total > 0.0) {
            return Err(Error::Unreachable { t });
        }
        Ok(total)
    }

    /// The full posterior over `S^D`.
    pub fn full(&self, t: f64, x: &[Symbol]) -> Result<Pmf> {
        let mut w = Vec::new();
        let total = self.joint_weights(t, x, &mut w)?;
        let space = *self.p1.space();
        let mut weights = vec![0.0; self.p1.weights().len()];
        for (i, &v) in w.iter().enumerate() {
            weights[self.support_index[i]] = v / total;
        }
        Pmf::from_unnormalized(space, weights)
    }
}

impl PosteriorModel for ExactPosterior {
    fn space(&self) -> &StateSpace {
        self.p1.space()
    }

    fn evaluate_into(&self, t: f64, x: &[Symbol], out: &mut [f64]) -> Result<()> {
        let space = self.p1.space();
        let (dims, s) = (space.dims(), space.alphabet_size());
        let mut w = Vec::new();
        let total = match (self.joint_weights(t, x, &mut w), &self.fallback) {
            (Ok(total), _) => total,
            (Err(Error::Unreachable { .. }), Some(fb)) => return fb.evaluate_into(t, x, out),
            (Err(e), _) => return Err(e),
        };
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &v) in w.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let x1 = &self.support[i * dims..(i + 1) * dims];
            for (d, &b) in x1.iter().enumerate() {
                out[d * s + b as usize] += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        Ok(())
    }

    fn is_time_independent(&self) -> bool {
        self.path.is_masked()
    }
}

/// Full posterior together with its per-coordinate marginals.
#[derive(Debug, Clone)]
pub struct PosteriorEvaluation {
    pub full: Pmf,
    pub marginals: FactorizedPosterior,
}

/// `p_{1|t}(. | x) ∝ p_{t|1}(x | .) p1(.)` by enumeration.
pub fn exact_posterior(
    p1: &Pmf,
    path: &ConditionalPath,
    t: f64,
    x: &[Symbol],
) -> Result<PosteriorEvaluation> {
    let oracle = ExactPosterior::new(p1.clone(), *path)?;
    let full = oracle.full(t, x)?;
    let marginals = full.marginals();
    Ok(PosteriorEvaluation { full, marginals })
}

/// A posterior parameterized by an approximator producing `D x |S|` logits.
///
/// Known structure of the path is imposed rather than learned: the mask
/// symbol never receives mass, and on the masked path an already unmasked
/// coordinate keeps its value.
#[derive(Debug, Clone)]
pub struct LearnedPosterior {
    model: Approximator,
    path: ConditionalPath,
}

impl LearnedPosterior {
    pub fn new(model: Approximator, path: ConditionalPath) -> Result<Self> {
        let space = path.space();
        if model.space() != space || model.out_dim() != space.dims() * space.alphabet_size() {
            return Err(Error::SpaceMismatch);
        }
        Ok(Self { model, path })
    }

    pub fn model(&self) -> &Approximator {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Approximator {
        &mut self.model
    }

    pub fn path(&self) -> &ConditionalPath {
        &self.path
    }

    /// Row `d` is fixed to a point mass when the masked path has already
    /// revealed coordinate `d`.
    fn fixed_symbol(&self, xd: Symbol) -> Option<Symbol> {
        (self.path.is_masked() && !self.path.space().is_mask(xd)).then_some(xd)
    }

    /// Softmax of `logits` into `out`, honoring the structural constraints.
    /// Returns, per row, whether the row is trainable.
    pub(crate) fn probabilities(&self, x: &[Symbol], logits: &[f64], out: &mut [f64]) -> Vec<bool> {
        let space = self.path.space();
        let s = space.alphabet_size();
        let mut free = Vec::with_capacity(x.len());
        for (d, &xd) in x.iter().enumerate() {
            let row = &mut out[d * s..(d + 1) * s];
            if let Some(sym) = self.fixed_symbol(xd) {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[sym as usize] = 1.0;
                free.push(false);
                continue;
            }
            let lrow = &logits[d * s..(d + 1) * s];
            let max = (0..s)
                .filter(|&b| !space.is_mask(b as Symbol))
                .map(|b| lrow[b])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for b in 0..s {
                row[b] = if space.is_mask(b as Symbol) { 0.0 } else { (lrow[b] - max).exp() };
                total += row[b];
            }
            row.iter_mut().for_each(|v| *v /= total);
            free.push(true);
        }
        free
    }
}

impl PosteriorModel for LearnedPosterior {
    fn space(&self) -> &StateSpace {
        self.path.space()
    }

    fn evaluate_into(&self, t: f64, x: &[Symbol], out: &mut [f64]) -> Result<()> {
        let mut logits = vec![0.0; out.len()];
        self.model.forward(t, x, &mut logits);
        self.probabilities(x, &logits, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("posterior model produced non-finite values".into()));
        }
        Ok(())
    }

    fn is_time_independent(&self) -> bool {
        self.model.is_time_independent()
    }
}

/// Mean cross-entropy and the number of clamped log arguments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropy {
    pub loss: f64,
    pub clamped: usize,
}

/// `mean_i -sum_d log model(t_i, x_t,i)[d, x1_i^d]`.
pub fn cross_entropy_loss(model: &dyn PosteriorModel, batch: &TrainingBatch) -> Result<CrossEntropy> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let space = model.space();
    let s = space.alphabet_size();
    let rows: Vec<Result<(f64, usize)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut probs = vec![0.0; space.dims() * s];
            model.evaluate_into(batch.time(i), batch.xt(i), &mut probs)?;
            let mut loss = 0.0;
            let mut clamped = 0;
            for (d, &b) in batch.x1(i).iter().enumerate() {
                let p = probs[d * s + b as usize];
                if p < LOG_CLAMP {
                    clamped += 1;
                }
                loss -= p.max(LOG_CLAMP).ln();
            }
            Ok((loss, clamped))
        })
        .collect();
    let mut total = 0.0;
    let mut clamped = 0;
    for r in rows {
        let (l, c) = r?;
        total += l;
        clamped += c;
    }
    if clamped > 0 {
        log::warn!("cross-entropy clamped {clamped} probabilities at {LOG_CLAMP}");
    }
    Ok(CrossEntropy { loss: total / batch.len() as f64, clamped })
}

/// Result of [`fit_posterior`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorFitReport {
    pub curve: LossCurve,
    pub final_loss: f64,
    /// Held-out cross-entropy of the model minus that of the exact posterior.
    pub heldout_gap: Option<f64>,
    pub clamped: usize,
}

/// Cross-entropy of item `i` with its gradient accumulated into `acc`.
pub(crate) fn cross_entropy_item(
    p: &LearnedPosterior,
    batch: &TrainingBatch,
    i: usize,
    acc: &mut GradAccumulator,
) -> f64 {
    let space = p.path.space();
    let s = space.alphabet_size();
    let out_dim = space.dims() * s;
    let x = batch.xt(i);
    let mut logits = vec![0.0; out_dim];
    p.model.forward(batch.time(i), x, &mut logits);
    let mut probs = vec![0.0; out_dim];
    let free = p.probabilities(x, &logits, &mut probs);
    let mut loss = 0.0;
    let mut grad = vec![0.0; out_dim];
    for (d, &b) in batch.x1(i).iter().enumerate() {
        loss -= probs[d * s + b as usize].max(LOG_CLAMP).ln();
        if free[d] {
            for k in 0..s {
                if !space.is_mask(k as Symbol) {
                    grad[d * s + k] = probs[d * s + k];
                }
            }
            grad[d * s + b as usize] -= 1.0;
        }
    }
    p.model.backward(batch.time(i), x, &grad, acc);
    loss
}

/// Trains a factorized posterior on draws `x1 ~ p1`, `x_t ~ q_{t|1}(. | x1)`.
pub fn fit_posterior(
    p1: &Pmf,
    path: &ConditionalPath,
    approximator: &ApproximatorConfig,
    optimizer: &OptimizerConfig,
) -> Result<(LearnedPosterior, PosteriorFitReport)> {
    optimizer.validate()?;
    if p1.space() != path.space() {
        return Err(Error::SpaceMismatch);
    }
    let space = *path.space();
    let out_dim = space.dims() * space.alphabet_size();
    let model = approximator.build(space, out_dim, optimizer.seed)?;
    let mut posterior = LearnedPosterior::new(model, *path)?;
    let sampler = p1.sampler();

    let curve = training::run_training(
        &mut posterior,
        optimizer,
        |p| &mut p.model,
        |step, rng| training::sample_training_batch(&sampler, path, optimizer.batch_size, step, rng),
        |p, batch, i, acc| cross_entropy_item(p, batch, i, acc),
    )?;

    let mut heldout_rng = training::batch_rng(optimizer.seed ^ 0x5EED, u64::MAX);
    let heldout = training::sample_training_batch(&sampler, path, 4096, 0, &mut heldout_rng);
    let learned = cross_entropy_loss(&posterior, &heldout)?;
    let heldout_gap = match ExactPosterior::new(p1.clone(), *path) {
        Ok(exact) => Some(learned.loss - cross_entropy_loss(&exact, &heldout)?.loss),
        Err(_) => None,
    };
    let final_loss = curve.last().unwrap_or(f64::NAN);
    Ok((posterior, PosteriorFitReport { curve, final_loss, heldout_gap, clamped: learned.clamped }))
}
