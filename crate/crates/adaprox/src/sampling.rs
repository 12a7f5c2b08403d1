//! Sampled gradient estimates.
//!
//! A [`GradientEstimate`] is the mean of component gradients over a drawn
//! batch together with a one-pass (Welford) accumulation of the total squared
//! deviation, so sample variances come out of the same sweep that builds the
//! mean. Estimates can be *augmented*: growing a batch reuses the samples
//! already drawn and continues the same accumulation, which makes "augment by
//! `k`" bit-identical to "estimate the concatenated id list from scratch".
//!
//! Randomness is organized as one stream per (iteration, stage) pair derived
//! from a single run seed, so replaying a run never depends on how many draws
//! earlier iterations consumed.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::problems::{SampleSpace, StochasticProblem};
use crate::vector::DenseVector;
use crate::Result;

/// Which draw within an iteration a stream feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Trial = 0,
    Augment = 1,
}

/// Factory for per-(iteration, stage) RNG streams under one run seed.
#[derive(Clone, Copy, Debug)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for one (iteration, stage) pair; the counter-based
    /// generator guarantees streams never overlap.
    pub fn stream(&self, iteration: u64, stage: Stage) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration.wrapping_mul(2).wrapping_add(stage as u64));
        rng
    }
}

/// How component ids are drawn from a finite sample space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

/// Mean gradient over a batch plus running variance state.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    mean: DenseVector,
    count: usize,
    sum_sq_dev: f64,
    sample_ids: Vec<usize>,
    retain: bool,
    component_grads: Vec<DenseVector>,
}

impl GradientEstimate {
    pub fn mean(&self) -> &DenseVector {
        &self.mean
    }

    pub fn batch_size(&self) -> usize {
        self.count
    }

    /// `sum_i ||g_i - mean||^2` over the batch.
    pub fn sum_sq_dev(&self) -> f64 {
        self.sum_sq_dev
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    /// Whether per-sample gradients were kept (needed for directional
    /// variances).
    pub fn retains_components(&self) -> bool {
        self.retain
    }

    /// Unbiased total sample variance `sum_sq_dev / (S - 1)`.
    pub fn sample_variance_total(&self) -> Result<f64> {
        if self.count < 2 {
            return Err(Error::MissingState(format!(
                "sample variance needs a batch of at least 2, got {}",
                self.count
            )));
        }
        Ok(self.sum_sq_dev / (self.count - 1) as f64)
    }

    /// Unbiased variance of the per-sample projections onto `direction`:
    /// `sum_i ((g_i - mean)' d)^2 / (S - 1)`. Requires retained components.
    pub fn sample_variance_directional(&self, direction: &DenseVector) -> Result<f64> {
        if self.count < 2 {
            return Err(Error::MissingState(format!(
                "sample variance needs a batch of at least 2, got {}",
                self.count
            )));
        }
        if !self.retain {
            return Err(Error::MissingState(
                "directional variance needs retained component gradients \
                 (build the estimate with retain = true)"
                    .into(),
            ));
        }
        if direction.dim() != self.mean.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.dim(),
                got: direction.dim(),
            });
        }
        let mut acc = 0.0;
        for g in &self.component_grads {
            let proj = g.dot(direction) - self.mean.dot(direction);
            acc += proj * proj;
        }
        Ok(acc / (self.count - 1) as f64)
    }

    /// One Welford step: fold a component gradient into mean and
    /// sum-of-squared-deviations.
    fn push(&mut self, id: usize, g: &DenseVector) {
        self.count += 1;
        let c = self.count as f64;
        let mut dot_acc = 0.0;
        for j in 0..self.mean.dim() {
            let delta = g[j] - self.mean[j];
            self.mean[j] += delta / c;
            dot_acc += delta * (g[j] - self.mean[j]);
        }
        self.sum_sq_dev += dot_acc;
        self.sample_ids.push(id);
        if self.retain {
            self.component_grads.push(g.clone());
        }
    }
}

fn finite_space(p: &dyn StochasticProblem) -> Result<usize> {
    match p.sample_space() {
        SampleSpace::Finite(n) if n > 0 => Ok(n),
        SampleSpace::Finite(_) => Err(Error::invalid("sample space is empty")),
        SampleSpace::Continuous => Err(Error::Unsupported(
            "sampling from a continuous component space is not implemented".into(),
        )),
    }
}

fn draw_ids(
    space: usize,
    count: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
    already: &[usize],
) -> Result<Vec<usize>> {
    match mode {
        SamplingMode::WithReplacement => {
            Ok((0..count).map(|_| rng.random_range(0..space)).collect())
        }
        SamplingMode::WithoutReplacement => {
            if already.len() + count > space {
                return Err(Error::invalid(format!(
                    "cannot draw {} distinct ids from a space of {} ({} already drawn)",
                    count,
                    space,
                    already.len()
                )));
            }
            let used: HashSet<usize> = already.iter().copied().collect();
            let mut out = Vec::with_capacity(count);
            let mut seen = used;
            while out.len() < count {
                let id = rng.random_range(0..space);
                if seen.insert(id) {
                    out.push(id);
                }
            }
            Ok(out)
        }
    }
}

/// Estimates the gradient at `x` from `s >= 2` sampled components.
pub fn estimate(
    p: &dyn StochasticProblem,
    x: &DenseVector,
    s: usize,
    rng: &mut ChaCha8Rng,
    mode: SamplingMode,
    retain: bool,
) -> Result<GradientEstimate> {
    if s < 2 {
        return Err(Error::invalid(format!("batch size must be >= 2, got {s}")));
    }
    let space = finite_space(p)?;
    let ids = draw_ids(space, s, mode, rng, &[])?;
    estimate_with_ids(p, x, &ids, retain)
}

/// Builds an estimate from caller-chosen component ids (ids may repeat).
pub fn estimate_with_ids(
    p: &dyn StochasticProblem,
    x: &DenseVector,
    ids: &[usize],
    retain: bool,
) -> Result<GradientEstimate> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot estimate from an empty batch"));
    }
    if x.dim() != p.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: x.dim(),
        });
    }
    let mut est = GradientEstimate {
        mean: DenseVector::zeros(p.dimension()),
        count: 0,
        sum_sq_dev: 0.0,
        sample_ids: Vec::with_capacity(ids.len()),
        retain,
        component_grads: Vec::new(),
    };
    let mut g = DenseVector::zeros(p.dimension());
    for &id in ids {
        p.component_gradient_into(x, id, &mut g);
        est.push(id, &g);
    }
    Ok(est)
}

/// Deterministic full-information estimate: every component exactly once.
pub fn estimate_full(p: &dyn StochasticProblem, x: &DenseVector, retain: bool) -> Result<GradientEstimate> {
    let space = finite_space(p)?;
    let ids: Vec<usize> = (0..space).collect();
    estimate_with_ids(p, x, &ids, retain)
}

/// Grows `est` to `target` samples by drawing `target - S` additional
/// components and continuing the same accumulation; existing samples are
/// reused, never redrawn.
pub fn augment(
    est: GradientEstimate,
    p: &dyn StochasticProblem,
    x: &DenseVector,
    target: usize,
    rng: &mut ChaCha8Rng,
    mode: SamplingMode,
) -> Result<GradientEstimate> {
    if target <= est.count {
        return Err(Error::invalid(format!(
            "augment target {target} must exceed the current batch {}",
            est.count
        )));
    }
    let space = finite_space(p)?;
    let extra = draw_ids(space, target - est.count, mode, rng, &est.sample_ids)?;
    let mut est = est;
    let mut g = DenseVector::zeros(p.dimension());
    for &id in &extra {
        p.component_gradient_into(x, id, &mut g);
        est.push(id, &g);
    }
    Ok(est)
}
