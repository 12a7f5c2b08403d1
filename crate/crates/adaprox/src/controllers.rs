//! Batch-size controllers.
//!
//! After the solver takes a trial proximal step from a sampled gradient, a
//! controller inspects the step and answers: how many samples did this
//! iteration actually need? Each strategy implements [`BatchController`] and
//! is registered by name, so config files and the CLI select them at runtime:
//!
//! - `norm`: total sample variance against the squared trial step
//!   (`variance <= (eta/2) ||step/alpha||^2` rearranged for the batch size);
//! - `ip`: variance of the directional inner product against the squared
//!   model decrease, the sharper test that ignores orthogonal noise;
//! - `geometric`: noise-oblivious schedule `ceil(S0 (1+gamma)^k)`;
//! - `oracle-norm`: the norm condition evaluated with exact population
//!   quantities (population variance and the expected next iterate), used to
//!   verify convergence-rate guarantees rather than to run experiments.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::prox::ProxFunction;
use crate::problems::{SampleSpace, StochasticProblem};
use crate::sampling::GradientEstimate;
use crate::vector::DenseVector;
use crate::Result;

/// Everything a controller may inspect about the trial step. `trial_point`
/// is `prox(alpha h)(x - alpha * trial.mean())`; `h_at_x`/`h_at_trial` are
/// pre-evaluated so controllers never pay for repeated `h` evaluations.
pub struct StepContext<'a> {
    pub problem: &'a dyn StochasticProblem,
    pub h: &'a ProxFunction,
    pub x: &'a DenseVector,
    pub trial: &'a GradientEstimate,
    pub trial_point: &'a DenseVector,
    pub alpha: f64,
    pub h_at_x: f64,
    pub h_at_trial: f64,
    pub iteration: usize,
}

/// A controller's verdict on the trial step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ControlSignal {
    /// The batch should be at least this large (real-valued; the solver
    /// rounds up, enforces monotonicity, and applies the cap).
    Required(f64),
    /// The trial predicts no objective decrease; request maximal
    /// information (the cap) rather than trust it.
    NonDescentTrial,
    /// The predicted decrease is numerically zero; the solver should treat
    /// the iterate as converged (or the model as degenerate) and stop.
    DegenerateDecrease,
}

pub trait BatchController: Send + Sync {
    /// Registry name (`norm`, `ip`, ...).
    fn name(&self) -> &'static str;

    /// Human-readable series label, e.g. `NORM η=0.9`.
    fn label(&self) -> String;

    /// Whether estimates must retain per-sample gradients for this
    /// controller (directional variances need them).
    fn needs_components(&self) -> bool {
        false
    }

    /// Parameter list for run metadata.
    fn parameters(&self) -> Vec<(&'static str, f64)>;

    fn required_batch(&self, ctx: &StepContext<'_>) -> Result<ControlSignal>;
}

/// `eta` equivalent to an inner-product parameter `beta`.
pub fn eta_from_beta(beta: f64) -> f64 {
    2.0 * (1.0 - beta) * (1.0 - beta)
}

/// Inverse of [`eta_from_beta`] on `beta` in (0, 1).
pub fn beta_from_eta(eta: f64) -> f64 {
    1.0 - (eta / 2.0).sqrt()
}

/// Largest batch an uncapped problem will materialize. Near convergence with
/// additive noise the norm test's requirement grows without bound, and the
/// requests escalate multiplicatively, so a run that needs more than this was
/// going to exhaust memory anyway; refusing early turns an allocation abort
/// into a diagnosable error telling the caller to cap the controller or
/// loosen the tolerance. Ten million draws is two orders of magnitude beyond
/// any batch the experiments ask for.
pub const MAX_UNCAPPED_BATCH: usize = 10_000_000;

/// Rounds a raw requirement up, never shrinks the current batch, and applies
/// the cap. A non-finite requirement is satisfied by the cap when one
/// exists and is an error otherwise.
pub fn next_batch_size(raw: f64, current: usize, cap: Option<usize>) -> Result<usize> {
    if raw.is_nan() {
        return Err(Error::invalid("batch requirement is NaN"));
    }
    let want = if raw.is_finite() {
        let ceiled = raw.max(0.0).ceil();
        if cap.is_none() && ceiled > MAX_UNCAPPED_BATCH as f64 {
            return Err(Error::invalid(format!(
                "batch requirement {raw:.3e} exceeds {MAX_UNCAPPED_BATCH} and no cap is set; \
                 cap the controller or loosen the step tolerance"
            )));
        }
        // `as usize` saturates; the min against the cap below repairs that.
        ceiled as usize
    } else {
        match cap {
            Some(c) => c,
            None => {
                return Err(Error::invalid(
                    "unbounded batch requirement with no cap to fall back on",
                ))
            }
        }
    };
    let mut s = want.max(current);
    if let Some(c) = cap {
        s = s.min(c);
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// norm test

pub struct NormTest {
    eta: f64,
}

impl NormTest {
    pub fn new(eta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) || eta <= 0.0 {
            return Err(Error::invalid(format!("eta must lie in (0, 1), got {eta}")));
        }
        Ok(NormTest { eta })
    }
}

impl BatchController for NormTest {
    fn name(&self) -> &'static str {
        "norm"
    }

    fn label(&self) -> String {
        format!("NORM η={}", self.eta)
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("eta", self.eta)]
    }

    fn required_batch(&self, ctx: &StepContext<'_>) -> Result<ControlSignal> {
        let step_over_alpha_sq = ctx.trial_point.dist(ctx.x).powi(2) / (ctx.alpha * ctx.alpha);
        if step_over_alpha_sq == 0.0 {
            return Ok(ControlSignal::DegenerateDecrease);
        }
        let variance = ctx.trial.sample_variance_total()?;
        Ok(ControlSignal::Required(
            variance / (self.eta / 2.0 * step_over_alpha_sq),
        ))
    }
}

// ---------------------------------------------------------------------------
// inner-product test

pub struct InnerProductTest {
    beta: f64,
}

impl InnerProductTest {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) || beta <= 0.0 {
            return Err(Error::invalid(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        Ok(InnerProductTest { beta })
    }
}

impl BatchController for InnerProductTest {
    fn name(&self) -> &'static str {
        "ip"
    }

    fn label(&self) -> String {
        format!("IP β={}", self.beta)
    }

    fn needs_components(&self) -> bool {
        true
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("beta", self.beta), ("eta_equiv", eta_from_beta(self.beta))]
    }

    fn required_batch(&self, ctx: &StepContext<'_>) -> Result<ControlSignal> {
        // Model decrease of the trial step d = (trial - x) / alpha:
        //   D = g'd + h(trial) - h(x).
        let mut dir = ctx.trial_point.sub(ctx.x);
        dir.scale(1.0 / ctx.alpha);
        let decrease = ctx.trial.mean().dot(&dir) + ctx.h_at_trial - ctx.h_at_x;
        let tol = 1e-14 * (1.0 + ctx.h_at_x.abs());
        if decrease.abs() < tol {
            return Ok(ControlSignal::DegenerateDecrease);
        }
        if decrease >= 0.0 {
            return Ok(ControlSignal::NonDescentTrial);
        }
        let dir_variance = ctx.trial.sample_variance_directional(&dir)?;
        let one_minus_beta = 1.0 - self.beta;
        Ok(ControlSignal::Required(
            dir_variance / (one_minus_beta * one_minus_beta * decrease * decrease),
        ))
    }
}

// ---------------------------------------------------------------------------
// geometric schedule

pub struct GeometricSchedule {
    s0: usize,
    gamma: f64,
}

impl GeometricSchedule {
    pub fn new(s0: usize, gamma: f64) -> Result<Self> {
        if s0 < 2 {
            return Err(Error::invalid(format!("s0 must be >= 2, got {s0}")));
        }
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::invalid(format!(
                "gamma must be finite and positive, got {gamma}"
            )));
        }
        Ok(GeometricSchedule { s0, gamma })
    }
}

impl BatchController for GeometricSchedule {
    fn name(&self) -> &'static str {
        "geometric"
    }

    fn label(&self) -> String {
        format!("GEOMETRIC γ={} S0={}", self.gamma, self.s0)
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("s0", self.s0 as f64), ("gamma", self.gamma)]
    }

    fn required_batch(&self, ctx: &StepContext<'_>) -> Result<ControlSignal> {
        let raw = self.s0 as f64 * (1.0 + self.gamma).powi(ctx.iteration as i32);
        Ok(ControlSignal::Required(raw.ceil()))
    }
}

// ---------------------------------------------------------------------------
// exact-variance oracle (norm condition with population quantities)

pub struct OracleNormTest {
    eta: f64,
    mc_seed: u64,
}

/// Enumeration is exact while the number of size-`s` multisets over the pool
/// stays below this; beyond it the expectation falls back to Monte Carlo.
const ENUM_BUDGET: u128 = 200_000;
const MC_DRAWS: usize = 100_000;
/// Upward scan limit for the batch-size fixed point.
const ORACLE_SCAN_LIMIT: usize = 1_000_000;

impl OracleNormTest {
    pub fn new(eta: f64, mc_seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) || eta <= 0.0 {
            return Err(Error::invalid(format!("eta must lie in (0, 1), got {eta}")));
        }
        Ok(OracleNormTest { eta, mc_seed })
    }

    /// `E[prox(x - alpha * mean-of-s-samples)]`, exactly by multiset
    /// enumeration when affordable, otherwise by Monte Carlo.
    fn expected_next(
        &self,
        grads: &[DenseVector],
        ctx: &StepContext<'_>,
        s: usize,
    ) -> Result<DenseVector> {
        let pool = grads.len();
        if multiset_count(pool, s) <= ENUM_BUDGET {
            let mut acc = DenseVector::zeros(ctx.x.dim());
            let mut counts = vec![0usize; pool];
            enumerate_multisets(pool, s, &mut counts, &mut |counts, weight| {
                let mut g = DenseVector::zeros(ctx.x.dim());
                for (j, &c) in counts.iter().enumerate() {
                    if c > 0 {
                        g.add_scaled(c as f64 / s as f64, &grads[j]);
                    }
                }
                let mut z = ctx.x.clone();
                z.add_scaled(-ctx.alpha, &g);
                let next = ctx.h.prox(ctx.alpha, &z)?;
                acc.add_scaled(weight, &next);
                Ok(())
            })?;
            Ok(acc)
        } else {
            use rand::{Rng, SeedableRng};
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(self.mc_seed ^ 0xa5a5_5a5a_c3c3_3c3c);
            rng.set_stream(ctx.iteration as u64);
            let mut acc = DenseVector::zeros(ctx.x.dim());
            let mut g = DenseVector::zeros(ctx.x.dim());
            for _ in 0..MC_DRAWS {
                g.fill(0.0);
                for _ in 0..s {
                    let id = rng.random_range(0..pool);
                    g.add_scaled(1.0 / s as f64, &grads[id]);
                }
                let mut z = ctx.x.clone();
                z.add_scaled(-ctx.alpha, &g);
                let next = ctx.h.prox(ctx.alpha, &z)?;
                acc.add_scaled(1.0 / MC_DRAWS as f64, &next);
            }
            Ok(acc)
        }
    }
}

impl BatchController for OracleNormTest {
    fn name(&self) -> &'static str {
        "oracle-norm"
    }

    fn label(&self) -> String {
        format!("ORACLE-NORM η={}", self.eta)
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("eta", self.eta)]
    }

    fn required_batch(&self, ctx: &StepContext<'_>) -> Result<ControlSignal> {
        let pool = match ctx.problem.sample_space() {
            SampleSpace::Finite(n) if n > 0 => n,
            _ => {
                return Err(Error::Unsupported(
                    "the oracle controller needs a finite sample space".into(),
                ))
            }
        };
        let exact = ctx.problem.exact_gradient(ctx.x);
        let grads: Vec<DenseVector> = (0..pool)
            .map(|j| ctx.problem.component_gradient(ctx.x, j))
            .collect();
        let popvar = grads
            .iter()
            .map(|g| g.dist(&exact).powi(2))
            .sum::<f64>()
            / pool as f64;
        if popvar == 0.0 {
            return Ok(ControlSignal::Required(0.0));
        }
        if ctx.h.is_zero() {
            // Expected step is the exact gradient step regardless of the
            // batch size, so the condition solves in closed form.
            let denom = self.eta / 2.0 * exact.norm_sq();
            if denom <= f64::MIN_POSITIVE {
                return Ok(ControlSignal::DegenerateDecrease);
            }
            return Ok(ControlSignal::Required(popvar / denom));
        }
        // General case: the expected next iterate depends on the batch size,
        // so find the smallest s with s >= popvar / ((eta/2) ||E_s step /
        // alpha||^2) by upward scan.
        let mut s = 2usize;
        loop {
            let expected = self.expected_next(&grads, ctx, s)?;
            let step_sq = expected.dist(ctx.x).powi(2) / (ctx.alpha * ctx.alpha);
            if step_sq <= f64::MIN_POSITIVE {
                return Ok(ControlSignal::DegenerateDecrease);
            }
            let req = popvar / (self.eta / 2.0 * step_sq);
            if s as f64 >= req {
                return Ok(ControlSignal::Required(s as f64));
            }
            // Jump straight to the implied size; the expectation changes
            // slowly in s, so this converges in a few rounds.
            let jump = (req.ceil() as usize).max(s + 1);
            if jump > ORACLE_SCAN_LIMIT {
                return Err(Error::invalid(format!(
                    "oracle batch requirement exceeded {ORACLE_SCAN_LIMIT} \
                     (population variance {popvar:.3e} vs expected step {step_sq:.3e})"
                )));
            }
            s = jump;
        }
    }
}

/// Number of multisets of size `s` over `pool` symbols: C(s + pool - 1, pool - 1).
fn multiset_count(pool: usize, s: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..(pool - 1) {
        acc = acc.saturating_mul((s + i + 1) as u128) / (i + 1) as u128;
        if acc > ENUM_BUDGET * 1000 {
            return u128::MAX;
        }
    }
    acc
}

/// Visits every multiset (as a count vector) with its multinomial sampling
/// probability `s! / (prod c_j!) / pool^s`.
fn enumerate_multisets(
    pool: usize,
    s: usize,
    counts: &mut [usize],
    visit: &mut dyn FnMut(&[usize], f64) -> Result<()>,
) -> Result<()> {
    fn ln_factorial(n: usize) -> f64 {
        (1..=n).map(|i| (i as f64).ln()).sum()
    }
    fn recurse(
        pool: usize,
        remaining: usize,
        pos: usize,
        counts: &mut [usize],
        ln_s_fact: f64,
        ln_pool: f64,
        s: usize,
        visit: &mut dyn FnMut(&[usize], f64) -> Result<()>,
    ) -> Result<()> {
        if pos == pool - 1 {
            counts[pos] = remaining;
            let ln_weight = ln_s_fact
                - counts.iter().map(|&c| ln_factorial(c)).sum::<f64>()
                - s as f64 * ln_pool;
            visit(counts, ln_weight.exp())?;
            return Ok(());
        }
        for c in 0..=remaining {
            counts[pos] = c;
            recurse(pool, remaining - c, pos + 1, counts, ln_s_fact, ln_pool, s, visit)?;
        }
        Ok(())
    }
    let ln_s_fact = ln_factorial(s);
    let ln_pool = (pool as f64).ln();
    recurse(pool, s, 0, counts, ln_s_fact, ln_pool, s, visit)
}

// ---------------------------------------------------------------------------
// registry

/// Loose bag of optional controller parameters, as collected from CLI flags.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParamBag {
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub s0: Option<usize>,
}

/// Declarative controller selection, embedded in run configs and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControllerKind {
    Norm { eta: f64 },
    Ip { beta: f64 },
    Geometric { s0: usize, gamma: f64 },
    OracleNorm { eta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    #[serde(flatten)]
    pub kind: ControllerKind,
    /// Hard upper bound on the batch. `None` defers to the problem's natural
    /// cap (dataset size for finite sums; unbounded for noise pools).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind) -> Self {
        ControllerConfig { kind, cap: None }
    }
}

pub struct ControllerEntry {
    pub name: &'static str,
    pub summary: &'static str,
    build: fn(&ParamBag, u64) -> Result<Box<dyn BatchController>>,
}

/// All controllers known to the crate, in presentation order.
pub fn registry() -> &'static [ControllerEntry] {
    &[
        ControllerEntry {
            name: "norm",
            summary: "total sample variance vs squared trial step (needs --eta)",
            build: |p, _| {
                let eta = p
                    .eta
                    .ok_or_else(|| Error::invalid("controller 'norm' needs --eta"))?;
                Ok(Box::new(NormTest::new(eta)?))
            },
        },
        ControllerEntry {
            name: "ip",
            summary: "directional variance vs squared model decrease (needs --beta or --eta)",
            build: |p, _| {
                let beta = match (p.beta, p.eta) {
                    (Some(b), _) => b,
                    (None, Some(e)) => beta_from_eta(e),
                    (None, None) => {
                        return Err(Error::invalid("controller 'ip' needs --beta or --eta"))
                    }
                };
                Ok(Box::new(InnerProductTest::new(beta)?))
            },
        },
        ControllerEntry {
            name: "geometric",
            summary: "fixed growth schedule ceil(S0*(1+gamma)^k) (needs --gamma; --s0 optional)",
            build: |p, _| {
                let gamma = p
                    .gamma
                    .ok_or_else(|| Error::invalid("controller 'geometric' needs --gamma"))?;
                Ok(Box::new(GeometricSchedule::new(p.s0.unwrap_or(2), gamma)?))
            },
        },
        ControllerEntry {
            name: "oracle-norm",
            summary: "norm condition with exact population quantities (needs --eta)",
            build: |p, seed| {
                let eta = p
                    .eta
                    .ok_or_else(|| Error::invalid("controller 'oracle-norm' needs --eta"))?;
                Ok(Box::new(OracleNormTest::new(eta, seed)?))
            },
        },
    ]
}

pub fn controller_names() -> Vec<&'static str> {
    registry().iter().map(|e| e.name).collect()
}

/// Builds a controller by registry name from loose parameters (the CLI path).
pub fn build_by_name(name: &str, params: &ParamBag, seed: u64) -> Result<Box<dyn BatchController>> {
    match registry().iter().find(|e| e.name == name) {
        Some(entry) => (entry.build)(params, seed),
        None => Err(Error::invalid(format!(
            "unknown controller {name:?}; known controllers: {}",
            controller_names().join(", ")
        ))),
    }
}

/// Builds a controller from a declarative config (the config-file path).
pub fn build_controller(cfg: &ControllerConfig, seed: u64) -> Result<Box<dyn BatchController>> {
    let (name, params) = match &cfg.kind {
        ControllerKind::Norm { eta } => (
            "norm",
            ParamBag {
                eta: Some(*eta),
                ..Default::default()
            },
        ),
        ControllerKind::Ip { beta } => (
            "ip",
            ParamBag {
                beta: Some(*beta),
                ..Default::default()
            },
        ),
        ControllerKind::Geometric { s0, gamma } => (
            "geometric",
            ParamBag {
                s0: Some(*s0),
                gamma: Some(*gamma),
                ..Default::default()
            },
        ),
        ControllerKind::OracleNorm { eta } => (
            "oracle-norm",
            ParamBag {
                eta: Some(*eta),
                ..Default::default()
            },
        ),
    };
    build_by_name(name, &params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::StochasticQuadraticInstance;
    use crate::sampling::{estimate_with_ids, GradientEstimate};

    struct FixedGrads {
        grads: Vec<DenseVector>,
    }

    impl StochasticProblem for FixedGrads {
        fn dimension(&self) -> usize {
            self.grads[0].dim()
        }
        fn sample_space(&self) -> SampleSpace {
            SampleSpace::Finite(self.grads.len())
        }
        fn component_value(&self, x: &DenseVector, id: usize) -> f64 {
            self.grads[id].dot(x)
        }
        fn component_gradient_into(&self, _: &DenseVector, id: usize, out: &mut DenseVector) {
            out.as_mut_slice().copy_from_slice(self.grads[id].as_slice());
        }
        fn exact_value(&self, x: &DenseVector) -> f64 {
            self.exact_gradient(x).dot(x)
        }
        fn exact_gradient(&self, _: &DenseVector) -> DenseVector {
            let mut m = DenseVector::zeros(self.dimension());
            for g in &self.grads {
                m.add_scaled(1.0 / self.grads.len() as f64, g);
            }
            m
        }
    }

    /// Builds a context whose trial estimate and geometry are fully pinned.
    fn ctx_fixture<'a>(
        problem: &'a FixedGrads,
        h: &'a ProxFunction,
        x: &'a DenseVector,
        trial: &'a GradientEstimate,
        trial_point: &'a DenseVector,
        alpha: f64,
        iteration: usize,
    ) -> StepContext<'a> {
        StepContext {
            problem,
            h,
            x,
            trial,
            trial_point,
            alpha,
            h_at_x: h.evaluate(x).unwrap(),
            h_at_trial: h.evaluate(trial_point).unwrap(),
            iteration,
        }
    }

    #[test]
    fn norm_test_worked_example() {
        // Sample variance 8, eta = 0.5, ||step/alpha|| = 2 -> 8 / (0.25 * 4) = 8.
        let p = FixedGrads {
            grads: vec![
                DenseVector::from_vec(vec![2.0]),
                DenseVector::from_vec(vec![-2.0]),
            ],
        };
        let h = ProxFunction::zero(1);
        let x = DenseVector::zeros(1);
        let trial = estimate_with_ids(&p, &x, &[0, 1], false).unwrap();
        assert_eq!(trial.sample_variance_total().unwrap(), 8.0);
        let trial_point = DenseVector::from_vec(vec![2.0]);
        let ctx = ctx_fixture(&p, &h, &x, &trial, &trial_point, 1.0, 0);
        let c = NormTest::new(0.5).unwrap();
        match c.required_batch(&ctx).unwrap() {
            ControlSignal::Required(a) => assert!((a - 8.0).abs() < 1e-12),
            other => panic!("unexpected signal {other:?}"),
        }
    }

    #[test]
    fn norm_test_zero_step_degenerates() {
        let p = FixedGrads {
            grads: vec![
                DenseVector::from_vec(vec![1.0]),
                DenseVector::from_vec(vec![-1.0]),
            ],
        };
        let h = ProxFunction::zero(1);
        let x = DenseVector::from_vec(vec![3.0]);
        let trial = estimate_with_ids(&p, &x, &[0, 1], false).unwrap();
        let same = x.clone();
        let ctx = ctx_fixture(&p, &h, &x, &trial, &same, 0.5, 0);
        let c = NormTest::new(0.5).unwrap();
        assert_eq!(
            c.required_batch(&ctx).unwrap(),
            ControlSignal::DegenerateDecrease
        );
    }

    #[test]
    fn ip_test_worked_example() {
        // Deviations +/-(1,0) projected on d = (2,0) give directional
        // variance 8; mean (-2,0) gives decrease g'd = -4; beta = 0.5:
        //   a = 8 / ((1 - 0.5)^2 * (-4)^2) = 2.
        let p = FixedGrads {
            grads: vec![
                DenseVector::from_vec(vec![-1.0, 0.0]),
                DenseVector::from_vec(vec![-3.0, 0.0]),
            ],
        };
        let h = ProxFunction::zero(2);
        let x = DenseVector::zeros(2);
        let trial = estimate_with_ids(&p, &x, &[0, 1], true).unwrap();
        assert_eq!(trial.mean().as_slice(), &[-2.0, 0.0]);
        let trial_point = DenseVector::from_vec(vec![2.0, 0.0]);
        let ctx = ctx_fixture(&p, &h, &x, &trial, &trial_point, 1.0, 0);
        let c = InnerProductTest::new(0.5).unwrap();
        match c.required_batch(&ctx).unwrap() {
            ControlSignal::Required(a) => assert!((a - 2.0).abs() < 1e-12),
            other => panic!("unexpected signal {other:?}"),
        }
    }

    #[test]
    fn ip_test_flags_non_descent_and_degenerate() {
        let p = FixedGrads {
            grads: vec![
                DenseVector::from_vec(vec![1.0, 0.0]),
                DenseVector::from_vec(vec![3.0, 0.0]),
            ],
        };
        let h = ProxFunction::zero(2);
        let x = DenseVector::zeros(2);
        let trial = estimate_with_ids(&p, &x, &[0, 1], true).unwrap();
        // mean = (2, 0); moving in +x direction *increases* g'd.
        let uphill = DenseVector::from_vec(vec![1.0, 0.0]);
        let ctx = ctx_fixture(&p, &h, &x, &trial, &uphill, 1.0, 0);
        let c = InnerProductTest::new(0.9).unwrap();
        assert_eq!(c.required_batch(&ctx).unwrap(), ControlSignal::NonDescentTrial);
        // Zero step -> zero decrease -> degenerate.
        let stay = DenseVector::zeros(2);
        let ctx2 = ctx_fixture(&p, &h, &x, &trial, &stay, 1.0, 0);
        assert_eq!(
            c.required_batch(&ctx2).unwrap(),
            ControlSignal::DegenerateDecrease
        );
    }

    #[test]
    fn geometric_schedule_examples() {
        let p = FixedGrads {
            grads: vec![DenseVector::zeros(1), DenseVector::zeros(1)],
        };
        let h = ProxFunction::zero(1);
        let x = DenseVector::zeros(1);
        let trial = estimate_with_ids(&p, &x, &[0, 1], false).unwrap();
        let tp = DenseVector::from_vec(vec![1.0]);
        let slow = GeometricSchedule::new(2, 0.1).unwrap();
        let fast = GeometricSchedule::new(2, 0.5).unwrap();
        let req = |c: &GeometricSchedule, k: usize| -> f64 {
            let ctx = ctx_fixture(&p, &h, &x, &trial, &tp, 1.0, k);
            match c.required_batch(&ctx).unwrap() {
                ControlSignal::Required(a) => a,
                other => panic!("unexpected signal {other:?}"),
            }
        };
        assert_eq!(req(&slow, 0), 2.0);
        assert_eq!(req(&slow, 1), 3.0); // ceil(2.2)
        assert_eq!(req(&fast, 4), 11.0); // ceil(2 * 1.5^4) = ceil(10.125)
    }

    #[test]
    fn next_batch_size_rounds_monotone_and_caps() {
        assert_eq!(next_batch_size(8.2, 4, None).unwrap(), 9);
        assert_eq!(next_batch_size(1.0, 4, None).unwrap(), 4);
        assert_eq!(next_batch_size(1e9, 2, Some(8124)).unwrap(), 8124);
        assert_eq!(next_batch_size(f64::INFINITY, 2, Some(10)).unwrap(), 10);
        assert!(next_batch_size(f64::INFINITY, 2, None).is_err());
        assert!(next_batch_size(f64::NAN, 2, Some(10)).is_err());
        assert_eq!(next_batch_size(0.0, 3, None).unwrap(), 3);
    }

    #[test]
    fn next_batch_size_refuses_runaway_uncapped_requests() {
        let err = next_batch_size(4.2e12, 16, None).unwrap_err();
        assert!(err.to_string().contains("no cap is set"), "{err}");
        // A cap repairs the same request.
        assert_eq!(next_batch_size(4.2e12, 16, Some(500)).unwrap(), 500);
        // Large but materializable requests still go through uncapped.
        assert_eq!(next_batch_size(1e6, 16, None).unwrap(), 1_000_000);
    }

    #[test]
    fn beta_eta_mapping_roundtrips() {
        assert_eq!(eta_from_beta(0.5), 0.5);
        assert_eq!(beta_from_eta(0.5), 0.5);
        for &beta in &[0.1, 0.3, 0.9, 0.99] {
            let eta = eta_from_beta(beta);
            assert!((beta_from_eta(eta) - beta).abs() < 1e-12);
            assert!(eta > 0.0 && eta < 2.0);
        }
        // The experiment-grade values: beta = 0.9 corresponds to eta = 0.02.
        assert!((eta_from_beta(0.9) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn oracle_closed_form_matches_population_ratio() {
        let p = StochasticQuadraticInstance::from_diagonal(
            vec![1.0, 0.5],
            DenseVector::from_vec(vec![0.0, 1.0]),
            0.4,
            10,
            3,
        )
        .unwrap();
        let h = ProxFunction::zero(2);
        let x = DenseVector::from_vec(vec![1.5, -0.5]);
        let trial = estimate_with_ids(&p, &x, &[0, 1], false).unwrap();
        let tp = DenseVector::from_vec(vec![1.0, 0.0]);
        let ctx = StepContext {
            problem: &p,
            h: &h,
            x: &x,
            trial: &trial,
            trial_point: &tp,
            alpha: 0.5,
            h_at_x: 0.0,
            h_at_trial: 0.0,
            iteration: 0,
        };
        let c = OracleNormTest::new(0.5, 0).unwrap();
        let expect = p.population_variance() / (0.25 * p.exact_gradient(&x).norm_sq());
        match c.required_batch(&ctx).unwrap() {
            ControlSignal::Required(a) => {
                assert!((a - expect).abs() <= 1e-12 * (1.0 + expect));
            }
            other => panic!("unexpected signal {other:?}"),
        }
    }

    #[test]
    fn oracle_zero_noise_requires_nothing() {
        let p = StochasticQuadraticInstance::from_diagonal(
            vec![1.0],
            DenseVector::from_vec(vec![-1.0]),
            0.0,
            4,
            0,
        )
        .unwrap();
        let h = ProxFunction::zero(1);
        let x = DenseVector::zeros(1);
        let trial = estimate_with_ids(&p, &x, &[0, 1], false).unwrap();
        let tp = DenseVector::from_vec(vec![0.5]);
        let ctx = StepContext {
            problem: &p,
            h: &h,
            x: &x,
            trial: &trial,
            trial_point: &tp,
            alpha: 0.5,
            h_at_x: 0.0,
            h_at_trial: 0.0,
            iteration: 0,
        };
        let c = OracleNormTest::new(0.5, 0).unwrap();
        assert_eq!(c.required_batch(&ctx).unwrap(), ControlSignal::Required(0.0));
    }

    #[test]
    fn multiset_enumeration_weights_sum_to_one() {
        for (pool, s) in [(3usize, 4usize), (5, 3), (2, 8)] {
            let mut counts = vec![0usize; pool];
            let mut total = 0.0;
            let mut seen = 0usize;
            enumerate_multisets(pool, s, &mut counts, &mut |c, w| {
                assert_eq!(c.iter().sum::<usize>(), s);
                total += w;
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen as u128, multiset_count(pool, s));
            assert!((total - 1.0).abs() < 1e-10, "weights sum to {total}");
        }
    }

    #[test]
    fn oracle_constrained_enumeration_agrees_with_monte_carlo() {
        // Small pool with a halfspace so the expectation is prox-nonlinear;
        // compare the exact enumeration against a direct Monte Carlo sum.
        use rand::{Rng, SeedableRng};
        let p = StochasticQuadraticInstance::from_diagonal(
            vec![1.0, 1.0],
            DenseVector::from_vec(vec![0.0, -1.0]),
            0.6,
            6,
            8,
        )
        .unwrap();
        let h = ProxFunction::halfspace(DenseVector::from_vec(vec![0.0, 1.0]), 0.0).unwrap();
        let x = DenseVector::from_vec(vec![0.4, 0.0]);
        let trial = estimate_with_ids(&p, &x, &[0, 1], false).unwrap();
        let tp = x.clone();
        let ctx = StepContext {
            problem: &p,
            h: &h,
            x: &x,
            trial: &trial,
            trial_point: &tp,
            alpha: 0.5,
            h_at_x: 0.0,
            h_at_trial: 0.0,
            iteration: 0,
        };
        let c = OracleNormTest::new(0.5, 0).unwrap();
        let grads: Vec<DenseVector> = (0..p.pool_size())
            .map(|j| p.component_gradient(&x, j))
            .collect();
        let s = 3;
        let exact = c.expected_next(&grads, &ctx, s).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let draws = 200_000;
        let mut mc = DenseVector::zeros(2);
        for _ in 0..draws {
            let mut g = DenseVector::zeros(2);
            for _ in 0..s {
                g.add_scaled(1.0 / s as f64, &grads[rng.random_range(0..grads.len())]);
            }
            let mut z = x.clone();
            z.add_scaled(-0.5, &g);
            mc.add_scaled(1.0 / draws as f64, &h.prox(0.5, &z).unwrap());
        }
        assert!(
            exact.dist(&mc) < 5e-3,
            "enumeration {exact:?} vs monte carlo {mc:?}"
        );
    }

    #[test]
    fn registry_builds_by_name_and_rejects_unknown() {
        assert_eq!(controller_names(), vec!["norm", "ip", "geometric", "oracle-norm"]);
        let c = build_by_name(
            "norm",
            &ParamBag {
                eta: Some(0.9),
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(c.name(), "norm");
        assert_eq!(c.label(), "NORM η=0.9");
        let ip = build_by_name(
            "ip",
            &ParamBag {
                eta: Some(0.5),
                ..Default::default()
            },
            0,
        )
        .unwrap();
        // eta = 0.5 maps to beta = 0.5
        assert_eq!(ip.label(), "IP β=0.5");
        let msg = match build_by_name("adam", &ParamBag::default(), 0) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("unknown controller must be rejected"),
        };
        assert!(msg.contains("adam") && msg.contains("geometric"));
        assert!(build_by_name("norm", &ParamBag::default(), 0).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(NormTest::new(0.0).is_err());
        assert!(NormTest::new(1.0).is_err());
        assert!(NormTest::new(-0.5).is_err());
        assert!(InnerProductTest::new(1.0).is_err());
        assert!(GeometricSchedule::new(1, 0.5).is_err());
        assert!(GeometricSchedule::new(2, 0.0).is_err());
        assert!(OracleNormTest::new(2.0, 0).is_err());
    }

    #[test]
    fn controller_config_serde_roundtrip() {
        let cfg = ControllerConfig {
            kind: ControllerKind::Geometric { s0: 2, gamma: 0.5 },
            cap: Some(100),
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"kind\":\"geometric\""));
        let back: ControllerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let norm: ControllerConfig =
            serde_json::from_str(r#"{"kind":"norm","eta":0.9}"#).unwrap();
        assert_eq!(norm.kind, ControllerKind::Norm { eta: 0.9 });
        assert_eq!(norm.cap, None);
    }

    #[test]
    fn needs_components_only_for_ip() {
        assert!(!NormTest::new(0.5).unwrap().needs_components());
        assert!(InnerProductTest::new(0.5).unwrap().needs_components());
        assert!(!GeometricSchedule::new(2, 0.5).unwrap().needs_components());
        assert!(!OracleNormTest::new(0.5, 0).unwrap().needs_components());
    }
}
