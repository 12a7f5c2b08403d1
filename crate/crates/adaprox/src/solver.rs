//! The adaptive-sampling proximal gradient loop.
//!
//! Each iteration draws a trial batch, takes a trial prox step, asks the
//! batch controller how many samples that step really needed, and — when the
//! answer exceeds the current batch — draws only the missing samples, folds
//! them into the running estimate, and recomputes the step before committing.
//! Batches never shrink. A deterministic (exact-gradient) variant of the same
//! loop provides reference solutions.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controllers::{build_controller, next_batch_size, ControlSignal, ControllerConfig, ControllerKind, StepContext};
use crate::error::Error;
use crate::problems::{exact_phi, StochasticProblem};
use crate::prox::ProxFunction;
use crate::sampling::{augment, estimate, estimate_full, RngStreams, SamplingMode, Stage};
use crate::vector::DenseVector;
use crate::Result;

/// Steplength selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StepSize {
    Fixed { alpha: f64 },
    /// `alpha = (1 - eta) / L`, with `eta` taken from the controller (the
    /// inner-product parameter maps through its equivalent `eta`). Requires
    /// the problem to expose a Lipschitz constant.
    TheoryFromEta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub alpha: StepSize,
    pub controller: ControllerConfig,
    /// Sample budget in sweeps over the sample space; may be infinite.
    pub max_epochs: f64,
    /// Terminate when `||x_{k+1} - x_k|| / alpha` drops to this value.
    pub step_tolerance: f64,
    pub seed: u64,
    /// Emit one record every this many iterations (the final iteration is
    /// always recorded).
    pub record_every: usize,
    /// Batch size of the first iteration (at least 2).
    pub initial_batch: usize,
    pub sampling: SamplingMode,
    /// Optional hard iteration horizon (used by rate verification).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    /// Reference optimum; recorded gaps are `phi(x) - phi_star` (0 when
    /// unknown, making the gap column the raw objective).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_star: Option<f64>,
}

impl SolverConfig {
    pub fn new(controller: ControllerConfig) -> Self {
        SolverConfig {
            alpha: StepSize::TheoryFromEta,
            controller,
            max_epochs: 100.0,
            step_tolerance: 1e-8,
            seed: 0,
            record_every: 1,
            initial_batch: 2,
            sampling: SamplingMode::WithReplacement,
            max_iterations: None,
            phi_star: None,
        }
    }
}

/// Telemetry for one iteration `k` (0-based). `phi_gap` is evaluated at the
/// iterate this iteration produced, i.e. the progress bought with
/// `cumulative_samples` gradient evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub batch_size: usize,
    pub batch_fraction: f64,
    pub cumulative_samples: u64,
    pub effective_gradient_evals: f64,
    pub phi_gap: f64,
    pub step_norm_over_alpha: f64,
    pub trial_step_norm_over_alpha: f64,
    /// Whether the controller forced the batch to grow this iteration.
    pub resampled: bool,
    /// Measured wall time; the only nondeterministic field.
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationReason {
    /// `||x_{k+1} - x_k|| / alpha` reached the tolerance.
    StepTolerance,
    /// The sample budget (`max_epochs` sweeps) was exhausted.
    EpochBudget,
    /// The explicit iteration horizon was reached.
    IterationCap,
    /// The controller reported a numerically zero model decrease with no
    /// way to buy more information.
    DegenerateDecrease,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    pub x: DenseVector,
    pub records: Vec<RunRecord>,
    pub termination: TerminationReason,
    pub iterations: usize,
    pub cumulative_samples: u64,
    pub final_batch: usize,
    pub alpha: f64,
}

fn resolve_alpha(cfg: &SolverConfig, p: &dyn StochasticProblem) -> Result<f64> {
    match cfg.alpha {
        StepSize::Fixed { alpha } => {
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(Error::invalid(format!(
                    "steplength must be finite and positive, got {alpha}"
                )));
            }
            Ok(alpha)
        }
        StepSize::TheoryFromEta => {
            let eta = match &cfg.controller.kind {
                ControllerKind::Norm { eta } | ControllerKind::OracleNorm { eta } => *eta,
                ControllerKind::Ip { beta } => crate::controllers::eta_from_beta(*beta),
                ControllerKind::Geometric { .. } => {
                    return Err(Error::invalid(
                        "the theory steplength rule needs a variance-test controller; \
                         pass a fixed alpha for geometric schedules",
                    ))
                }
            };
            if eta >= 1.0 {
                return Err(Error::invalid(format!(
                    "theory steplength needs eta < 1, got {eta}"
                )));
            }
            let l = p.lipschitz().ok_or_else(|| {
                Error::invalid("the theory steplength rule needs a problem with a known Lipschitz constant")
            })?;
            Ok((1.0 - eta) / l)
        }
    }
}

/// Runs the adaptive-sampling proximal gradient method from `x0`.
pub fn solve(
    p: &dyn StochasticProblem,
    h: &ProxFunction,
    x0: &DenseVector,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    if h.dim() != p.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: h.dim(),
        });
    }
    if x0.dim() != p.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: x0.dim(),
        });
    }
    if !exact_phi(p, h, x0)?.is_finite() {
        return Err(Error::invalid(
            "x0 is infeasible for h (phi(x0) is not finite)",
        ));
    }
    if cfg.record_every == 0 {
        return Err(Error::invalid("record_every must be at least 1"));
    }
    if cfg.initial_batch < 2 {
        return Err(Error::invalid(format!(
            "initial batch must be >= 2, got {}",
            cfg.initial_batch
        )));
    }
    if !(cfg.max_epochs > 0.0) {
        return Err(Error::invalid(format!(
            "max_epochs must be positive, got {}",
            cfg.max_epochs
        )));
    }
    if cfg.step_tolerance < 0.0 || cfg.step_tolerance.is_nan() {
        return Err(Error::invalid(format!(
            "step tolerance must be nonnegative, got {}",
            cfg.step_tolerance
        )));
    }

    let alpha = resolve_alpha(cfg, p)?;
    let controller = build_controller(&cfg.controller, cfg.seed)?;
    let retain = controller.needs_components();
    let space = p
        .sample_space()
        .size()
        .ok_or_else(|| Error::Unsupported("the solver needs a finite sample space".into()))?;
    // The problem's own cap marks batch sizes where the full deterministic
    // gradient takes over; a user cap merely limits growth.
    let natural_cap = p.batch_cap();
    let cap = cfg.controller.cap.or(natural_cap);
    if let Some(c) = cap {
        if c < 2 {
            return Err(Error::invalid(format!("batch cap must be >= 2, got {c}")));
        }
    }
    let mut s = cfg.initial_batch;
    if let Some(c) = cap {
        s = s.min(c);
    }
    let budget = cfg.max_epochs * space as f64;
    let phi_star = cfg.phi_star.unwrap_or(0.0);
    let streams = RngStreams::new(cfg.seed);

    let mut x = x0.clone();
    let mut cum: u64 = 0;
    let mut records: Vec<RunRecord> = Vec::new();
    let mut k: usize = 0;
    let h_at_x0 = h.evaluate(&x)?;
    let mut h_at_x = h_at_x0;

    let termination = loop {
        if cfg.max_iterations == Some(k) {
            break TerminationReason::IterationCap;
        }
        let t0 = Instant::now();

        // Step 1: trial estimate and trial prox step.
        let use_full = natural_cap == Some(space) && s >= space;
        let trial_est = if use_full {
            estimate_full(p, &x, retain)?
        } else {
            let mut rng = streams.stream(k as u64, Stage::Trial);
            estimate(p, &x, s, &mut rng, cfg.sampling, retain)?
        };
        cum += s as u64;
        if !trial_est.mean().is_finite() {
            return Err(Error::NumericalFailure {
                iteration: k,
                detail: "trial gradient estimate is not finite".into(),
            });
        }
        let mut z = x.clone();
        z.add_scaled(-alpha, trial_est.mean());
        let trial_point = h.prox(alpha, &z)?;
        let trial_step = trial_point.dist(&x) / alpha;

        // Converged (or stuck) before consulting the controller: commit the
        // trial and stop. This guarantees controllers never see a zero step.
        if trial_step <= cfg.step_tolerance {
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            records.push(make_record(
                p, h, &trial_point, phi_star, k, s, space, cum, trial_step, trial_step, false,
                wall_ms,
            )?);
            x = trial_point;
            k += 1;
            break TerminationReason::StepTolerance;
        }

        // Step 2: how many samples did this step need?
        let h_at_trial = h.evaluate(&trial_point)?;
        let signal = {
            let ctx = StepContext {
                problem: p,
                h,
                x: &x,
                trial: &trial_est,
                trial_point: &trial_point,
                alpha,
                h_at_x,
                h_at_trial,
                iteration: k,
            };
            controller.required_batch(&ctx)?
        };
        let (s_k, degenerate) = match signal {
            ControlSignal::Required(raw) => (next_batch_size(raw, s, cap)?, false),
            ControlSignal::NonDescentTrial => match cap {
                // No descent predicted: buy all the information there is.
                Some(c) => (c.max(s), false),
                // Nothing to buy on an uncapped problem; treat as degenerate.
                None => (s, true),
            },
            ControlSignal::DegenerateDecrease => (s, true),
        };

        // Step 3: commit, augmenting first when the batch must grow.
        let (x_next, resampled, h_at_next) = if s_k > s {
            let grown = if natural_cap == Some(space) && s_k >= space {
                estimate_full(p, &x, retain)?
            } else {
                let mut rng = streams.stream(k as u64, Stage::Augment);
                augment(trial_est, p, &x, s_k, &mut rng, cfg.sampling)?
            };
            cum += (s_k - s) as u64;
            if !grown.mean().is_finite() {
                return Err(Error::NumericalFailure {
                    iteration: k,
                    detail: "augmented gradient estimate is not finite".into(),
                });
            }
            let mut z = x.clone();
            z.add_scaled(-alpha, grown.mean());
            let next = h.prox(alpha, &z)?;
            let h_next = h.evaluate(&next)?;
            (next, true, h_next)
        } else {
            (trial_point, false, h_at_trial)
        };
        if !x_next.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: k,
                detail: "iterate is not finite (diverging run?)".into(),
            });
        }
        let committed_step = x_next.dist(&x) / alpha;

        // Step 4: the grown batch is the floor for the next iteration.
        s = s_k;

        let reason = if degenerate {
            Some(TerminationReason::DegenerateDecrease)
        } else if committed_step <= cfg.step_tolerance {
            Some(TerminationReason::StepTolerance)
        } else if cum as f64 >= budget {
            Some(TerminationReason::EpochBudget)
        } else if cfg.max_iterations == Some(k + 1) {
            Some(TerminationReason::IterationCap)
        } else {
            None
        };

        if k % cfg.record_every == 0 || reason.is_some() {
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            records.push(make_record(
                p,
                h,
                &x_next,
                phi_star,
                k,
                s_k,
                space,
                cum,
                committed_step,
                trial_step,
                resampled,
                wall_ms,
            )?);
        }
        x = x_next;
        h_at_x = h_at_next;
        k += 1;
        if let Some(r) = reason {
            break r;
        }
    };

    Ok(SolveResult {
        x,
        records,
        termination,
        iterations: k,
        cumulative_samples: cum,
        final_batch: s,
        alpha,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    p: &dyn StochasticProblem,
    h: &ProxFunction,
    x: &DenseVector,
    phi_star: f64,
    iteration: usize,
    batch_size: usize,
    space: usize,
    cum: u64,
    step_norm_over_alpha: f64,
    trial_step_norm_over_alpha: f64,
    resampled: bool,
    wall_ms: f64,
) -> Result<RunRecord> {
    let phi = exact_phi(p, h, x)?;
    Ok(RunRecord {
        iteration,
        batch_size,
        batch_fraction: batch_size as f64 / space as f64,
        cumulative_samples: cum,
        effective_gradient_evals: cum as f64 / space as f64,
        phi_gap: phi - phi_star,
        step_norm_over_alpha,
        trial_step_norm_over_alpha,
        resampled,
        wall_ms,
    })
}

/// Result of an exact-gradient (deterministic) proximal gradient run.
#[derive(Clone, Debug)]
pub struct DeterministicRun {
    /// `phi` after each iteration, in order.
    pub phis: Vec<f64>,
    /// Final iterate.
    pub x: DenseVector,
    /// Best (lowest-`phi`) iterate seen, including the start point. Ties go
    /// to the most recent iterate: once the gap drops below the floating-
    /// point resolution of `phi`, later iterates keep sharpening `x` without
    /// changing the computed `phi`, and those are the ones worth keeping.
    pub best_x: DenseVector,
    pub best_phi: f64,
}

/// Proximal gradient with the exact gradient; the noise-free limit of
/// [`solve`]. Aborts with a diagnostic if `phi` increases for 100
/// consecutive iterations (the steplength is too large).
pub fn solve_deterministic(
    p: &dyn StochasticProblem,
    h: &ProxFunction,
    alpha: f64,
    iters: usize,
    x0: &DenseVector,
) -> Result<DeterministicRun> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::invalid(format!(
            "steplength must be finite and positive, got {alpha}"
        )));
    }
    if x0.dim() != p.dimension() || h.dim() != p.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: x0.dim(),
        });
    }
    let mut x = x0.clone();
    let mut phi_prev = exact_phi(p, h, &x)?;
    if !phi_prev.is_finite() {
        return Err(Error::invalid(
            "x0 is infeasible for h (phi(x0) is not finite)",
        ));
    }
    let mut best_x = x.clone();
    let mut best_phi = phi_prev;
    let mut phis = Vec::with_capacity(iters);
    let mut rising = 0usize;
    for k in 0..iters {
        let (_, g) = p.exact_value_and_gradient(&x);
        let mut z = x.clone();
        z.add_scaled(-alpha, &g);
        x = h.prox(alpha, &z)?;
        if !x.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: k,
                detail: "deterministic iterate is not finite".into(),
            });
        }
        let phi = exact_phi(p, h, &x)?;
        phis.push(phi);
        if phi <= best_phi {
            best_phi = phi;
            best_x = x.clone();
        }
        if phi > phi_prev {
            rising += 1;
            if rising >= 100 {
                return Err(Error::Divergence {
                    at: k,
                    iterations: 100,
                });
            }
        } else {
            rising = 0;
        }
        phi_prev = phi;
    }
    Ok(DeterministicRun {
        phis,
        x,
        best_x,
        best_phi,
    })
}

/// A reference optimum produced by a long deterministic run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x: DenseVector,
    pub phi: f64,
    pub alpha: f64,
    pub iterations: usize,
}

/// Computes a reference optimum by running the deterministic method for
/// `iters` iterations from `prox(alpha h)(0)` and keeping the best iterate.
pub fn reference_solution(
    p: &dyn StochasticProblem,
    h: &ProxFunction,
    alpha: f64,
    iters: usize,
) -> Result<ReferenceSolution> {
    let origin = DenseVector::zeros(p.dimension());
    let x0 = h.prox(alpha, &origin)?;
    let run = solve_deterministic(p, h, alpha, iters, &x0)?;
    Ok(ReferenceSolution {
        x: run.best_x,
        phi: run.best_phi,
        alpha,
        iterations: iters,
    })
}
