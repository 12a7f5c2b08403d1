//! Experiment harness for the adaprox solver library.
//!
//! Subcommands:
//!   run        sweep controllers x steplengths x seeds over one problem and
//!              write per-cell trace CSVs plus summary.json / best_comparison.csv
//!   reference  compute (or reuse) the deterministic reference optimum phi*
//!   emit       flatten a run's artifacts into tidy per-plot CSV files
//!   verify     run the built-in statistical / analytical check suites
//!
//! Configuration is a single TOML file plus flag overrides; the README
//! documents the schema. Exit codes: 0 success, 1 config error, 2 numerical
//! failure (a diverged cell, a diverged reference, or a failing verify suite).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use adaprox::controllers::{build_by_name, ControllerConfig, ControllerKind, ParamBag};
use adaprox::data::{read_libsvm, sha256_hex, subsample, synthetic_onehot};
use adaprox::problems::{
    LogisticL1Instance, PoolQuadraticSpec, StochasticProblem, StochasticQuadraticInstance,
};
use adaprox::prox::ProxFunction;
use adaprox::solver::{
    reference_solution, solve, SolverConfig, StepSize, TerminationReason,
};
use adaprox::verify;
use adaprox::DenseVector;

// ---------------------------------------------------------------------------
// command line

#[derive(Parser)]
#[command(
    name = "adaprox",
    version,
    about = "Adaptive-batch proximal-gradient experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep controllers x steplengths x seeds and write traces + summaries.
    Run(RunArgs),
    /// Compute (or reuse) the deterministic reference optimum for a problem.
    Reference(ReferenceArgs),
    /// Flatten run artifacts into tidy per-plot CSV files.
    Emit(EmitArgs),
    /// Run the built-in verification suites and write their JSON reports.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(short, long)]
    config: PathBuf,
    /// Replace the sweep's controller list with this single registry name
    /// (see `--eta`, `--beta`, `--gamma`, `--s0` for its parameters).
    #[arg(long)]
    controller: Option<String>,
    /// Noise parameter for the norm / oracle-norm tests (also accepted by ip).
    #[arg(long)]
    eta: Option<f64>,
    /// Confidence parameter for the inner-product test.
    #[arg(long)]
    beta: Option<f64>,
    /// Growth rate for the geometric schedule.
    #[arg(long)]
    gamma: Option<f64>,
    /// Starting batch for the geometric schedule (default 2).
    #[arg(long)]
    s0: Option<usize>,
    /// Replace the steplength grid with one value: a number or "theory".
    #[arg(long)]
    alpha: Option<String>,
    /// Replace the seed list with one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the sweep's sample budget, in sweeps over the data.
    #[arg(long)]
    max_epochs: Option<f64>,
    /// Output directory (overrides [output].dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel sweep cells (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ReferenceArgs {
    /// TOML experiment config (only [problem], [reference], [output] are read).
    #[arg(short, long)]
    config: PathBuf,
    /// Deterministic iteration count (default 50000 or [reference].iterations).
    #[arg(long)]
    iterations: Option<usize>,
    /// Steplength (default 1/L or [reference].alpha).
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory (overrides [output].dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    /// Artifact directory produced by `run`.
    dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// One of: linear-rate, sublinear-rate, eq-test, figure1, all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Controller noise parameter for the rate suites.
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    /// Independent seeds per rate suite.
    #[arg(long, default_value_t = 200)]
    seeds: usize,
    /// Iteration horizon for the rate suites (0 = per-suite default).
    #[arg(long, default_value_t = 0)]
    horizon: usize,
    /// Randomized instances for the eq-test suite.
    #[arg(long, default_value_t = 50)]
    cases: usize,
    /// Instance seed for the eq-test suite.
    #[arg(long, default_value_t = 7)]
    case_seed: u64,
    /// Directory for the JSON reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> std::process::ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return std::process::ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Reference(args) => cmd_reference(args),
        Command::Emit(args) => cmd_emit(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 2 for numerical failures (anywhere in the chain), 1 for everything else.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<adaprox::Error>() {
            if matches!(
                e,
                adaprox::Error::NumericalFailure { .. } | adaprox::Error::Divergence { .. }
            ) {
                return 2;
            }
        }
        if cause.downcast_ref::<SweepFailed>().is_some()
            || cause.downcast_ref::<VerifyFailed>().is_some()
        {
            return 2;
        }
    }
    1
}

/// Marker error: some sweep cells failed to solve (details in summary.json).
#[derive(Debug)]
struct SweepFailed {
    failed: usize,
    total: usize,
}

impl std::fmt::Display for SweepFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} of {} sweep cells failed to solve; see summary.json",
            self.failed, self.total
        )
    }
}

impl std::error::Error for SweepFailed {}

/// Marker error: a verification suite ran to completion but did not pass.
#[derive(Debug)]
struct VerifyFailed {
    suites: String,
}

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.suites)
    }
}

impl std::error::Error for VerifyFailed {}

// ---------------------------------------------------------------------------
// config file schema

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    problem: ProblemSpec,
    sweep: Option<SweepSpec>,
    reference: Option<ReferenceSpec>,
    output: Option<OutputSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSpec {
    /// Path to a libsvm/svmlight file (l1-regularized logistic regression).
    dataset: Option<PathBuf>,
    /// Expected feature count, for files whose trailing columns are all zero.
    dim: Option<usize>,
    /// Deterministic row subsample applied after loading.
    subsample: Option<SubsampleSpec>,
    /// Synthetic one-hot stand-in (same model as `dataset`).
    synthetic: Option<SyntheticSpec>,
    /// Quadratic with a mirrored additive-noise pool.
    quadratic: Option<PoolQuadraticSpec>,
    /// l1 weight; defaults to 1/N for data problems.
    lambda: Option<f64>,
    /// Nonsmooth term: "l1" (default for data problems) or "none".
    h: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsampleSpec {
    rows: usize,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSpec {
    rows: usize,
    groups: Vec<usize>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpec {
    controllers: Option<Vec<ControllerConfig>>,
    alpha: Option<AlphaSpec>,
    seeds: Option<Vec<u64>>,
    max_epochs: Option<f64>,
    record_every: Option<usize>,
    initial_batch: Option<usize>,
    /// Batch cap applied to controllers that do not set their own.
    cap: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AlphaSpec {
    /// `alpha = "theory"` selects `(1 - eta)/L` per controller.
    Keyword(String),
    /// `alpha = { pow2 = [-10, -7, ...] }`.
    Pow2 { pow2: Vec<i32> },
    /// `alpha = { values = [0.25, 4.0] }`.
    Values { values: Vec<f64> },
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ReferenceSpec {
    iterations: Option<usize>,
    alpha: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSpec {
    dir: Option<PathBuf>,
}

fn load_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

// ---------------------------------------------------------------------------
// problem resolution

enum ProblemKind {
    Logistic(LogisticL1Instance),
    Quadratic(StochasticQuadraticInstance),
}

/// Everything the solver needs plus the serializable identity of the problem
/// (artifacts embed the metadata so every row is reproducible from them).
struct ResolvedProblem {
    kind: ProblemKind,
    h: ProxFunction,
    meta: ProblemMeta,
}

impl ResolvedProblem {
    fn p(&self) -> &dyn StochasticProblem {
        match &self.kind {
            ProblemKind::Logistic(p) => p,
            ProblemKind::Quadratic(p) => p,
        }
    }
}

#[derive(Serialize)]
struct ProblemMeta {
    name: String,
    model: &'static str,
    /// Rows for data problems, pool size for quadratics.
    n: usize,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    h: String,
    source_checksum: String,
    provenance: Vec<String>,
}

fn resolve_problem(spec: &ProblemSpec) -> Result<ResolvedProblem> {
    let sources =
        usize::from(spec.dataset.is_some()) + usize::from(spec.synthetic.is_some()) + usize::from(spec.quadratic.is_some());
    if sources != 1 {
        bail!("exactly one of problem.dataset, problem.synthetic, problem.quadratic is required");
    }

    if let Some(q) = &spec.quadratic {
        let dim = q.diag.len();
        let problem = q.build().context("building the quadratic problem")?;
        let (h, h_name, lambda) = match spec.h.as_deref() {
            None | Some("none") => (ProxFunction::zero(dim), "none".to_string(), None),
            Some("l1") => {
                let w = spec.lambda.ok_or_else(|| {
                    anyhow!("problem.h = \"l1\" on a quadratic needs problem.lambda as the weight")
                })?;
                (ProxFunction::l1(w, dim)?, format!("l1({w})"), Some(w))
            }
            Some(other) => bail!("unknown problem.h {other:?} (expected \"l1\" or \"none\")"),
        };
        let checksum = sha256_hex(&serde_json::to_vec(q)?);
        return Ok(ResolvedProblem {
            kind: ProblemKind::Quadratic(problem),
            h,
            meta: ProblemMeta {
                name: "pool-quadratic".into(),
                model: "pool-quadratic",
                n: q.pool_size,
                dim,
                lambda,
                h: h_name,
                source_checksum: checksum,
                provenance: vec![format!(
                    "diag quadratic d={dim}, sigma={}, pool={}, seed={}",
                    q.sigma, q.pool_size, q.seed
                )],
            },
        });
    }

    let ds = if let Some(path) = &spec.dataset {
        let ds = read_libsvm(path, spec.dim)
            .with_context(|| format!("loading dataset {}", path.display()))?;
        match &spec.subsample {
            Some(s) => subsample(&ds, s.rows, s.seed)?,
            None => ds,
        }
    } else {
        let s = spec.synthetic.as_ref().unwrap();
        if spec.subsample.is_some() {
            bail!("problem.subsample only applies to problem.dataset; size the synthetic spec directly");
        }
        synthetic_onehot(s.rows, &s.groups, s.seed)?
    };

    let n = ds.n_rows();
    let dim = ds.dim();
    let lambda = spec.lambda.unwrap_or(1.0 / n as f64);
    let name = ds.name.clone();
    let checksum = ds.source_checksum.clone();
    let provenance = ds.provenance.clone();
    let instance = LogisticL1Instance::new(ds, Some(lambda))?;
    let (h, h_name, lambda) = match spec.h.as_deref() {
        None | Some("l1") => (
            instance.prox_term()?,
            format!("l1({lambda})"),
            Some(lambda),
        ),
        Some("none") => (ProxFunction::zero(dim), "none".to_string(), None),
        Some(other) => bail!("unknown problem.h {other:?} (expected \"l1\" or \"none\")"),
    };
    Ok(ResolvedProblem {
        kind: ProblemKind::Logistic(instance),
        h,
        meta: ProblemMeta {
            name,
            model: "logistic-l1",
            n,
            dim,
            lambda,
            h: h_name,
            source_checksum: checksum,
            provenance,
        },
    })
}

fn problem_sha(meta: &ProblemMeta) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(meta)?))
}

// ---------------------------------------------------------------------------
// reference optimum

#[derive(Serialize, Deserialize)]
struct ReferenceRecord {
    /// Cache key over (problem identity, alpha, iterations).
    key: String,
    problem_sha: String,
    alpha: f64,
    iterations: usize,
    phi_star: f64,
    x_norm: f64,
}

fn reference_key(psha: &str, alpha: f64, iterations: usize) -> String {
    sha256_hex(format!("{psha}:{:016x}:{iterations}", alpha.to_bits()).as_bytes())
}

fn default_reference_alpha(rp: &ResolvedProblem) -> Result<f64> {
    match rp.p().lipschitz() {
        Some(l) if l > 0.0 => Ok(1.0 / l),
        _ => bail!("the problem exposes no Lipschitz constant; set reference.alpha explicitly"),
    }
}

/// Computes the reference optimum, or reuses `reference.json` when it was
/// produced by the identical (problem, alpha, iterations) triple.
fn ensure_reference(
    rp: &ResolvedProblem,
    alpha: Option<f64>,
    iterations: usize,
    out: &Path,
) -> Result<(ReferenceRecord, bool)> {
    let alpha = match alpha {
        Some(a) => a,
        None => default_reference_alpha(rp)?,
    };
    let psha = problem_sha(&rp.meta)?;
    let key = reference_key(&psha, alpha, iterations);
    let path = out.join("reference.json");
    if path.exists() {
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        if let Ok(prev) = serde_json::from_str::<ReferenceRecord>(&text) {
            if prev.key == key {
                return Ok((prev, true));
            }
        }
    }
    let sol = reference_solution(rp.p(), &rp.h, alpha, iterations)
        .context("computing the reference optimum")?;
    let record = ReferenceRecord {
        key,
        problem_sha: psha,
        alpha: sol.alpha,
        iterations: sol.iterations,
        phi_star: sol.phi,
        x_norm: sol.x.norm(),
    };
    fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&record)?))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok((record, false))
}

fn cmd_reference(args: ReferenceArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let rp = resolve_problem(&file.problem)?;
    let out = output_dir(args.out, &file);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let refspec = file.reference.unwrap_or_default();
    let iterations = args.iterations.or(refspec.iterations).unwrap_or(50_000);
    let alpha = args.alpha.or(refspec.alpha);
    let t0 = Instant::now();
    let (record, cached) = ensure_reference(&rp, alpha, iterations, &out)?;
    println!(
        "reference: phi* = {:.12e}  |x*| = {:.6e}  (alpha {}, {} iterations{})",
        record.phi_star,
        record.x_norm,
        record.alpha,
        record.iterations,
        if cached {
            ", cached".to_string()
        } else {
            format!(", {:.1}s", t0.elapsed().as_secs_f64())
        }
    );
    println!("wrote {}", out.join("reference.json").display());
    Ok(())
}

fn output_dir(flag: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    flag.or_else(|| file.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

// ---------------------------------------------------------------------------
// sweep resolution

enum Alphas {
    Theory,
    Grid(Vec<f64>),
}

struct ResolvedSweep {
    controllers: Vec<ControllerConfig>,
    alphas: Alphas,
    seeds: Vec<u64>,
    max_epochs: f64,
    record_every: usize,
    initial_batch: usize,
    cap: Option<usize>,
}

/// The declared default steplength ladder: powers of two from 2^-10 upward
/// in steps of 2^3.
fn default_pow2_grid() -> Vec<f64> {
    [-10i32, -7, -4, -1, 2, 5, 8, 11, 14]
        .iter()
        .map(|&e| 2f64.powi(e))
        .collect()
}

fn controller_from_flags(args: &RunArgs) -> Result<ControllerConfig> {
    let name = args.controller.as_deref().unwrap();
    let bag = ParamBag {
        eta: args.eta,
        beta: args.beta,
        gamma: args.gamma,
        s0: args.s0,
    };
    // The registry owns name lookup and parameter validation; a successful
    // build guarantees the field unwraps below.
    build_by_name(name, &bag, 0)?;
    let kind = match name {
        "norm" => ControllerKind::Norm {
            eta: bag.eta.ok_or_else(|| anyhow!("norm needs --eta"))?,
        },
        "ip" => ControllerKind::Ip {
            beta: bag
                .beta
                .or(bag.eta.map(adaprox::controllers::beta_from_eta))
                .ok_or_else(|| anyhow!("ip needs --beta or --eta"))?,
        },
        "geometric" => ControllerKind::Geometric {
            s0: bag.s0.unwrap_or(2),
            gamma: bag.gamma.ok_or_else(|| anyhow!("geometric needs --gamma"))?,
        },
        "oracle-norm" => ControllerKind::OracleNorm {
            eta: bag.eta.ok_or_else(|| anyhow!("oracle-norm needs --eta"))?,
        },
        other => bail!("unknown controller {other:?}"),
    };
    Ok(ControllerConfig { kind, cap: None })
}

fn resolve_sweep(file: &FileConfig, args: &RunArgs) -> Result<ResolvedSweep> {
    let sweep = file.sweep.as_ref();

    let controllers = if args.controller.is_some() {
        vec![controller_from_flags(args)?]
    } else {
        match sweep.and_then(|s| s.controllers.clone()) {
            Some(c) if !c.is_empty() => c,
            _ => bail!(
                "no controllers: add a [sweep] controllers list to the config or pass --controller"
            ),
        }
    };

    let alphas = if let Some(flag) = &args.alpha {
        if flag == "theory" {
            Alphas::Theory
        } else {
            let v: f64 = flag
                .parse()
                .with_context(|| format!("--alpha must be a number or \"theory\", got {flag:?}"))?;
            Alphas::Grid(vec![v])
        }
    } else {
        match sweep.and_then(|s| s.alpha.as_ref()) {
            None => Alphas::Grid(default_pow2_grid()),
            Some(AlphaSpec::Keyword(k)) if k == "theory" => Alphas::Theory,
            Some(AlphaSpec::Keyword(k)) => {
                bail!("unknown sweep.alpha keyword {k:?} (expected \"theory\")")
            }
            Some(AlphaSpec::Pow2 { pow2 }) => {
                Alphas::Grid(pow2.iter().map(|&e| 2f64.powi(e)).collect())
            }
            Some(AlphaSpec::Values { values }) => Alphas::Grid(values.clone()),
        }
    };
    if let Alphas::Grid(values) = &alphas {
        if values.is_empty() {
            bail!("the steplength grid is empty");
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            bail!("steplengths must be finite and positive, got {bad}");
        }
    }
    if matches!(alphas, Alphas::Theory) {
        if let Some(c) = controllers
            .iter()
            .find(|c| matches!(c.kind, ControllerKind::Geometric { .. }))
        {
            bail!(
                "alpha = \"theory\" derives the steplength from a controller noise parameter; \
                 {} has none — use a numeric alpha for it",
                controller_label(&c.kind)
            );
        }
    }

    let seeds = resolve_seeds(args.seed, sweep.and_then(|s| s.seeds.clone()))?;
    let max_epochs = args
        .max_epochs
        .or(sweep.and_then(|s| s.max_epochs))
        .unwrap_or(100.0);
    if !(max_epochs > 0.0) {
        bail!("sweep.max_epochs must be positive, got {max_epochs}");
    }
    let record_every = sweep.and_then(|s| s.record_every).unwrap_or(1);
    if record_every == 0 {
        bail!("sweep.record_every must be at least 1");
    }
    let initial_batch = sweep.and_then(|s| s.initial_batch).unwrap_or(2);
    if initial_batch < 2 {
        bail!("sweep.initial_batch must be at least 2, got {initial_batch}");
    }

    Ok(ResolvedSweep {
        controllers,
        alphas,
        seeds,
        max_epochs,
        record_every,
        initial_batch,
        cap: sweep.and_then(|s| s.cap),
    })
}

fn resolve_seeds(flag: Option<u64>, file: Option<Vec<u64>>) -> Result<Vec<u64>> {
    if let Some(s) = flag {
        return Ok(vec![s]);
    }
    if let Some(v) = file {
        if v.is_empty() {
            bail!("sweep.seeds must not be empty");
        }
        return Ok(v);
    }
    if let Ok(raw) = std::env::var("ADAPROX_SEED") {
        let s: u64 = raw
            .trim()
            .parse()
            .with_context(|| format!("ADAPROX_SEED must be an unsigned integer, got {raw:?}"))?;
        return Ok(vec![s]);
    }
    Ok(vec![1, 2, 3, 4, 5])
}

// ---------------------------------------------------------------------------
// labels and formatting

fn pow2_exponent(a: f64) -> Option<i32> {
    if !a.is_finite() || a <= 0.0 {
        return None;
    }
    let e = a.log2().round();
    if (-80.0..=80.0).contains(&e) && 2f64.powi(e as i32) == a {
        Some(e as i32)
    } else {
        None
    }
}

/// Filename fragment for a grid point ("p-10" for 2^-10, "a0.3" otherwise).
fn alpha_slug(a: f64) -> String {
    match pow2_exponent(a) {
        Some(e) => format!("p{e}"),
        None => format!("a{a}"),
    }
}

/// Human-facing steplength ("2^-10" for exact powers of two).
fn alpha_display(a: f64) -> String {
    match pow2_exponent(a) {
        Some(e) => format!("2^{e}"),
        None => format!("{a}"),
    }
}

fn controller_label(kind: &ControllerKind) -> String {
    match kind {
        ControllerKind::Norm { eta } => format!("norm-eta{eta}"),
        ControllerKind::Ip { beta } => format!("ip-beta{beta}"),
        ControllerKind::Geometric { s0, gamma } => format!("geometric-s0{s0}-gamma{gamma}"),
        ControllerKind::OracleNorm { eta } => format!("oracle-norm-eta{eta}"),
    }
}

fn series_controller(kind: &ControllerKind) -> String {
    match kind {
        ControllerKind::Norm { eta } => format!("NORM η={eta}"),
        ControllerKind::Ip { beta } => format!("IP β={beta}"),
        ControllerKind::Geometric { gamma, .. } => format!("GEOMETRIC γ={gamma}"),
        ControllerKind::OracleNorm { eta } => format!("ORACLE-NORM η={eta}"),
    }
}

fn termination_name(t: TerminationReason) -> &'static str {
    match t {
        TerminationReason::StepTolerance => "step-tolerance",
        TerminationReason::EpochBudget => "epoch-budget",
        TerminationReason::IterationCap => "iteration-cap",
        TerminationReason::DegenerateDecrease => "degenerate-decrease",
    }
}

// ---------------------------------------------------------------------------
// the sweep

struct CellPlan {
    controller: ControllerConfig,
    label: String,
    /// `None` selects the theory steplength.
    alpha: Option<f64>,
    seed: u64,
    trace: String,
}

#[derive(Serialize, Deserialize)]
struct CellOutcome {
    controller: ControllerConfig,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_used: Option<f64>,
    seed: u64,
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_phi_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cumulative_samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    effective_gradient_evals: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    termination: Option<TerminationReason>,
    wall_s: f64,
}

#[derive(Serialize, Deserialize)]
struct AlphaAggregate {
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    seeds: usize,
    mean_final_phi_gap: f64,
    mean_effective_gradient_evals: f64,
}

#[derive(Serialize, Deserialize)]
struct BestEntry {
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    mean_final_phi_gap: f64,
    mean_effective_gradient_evals: f64,
    best_seed: u64,
    best_final_phi_gap: f64,
    best_trace: String,
}

#[derive(Serialize, Deserialize)]
struct SummaryDoc {
    config_sha: String,
    phi_star: f64,
    n: usize,
    cells: Vec<CellOutcome>,
    /// Per (controller, steplength) seed means, in sweep order.
    alphas: Vec<AlphaAggregate>,
    /// Winning steplength per controller: argmin mean final gap, ties broken
    /// by fewer effective gradient evaluations.
    best: Vec<BestEntry>,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let rp = resolve_problem(&file.problem)?;
    let out = output_dir(args.out.clone(), &file);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let sweep = resolve_sweep(&file, &args)?;

    match &rp.meta.lambda {
        Some(l) => println!(
            "problem: {} (N={}, d={}, lambda={l})",
            rp.meta.name, rp.meta.n, rp.meta.dim
        ),
        None => println!(
            "problem: {} (N={}, d={}, h={})",
            rp.meta.name, rp.meta.n, rp.meta.dim, rp.meta.h
        ),
    }

    let refspec = file.reference.unwrap_or_default();
    let iterations = refspec.iterations.unwrap_or(50_000);
    let t0 = Instant::now();
    let (reference, cached) = ensure_reference(&rp, refspec.alpha, iterations, &out)?;
    println!(
        "reference: phi* = {:.12e} (alpha {}, {} iterations{})",
        reference.phi_star,
        reference.alpha,
        reference.iterations,
        if cached {
            ", cached".to_string()
        } else {
            format!(", {:.1}s", t0.elapsed().as_secs_f64())
        }
    );

    // Cell plans, in declaration order: controllers x steplengths x seeds.
    let mut plans = Vec::new();
    let mut names = std::collections::HashSet::new();
    for ctrl in &sweep.controllers {
        let label = controller_label(&ctrl.kind);
        let grid: Vec<Option<f64>> = match &sweep.alphas {
            Alphas::Theory => vec![None],
            Alphas::Grid(values) => values.iter().copied().map(Some).collect(),
        };
        for alpha in grid {
            for &seed in &sweep.seeds {
                let slug = alpha.map_or("theory".to_string(), alpha_slug);
                let trace = format!("trace_{label}_{slug}_s{seed}.csv");
                if !names.insert(trace.clone()) {
                    bail!("duplicate sweep cell {trace}; controllers must be distinct");
                }
                let mut controller = ctrl.clone();
                controller.cap = controller.cap.or(sweep.cap);
                plans.push(CellPlan {
                    controller,
                    label: label.clone(),
                    alpha,
                    seed,
                    trace,
                });
            }
        }
    }

    let config_sha = write_resolved_config(&rp, &sweep, &reference, &out)?;
    println!(
        "sweep: {} controllers x {} steplengths x {} seeds = {} cells (jobs {})",
        sweep.controllers.len(),
        match &sweep.alphas {
            Alphas::Theory => 1,
            Alphas::Grid(v) => v.len(),
        },
        sweep.seeds.len(),
        plans.len(),
        if args.jobs == 0 { "auto".to_string() } else { args.jobs.to_string() }
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("building the worker pool")?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        use rayon::prelude::*;
        plans
            .par_iter()
            .map(|plan| run_cell(&rp, plan, &sweep, reference.phi_star, &out))
            .collect()
    });

    for c in &outcomes {
        let alpha = c.alpha.map_or("theory".to_string(), alpha_display);
        match c.status.as_str() {
            "ok" => println!(
                "  {} alpha={} s{}: gap {:.3e}  {} iters  {} samples  [{}] ({:.1}s)",
                c.label,
                alpha,
                c.seed,
                c.final_phi_gap.unwrap_or(f64::NAN),
                c.iterations.unwrap_or(0),
                c.cumulative_samples.unwrap_or(0),
                c.termination.map_or("?", termination_name),
                c.wall_s
            ),
            _ => println!(
                "  {} alpha={} s{}: FAILED — {}",
                c.label,
                alpha,
                c.seed,
                c.error.as_deref().unwrap_or("unknown error")
            ),
        }
    }

    let summary = summarize(&sweep, &outcomes, &reference, &rp, config_sha)?;
    let summary_path = out.join("summary.json");
    fs::write(
        &summary_path,
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )
    .with_context(|| format!("writing {}", summary_path.display()))?;
    write_best_comparison(&summary, &out)?;

    for b in &summary.best {
        println!(
            "best {}: alpha={} mean gap {:.3e} ({:.1} effective passes)",
            b.label,
            b.alpha.map_or("theory".to_string(), alpha_display),
            b.mean_final_phi_gap,
            b.mean_effective_gradient_evals
        );
    }
    println!("artifacts in {}", out.display());

    let failed = outcomes.iter().filter(|c| c.status != "ok").count();
    if failed > 0 {
        return Err(anyhow::Error::new(SweepFailed {
            failed,
            total: outcomes.len(),
        }));
    }
    Ok(())
}

fn run_cell(
    rp: &ResolvedProblem,
    plan: &CellPlan,
    sweep: &ResolvedSweep,
    phi_star: f64,
    out: &Path,
) -> CellOutcome {
    let mut cfg = SolverConfig::new(plan.controller.clone());
    cfg.alpha = match plan.alpha {
        Some(alpha) => StepSize::Fixed { alpha },
        None => StepSize::TheoryFromEta,
    };
    cfg.max_epochs = sweep.max_epochs;
    cfg.seed = plan.seed;
    cfg.record_every = sweep.record_every;
    cfg.initial_batch = sweep.initial_batch;
    cfg.phi_star = Some(phi_star);

    let x0 = DenseVector::zeros(rp.p().dimension());
    let t0 = Instant::now();
    let mut outcome = CellOutcome {
        controller: plan.controller.clone(),
        label: plan.label.clone(),
        alpha: plan.alpha,
        alpha_used: None,
        seed: plan.seed,
        status: "error".into(),
        error: None,
        trace: None,
        final_phi_gap: None,
        final_batch: None,
        iterations: None,
        cumulative_samples: None,
        effective_gradient_evals: None,
        termination: None,
        wall_s: 0.0,
    };
    match solve(rp.p(), &rp.h, &x0, &cfg) {
        Ok(res) => {
            let path = out.join(&plan.trace);
            if let Err(e) = write_trace(&path, &res.records) {
                outcome.error = Some(format!("writing {}: {e}", path.display()));
            } else {
                let last = res.records.last();
                outcome.status = "ok".into();
                outcome.alpha_used = Some(res.alpha);
                outcome.trace = Some(plan.trace.clone());
                outcome.final_phi_gap = last.map(|r| r.phi_gap);
                outcome.final_batch = Some(res.final_batch);
                outcome.iterations = Some(res.iterations);
                outcome.cumulative_samples = Some(res.cumulative_samples);
                outcome.effective_gradient_evals = last.map(|r| r.effective_gradient_evals);
                outcome.termination = Some(res.termination);
            }
        }
        Err(e) => outcome.error = Some(e.to_string()),
    }
    outcome.wall_s = t0.elapsed().as_secs_f64();
    outcome
}

const TRACE_HEADER: &str =
    "k,S_k,batch_fraction,cum_samples,eff_grad_evals,phi_gap,step_norm_over_alpha,resampled,wall_ms";

fn write_trace(path: &Path, records: &[adaprox::solver::RunRecord]) -> Result<()> {
    let mut text = String::with_capacity(64 * (records.len() + 1));
    text.push_str(TRACE_HEADER);
    text.push('\n');
    for r in records {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.batch_size,
            r.batch_fraction,
            r.cumulative_samples,
            r.effective_gradient_evals,
            r.phi_gap,
            r.step_norm_over_alpha,
            u8::from(r.resampled),
            r.wall_ms
        )?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_resolved_config(
    rp: &ResolvedProblem,
    sweep: &ResolvedSweep,
    reference: &ReferenceRecord,
    out: &Path,
) -> Result<String> {
    #[derive(Serialize)]
    struct SweepDoc<'a> {
        controllers: &'a [ControllerConfig],
        alpha: serde_json::Value,
        seeds: &'a [u64],
        max_epochs: f64,
        record_every: usize,
        initial_batch: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        cap: Option<usize>,
        sampling: &'a str,
    }
    #[derive(Serialize)]
    struct RefDoc {
        alpha: f64,
        iterations: usize,
        phi_star: f64,
    }
    #[derive(Serialize)]
    struct ConfigDoc<'a> {
        problem: &'a ProblemMeta,
        problem_sha: String,
        sweep: SweepDoc<'a>,
        reference: RefDoc,
    }

    let doc = ConfigDoc {
        problem: &rp.meta,
        problem_sha: problem_sha(&rp.meta)?,
        sweep: SweepDoc {
            controllers: &sweep.controllers,
            alpha: match &sweep.alphas {
                Alphas::Theory => serde_json::Value::String("theory".into()),
                Alphas::Grid(v) => serde_json::json!(v),
            },
            seeds: &sweep.seeds,
            max_epochs: sweep.max_epochs,
            record_every: sweep.record_every,
            initial_batch: sweep.initial_batch,
            cap: sweep.cap,
            sampling: "with-replacement",
        },
        reference: RefDoc {
            alpha: reference.alpha,
            iterations: reference.iterations,
            phi_star: reference.phi_star,
        },
    };
    let body = serde_json::to_value(&doc)?;
    let sha = sha256_hex(&serde_json::to_vec(&body)?);
    let wrapped = serde_json::json!({ "config_sha": sha, "config": body });
    let path = out.join("resolved_config.json");
    fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&wrapped)?))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(sha)
}

fn summarize(
    sweep: &ResolvedSweep,
    outcomes: &[CellOutcome],
    reference: &ReferenceRecord,
    rp: &ResolvedProblem,
    config_sha: String,
) -> Result<SummaryDoc> {
    let mut aggregates = Vec::new();
    let mut best = Vec::new();

    for ctrl in &sweep.controllers {
        let label = controller_label(&ctrl.kind);
        let grid: Vec<Option<f64>> = match &sweep.alphas {
            Alphas::Theory => vec![None],
            Alphas::Grid(v) => v.iter().copied().map(Some).collect(),
        };
        let mut candidates: Vec<AlphaAggregate> = Vec::new();
        for alpha in grid {
            let ok: Vec<&CellOutcome> = outcomes
                .iter()
                .filter(|c| c.label == label && c.alpha == alpha && c.status == "ok")
                .collect();
            if ok.is_empty() {
                continue;
            }
            let mean_gap = ok
                .iter()
                .filter_map(|c| c.final_phi_gap)
                .sum::<f64>()
                / ok.len() as f64;
            let mean_evals = ok
                .iter()
                .filter_map(|c| c.effective_gradient_evals)
                .sum::<f64>()
                / ok.len() as f64;
            candidates.push(AlphaAggregate {
                label: label.clone(),
                alpha,
                seeds: ok.len(),
                mean_final_phi_gap: mean_gap,
                mean_effective_gradient_evals: mean_evals,
            });
        }
        if let Some(win) = candidates.iter().min_by(|a, b| {
            a.mean_final_phi_gap
                .total_cmp(&b.mean_final_phi_gap)
                .then(a.mean_effective_gradient_evals.total_cmp(&b.mean_effective_gradient_evals))
                .then(
                    a.alpha
                        .unwrap_or(f64::NEG_INFINITY)
                        .total_cmp(&b.alpha.unwrap_or(f64::NEG_INFINITY)),
                )
        }) {
            let best_cell = outcomes
                .iter()
                .filter(|c| c.label == label && c.alpha == win.alpha && c.status == "ok")
                .min_by(|a, b| {
                    a.final_phi_gap
                        .unwrap_or(f64::INFINITY)
                        .total_cmp(&b.final_phi_gap.unwrap_or(f64::INFINITY))
                        .then(
                            a.effective_gradient_evals
                                .unwrap_or(f64::INFINITY)
                                .total_cmp(&b.effective_gradient_evals.unwrap_or(f64::INFINITY)),
                        )
                        .then(a.seed.cmp(&b.seed))
                })
                .expect("a winning steplength implies at least one ok cell");
            best.push(BestEntry {
                label: label.clone(),
                alpha: win.alpha,
                mean_final_phi_gap: win.mean_final_phi_gap,
                mean_effective_gradient_evals: win.mean_effective_gradient_evals,
                best_seed: best_cell.seed,
                best_final_phi_gap: best_cell.final_phi_gap.unwrap_or(f64::NAN),
                best_trace: best_cell.trace.clone().unwrap_or_default(),
            });
        }
        aggregates.extend(candidates);
    }

    Ok(SummaryDoc {
        config_sha,
        phi_star: reference.phi_star,
        n: rp.meta.n,
        cells: outcomes
            .iter()
            .map(|c| serde_json::from_value(serde_json::to_value(c).unwrap()).unwrap())
            .collect(),
        alphas: aggregates,
        best,
    })
}

/// Long-format CSV with the best run per controller, ready to plot.
fn write_best_comparison(summary: &SummaryDoc, out: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(
        "series_label,k,S_k,batch_fraction,cum_samples,eff_grad_evals,phi_gap,step_norm_over_alpha\n",
    );
    for b in &summary.best {
        let cell = summary
            .cells
            .iter()
            .find(|c| c.trace.as_deref() == Some(b.best_trace.as_str()))
            .ok_or_else(|| anyhow!("summary lists a best trace {} with no cell", b.best_trace))?;
        let series = format!(
            "{} α={} s{}",
            series_controller(&cell.controller.kind),
            cell.alpha.map_or("theory".to_string(), alpha_display),
            cell.seed
        );
        let path = out.join(&b.best_trace);
        let trace = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        for line in trace.lines().skip(1) {
            // Trace columns end with (resampled, wall_ms); drop both.
            let mut fields: Vec<&str> = line.split(',').collect();
            fields.truncate(fields.len().saturating_sub(2));
            writeln!(text, "{series},{}", fields.join(","))?;
        }
    }
    let path = out.join("best_comparison.csv");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// emit

fn cmd_emit(args: EmitArgs) -> Result<()> {
    let dir = &args.dir;
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path).with_context(|| {
        format!(
            "reading {} (run `adaprox run` first)",
            summary_path.display()
        )
    })?;
    let summary: SummaryDoc =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", summary_path.display()))?;

    let ok_cells: Vec<&CellOutcome> = summary.cells.iter().filter(|c| c.status == "ok").collect();
    let missing: Vec<String> = ok_cells
        .iter()
        .filter_map(|c| c.trace.as_deref())
        .filter(|t| !dir.join(t).exists())
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        bail!(
            "{} trace files are missing from {}: {}",
            missing.len(),
            dir.display(),
            missing.join(", ")
        );
    }

    let mut gap = String::from("series_label,eff_grad_evals,phi_gap\n");
    let mut frac = String::from("series_label,k,batch_fraction\n");
    let mut rows = 0usize;
    for cell in &ok_cells {
        let trace_name = match cell.trace.as_deref() {
            Some(t) => t,
            None => continue,
        };
        let series = format!(
            "{} α={} s{}",
            series_controller(&cell.controller.kind),
            cell.alpha.map_or("theory".to_string(), alpha_display),
            cell.seed
        );
        let trace = fs::read_to_string(dir.join(trace_name))?;
        for line in trace.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 7 {
                bail!("malformed trace row in {trace_name}: {line:?}");
            }
            // 0: k, 2: batch_fraction, 4: eff_grad_evals, 5: phi_gap
            writeln!(gap, "{series},{},{}", fields[4], fields[5])?;
            writeln!(frac, "{series},{},{}", fields[0], fields[2])?;
            rows += 1;
        }
    }

    let gap_path = dir.join("gap_vs_evals.csv");
    let frac_path = dir.join("batch_fraction_vs_iters.csv");
    fs::write(&gap_path, gap).with_context(|| format!("writing {}", gap_path.display()))?;
    fs::write(&frac_path, frac).with_context(|| format!("writing {}", frac_path.display()))?;
    println!(
        "emitted {} rows x 2 files from {} cells: {}, {}",
        rows,
        ok_cells.len(),
        gap_path.display(),
        frac_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    const SUITES: [&str; 4] = ["linear-rate", "sublinear-rate", "eq-test", "figure1"];
    let selected: Vec<&str> = if args.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&args.suite.as_str()) {
        vec![args.suite.as_str()]
    } else {
        bail!(
            "unknown suite {:?}; choose one of {}, all",
            args.suite,
            SUITES.join(", ")
        );
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut failed = Vec::new();
    for suite in selected {
        let t0 = Instant::now();
        let (pass, detail, report) = match suite {
            "linear-rate" => {
                let horizon = if args.horizon == 0 { 30 } else { args.horizon };
                let rep = verify::check_linear_rate(
                    &verify::default_linear_spec(),
                    args.eta,
                    &verify::default_seeds(args.seeds),
                    horizon,
                )?;
                (
                    rep.pass,
                    format!(
                        "max violation ratio {:.3} over {} seeds, horizon {} (slack {})",
                        rep.max_violation_ratio,
                        rep.seeds.len(),
                        horizon,
                        rep.slack
                    ),
                    serde_json::to_value(&rep)?,
                )
            }
            "sublinear-rate" => {
                let horizon = if args.horizon == 0 { 50 } else { args.horizon };
                let rep = verify::check_sublinear_rate(
                    &verify::default_sublinear_spec(),
                    args.eta,
                    &verify::default_seeds(args.seeds),
                    horizon,
                )?;
                (
                    rep.pass,
                    format!(
                        "max violation ratio {:.3} over {} seeds, horizon {} (slack {})",
                        rep.max_violation_ratio,
                        rep.seeds.len(),
                        horizon,
                        rep.slack
                    ),
                    serde_json::to_value(&rep)?,
                )
            }
            "eq-test" => {
                let rep = verify::check_eq_test_suite(args.cases, args.case_seed)?;
                (
                    rep.pass,
                    format!(
                        "{} cases, {} non-vacuous, {} failures",
                        rep.cases,
                        rep.non_vacuous,
                        rep.failures.len()
                    ),
                    serde_json::to_value(&rep)?,
                )
            }
            "figure1" => {
                let rep = verify::check_figure1_phenomenon()?;
                (
                    rep.pass,
                    format!(
                        "step-rule/grad-rule requirement ratio {:.1e} at the boundary; \
                         unconstrained rules agree: {}",
                        rep.ratio_at_closest, rep.unconstrained_rules_agree
                    ),
                    serde_json::to_value(&rep)?,
                )
            }
            _ => unreachable!(),
        };
        let status = if pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {suite} — {detail} ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        let path = args.out.join(format!("verify_{}.json", suite.replace('-', "_")));
        fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&report)?))
            .with_context(|| format!("writing {}", path.display()))?;
        if !pass {
            failed.push(suite.to_string());
        }
    }
    if !failed.is_empty() {
        return Err(anyhow::Error::new(VerifyFailed {
            suites: failed.join(", "),
        }));
    }
    Ok(())
}
