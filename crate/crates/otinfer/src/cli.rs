//! Command-line interface: solve, estimate with confidence intervals,
//! colocalization curves, and seeded simulation studies, all emitting
//! machine-readable JSON to stdout with a run manifest attached.
//!
//! Exit codes: 0 success, 1 parse/IO/usage errors, 2 solver non-convergence
//! (for `solve`, the payload is still printed with `converged: false`).
//!
//! Every float is serialized with 17 significant digits so outputs
//! round-trip exactly; reruns with identical inputs are byte-identical
//! except for the manifest timestamp.

use crate::inference::{
    ci, coloc_curve, default_schedule, divergence_ci, map_ci, var_cond, var_cost, var_plan,
    ConfidenceInterval, EtaSpec, SampleSizes, VarianceEstimate,
};
use crate::measures::{
    build_cost, from_samples, load_samples, parse_cost_name, CostContext, CostSpec,
    DiscreteMeasure, SampleFormat,
};
use crate::montecarlo::{run_coverage, CoverageReport, SimConfig};
use crate::operators::{NeumannMode, OperatorContext};
use crate::sinkhorn::{
    conditional_density_row, entropic_cost, plan_density, plan_expectation, sinkhorn_cost, solve,
    PotentialPair, SolveReport, DEFAULT_MAX_ITER,
};
use crate::{OtError, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Parser)]
#[command(
    name = "otinfer",
    version,
    about = "Entropic optimal transport: log-domain solver, variance estimators, confidence intervals, and seeded coverage studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one entropy-regularized transport problem
    Solve(SolveArgs),
    /// Point estimate, variance, and confidence interval for a functional
    Ci(CiArgs),
    /// Colocalization curve with pointwise intervals and simultaneous band
    Coloc(ColocArgs),
    /// Run a coverage study described by a JSON config
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Source sample file: CSV (one point per line) or JSON array of arrays
    #[arg(long = "x")]
    x: String,
    /// Target sample file, same formats
    #[arg(long = "y")]
    y: String,
    /// Cost: sq_euclidean | euclidean | lp:<p> | discrete | table:<csv path>
    #[arg(long, default_value = "sq_euclidean")]
    cost: String,
    /// Regularization strength ε > 0
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    /// Solver tolerance on the dual residual
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Functional: cost | plan | cond | map | divergence
    #[arg(long)]
    target: String,
    /// η for plan/cond: "cost", "indicator:<t>", "coord:<k>", or a CSV path
    #[arg(long)]
    eta: Option<String>,
    /// Query point for cond/map, comma-separated coordinates
    #[arg(long)]
    x0: Option<String>,
    /// Confidence level in (0,1)
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Resolvent mode: direct | auto | an explicit term count
    #[arg(long = "N", default_value = "direct")]
    n_mode: String,
}

#[derive(Args)]
struct ColocArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Ascending thresholds, comma-separated
    #[arg(long)]
    thresholds: String,
    /// Confidence level in (0,1)
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Resolvent mode: direct | auto | an explicit term count
    #[arg(long = "N", default_value = "direct")]
    n_mode: String,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (JSON)
    #[arg(long)]
    config: String,
}

/// Provenance block attached to every output.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Path → SHA-256 of the exact bytes read.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub version: String,
    pub timestamp: String,
}

fn manifest(
    command: &str,
    argv: &[String],
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        argv: argv.to_vec(),
        inputs,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    }
}

/// JSON serializer printing every f64 with 17 significant digits
/// (`{:.16e}`), which round-trips doubles exactly.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize any value with the 17-significant-digit float convention.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17);
    value
        .serialize(&mut ser)
        .map_err(|e| OtError::Numeric(format!("serialization failed: {e}")))?;
    String::from_utf8(out).map_err(|e| OtError::Numeric(format!("non-utf8 output: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_and_digest(path: &str, inputs: &mut BTreeMap<String, String>) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|source| OtError::Io {
        path: path.to_string(),
        source,
    })?;
    inputs.insert(path.to_string(), sha256_hex(&bytes));
    Ok(bytes)
}

fn detect_format(path: &str) -> SampleFormat {
    if path.ends_with(".json") {
        SampleFormat::Json
    } else {
        SampleFormat::Csv
    }
}

struct LoadedPair {
    p: DiscreteMeasure,
    q: DiscreteMeasure,
    ctx: CostContext,
    sizes: SampleSizes,
    inputs: BTreeMap<String, String>,
    tol: f64,
}

fn load_pair(input: &InputArgs) -> Result<LoadedPair> {
    let mut inputs = BTreeMap::new();
    read_and_digest(&input.x, &mut inputs)?;
    read_and_digest(&input.y, &mut inputs)?;
    let p = from_samples(&load_samples(&input.x, detect_format(&input.x), false)?)?;
    let q = from_samples(&load_samples(&input.y, detect_format(&input.y), false)?)?;
    let spec = if let Some(path) = input.cost.strip_prefix("table:") {
        read_and_digest(path, &mut inputs)?;
        let table = load_samples(path, SampleFormat::Csv, false)?;
        CostSpec::Table(table.points)
    } else {
        parse_cost_name(&input.cost)?
    };
    let ctx = build_cost(spec, &p, &q, input.eps)?;
    let sizes = SampleSizes::new(p.len(), q.len())?;
    Ok(LoadedPair {
        p,
        q,
        ctx,
        sizes,
        inputs,
        tol: input.tol,
    })
}

struct SolvedPair {
    pot: PotentialPair,
    report: SolveReport,
}

fn solve_pair(pair: &LoadedPair) -> Result<SolvedPair> {
    let (pot, report) = solve(&pair.p, &pair.q, &pair.ctx, pair.tol, DEFAULT_MAX_ITER)?;
    Ok(SolvedPair { pot, report })
}

fn require_converged(solved: &SolvedPair) -> Result<()> {
    if !solved.report.converged {
        return Err(OtError::NotConverged {
            residual: solved.report.final_residual,
            iterations: solved.report.iterations,
        });
    }
    Ok(())
}

fn parse_point(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|cell| {
            cell.trim()
                .parse::<f64>()
                .map_err(|_| OtError::InvalidArgument(format!("bad coordinate {cell:?}")))
        })
        .collect()
}

fn parse_n_mode(text: &str, sizes: SampleSizes) -> Result<NeumannMode> {
    match text {
        "direct" => Ok(NeumannMode::Direct),
        "auto" => Ok(NeumannMode::Terms(default_schedule(sizes))),
        other => other
            .parse::<usize>()
            .map(NeumannMode::Terms)
            .map_err(|_| {
                OtError::InvalidArgument(format!(
                    "bad N {other:?}; expected direct, auto, or a term count"
                ))
            }),
    }
}

fn parse_eta(
    text: &str,
    inputs: &mut BTreeMap<String, String>,
) -> Result<EtaSpec> {
    match text {
        "cost" => Ok(EtaSpec::Cost),
        other => {
            if let Some(t) = other.strip_prefix("indicator:") {
                let t: f64 = t.parse().map_err(|_| {
                    OtError::InvalidArgument(format!("bad indicator threshold {t:?}"))
                })?;
                Ok(EtaSpec::Indicator(t))
            } else if let Some(k) = other.strip_prefix("coord:") {
                let k: usize = k.parse().map_err(|_| {
                    OtError::InvalidArgument(format!("bad coordinate index {k:?}"))
                })?;
                Ok(EtaSpec::Coord(k))
            } else {
                // Anything else is a path to an n×m CSV table.
                read_and_digest(other, inputs)?;
                let table = load_samples(other, SampleFormat::Csv, false)?;
                Ok(EtaSpec::Table(table.points))
            }
        }
    }
}

#[derive(Serialize)]
struct PotentialsOut {
    f: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Serialize)]
struct ReportOut {
    iterations: usize,
    final_residual: f64,
    converged: bool,
    duality_gap: f64,
}

#[derive(Serialize)]
struct SolveOutput {
    manifest: RunManifest,
    potentials: PotentialsOut,
    cost: f64,
    sinkhorn_cost: f64,
    report: ReportOut,
}

#[derive(Serialize)]
struct VarianceOut {
    value: f64,
    lambda_hat: f64,
    scale: f64,
    method: String,
    n_used: String,
}

impl VarianceOut {
    fn from(estimate: &VarianceEstimate) -> Self {
        VarianceOut {
            value: estimate.value,
            lambda_hat: estimate.lambda_hat,
            scale: estimate.scale,
            method: estimate.method.to_string(),
            n_used: estimate.n_used.to_string(),
        }
    }
}

#[derive(Serialize)]
struct IntervalOut {
    estimate: f64,
    lower: f64,
    upper: f64,
    level: f64,
    std_error: f64,
    degenerate: bool,
}

impl IntervalOut {
    fn from(interval: &ConfidenceInterval) -> Self {
        IntervalOut {
            estimate: interval.estimate,
            lower: interval.lower,
            upper: interval.upper,
            level: interval.level,
            std_error: interval.std_error,
            degenerate: interval.degenerate,
        }
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum CiPayload {
    Scalar {
        estimate: f64,
        variance: VarianceOut,
        ci: IntervalOut,
    },
    Vector {
        estimate: Vec<f64>,
        covariance: Vec<Vec<f64>>,
        variance: Vec<VarianceOut>,
        ci: Vec<IntervalOut>,
    },
}

#[derive(Serialize)]
struct CiOutput {
    manifest: RunManifest,
    target: String,
    #[serde(flatten)]
    payload: CiPayload,
}

#[derive(Serialize)]
struct ColocOutput {
    manifest: RunManifest,
    thresholds: Vec<f64>,
    values: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    band: Vec<f64>,
    pointwise: Vec<IntervalOut>,
}

#[derive(Serialize)]
struct SimulateOutput {
    manifest: RunManifest,
    #[serde(flatten)]
    report: CoverageReport,
}

fn rows(matrix: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    matrix.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn cmd_solve(args: &SolveArgs, argv: &[String]) -> Result<(String, i32)> {
    let pair = load_pair(&args.input)?;
    let solved = solve_pair(&pair)?;
    // Tolerate loose marginals here: the payload must still print (with
    // converged=false and exit 2) when the iteration budget ran out.
    let plan = plan_density(&solved.pot, &pair.ctx, &pair.p, &pair.q, pair.tol.max(1e-2))?;
    let output = SolveOutput {
        manifest: manifest("solve", argv, pair.inputs.clone(), None),
        potentials: PotentialsOut {
            f: solved.pot.f().to_vec(),
            g: solved.pot.g().to_vec(),
        },
        cost: entropic_cost(&solved.pot, &pair.p, &pair.q, &pair.ctx),
        sinkhorn_cost: sinkhorn_cost(&plan, &pair.ctx, &pair.p, &pair.q),
        report: ReportOut {
            iterations: solved.report.iterations,
            final_residual: solved.report.final_residual,
            converged: solved.report.converged,
            duality_gap: solved.report.duality_gap,
        },
    };
    let code = if solved.report.converged { 0 } else { 2 };
    Ok((to_json_17(&output)?, code))
}

fn cmd_ci(args: &CiArgs, argv: &[String]) -> Result<(String, i32)> {
    let mut pair = load_pair(&args.input)?;
    let mode_of = |sizes| parse_n_mode(&args.n_mode, sizes);
    let need_eta = || {
        args.eta.as_deref().ok_or_else(|| {
            OtError::InvalidArgument(format!("--eta is required for target {}", args.target))
        })
    };
    let need_x0 = || {
        args.x0.as_deref().ok_or_else(|| {
            OtError::InvalidArgument(format!("--x0 is required for target {}", args.target))
        })
    };

    let payload = match args.target.as_str() {
        "cost" => {
            let solved = solve_pair(&pair)?;
            require_converged(&solved)?;
            let estimate = entropic_cost(&solved.pot, &pair.p, &pair.q, &pair.ctx);
            let variance = var_cost(&solved.pot, &pair.p, &pair.q, &pair.ctx, pair.sizes);
            let interval = ci(estimate, &variance, args.level)?;
            CiPayload::Scalar {
                estimate,
                variance: VarianceOut::from(&variance),
                ci: IntervalOut::from(&interval),
            }
        }
        "plan" => {
            let eta = parse_eta(need_eta()?, &mut pair.inputs)?;
            let solved = solve_pair(&pair)?;
            require_converged(&solved)?;
            let mode = mode_of(pair.sizes)?;
            let plan = plan_density(&solved.pot, &pair.ctx, &pair.p, &pair.q, pair.tol)?;
            let op = OperatorContext::new(&plan, &pair.p, &pair.q, &pair.ctx);
            let table = eta.table(&pair.ctx, &pair.q)?;
            let estimate = plan_expectation(&plan, &pair.p, &pair.q, &table)?;
            let variance = var_plan(&op, &table, pair.sizes, mode)?;
            let interval = ci(estimate, &variance, args.level)?;
            CiPayload::Scalar {
                estimate,
                variance: VarianceOut::from(&variance),
                ci: IntervalOut::from(&interval),
            }
        }
        "cond" => {
            let eta = parse_eta(need_eta()?, &mut pair.inputs)?;
            let x0 = parse_point(need_x0()?)?;
            let solved = solve_pair(&pair)?;
            require_converged(&solved)?;
            let mode = mode_of(pair.sizes)?;
            let plan = plan_density(&solved.pot, &pair.ctx, &pair.p, &pair.q, pair.tol)?;
            let op = OperatorContext::new(&plan, &pair.p, &pair.q, &pair.ctx);
            let row = eta.row_at(&x0, &pair.ctx, &pair.p, &pair.q)?;
            let xi_row = conditional_density_row(&solved.pot, &x0, &pair.q, &pair.ctx)?;
            let estimate: f64 = (0..pair.q.len())
                .map(|j| pair.q.weights()[j] * xi_row[j] * row[j])
                .sum();
            let variance = var_cond(
                &op, &solved.pot, &x0, &row, &pair.q, &pair.ctx, pair.sizes, mode,
            )?;
            let interval = ci(estimate, &variance, args.level)?;
            CiPayload::Scalar {
                estimate,
                variance: VarianceOut::from(&variance),
                ci: IntervalOut::from(&interval),
            }
        }
        "map" => {
            let x0 = parse_point(need_x0()?)?;
            let solved = solve_pair(&pair)?;
            require_converged(&solved)?;
            let mode = mode_of(pair.sizes)?;
            let plan = plan_density(&solved.pot, &pair.ctx, &pair.p, &pair.q, pair.tol)?;
            let op = OperatorContext::new(&plan, &pair.p, &pair.q, &pair.ctx);
            let report = map_ci(
                &op, &solved.pot, &x0, &pair.q, &pair.ctx, pair.sizes, args.level, mode,
            )?;
            let variance = (0..pair.q.dim())
                .map(|k| VarianceOut {
                    value: report.covariance[(k, k)].max(0.0),
                    lambda_hat: pair.sizes.lambda_hat(),
                    scale: pair.sizes.scale(),
                    method: "conditional".to_string(),
                    n_used: mode.to_string(),
                })
                .collect();
            CiPayload::Vector {
                estimate: report.map.clone(),
                covariance: rows(&report.covariance),
                variance,
                ci: report.intervals.iter().map(IntervalOut::from).collect(),
            }
        }
        "divergence" => {
            let report = divergence_ci(
                &pair.p,
                &pair.q,
                pair.ctx.spec(),
                pair.ctx.epsilon(),
                pair.tol,
                pair.sizes,
                args.level,
            )?;
            CiPayload::Scalar {
                estimate: report.divergence,
                variance: VarianceOut::from(&report.variance),
                ci: IntervalOut::from(&report.interval),
            }
        }
        other => {
            return Err(OtError::InvalidArgument(format!(
                "unknown target {other:?}; expected cost, plan, cond, map, or divergence"
            )))
        }
    };
    let output = CiOutput {
        manifest: manifest("ci", argv, pair.inputs.clone(), None),
        target: args.target.clone(),
        payload,
    };
    Ok((to_json_17(&output)?, 0))
}

fn cmd_coloc(args: &ColocArgs, argv: &[String]) -> Result<(String, i32)> {
    let pair = load_pair(&args.input)?;
    let thresholds = parse_point(&args.thresholds)?;
    let solved = solve_pair(&pair)?;
    require_converged(&solved)?;
    let mode = parse_n_mode(&args.n_mode, pair.sizes)?;
    let plan = plan_density(&solved.pot, &pair.ctx, &pair.p, &pair.q, pair.tol)?;
    let op = OperatorContext::new(&plan, &pair.p, &pair.q, &pair.ctx);
    let result = coloc_curve(&op, &pair.ctx, &thresholds, pair.sizes, args.level, mode)?;
    let output = ColocOutput {
        manifest: manifest("coloc", argv, pair.inputs.clone(), None),
        thresholds: result.thresholds.clone(),
        values: result.values.clone(),
        covariance: rows(&result.covariance),
        band: result.band.clone(),
        pointwise: result.pointwise.iter().map(IntervalOut::from).collect(),
    };
    Ok((to_json_17(&output)?, 0))
}

fn cmd_simulate(args: &SimulateArgs, argv: &[String]) -> Result<(String, i32)> {
    let mut inputs = BTreeMap::new();
    let bytes = read_and_digest(&args.config, &mut inputs)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| OtError::InvalidArgument(format!("config is not UTF-8: {e}")))?;
    let config = SimConfig::from_json(&text)?;
    let report = run_coverage(&config)?;
    let output = SimulateOutput {
        manifest: manifest("simulate", argv, inputs, Some(config.seed)),
        report,
    };
    Ok((to_json_17(&output)?, 0))
}

fn error_code(err: &OtError) -> i32 {
    match err {
        OtError::NotConverged { .. } => 2,
        _ => 1,
    }
}

/// Parse argv, run the requested command, print its JSON to stdout, and
/// return the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match &cli.command {
        Cmd::Solve(args) => cmd_solve(args, &argv[1..]),
        Cmd::Ci(args) => cmd_ci(args, &argv[1..]),
        Cmd::Coloc(args) => cmd_coloc(args, &argv[1..]),
        Cmd::Simulate(args) => cmd_simulate(args, &argv[1..]),
    };
    match result {
        Ok((json, code)) => {
            println!("{json}");
            code
        }
        Err(err) => {
            eprintln!("error: {err}");
            error_code(&err)
        }
    }
}
