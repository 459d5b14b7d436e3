//! The `ergo` command line: argument parsing, configuration files, output
//! files and run manifests.
//!
//! Exit codes: 0 on success, 1 on input errors (nothing is written), 2 when
//! the computation finished with a negative or inconclusive answer (the
//! result is still written).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use ergo_core::bias::{self, ScanSpec, DEFAULT_STARTS};
use ergo_core::ergodicity::{ergodicity_verdict_with, Verdict, VerdictOptions};
use ergo_core::plaplace::{dirichlet_solve, DirichletConfig, DirichletError, PLaplacianProblem};
use ergo_core::sim::{extract_strategies, simulate_replications};
use ergo_core::solvers::{mean_payoff_estimate, solve_ergodic, value_iteration, SolveConfig, SolveError};
use ergo_core::{builtin_operator, canonical_rep, Builtin, GameSpec, ShapleyOperator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NEGATIVE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ergo", version, about = "Mean-payoff games through their Shapley operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
struct Common {
    /// Residual tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap
    #[arg(long)]
    max_iter: Option<usize>,
    /// Averaging weight in (0, 1)
    #[arg(long)]
    damping: Option<f64>,
    /// Seed of every random choice
    #[arg(long, env = "ERGO_SEED")]
    seed: Option<u64>,
    /// Worker threads for parallel cells and replications
    #[arg(long)]
    workers: Option<usize>,
    /// Output file; `<out>.manifest.json` is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// TOML file with defaults for the flags above
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct OpArgs {
    /// Built-in operator: example1, example2, identity, markov-chain
    #[arg(long)]
    op: Option<String>,
    /// Dimension of the identity operator
    #[arg(long)]
    n: Option<usize>,
    /// Game file (JSON)
    #[arg(long, conflicts_with = "op")]
    game: Option<PathBuf>,
    /// Chain file for markov-chain: {"rows": [[...]], "payments": [...]}
    #[arg(long)]
    chain: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate T(x)
    Eval {
        #[command(flatten)]
        op: OpArgs,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[command(flatten)]
        common: Common,
    },
    /// Value iteration v^l = g + T(v^{l-1})
    Viter {
        #[command(flatten)]
        op: OpArgs,
        #[arg(long, allow_hyphen_values = true)]
        g: Option<String>,
        /// Horizon
        #[arg(long, default_value_t = 1000)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Solve g + T(u) = lambda + u
    Solve {
        #[command(flatten)]
        op: OpArgs,
        #[arg(long, allow_hyphen_values = true)]
        g: Option<String>,
        /// Initial point
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Layered ergodicity verdict
    Ergodicity {
        #[command(flatten)]
        op: OpArgs,
        /// Number of random perturbations
        #[arg(long)]
        samples: Option<usize>,
        /// Perturbation tested before the random ones
        #[arg(long, allow_hyphen_values = true)]
        g: Option<String>,
        /// Horizon k of the mean-payoff witness (compared with 2k)
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        stabilization_tol: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Scan a plane of perturbations for multiple biases
    ScanBias {
        #[command(flatten)]
        op: OpArgs,
        /// Two 1-based coordinates of g, e.g. 1,2
        #[arg(long, default_value = "1,2")]
        axes: String,
        #[arg(long, allow_hyphen_values = true)]
        range1: String,
        #[arg(long, allow_hyphen_values = true)]
        range2: String,
        #[arg(long)]
        step: Option<f64>,
        /// Full perturbation; the two axis coordinates are overwritten
        #[arg(long, allow_hyphen_values = true)]
        fixed: Option<String>,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        no_explore: bool,
        /// Line budget of the locus summary
        #[arg(long, default_value_t = 5)]
        max_lines: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Solve a discrete p-Laplacian Dirichlet problem
    Plaplace {
        /// Graph file (JSON)
        #[arg(long)]
        graph: PathBuf,
        /// Override the exponent of the file
        #[arg(long)]
        p: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Extract stationary strategies from a bias and play them
    Simulate {
        #[command(flatten)]
        op: OpArgs,
        #[arg(long, allow_hyphen_values = true)]
        g: Option<String>,
        /// Bias to read strategies from (solved when absent)
        #[arg(long, allow_hyphen_values = true)]
        bias: Option<String>,
        /// Initial state, 0-based
        #[arg(long, default_value_t = 0)]
        state: usize,
        #[arg(long, default_value_t = 100_000)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Scan g1 in [-5,20], g2 in [-20,7], step 0.5, g3 = 0 on example2
    ReproduceFigure1 {
        #[arg(long)]
        starts: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Eval { .. } => "eval",
            Command::Viter { .. } => "viter",
            Command::Solve { .. } => "solve",
            Command::Ergodicity { .. } => "ergodicity",
            Command::ScanBias { .. } => "scan-bias",
            Command::Plaplace { .. } => "plaplace",
            Command::Simulate { .. } => "simulate",
            Command::ReproduceFigure1 { .. } => "reproduce-figure1",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Eval { common, .. }
            | Command::Viter { common, .. }
            | Command::Solve { common, .. }
            | Command::Ergodicity { common, .. }
            | Command::ScanBias { common, .. }
            | Command::Plaplace { common, .. }
            | Command::Simulate { common, .. }
            | Command::ReproduceFigure1 { common, .. } => common,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] ergo_core::Error),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

/// Values a config file may provide.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    tol: Option<f64>,
    max_iter: Option<usize>,
    damping: Option<f64>,
    divergence_radius: Option<f64>,
    seed: Option<u64>,
    workers: Option<usize>,
    format: Option<Format>,
    step: Option<f64>,
    starts: Option<usize>,
    samples: Option<usize>,
    horizon: Option<usize>,
    stabilization_tol: Option<f64>,
}

/// Settings after applying flag > config file > default.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    tol: f64,
    max_iter: usize,
    damping: f64,
    divergence_radius: f64,
    seed: u64,
    workers: Option<usize>,
    format: Format,
}

impl Resolved {
    fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            damping: self.damping,
            divergence_radius: self.divergence_radius,
            seed: self.seed,
            ..SolveConfig::default()
        }
    }
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    argv: Vec<String>,
    config: Value,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    duration_seconds: f64,
}

/// Files read during a run, for the manifest.
#[derive(Default)]
struct Inputs {
    digests: Vec<InputDigest>,
}

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = fs::read(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let digest = Sha256::digest(&bytes);
        self.digests.push(InputDigest {
            path: path.display().to_string(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
        String::from_utf8(bytes).map_err(|_| input(format!("{} is not UTF-8", path.display())))
    }
}

enum Body {
    Json(Value),
    Csv(String),
}

/// What a subcommand produced, before anything is written.
struct Outcome {
    body: Body,
    /// Companion JSON files, written to `<out>.<suffix>`.
    extras: Vec<(&'static str, Value)>,
    negative: bool,
    /// Used when `--out` is absent and the subcommand always writes files.
    default_out: Option<PathBuf>,
}

impl Outcome {
    fn json(v: Value, negative: bool) -> Self {
        Self {
            body: Body::Json(v),
            extras: Vec::new(),
            negative,
            default_out: None,
        }
    }
}

fn parse_vec(field: &str, text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .enumerate()
        .map(|(k, s)| {
            let s = s.trim();
            let v: f64 = s
                .parse()
                .map_err(|_| input(format!("invalid --{field}: entry {k} `{s}` is not a number")))?;
            if !v.is_finite() {
                return Err(input(format!("invalid --{field}: entry {k} is not finite")));
            }
            Ok(v)
        })
        .collect()
}

fn parse_pair(field: &str, text: &str) -> Result<(f64, f64), CliError> {
    match parse_vec(field, text)?.as_slice() {
        &[a, b] => Ok((a, b)),
        v => Err(input(format!("invalid --{field}: expected two numbers, got {}", v.len()))),
    }
}

fn check_len(field: &str, n: usize, v: &[f64]) -> Result<(), CliError> {
    if v.len() != n {
        return Err(input(format!(
            "invalid --{field}: expected {n} entries for this operator, got {}",
            v.len()
        )));
    }
    Ok(())
}

fn optional_vec(field: &str, text: &Option<String>, n: usize) -> Result<Vec<f64>, CliError> {
    match text {
        Some(t) => {
            let v = parse_vec(field, t)?;
            check_len(field, n, &v)?;
            Ok(v)
        }
        None => Ok(vec![0.0; n]),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    rows: Vec<Vec<f64>>,
    payments: Vec<f64>,
}

fn load_operator(args: &OpArgs, inputs: &mut Inputs) -> Result<ShapleyOperator, CliError> {
    if let Some(path) = &args.game {
        let text = inputs.read(path)?;
        let game = GameSpec::from_json(&text)
            .map_err(|e| input(format!("invalid game file {}: {e}", path.display())))?;
        return Ok(ShapleyOperator::from_game(game));
    }
    let name = args
        .op
        .as_deref()
        .ok_or_else(|| input("one of --op or --game is required"))?;
    if name == "markov-chain" {
        let path = args
            .chain
            .as_ref()
            .ok_or_else(|| input("--op markov-chain needs --chain FILE"))?;
        let text = inputs.read(path)?;
        let chain: ChainFile = serde_json::from_str(&text)
            .map_err(|e| input(format!("invalid chain file {}: {e}", path.display())))?;
        return Ok(builtin_operator(Builtin::MarkovChain {
            rows: chain.rows,
            payments: chain.payments,
        })?);
    }
    Ok(builtin_operator(Builtin::from_name(name, args.n)?)?)
}

fn resolve(common: &Common, file: &FileConfig, default_tol: f64, default_format: Format) -> Resolved {
    let d = SolveConfig::default();
    Resolved {
        tol: common.tol.or(file.tol).unwrap_or(default_tol),
        max_iter: common.max_iter.or(file.max_iter).unwrap_or(d.max_iter),
        damping: common.damping.or(file.damping).unwrap_or(d.damping),
        divergence_radius: file.divergence_radius.unwrap_or(d.divergence_radius),
        seed: common.seed.or(file.seed).unwrap_or(d.seed),
        workers: common.workers.or(file.workers),
        format: common.format.or(file.format).unwrap_or(default_format),
    }
}

fn solve_status(op: &ShapleyOperator, g: &[f64], r: Result<ergo_core::ErgodicSolution, SolveError>) -> Result<Outcome, CliError> {
    match r {
        Ok(s) => Ok(Outcome::json(
            json!({
                "operator": op.name(),
                "g": g,
                "status": "converged",
                "lambda": s.lambda,
                "bias": s.bias,
                "residual": s.residual,
                "iterations": s.iterations,
                "newton_steps": s.newton_steps,
            }),
            false,
        )),
        Err(SolveError::NotConverged(nc)) => Ok(Outcome::json(
            json!({
                "operator": op.name(),
                "g": g,
                "status": "not_converged",
                "reason": nc.reason,
                "lambda": null,
                "bias": null,
                "last_iterate": nc.last_iterate,
                "residual": nc.residual,
                "iterations": nc.iterations,
            }),
            true,
        )),
        Err(SolveError::Input(e)) => Err(e.into()),
    }
}

fn execute(
    cmd: &Command,
    file: &FileConfig,
    inputs: &mut Inputs,
) -> Result<(Resolved, Outcome), CliError> {
    let common = cmd.common();
    match cmd {
        Command::Eval { op, x, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Json);
            let op = load_operator(op, inputs)?;
            let x = parse_vec("x", x)?;
            check_len("x", op.dim(), &x)?;
            let value = op.evaluate(&x)?;
            let body = match res.format {
                Format::Json => Body::Json(json!({"operator": op.name(), "x": x, "value": value})),
                Format::Csv => Body::Csv(csv_line(&value)),
            };
            Ok((res, Outcome { body, extras: Vec::new(), negative: false, default_out: None }))
        }
        Command::Viter { op, g, k, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Json);
            let op = load_operator(op, inputs)?;
            let g = optional_vec("g", g, op.dim())?;
            let trace = value_iteration(&op, &g, *k)?;
            let body = match res.format {
                Format::Csv => {
                    let mut text = String::from("l");
                    for i in 1..=op.dim() {
                        text.push_str(&format!(",v{i}"));
                    }
                    text.push('\n');
                    for (l, v) in trace.values().iter().enumerate() {
                        text.push_str(&format!("{l},{}", csv_line(v)));
                    }
                    Body::Csv(text)
                }
                Format::Json => {
                    let last = trace.last().to_vec();
                    let (lambda, mean, spread) = match mean_payoff_estimate(&trace) {
                        Ok(m) => {
                            let (lo, hi) = m.mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                            (json!(0.5 * (lo + hi)), json!(m.mean), json!(m.spread))
                        }
                        Err(_) => (Value::Null, Value::Null, Value::Null),
                    };
                    Body::Json(json!({
                        "operator": op.name(),
                        "g": g,
                        "status": "ok",
                        "lambda": lambda,
                        "mean_payoff": mean,
                        "bias": canonical_rep(&last)?,
                        "residual": spread,
                        "iterations": k,
                        "values": last,
                    }))
                }
            };
            Ok((res, Outcome { body, extras: Vec::new(), negative: false, default_out: None }))
        }
        Command::Solve { op, g, x0, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Json);
            let op = load_operator(op, inputs)?;
            let g = optional_vec("g", g, op.dim())?;
            let x0 = match x0 {
                Some(t) => {
                    let v = parse_vec("x0", t)?;
                    check_len("x0", op.dim(), &v)?;
                    Some(v)
                }
                None => None,
            };
            let cfg = res.solve_config();
            cfg.validate()?;
            let out = solve_status(&op, &g, solve_ergodic(&op, &g, &cfg, x0.as_deref()))?;
            Ok((res, out))
        }
        Command::Ergodicity { op, samples, g, horizon, stabilization_tol, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Json);
            let op = load_operator(op, inputs)?;
            let d = VerdictOptions::default();
            let mut opts = VerdictOptions {
                num_g_samples: samples.or(file.samples).unwrap_or(d.num_g_samples),
                horizon: horizon.or(file.horizon).unwrap_or(d.horizon),
                stabilization_tol: stabilization_tol.or(file.stabilization_tol).unwrap_or(d.stabilization_tol),
                ..d
            };
            if let Some(t) = g {
                let v = parse_vec("g", t)?;
                check_len("g", op.dim(), &v)?;
                opts.extra_samples.push(v);
            }
            let cfg = res.solve_config();
            cfg.validate()?;
            let report = ergodicity_verdict_with(&op, &opts, &cfg)?;
            let negative = report.verdict == Verdict::Inconclusive;
            let mut v = serde_json::to_value(&report).map_err(ergo_core::Error::from)?;
            v["options"] = serde_json::to_value(&opts).map_err(ergo_core::Error::from)?;
            Ok((res, Outcome::json(v, negative)))
        }
        Command::ScanBias { op, axes, range1, range2, step, fixed, starts, no_explore, max_lines, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Csv);
            let op = load_operator(op, inputs)?;
            let (a1, a2) = parse_pair("axes", axes)?;
            let axis = |a: f64| -> Result<usize, CliError> {
                if a.fract() != 0.0 || a < 1.0 || a > op.dim() as f64 {
                    return Err(input(format!("invalid --axes: {a} is not a coordinate in 1..={}", op.dim())));
                }
                Ok(a as usize - 1)
            };
            let spec = ScanSpec {
                axes: (axis(a1)?, axis(a2)?),
                range1: parse_pair("range1", range1)?,
                range2: parse_pair("range2", range2)?,
                step: step.or(file.step).unwrap_or(0.5),
                base: optional_vec("fixed", fixed, op.dim())?,
                starts: starts.or(file.starts).unwrap_or(DEFAULT_STARTS),
                explore: !no_explore,
            };
            let out = run_scan(&op, &spec, &res, *max_lines, None)?;
            Ok((res, out))
        }
        Command::ReproduceFigure1 { starts, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Csv);
            let op = builtin_operator(Builtin::Example2)?;
            let spec = ScanSpec {
                starts: starts.or(file.starts).unwrap_or(DEFAULT_STARTS),
                ..ScanSpec::figure1()
            };
            let out = run_scan(&op, &spec, &res, 5, Some(PathBuf::from("figure1.csv")))?;
            Ok((res, out))
        }
        Command::Plaplace { graph, p, .. } => {
            let res = resolve(common, file, DirichletConfig::default().tol, Format::Json);
            let text = inputs.read(graph)?;
            let mut prob = PLaplacianProblem::from_json(&text)
                .map_err(|e| input(format!("invalid graph file {}: {e}", graph.display())))?;
            if let Some(p) = p {
                prob = prob.with_p(*p)?;
            }
            let cfg = DirichletConfig {
                tol: res.tol,
                max_steps: common.max_iter.or(file.max_iter).unwrap_or(DirichletConfig::default().max_steps),
            };
            if !(cfg.tol > 0.0) {
                return Err(input("invalid --tol: must be positive"));
            }
            let out = match dirichlet_solve(&prob, &cfg) {
                Ok(s) => Outcome::json(
                    json!({
                        "vertices": prob.labels(),
                        "p": prob.p(),
                        "status": "converged",
                        "v": s.v,
                        "residual": s.residual,
                        "iterations": s.iterations,
                        "energy": s.energy_trace.last(),
                    }),
                    false,
                ),
                Err(DirichletError::NotConverged(nc)) => Outcome::json(
                    json!({
                        "vertices": prob.labels(),
                        "p": prob.p(),
                        "status": "not_converged",
                        "v": nc.last_iterate,
                        "residual": nc.residual,
                        "iterations": nc.iterations,
                    }),
                    true,
                ),
                Err(DirichletError::Input(e)) => return Err(e.into()),
            };
            Ok((res, out))
        }
        Command::Simulate { op, g, bias, state, horizon, reps, .. } => {
            let res = resolve(common, file, SolveConfig::default().tol, Format::Json);
            let op = load_operator(op, inputs)?;
            let game = op
                .game()
                .ok_or_else(|| input(format!("simulate needs a finite game; {} has none", op.name())))?
                .clone();
            let n = op.dim();
            let g = optional_vec("g", g, n)?;
            if *state >= n {
                return Err(input(format!("invalid --state: must be below {n}")));
            }
            if *horizon == 0 {
                return Err(input("invalid --horizon: must be at least 1"));
            }
            let cfg = res.solve_config();
            cfg.validate()?;
            let (bias, lambda) = match bias {
                Some(t) => {
                    let b = parse_vec("bias", t)?;
                    check_len("bias", n, &b)?;
                    let (lambda, _) = ergo_core::ergodic_residual(&op, &g, &b)?;
                    (b, lambda)
                }
                None => match solve_ergodic(&op, &g, &cfg, None) {
                    Ok(s) => (s.bias.into_vec(), s.lambda),
                    Err(e) => {
                        let mut out = solve_status(&op, &g, Err(e))?;
                        out.negative = true;
                        return Ok((res, out));
                    }
                },
            };
            let strat = extract_strategies(&game, &bias, &g)?;
            let reports = simulate_replications(&game, &strat, &g, *state, *horizon, res.seed, *reps)?;
            let mean = reports.iter().map(|r| r.average).sum::<f64>() / reports.len().max(1) as f64;
            Ok((
                res,
                Outcome::json(
                    json!({
                        "operator": op.name(),
                        "g": g,
                        "lambda": lambda,
                        "bias": bias,
                        "strategies": strat,
                        "mean_average": mean,
                        "reports": reports,
                    }),
                    false,
                ),
            ))
        }
    }
}

fn run_scan(
    op: &ShapleyOperator,
    spec: &ScanSpec,
    res: &Resolved,
    max_lines: usize,
    default_out: Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let cfg = res.solve_config();
    let result = bias::scan_plane(op, spec, &cfg, None)?;
    let summary = bias::summarize_scan(&result, max_lines);
    let body = match res.format {
        Format::Csv => {
            let mut buf = Vec::new();
            bias::write_scan_csv(&result, &mut buf)?;
            Body::Csv(String::from_utf8(buf).expect("CSV output is UTF-8"))
        }
        Format::Json => Body::Json(serde_json::to_value(&result).map_err(ergo_core::Error::from)?),
    };
    let checks = json!({
        "multiple_fraction_below_5_percent": summary.multiple_fraction < 0.05,
        "no_full_3x3_multiple_block": summary.full_multiple_blocks == 0,
        "lines_cover_multiple_cells": summary.line_fit.covered(),
        "multiple_pairs_separated": summary.min_multiple_distance.is_none_or(|d| d > bias::merge_radius(cfg.tol)),
    });
    let mut s = serde_json::to_value(&summary).map_err(ergo_core::Error::from)?;
    s["operator"] = json!(op.name());
    s["checks"] = checks;
    Ok(Outcome {
        body,
        extras: vec![("summary.json", s)],
        negative: false,
        default_out,
    })
}

fn csv_line(v: &[f64]) -> String {
    let mut s = v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

/// Runs the command line `argv` (program name first), writing results to
/// `stdout` or files and diagnostics to `stderr`. Returns the exit code.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let started = Instant::now();
    match run_command(&cli.command, &argv, started, stdout) {
        Ok(negative) => {
            if negative {
                EXIT_NEGATIVE
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_INPUT
        }
    }
}

/// Runs with the process arguments and standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run_with(argv, &mut out, &mut err)
}

fn run_command(
    cmd: &Command,
    argv: &[OsString],
    started: Instant,
    stdout: &mut dyn Write,
) -> Result<bool, CliError> {
    let common = cmd.common();
    let mut inputs = Inputs::default();
    let file = match &common.config {
        Some(path) => {
            let text = inputs.read(path)?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| input(format!("invalid config file {}: {}", path.display(), e.message())))?
        }
        None => FileConfig::default(),
    };
    let workers = common.workers.or(file.workers);
    let (res, outcome) = match workers {
        Some(0) => return Err(input("invalid --workers: must be at least 1")),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| input(format!("cannot start {w} workers: {e}")))?
            .install(|| execute(cmd, &file, &mut inputs))?,
        None => execute(cmd, &file, &mut inputs)?,
    };

    let out = common.out.clone().or(outcome.default_out.clone());
    let Some(out) = out else {
        let text = match outcome.body {
            Body::Json(v) => pretty(&v),
            Body::Csv(s) => s,
        };
        stdout
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Write { path: "<stdout>".into(), source })?;
        return Ok(outcome.negative);
    };

    let manifest_path = sibling(&out, "manifest.json");
    let manifest_ref = json!(manifest_path.display().to_string());
    let mut written = vec![out.display().to_string()];
    let primary = match outcome.body {
        Body::Json(mut v) => {
            v["manifest"] = manifest_ref.clone();
            pretty(&v)
        }
        Body::Csv(s) => s,
    };
    let mut extras = Vec::new();
    for (suffix, mut v) in outcome.extras {
        let path = sibling(&out, suffix);
        v["manifest"] = manifest_ref.clone();
        v["result"] = json!(out.display().to_string());
        written.push(path.display().to_string());
        extras.push((path, pretty(&v)));
    }
    write_file(&out, primary.as_bytes())?;
    for (path, text) in &extras {
        write_file(path, text.as_bytes())?;
    }
    let manifest = RunManifest {
        tool: "ergo",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cmd.name(),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config: serde_json::to_value(&res).map_err(ergo_core::Error::from)?,
        inputs: inputs.digests,
        outputs: written,
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(ergo_core::Error::from)? + "\n";
    write_file(&manifest_path, text.as_bytes())?;
    writeln!(stdout, "wrote {}", out.display())
        .map_err(|source| CliError::Write { path: "<stdout>".into(), source })?;
    Ok(outcome.negative)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_and_pairs() {
        assert_eq!(parse_vec("x", "1, -2.5,3").unwrap(), vec![1.0, -2.5, 3.0]);
        let err = parse_vec("g", "1,a").unwrap_err().to_string();
        assert!(err.contains("--g") && err.contains("entry 1"), "{err}");
        assert!(parse_vec("g", "1,inf").is_err());
        assert_eq!(parse_pair("range1", "-5,20").unwrap(), (-5.0, 20.0));
        assert!(parse_pair("range1", "1").is_err());
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let common = Common {
            tol: Some(1e-6),
            max_iter: None,
            damping: None,
            seed: None,
            workers: None,
            out: None,
            format: None,
            config: None,
        };
        let file = FileConfig {
            tol: Some(1e-3),
            damping: Some(0.25),
            ..FileConfig::default()
        };
        let r = resolve(&common, &file, 1e-9, Format::Json);
        assert_eq!(r.tol, 1e-6);
        assert_eq!(r.damping, 0.25);
        assert_eq!(r.max_iter, SolveConfig::default().max_iter);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<FileConfig>("tolerance = 1e-3").unwrap_err();
        assert!(err.message().contains("tolerance"));
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("out/a.csv"), "manifest.json"), PathBuf::from("out/a.csv.manifest.json"));
    }
}
