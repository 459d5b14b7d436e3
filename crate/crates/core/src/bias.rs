//! Multiplicity of the bias: multistart probes of the fixed-point set of
//! `g + T` modulo constants, uniqueness verdicts and plane scans over `g`.
//!
//! Multiplicity detection is one-sided. `Multiple` is backed by two verified
//! biases; `Unique` only means that no second class was found within the
//! start and exploration budget.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::operator::ShapleyOperator;
use crate::quotient::{hilbert_distance, QuotientPoint};
use crate::seeds;
use crate::solvers::{ergodic_residual, solve_ergodic, SolveConfig, SolveError, StopReason};

/// Default number of random starts per probe.
pub const DEFAULT_STARTS: usize = 32;

/// Exploration offsets added to found biases along each coordinate.
const EXPLORE_DELTAS: [f64; 2] = [0.1, 1.0];

/// Merge radius `100·tol` used with a given solver tolerance.
pub fn merge_radius(tol: f64) -> f64 {
    100.0 * tol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    Random,
    Explore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StartOutcome {
    Converged {
        class: usize,
        iterations: usize,
        residual: f64,
    },
    Failed {
        reason: StopReason,
        residual: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub kind: StartKind,
    pub start: Vec<f64>,
    #[serde(flatten)]
    pub outcome: StartOutcome,
}

/// A found bias class with its re-evaluated residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasClass {
    pub bias: QuotientPoint,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProbe {
    pub g: Vec<f64>,
    pub tol: f64,
    pub merge_radius: f64,
    /// Ergodic constant of the first success; `None` when nothing converged.
    pub lambda: Option<f64>,
    /// Distinct classes in discovery order, pairwise farther than the merge radius.
    pub found: Vec<BiasClass>,
    pub log: Vec<StartRecord>,
}

impl BiasProbe {
    pub fn is_unsolved(&self) -> bool {
        self.found.is_empty()
    }
}

struct Collector<'a> {
    op: &'a ShapleyOperator,
    cfg: &'a SolveConfig,
    probe: BiasProbe,
}

impl Collector<'_> {
    fn run(&mut self, kind: StartKind, start: Vec<f64>) -> Result<()> {
        let outcome = match solve_ergodic(self.op, &self.probe.g, self.cfg, Some(&start)) {
            Ok(sol) => {
                // re-evaluate instead of trusting the solver's bookkeeping
                let (lambda, residual) =
                    ergodic_residual(self.op, &self.probe.g, sol.bias.representative())?;
                if residual > self.cfg.tol {
                    StartOutcome::Failed {
                        reason: StopReason::Stalled,
                        residual,
                    }
                } else {
                    let allowed = 10.0 * self.cfg.tol;
                    match self.probe.lambda {
                        None => self.probe.lambda = Some(lambda),
                        Some(first) if (first - lambda).abs() > allowed => {
                            return Err(Error::InconsistentLambda {
                                first,
                                other: lambda,
                                allowed,
                            })
                        }
                        Some(_) => {}
                    }
                    let class = self.insert(sol.bias, residual);
                    StartOutcome::Converged {
                        class,
                        iterations: sol.iterations,
                        residual,
                    }
                }
            }
            Err(SolveError::NotConverged(nc)) => StartOutcome::Failed {
                reason: nc.reason,
                residual: nc.residual,
            },
            Err(SolveError::Input(e)) => return Err(e),
        };
        self.probe.log.push(StartRecord {
            kind,
            start,
            outcome,
        });
        Ok(())
    }

    fn insert(&mut self, bias: QuotientPoint, residual: f64) -> usize {
        let eps = self.probe.merge_radius;
        if let Some(k) = self
            .probe
            .found
            .iter()
            .position(|c| c.bias.distance(&bias) <= eps)
        {
            return k;
        }
        self.probe.found.push(BiasClass { bias, residual });
        self.probe.found.len() - 1
    }
}

/// Solves from `starts` random points in `[-R, R]^n`, `R = 10·(1 + ‖g‖_∞)`,
/// drawn from `cfg.seed`; with `explore`, re-solves from `u ± δ·e_i` for every
/// class found by the random starts. Classes merge at radius `100·tol`.
pub fn bias_set_probe(
    op: &ShapleyOperator,
    g: &[f64],
    starts: usize,
    cfg: &SolveConfig,
    explore: bool,
) -> Result<BiasProbe> {
    cfg.validate()?;
    let n = op.dim();
    check_dim("perturbation g", n, g)?;
    let radius = 10.0 * (1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut rng = seeds::rng(cfg.seed);
    let mut c = Collector {
        op,
        cfg,
        probe: BiasProbe {
            g: g.to_vec(),
            tol: cfg.tol,
            merge_radius: merge_radius(cfg.tol),
            lambda: None,
            found: Vec::new(),
            log: Vec::new(),
        },
    };
    for _ in 0..starts {
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
        c.run(StartKind::Random, x0)?;
    }
    if explore {
        let seeds: Vec<Vec<f64>> = c
            .probe
            .found
            .iter()
            .map(|cl| cl.bias.representative().to_vec())
            .collect();
        for u in seeds {
            for i in 0..n {
                for delta in EXPLORE_DELTAS {
                    for sign in [1.0, -1.0] {
                        let mut x0 = u.clone();
                        x0[i] += sign * delta;
                        c.run(StartKind::Explore, x0)?;
                    }
                }
            }
        }
    }
    Ok(c.probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Uniqueness {
    Unique {
        bias: QuotientPoint,
    },
    Multiple {
        first: QuotientPoint,
        second: QuotientPoint,
        distance: f64,
    },
    Unsolved,
}

impl Uniqueness {
    pub fn label(&self) -> &'static str {
        match self {
            Uniqueness::Unique { .. } => "Unique",
            Uniqueness::Multiple { .. } => "Multiple",
            Uniqueness::Unsolved => "Unsolved",
        }
    }
}

/// `Multiple` returns the first pair of verified classes farther apart than
/// `eps`; classes whose stored residual exceeds the probe tolerance are
/// ignored.
pub fn uniqueness_verdict(probe: &BiasProbe, eps: f64) -> Uniqueness {
    let verified: Vec<&BiasClass> = probe
        .found
        .iter()
        .filter(|c| c.residual <= probe.tol)
        .collect();
    for (a, ca) in verified.iter().enumerate() {
        for cb in &verified[a + 1..] {
            let d = ca.bias.distance(&cb.bias);
            if d > eps {
                return Uniqueness::Multiple {
                    first: ca.bias.clone(),
                    second: cb.bias.clone(),
                    distance: d,
                };
            }
        }
    }
    match verified.first() {
        Some(c) => Uniqueness::Unique {
            bias: c.bias.clone(),
        },
        None => Uniqueness::Unsolved,
    }
}

/// A rectangular grid in the plane of two coordinates of `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    /// Zero-based coordinate indices of the two axes.
    pub axes: (usize, usize),
    pub range1: (f64, f64),
    pub range2: (f64, f64),
    pub step: f64,
    /// Full perturbation whose two axis coordinates are overwritten per cell.
    pub base: Vec<f64>,
    pub starts: usize,
    pub explore: bool,
}

impl ScanSpec {
    /// The plane `g_3 = 0` over `[-5, 20] × [-20, 7]` at step 0.5.
    pub fn figure1() -> Self {
        Self {
            axes: (0, 1),
            range1: (-5.0, 20.0),
            range2: (-20.0, 7.0),
            step: 0.5,
            base: vec![0.0; 3],
            starts: DEFAULT_STARTS,
            explore: true,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if n < 2 {
            return Err(Error::invalid("operator", "scans need dimension at least 2"));
        }
        check_dim("base perturbation", n, &self.base)?;
        let (a, b) = self.axes;
        if a >= n || b >= n || a == b {
            return Err(Error::invalid(
                "axes",
                format!("need two distinct indices below {n}, got ({a}, {b})"),
            ));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", "must be positive"));
        }
        for (name, (lo, hi)) in [("range1", self.range1), ("range2", self.range2)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(name, format!("bad range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn ticks(&self, (lo, hi): (f64, f64)) -> Vec<f64> {
        let count = ((hi - lo) / self.step + 1e-9).floor() as usize;
        (0..=count).map(|k| lo + k as f64 * self.step).collect()
    }

    /// Grid coordinates along each axis.
    pub fn grid(&self) -> (Vec<f64>, Vec<f64>) {
        (self.ticks(self.range1), self.ticks(self.range2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    /// Grid indices along the two axes.
    pub index: (usize, usize),
    pub g: Vec<f64>,
    pub lambda: Option<f64>,
    pub verdict: String,
    pub num_classes: usize,
    pub biases: Vec<QuotientPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub spec: ScanSpec,
    pub tol: f64,
    pub seed: u64,
    /// Cells sorted by `(index.0, index.1)`.
    pub cells: Vec<CellRecord>,
}

fn scan_cell(
    op: &ShapleyOperator,
    spec: &ScanSpec,
    cfg: &SolveConfig,
    index: (usize, usize),
    g: Vec<f64>,
    seed: u64,
) -> CellRecord {
    let cell_cfg = SolveConfig {
        seed,
        ..cfg.clone()
    };
    let eps = merge_radius(cfg.tol);
    match bias_set_probe(op, &g, spec.starts, &cell_cfg, spec.explore) {
        Ok(probe) => {
            let verdict = uniqueness_verdict(&probe, eps);
            CellRecord {
                index,
                g,
                lambda: probe.lambda,
                verdict: verdict.label().to_string(),
                num_classes: probe.found.len(),
                biases: probe.found.into_iter().map(|c| c.bias).collect(),
                error: None,
            }
        }
        Err(e) => CellRecord {
            index,
            g,
            lambda: None,
            verdict: Uniqueness::Unsolved.label().to_string(),
            num_classes: 0,
            biases: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Probes every grid cell. Cells use seeds derived from `cfg.seed` and their
/// row-major position, so the result does not depend on `workers`.
pub fn scan_plane(
    op: &ShapleyOperator,
    spec: &ScanSpec,
    cfg: &SolveConfig,
    workers: Option<usize>,
) -> Result<ScanResult> {
    cfg.validate()?;
    spec.validate(op.dim())?;
    let (t1, t2) = spec.grid();
    let jobs: Vec<((usize, usize), Vec<f64>)> = t1
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| {
            t2.iter().enumerate().map(move |(j, &b)| ((i, j), (a, b)))
        })
        .map(|(idx, (a, b))| {
            let mut g = spec.base.clone();
            g[spec.axes.0] = a;
            g[spec.axes.1] = b;
            (idx, g)
        })
        .collect();
    let work = || -> Vec<CellRecord> {
        jobs.par_iter()
            .enumerate()
            .map(|(k, (idx, g))| {
                scan_cell(op, spec, cfg, *idx, g.clone(), seeds::derive_seed(cfg.seed, k as u64))
            })
            .collect()
    };
    let cells = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::invalid("workers", e.to_string()))?
            .install(work),
        None => work(),
    };
    Ok(ScanResult {
        spec: spec.clone(),
        tol: cfg.tol,
        seed: cfg.seed,
        cells,
    })
}

/// Writes `g1..gn,lambda,verdict,num_classes,bias_0..bias_{n-1}`; the bias
/// columns hold the first class found.
pub fn write_scan_csv<W: Write>(result: &ScanResult, out: W) -> Result<()> {
    let n = result.spec.base.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=n).map(|i| format!("g{i}")).collect();
    header.extend(["lambda", "verdict", "num_classes"].map(String::from));
    header.extend((0..n).map(|i| format!("bias_{i}")));
    w.write_record(&header)?;
    for c in &result.cells {
        let mut row: Vec<String> = c.g.iter().map(f64::to_string).collect();
        row.push(c.lambda.map(|l| l.to_string()).unwrap_or_default());
        row.push(c.verdict.clone());
        row.push(c.num_classes.to_string());
        match c.biases.first() {
            Some(b) => row.extend(b.representative().iter().map(f64::to_string)),
            None => row.extend((0..n).map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A line `{point + t·direction}` in the scanned plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLine {
    pub point: (f64, f64),
    /// Unit direction.
    pub direction: (f64, f64),
    pub members: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub lines: Vec<FittedLine>,
    pub max_lines: usize,
    pub tolerance: f64,
    /// Points left over once `max_lines` lines were used.
    pub uncovered: usize,
    pub max_deviation: f64,
}

impl LineFit {
    pub fn covered(&self) -> bool {
        self.uncovered == 0
    }
}

fn line_distance(p: (f64, f64), q: (f64, f64), dir: (f64, f64)) -> f64 {
    ((p.0 - q.0) * dir.1 - (p.1 - q.1) * dir.0).abs()
}

/// Greedy cover: repeatedly takes the line through two remaining points that
/// is within `tolerance` of the most remaining points, and removes them.
pub fn fit_lines(points: &[(f64, f64)], max_lines: usize, tolerance: f64) -> LineFit {
    let mut rest: Vec<(f64, f64)> = points.to_vec();
    let mut lines = Vec::new();
    while !rest.is_empty() && lines.len() < max_lines {
        let mut best: Option<(usize, (f64, f64), (f64, f64))> = None;
        if rest.len() == 1 {
            best = Some((1, rest[0], (1.0, 0.0)));
        }
        for a in 0..rest.len() {
            for b in a + 1..rest.len() {
                let (dx, dy) = (rest[b].0 - rest[a].0, rest[b].1 - rest[a].1);
                let len = dx.hypot(dy);
                if len == 0.0 {
                    continue;
                }
                let dir = (dx / len, dy / len);
                let count = rest
                    .iter()
                    .filter(|&&p| line_distance(p, rest[a], dir) <= tolerance)
                    .count();
                if best.is_none_or(|(c, _, _)| count > c) {
                    best = Some((count, rest[a], dir));
                }
            }
        }
        let Some((_, point, direction)) = best else { break };
        let (inside, outside): (Vec<_>, Vec<_>) = rest
            .into_iter()
            .partition(|&p| line_distance(p, point, direction) <= tolerance);
        let max_deviation = inside
            .iter()
            .map(|&p| line_distance(p, point, direction))
            .fold(0.0, f64::max);
        lines.push(FittedLine {
            point,
            direction,
            members: inside.len(),
            max_deviation,
        });
        rest = outside;
    }
    LineFit {
        max_deviation: lines.iter().map(|l| l.max_deviation).fold(0.0, f64::max),
        lines,
        max_lines,
        tolerance,
        uncovered: rest.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub cells: usize,
    pub multiple_cells: usize,
    pub unsolved_cells: usize,
    pub multiple_fraction: f64,
    /// Number of 3×3 blocks whose nine cells are all `Multiple`.
    pub full_multiple_blocks: usize,
    /// Smallest Hilbert distance between the witness pair over `Multiple` cells.
    pub min_multiple_distance: Option<f64>,
    pub line_fit: LineFit,
}

/// Aggregates a scan: fraction of `Multiple` cells, 3×3 block check and a
/// cover of the `Multiple` cells by at most `max_lines` lines within one step.
pub fn summarize_scan(result: &ScanResult, max_lines: usize) -> ScanSummary {
    let (t1, t2) = result.spec.grid();
    let mut multiple = vec![vec![false; t2.len()]; t1.len()];
    let mut points = Vec::new();
    let mut unsolved = 0;
    let mut min_distance: Option<f64> = None;
    for c in &result.cells {
        match c.verdict.as_str() {
            "Multiple" => {
                multiple[c.index.0][c.index.1] = true;
                points.push((t1[c.index.0], t2[c.index.1]));
                let mut d = 0.0f64;
                for (a, ba) in c.biases.iter().enumerate() {
                    for bb in &c.biases[a + 1..] {
                        d = d.max(hilbert_distance(ba.representative(), bb.representative()));
                    }
                }
                min_distance = Some(min_distance.map_or(d, |m| m.min(d)));
            }
            "Unsolved" => unsolved += 1,
            _ => {}
        }
    }
    let mut blocks = 0;
    for i in 0..t1.len().saturating_sub(2) {
        for j in 0..t2.len().saturating_sub(2) {
            if (i..i + 3).all(|a| (j..j + 3).all(|b| multiple[a][b])) {
                blocks += 1;
            }
        }
    }
    let cells = result.cells.len();
    ScanSummary {
        cells,
        multiple_cells: points.len(),
        unsolved_cells: unsolved,
        multiple_fraction: if cells == 0 {
            0.0
        } else {
            points.len() as f64 / cells as f64
        },
        full_multiple_blocks: blocks,
        min_multiple_distance: min_distance,
        line_fit: fit_lines(&points, max_lines, result.spec.step),
    }
}
