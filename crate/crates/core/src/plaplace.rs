//! Discrete p-Laplacian Dirichlet problems on weighted graphs.
//!
//! `(L_p v)_i = Σ_j C_ij(v_i - v_j)|C_ij(v_i - v_j)|^{p-2}`. The problem asks
//! for `v` with `(L_p v)_i = -g_i` at interior vertices and `v = w` on the
//! boundary, which is the stationarity condition of the convex energy
//! `Σ_edges |C(v_i - v_j)|^p / (pC) + Σ_interior g_i v_i`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{check_dim, Error, Result};

/// Allowed deviation from the boundary values in [`PLaplacianProblem::energy`].
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

/// Armijo sufficient-decrease constant.
const ARMIJO: f64 = 1e-4;

/// Floor on `|t|` in the Hessian weights, so that `p < 2` stays finite.
const HESSIAN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Label {
    Name(String),
    Number(i64),
}

impl Label {
    fn into_string(self) -> String {
        match self {
            Label::Name(s) => s,
            Label::Number(k) => k.to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawEdge {
    u: Label,
    v: Label,
    c: f64,
}

#[derive(Debug, Deserialize)]
struct RawProblem {
    vertices: Vec<Label>,
    edges: Vec<RawEdge>,
    p: f64,
    boundary: BTreeMap<String, f64>,
    #[serde(default)]
    current: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct RawProblemOut<'a> {
    vertices: &'a [String],
    edges: Vec<RawEdgeOut<'a>>,
    p: f64,
    boundary: BTreeMap<&'a str, f64>,
    current: BTreeMap<&'a str, f64>,
}

#[derive(Serialize)]
struct RawEdgeOut<'a> {
    u: &'a str,
    v: &'a str,
    c: f64,
}

/// A validated Dirichlet problem: connected graph, positive conductances,
/// `p > 1`, nonempty proper boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PLaplacianProblem {
    labels: Vec<String>,
    edges: Vec<Edge>,
    p: f64,
    /// Boundary value per vertex, `None` in the interior.
    boundary: Vec<Option<f64>>,
    /// Current per vertex, zero on the boundary.
    current: Vec<f64>,
    interior: Vec<usize>,
}

impl PLaplacianProblem {
    /// Vertices are `0..num_vertices`; `boundary` and `current` map vertex
    /// indices to values.
    pub fn new(
        num_vertices: usize,
        edges: Vec<Edge>,
        p: f64,
        boundary: &[(usize, f64)],
        current: &[(usize, f64)],
    ) -> Result<Self> {
        let labels = (0..num_vertices).map(|i| i.to_string()).collect();
        Self::build(labels, edges, p, boundary, current)
    }

    fn build(
        labels: Vec<String>,
        edges: Vec<Edge>,
        p: f64,
        boundary: &[(usize, f64)],
        current: &[(usize, f64)],
    ) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::invalid("vertices", "need at least two vertices"));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::invalid("p", format!("must be finite and > 1, got {p}")));
        }
        for (k, e) in edges.iter().enumerate() {
            if e.u >= n || e.v >= n {
                return Err(Error::invalid(format!("edges[{k}]"), "unknown vertex"));
            }
            if e.u == e.v {
                return Err(Error::invalid(format!("edges[{k}]"), "self-loop"));
            }
            if !(e.c > 0.0 && e.c.is_finite()) {
                return Err(Error::invalid(
                    format!("edges[{k}].c"),
                    format!("conductance must be finite and positive, got {}", e.c),
                ));
            }
        }
        let mut bvals = vec![None; n];
        for &(i, w) in boundary {
            if i >= n {
                return Err(Error::invalid("boundary", format!("unknown vertex {i}")));
            }
            if !w.is_finite() {
                return Err(Error::invalid(format!("boundary.{}", labels[i]), "value must be finite"));
            }
            bvals[i] = Some(w);
        }
        let nb = bvals.iter().filter(|b| b.is_some()).count();
        if nb == 0 || nb == n {
            return Err(Error::invalid(
                "boundary",
                "must be nonempty and leave at least one interior vertex",
            ));
        }
        let mut cur = vec![0.0; n];
        for &(i, g) in current {
            if i >= n {
                return Err(Error::invalid("current", format!("unknown vertex {i}")));
            }
            if bvals[i].is_some() {
                return Err(Error::invalid(
                    format!("current.{}", labels[i]),
                    "current is only defined at interior vertices",
                ));
            }
            if !g.is_finite() {
                return Err(Error::invalid(format!("current.{}", labels[i]), "value must be finite"));
            }
            cur[i] = g;
        }
        if !connected(n, &edges) {
            return Err(Error::invalid("edges", "graph is not connected"));
        }
        let interior = (0..n).filter(|&i| bvals[i].is_none()).collect();
        Ok(Self {
            labels,
            edges,
            p,
            boundary: bvals,
            current: cur,
            interior,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawProblem = serde_json::from_str(text)?;
        let labels: Vec<String> = raw.vertices.into_iter().map(Label::into_string).collect();
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::invalid("vertices", format!("duplicate vertex `{l}`")));
            }
        }
        let lookup = |field: String, l: &str| -> Result<usize> {
            index
                .get(l)
                .copied()
                .ok_or_else(|| Error::invalid(field, format!("unknown vertex `{l}`")))
        };
        let mut edges = Vec::with_capacity(raw.edges.len());
        for (k, e) in raw.edges.into_iter().enumerate() {
            edges.push(Edge {
                u: lookup(format!("edges[{k}].u"), &e.u.into_string())?,
                v: lookup(format!("edges[{k}].v"), &e.v.into_string())?,
                c: e.c,
            });
        }
        let boundary = raw
            .boundary
            .iter()
            .map(|(l, &w)| Ok((lookup(format!("boundary.{l}"), l)?, w)))
            .collect::<Result<Vec<_>>>()?;
        let current = raw
            .current
            .iter()
            .map(|(l, &g)| Ok((lookup(format!("current.{l}"), l)?, g)))
            .collect::<Result<Vec<_>>>()?;
        Self::build(labels, edges, raw.p, &boundary, &current)
    }

    pub fn to_json(&self) -> Result<String> {
        let out = RawProblemOut {
            vertices: &self.labels,
            edges: self
                .edges
                .iter()
                .map(|e| RawEdgeOut {
                    u: &self.labels[e.u],
                    v: &self.labels[e.v],
                    c: e.c,
                })
                .collect(),
            p: self.p,
            boundary: self
                .boundary
                .iter()
                .enumerate()
                .filter_map(|(i, b)| b.map(|w| (self.labels[i].as_str(), w)))
                .collect(),
            current: self
                .interior
                .iter()
                .filter(|&&i| self.current[i] != 0.0)
                .map(|&i| (self.labels[i].as_str(), self.current[i]))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    pub fn num_vertices(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_value(&self, i: usize) -> Option<f64> {
        self.boundary[i]
    }

    /// Current on every vertex (zero on the boundary).
    pub fn current(&self) -> &[f64] {
        &self.current
    }

    /// Same graph and boundary with another exponent.
    pub fn with_p(&self, p: f64) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::invalid("p", format!("must be finite and > 1, got {p}")));
        }
        Ok(Self { p, ..self.clone() })
    }

    /// Same graph and boundary with another interior current.
    pub fn with_current(&self, current: &[f64]) -> Result<Self> {
        check_dim("current", self.interior.len(), current)?;
        let mut cur = vec![0.0; self.num_vertices()];
        for (&i, &g) in self.interior.iter().zip(current) {
            cur[i] = g;
        }
        Ok(Self {
            current: cur,
            ..self.clone()
        })
    }

    /// Full vector with boundary values and the given interior values.
    pub fn assemble(&self, interior: &[f64]) -> Result<Vec<f64>> {
        check_dim("interior values", self.interior.len(), interior)?;
        let mut v: Vec<f64> = self.boundary.iter().map(|b| b.unwrap_or(0.0)).collect();
        for (&i, &x) in self.interior.iter().zip(interior) {
            v[i] = x;
        }
        Ok(v)
    }

    #[inline]
    fn flux(&self, e: &Edge, v: &[f64]) -> f64 {
        let t = e.c * (v[e.u] - v[e.v]);
        if t == 0.0 {
            0.0
        } else {
            t.signum() * t.abs().powf(self.p - 1.0)
        }
    }

    fn laplacian_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for e in &self.edges {
            let f = self.flux(e, v);
            out[e.u] += f;
            out[e.v] -= f;
        }
    }

    fn check_boundary(&self, v: &[f64]) -> Result<()> {
        for (i, b) in self.boundary.iter().enumerate() {
            if let Some(w) = b {
                if (v[i] - w).abs() > BOUNDARY_TOLERANCE {
                    return Err(Error::invalid(
                        format!("v[{i}]"),
                        format!("boundary vertex `{}` must equal {w}, got {}", self.labels[i], v[i]),
                    ));
                }
            }
        }
        Ok(())
    }

    fn energy_unchecked(&self, v: &[f64]) -> f64 {
        let p = self.p;
        let edges: f64 = self
            .edges
            .iter()
            .map(|e| (e.c * (v[e.u] - v[e.v])).abs().powf(p) / (p * e.c))
            .sum();
        let source: f64 = self.interior.iter().map(|&i| self.current[i] * v[i]).sum();
        edges + source
    }

    /// `E(v + s·d) - E(v)` for an interior direction `d`, summed edge by edge
    /// so that decrements far below the rounding of `E(v)` stay visible.
    fn energy_change(&self, v: &[f64], d: &[f64], s: f64, local: &[Option<usize>]) -> f64 {
        let p = self.p;
        let step = |i: usize| local[i].map_or(0.0, |k| s * d[k]);
        let edges: f64 = self
            .edges
            .iter()
            .map(|e| {
                let t = e.c * (v[e.u] - v[e.v]);
                let dt = e.c * (step(e.u) - step(e.v));
                let diff = if t != 0.0 && dt.abs() < 0.5 * t.abs() {
                    // |t + dt|^p - |t|^p = |t|^p · (exp(p·ln(1 + dt/t)) - 1)
                    t.abs().powf(p) * (p * (dt / t).ln_1p()).exp_m1()
                } else {
                    (t + dt).abs().powf(p) - t.abs().powf(p)
                };
                diff / (p * e.c)
            })
            .sum();
        let source: f64 = self
            .interior
            .iter()
            .zip(d)
            .map(|(&i, dk)| self.current[i] * s * dk)
            .sum();
        edges + source
    }

    /// `(L_p v)_i + g_i` on the interior vertices, in [`Self::interior`] order.
    fn gradient_unchecked(&self, v: &[f64], scratch: &mut [f64]) -> Vec<f64> {
        self.laplacian_into(v, scratch);
        self.interior
            .iter()
            .map(|&i| scratch[i] + self.current[i])
            .collect()
    }

    /// Interior block of the Hessian, edge weights `(p-1)·C·max(|t|, τ)^{p-2}`.
    fn hessian(&self, v: &[f64], local: &[Option<usize>]) -> DMatrix<f64> {
        let m = self.interior.len();
        let mut h = DMatrix::zeros(m, m);
        for e in &self.edges {
            let t = (e.c * (v[e.u] - v[e.v])).abs();
            let w = if self.p == 2.0 {
                e.c
            } else {
                (self.p - 1.0) * e.c * t.max(HESSIAN_FLOOR).powf(self.p - 2.0)
            };
            let (a, b) = (local[e.u], local[e.v]);
            if let Some(a) = a {
                h[(a, a)] += w;
            }
            if let Some(b) = b {
                h[(b, b)] += w;
            }
            if let (Some(a), Some(b)) = (a, b) {
                h[(a, b)] -= w;
                h[(b, a)] -= w;
            }
        }
        h
    }

    fn local_index(&self) -> Vec<Option<usize>> {
        let mut local = vec![None; self.num_vertices()];
        for (k, &i) in self.interior.iter().enumerate() {
            local[i] = Some(k);
        }
        local
    }
}

fn connected(n: usize, edges: &[Edge]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.u].push(e.v);
        adj[e.v].push(e.u);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// `L_p(v)` on every vertex.
pub fn apply_plaplacian(problem: &PLaplacianProblem, v: &[f64]) -> Result<Vec<f64>> {
    check_dim("potential v", problem.num_vertices(), v)?;
    let mut out = vec![0.0; v.len()];
    problem.laplacian_into(v, &mut out);
    Ok(out)
}

/// Energy of a full vector that agrees with the boundary values.
pub fn energy(problem: &PLaplacianProblem, v: &[f64]) -> Result<f64> {
    check_dim("potential v", problem.num_vertices(), v)?;
    problem.check_boundary(v)?;
    Ok(problem.energy_unchecked(v))
}

/// Gradient of [`energy`] in the interior coordinates: `(L_p v)_i + g_i`.
pub fn energy_gradient(problem: &PLaplacianProblem, v: &[f64]) -> Result<Vec<f64>> {
    check_dim("potential v", problem.num_vertices(), v)?;
    problem.check_boundary(v)?;
    let mut scratch = vec![0.0; v.len()];
    Ok(problem.gradient_unchecked(v, &mut scratch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletSolution {
    pub v: Vec<f64>,
    /// `max_i |(L_p v)_i + g_i|` over interior vertices.
    pub residual: f64,
    pub iterations: usize,
    /// Energy before the first step and after every accepted step.
    pub energy_trace: Vec<f64>,
    /// Energy change of every accepted step, all negative.
    pub energy_decrements: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletNotConverged {
    pub last_iterate: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum DirichletError {
    #[error(transparent)]
    Input(#[from] Error),
    #[error("p-Laplacian descent did not converge after {} steps, residual {:e}", .0.iterations, .0.residual)]
    NotConverged(DirichletNotConverged),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirichletConfig {
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for DirichletConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_steps: 100_000,
        }
    }
}

fn sup(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Harmonic extension: the `p = 2` solution, by a direct symmetric solve.
fn linear_solve(problem: &PLaplacianProblem) -> Result<Vec<f64>> {
    let local = problem.local_index();
    let lin = problem.with_p(2.0)?;
    let base = problem.assemble(&vec![0.0; problem.interior.len()])?;
    let h = lin.hessian(&base, &local);
    let mut scratch = vec![0.0; base.len()];
    let rhs = DVector::from_vec(lin.gradient_unchecked(&base, &mut scratch)) * -1.0;
    let x = h
        .cholesky()
        .ok_or_else(|| Error::invalid("edges", "interior Laplacian is singular"))?
        .solve(&rhs);
    problem.assemble(x.as_slice())
}

/// Solves `(L_p v)_i = -g_i` on the interior with `v = w` on the boundary.
///
/// `p = 2` is one symmetric linear solve. Otherwise the energy is minimized
/// from the harmonic extension by Newton-type descent (Hessian weights floored
/// at `|t| = 1e-6`) with Armijo backtracking; a step is accepted only when the
/// energy change, summed edge by edge, is strictly negative. Convergence is declared on the residual.
pub fn dirichlet_solve(
    problem: &PLaplacianProblem,
    cfg: &DirichletConfig,
) -> std::result::Result<DirichletSolution, DirichletError> {
    if !(cfg.tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive").into());
    }
    let mut v = linear_solve(problem)?;
    let mut scratch = vec![0.0; v.len()];
    let mut grad = problem.gradient_unchecked(&v, &mut scratch);
    let mut residual = sup(&grad);
    let mut e = problem.energy_unchecked(&v);
    let mut trace = vec![e];
    let mut decrements = Vec::new();
    let local = problem.local_index();

    let mut steps = 0;
    while residual > cfg.tol {
        if steps >= cfg.max_steps {
            return Err(DirichletError::NotConverged(DirichletNotConverged {
                last_iterate: v,
                residual,
                iterations: steps,
            }));
        }
        let g = DVector::from_column_slice(&grad);
        let h = problem.hessian(&v, &local);
        let mut d = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -g.clone(),
        };
        if d.dot(&g) >= 0.0 {
            d = -g.clone();
        }
        let slope = d.dot(&g);
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let de = problem.energy_change(&v, d.as_slice(), s, &local);
            if de < 0.0 && de <= ARMIJO * s * slope {
                let mut cand = v.clone();
                for (k, &i) in problem.interior.iter().enumerate() {
                    cand[i] += s * d[k];
                }
                accepted = Some((cand, de));
                break;
            }
            s *= 0.5;
        }
        let Some((cand, de)) = accepted else {
            // no representable decrease is left along the direction
            return Err(DirichletError::NotConverged(DirichletNotConverged {
                last_iterate: v,
                residual,
                iterations: steps,
            }));
        };
        v = cand;
        e += de;
        trace.push(e);
        decrements.push(de);
        grad = problem.gradient_unchecked(&v, &mut scratch);
        residual = sup(&grad);
        steps += 1;
    }
    Ok(DirichletSolution {
        v,
        residual,
        iterations: steps,
        energy_trace: trace,
        energy_decrements: decrements,
    })
}
