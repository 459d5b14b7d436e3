//! Value iteration, mean-payoff estimates and the ergodic equation
//! `g + T(u) = λ·1 + u`.
//!
//! [`solve_ergodic`] runs the averaged (Krasnoselskii-Mann) iteration
//! `u ← [(1-θ)·u + θ·(g + T(u))]` on canonical representatives, which is the
//! averaged map of the quotient operator `[g + T]`. When the Hilbert residual
//! stops halving over a window of iterations, a Newton step on the ergodic
//! equation is attempted with the selected transition rows as Jacobian; it is
//! kept only if it lowers the residual. Set [`SolveConfig::accelerate`] to
//! `false` for the plain averaged iteration.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{check_dim, Error, Result};
use crate::operator::ShapleyOperator;
use crate::quotient::{canonicalize, min_max, spread, QuotientPoint};

/// Iterations between two stagnation checks.
const STALL_WINDOW: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    /// Threshold on the Hilbert seminorm of `g + T(u) - u`.
    pub tol: f64,
    pub max_iter: usize,
    /// Averaging weight θ in `(0, 1)`.
    pub damping: f64,
    /// Hilbert seminorm of the iterate beyond which the solve gives up.
    pub divergence_radius: f64,
    pub seed: u64,
    pub accelerate: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 1_000_000,
            damping: 0.5,
            divergence_radius: 1e8,
            seed: 0,
            accelerate: true,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid("tol", format!("must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::invalid(
                "damping",
                format!("must lie in (0, 1), got {}", self.damping),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        if !(self.divergence_radius > 0.0) {
            return Err(Error::invalid("divergence_radius", "must be positive"));
        }
        Ok(())
    }
}

/// A solution `(λ, u)` of `g + T(u) = λ·1 + u` up to `residual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicSolution {
    pub lambda: f64,
    pub bias: QuotientPoint,
    /// Hilbert seminorm of `g + T(u) - u - λ·1`.
    pub residual: f64,
    pub iterations: usize,
    pub newton_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    /// The iterate left the divergence radius.
    Diverged,
    /// The iteration cap was reached.
    Stalled,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Diverged => "diverged",
            StopReason::Stalled => "stalled",
        })
    }
}

/// Divergence is evidence of an unsolvable perturbation, not a proof.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotConverged {
    pub reason: StopReason,
    pub last_iterate: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Input(#[from] Error),
    #[error("not converged ({}) after {} iterations, residual {:e}", .0.reason, .0.iterations, .0.residual)]
    NotConverged(NotConverged),
}

impl SolveError {
    pub fn not_converged(&self) -> Option<&NotConverged> {
        match self {
            SolveError::NotConverged(nc) => Some(nc),
            SolveError::Input(_) => None,
        }
    }
}

/// `λ` as the midpoint of `g + T(u) - u` and its Hilbert seminorm.
pub fn ergodic_residual(op: &ShapleyOperator, g: &[f64], u: &[f64]) -> Result<(f64, f64)> {
    let n = op.dim();
    check_dim("perturbation g", n, g)?;
    check_dim("bias", n, u)?;
    let mut tu = vec![0.0; n];
    op.apply_into(u, &mut tu);
    let r: Vec<f64> = (0..n).map(|i| g[i] + tu[i] - u[i]).collect();
    let (lo, hi) = min_max(&r);
    Ok((0.5 * (lo + hi), hi - lo))
}

/// Solves the ergodic equation for `g + T` starting from `x0` (zero if absent).
pub fn solve_ergodic(
    op: &ShapleyOperator,
    g: &[f64],
    cfg: &SolveConfig,
    x0: Option<&[f64]>,
) -> std::result::Result<ErgodicSolution, SolveError> {
    cfg.validate()?;
    let n = op.dim();
    check_dim("perturbation g", n, g)?;
    let mut u = match x0 {
        Some(x) => {
            check_dim("initial point", n, x)?;
            x.to_vec()
        }
        None => vec![0.0; n],
    };
    canonicalize(&mut u);

    let theta = cfg.damping;
    let mut tu = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut window_res = f64::INFINITY;
    let mut newton_steps = 0;

    let mut it = 0;
    loop {
        op.apply_into(&u, &mut tu);
        for i in 0..n {
            r[i] = g[i] + tu[i] - u[i];
        }
        let (lo, hi) = min_max(&r);
        let res = hi - lo;
        if res <= cfg.tol {
            return Ok(ErgodicSolution {
                lambda: 0.5 * (lo + hi),
                bias: QuotientPoint::from_vec(u),
                residual: res,
                iterations: it,
                newton_steps,
            });
        }
        let stop = |reason| {
            SolveError::NotConverged(NotConverged {
                reason,
                last_iterate: u.clone(),
                residual: res,
                iterations: it,
            })
        };
        if !res.is_finite() || spread(&u) > cfg.divergence_radius {
            return Err(stop(StopReason::Diverged));
        }
        if it >= cfg.max_iter {
            return Err(stop(StopReason::Stalled));
        }
        it += 1;

        if cfg.accelerate && it % STALL_WINDOW == 0 {
            let stalled = res > 0.5 * window_res;
            window_res = res;
            if stalled {
                if let Some(next) = newton_step(op, g, &u, &r, res) {
                    u = next;
                    newton_steps += 1;
                    continue;
                }
            }
        }

        // (1-θ)·u + θ·(g + T(u)) = u + θ·r, which rounds once
        for i in 0..n {
            u[i] += theta * r[i];
        }
        canonicalize(&mut u);
    }
}

/// One safeguarded Newton step on `g + T(u) - u = λ·1`, pinning the
/// coordinate where `u` vanishes. Returns the new canonical iterate if it
/// decreases the Hilbert residual.
fn newton_step(
    op: &ShapleyOperator,
    g: &[f64],
    u: &[f64],
    r: &[f64],
    res: f64,
) -> Option<Vec<f64>> {
    let n = u.len();
    let pin = u.iter().position(|&v| v == 0.0).unwrap_or(0);
    let jac = op.selection_jacobian(u);
    let mut m = DMatrix::<f64>::identity(n, n) - jac;
    m.column_mut(pin).fill(1.0);
    let z = m.lu().solve(&DVector::from_column_slice(r))?;
    if z.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut step = z.as_slice().to_vec();
    step[pin] = 0.0;

    let mut tu = vec![0.0; n];
    let mut t = 1.0;
    for _ in 0..40 {
        let mut cand: Vec<f64> = u.iter().zip(&step).map(|(a, d)| a + t * d).collect();
        canonicalize(&mut cand);
        op.apply_into(&cand, &mut tu);
        let resid: Vec<f64> = (0..n).map(|i| g[i] + tu[i] - cand[i]).collect();
        let new_res = spread(&resid);
        if new_res.is_finite() && new_res < (1.0 - 1e-4 * t) * res {
            return Some(cand);
        }
        t *= 0.5;
    }
    None
}

/// The averaged iterates `u_{k+1} = [(1-θ)·u_k + θ·(g + T(u_k))]`, starting
/// at the class of `x0`. Yields canonical representatives, `u_0` first.
pub struct DampedIterates<'a> {
    op: &'a ShapleyOperator,
    g: Vec<f64>,
    theta: f64,
    current: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> DampedIterates<'a> {
    pub fn new(op: &'a ShapleyOperator, g: &[f64], theta: f64, x0: &[f64]) -> Result<Self> {
        check_dim("perturbation g", op.dim(), g)?;
        check_dim("initial point", op.dim(), x0)?;
        let mut current = x0.to_vec();
        canonicalize(&mut current);
        Ok(Self {
            op,
            g: g.to_vec(),
            theta,
            current,
            scratch: vec![0.0; x0.len()],
        })
    }
}

impl Iterator for DampedIterates<'_> {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        let out = self.current.clone();
        self.op.apply_into(&self.current, &mut self.scratch);
        for ((u, t), g) in self.current.iter_mut().zip(&self.scratch).zip(&self.g) {
            *u = (1.0 - self.theta) * *u + self.theta * (g + t);
        }
        canonicalize(&mut self.current);
        Some(out)
    }
}

/// `v^0 = 0, v^l = g + T(v^{l-1})` for `l = 1..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTrace {
    values: Vec<Vec<f64>>,
}

impl ValueTrace {
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `v^l`.
    pub fn at(&self, l: usize) -> Option<&[f64]> {
        self.values.get(l).map(Vec::as_slice)
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().expect("trace holds v^0")
    }
}

pub fn value_iteration(op: &ShapleyOperator, g: &[f64], k: usize) -> Result<ValueTrace> {
    let n = op.dim();
    check_dim("perturbation g", n, g)?;
    let mut values = Vec::with_capacity(k + 1);
    values.push(vec![0.0; n]);
    let mut tv = vec![0.0; n];
    for stage in 1..=k {
        op.apply_into(&values[stage - 1], &mut tv);
        let next: Vec<f64> = tv.iter().zip(g).map(|(t, gi)| gi + t).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { stage });
        }
        values.push(next);
    }
    Ok(ValueTrace { values })
}

/// `v^k / k` and its Hilbert seminorm (zero when state-independent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPayoff {
    pub horizon: usize,
    pub mean: Vec<f64>,
    pub spread: f64,
}

pub fn mean_payoff_estimate(trace: &ValueTrace) -> Result<MeanPayoff> {
    mean_payoff_at(trace, trace.horizon())
}

/// The estimate at an intermediate stage `k` of the trace.
pub fn mean_payoff_at(trace: &ValueTrace, k: usize) -> Result<MeanPayoff> {
    if k == 0 {
        return Err(Error::invalid("horizon", "mean payoff needs k >= 1"));
    }
    let v = trace
        .at(k)
        .ok_or_else(|| Error::invalid("horizon", format!("trace stops at {}", trace.horizon())))?;
    let mean: Vec<f64> = v.iter().map(|x| x / k as f64).collect();
    Ok(MeanPayoff {
        horizon: k,
        spread: spread(&mean),
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{builtin_operator, Builtin};

    fn op(b: Builtin) -> ShapleyOperator {
        builtin_operator(b).unwrap()
    }

    #[test]
    fn value_iteration_examples() {
        let e2 = op(Builtin::Example2);
        let t0 = value_iteration(&e2, &[0.0; 3], 0).unwrap();
        assert_eq!(t0.values(), &[vec![0.0; 3]]);
        let t1 = value_iteration(&e2, &[0.0; 3], 1).unwrap();
        assert_eq!(t1.last(), &[0.0, 1.0, 3.0]);

        let id = op(Builtin::Identity { n: 2 });
        let t = value_iteration(&id, &[1.0, 0.0], 5).unwrap();
        assert_eq!(t.last(), &[5.0, 0.0]);
        assert!(value_iteration(&id, &[1.0], 5).is_err());
    }

    #[test]
    fn value_iteration_reports_overflow_stage() {
        let id = op(Builtin::Identity { n: 1 });
        let err = value_iteration(&id, &[f64::MAX], 3).unwrap_err();
        assert!(matches!(err, Error::Numeric { stage: 2 }), "{err}");
    }

    #[test]
    fn mean_payoff_examples() {
        let id = op(Builtin::Identity { n: 2 });
        let m = mean_payoff_estimate(&value_iteration(&id, &[1.0, 0.0], 100).unwrap()).unwrap();
        assert_eq!(m.mean, vec![1.0, 0.0]);
        assert_eq!(m.spread, 1.0);

        let chain = op(Builtin::MarkovChain {
            rows: vec![vec![1.0]],
            payments: vec![3.0],
        });
        let m = mean_payoff_estimate(&value_iteration(&chain, &[0.0], 10).unwrap()).unwrap();
        assert_eq!(m.mean, vec![3.0]);
        assert_eq!(m.spread, 0.0);

        let t0 = value_iteration(&chain, &[0.0], 0).unwrap();
        assert!(mean_payoff_estimate(&t0).is_err());
    }

    #[test]
    fn solve_single_state_chain() {
        let chain = op(Builtin::MarkovChain {
            rows: vec![vec![1.0]],
            payments: vec![3.0],
        });
        let s = solve_ergodic(&chain, &[0.0], &SolveConfig::default(), None).unwrap();
        assert_eq!(s.lambda, 3.0);
        assert_eq!(s.bias.representative(), &[0.0]);
    }

    #[test]
    fn solve_example1_perturbed() {
        let e1 = op(Builtin::Example1);
        let s = solve_ergodic(&e1, &[1.0, 2.0, 3.0], &SolveConfig::default(), None).unwrap();
        assert!((s.lambda - 3.0).abs() <= 1e-6, "{s:?}");
        assert!(s.residual <= 1e-9);
    }

    #[test]
    fn solve_example2_matches_cesaro_limit() {
        let e2 = op(Builtin::Example2);
        let cfg = SolveConfig::default();
        let s = solve_ergodic(&e2, &[0.0; 3], &cfg, None).unwrap();
        assert!(s.residual <= cfg.tol);
        // oracle: Cesàro average of value iteration
        let m = mean_payoff_estimate(&value_iteration(&e2, &[0.0; 3], 100_000).unwrap()).unwrap();
        for v in &m.mean {
            assert!((v - s.lambda).abs() < 1e-4, "{m:?} vs {}", s.lambda);
        }
        assert!((s.lambda - 1.2).abs() < 1e-9);
    }

    #[test]
    fn identity_with_nonconstant_g_does_not_converge() {
        let id = op(Builtin::Identity { n: 2 });
        let cfg = SolveConfig {
            max_iter: 10_000,
            ..SolveConfig::default()
        };
        let err = solve_ergodic(&id, &[1.0, 0.0], &cfg, None).unwrap_err();
        let nc = err.not_converged().expect("not an input error");
        assert_eq!(nc.reason, StopReason::Stalled);
        assert!(nc.residual >= 1.0 - 1e-12);

        let cfg = SolveConfig {
            divergence_radius: 100.0,
            ..cfg
        };
        let err = solve_ergodic(&id, &[1.0, 0.0], &cfg, None).unwrap_err();
        assert_eq!(err.not_converged().unwrap().reason, StopReason::Diverged);
    }

    #[test]
    fn config_validation() {
        let e2 = op(Builtin::Example2);
        for bad in [
            SolveConfig { tol: 0.0, ..Default::default() },
            SolveConfig { damping: 1.0, ..Default::default() },
            SolveConfig { damping: 0.0, ..Default::default() },
            SolveConfig { max_iter: 0, ..Default::default() },
        ] {
            assert!(matches!(
                solve_ergodic(&e2, &[0.0; 3], &bad, None),
                Err(SolveError::Input(_))
            ));
        }
    }

    #[test]
    fn lambda_midpoint_minimizes_sup_residual() {
        let e1 = op(Builtin::Example1);
        let g = [0.3, -0.7, 0.1];
        let s = solve_ergodic(&e1, &g, &SolveConfig::default(), None).unwrap();
        let u = s.bias.representative();
        let tu = e1.evaluate(u).unwrap();
        let r: Vec<f64> = (0..3).map(|i| g[i] + tu[i] - u[i]).collect();
        let sup = |c: f64| r.iter().map(|v| (v - c).abs()).fold(0.0, f64::max);
        let best = sup(s.lambda);
        for k in -100..=100 {
            let c = s.lambda + k as f64 * 1e-11;
            assert!(sup(c) >= best - 1e-15);
        }
    }

    #[test]
    fn damped_iterates_approach_fixed_point_monotonically() {
        let e2 = op(Builtin::Example2);
        let g = [0.0; 3];
        let tight = SolveConfig {
            tol: 1e-13,
            ..SolveConfig::default()
        };
        let s = solve_ergodic(&e2, &g, &tight, None).unwrap();
        let target = s.bias.representative().to_vec();
        let mut prev = f64::INFINITY;
        for u in DampedIterates::new(&e2, &g, 0.5, &[5.0, -3.0, 1.0]).unwrap().take(200) {
            let d = crate::quotient::hilbert_distance(&u, &target);
            assert!(d <= prev + 1e-11, "{d} > {prev}");
            prev = d;
        }
        assert!(prev < 1e-6);
    }
}
