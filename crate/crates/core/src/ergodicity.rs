//! Slice spaces and a layered ergodicity verdict.
//!
//! The game of `T` is ergodic when `g + T(u) = λ·1 + u` is solvable for every
//! `g`, equivalently when every slice space
//! `S_α^β = {x : α·1 + x ≤ T(x) ≤ β·1 + x}` is bounded in Hilbert's seminorm.
//! Only the Boolean-ray witness below is a certificate (of non-ergodicity, for
//! finitely affine operators); every other outcome of [`ergodicity_verdict`]
//! is numerical evidence.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::operator::ShapleyOperator;
use crate::quotient::{canonicalize, spread};
use crate::seeds;
use crate::solvers::{
    mean_payoff_at, solve_ergodic, value_iteration, SolveConfig, SolveError, StopReason,
};

/// Largest dimension for which Boolean directions are enumerated.
pub const MAX_RAY_DIM: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceQuery {
    pub alpha: f64,
    pub beta: f64,
}

/// `α·1 + x ≤ T(x) ≤ β·1 + x`, compared exactly.
pub fn slice_membership(op: &ShapleyOperator, x: &[f64], q: SliceQuery) -> Result<bool> {
    let tx = op.evaluate(x)?;
    Ok(in_slice(x, &tx, q))
}

#[inline]
fn in_slice(x: &[f64], tx: &[f64], q: SliceQuery) -> bool {
    x.iter()
        .zip(tx)
        .all(|(xi, ti)| q.alpha + xi <= *ti && *ti <= q.beta + xi)
}

/// `‖x - T(x)‖_H`.
pub fn residual_seminorm(op: &ShapleyOperator, x: &[f64]) -> Result<f64> {
    let tx = op.evaluate(x)?;
    let d: Vec<f64> = x.iter().zip(&tx).map(|(a, b)| a - b).collect();
    Ok(spread(&d))
}

/// A nonconstant 0/1 direction `u` along which `T(s·u) - s·u` has stopped
/// moving, so the ray `{s·u}` stays in `S_α^β` for large `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BooleanRayWitness {
    pub direction: Vec<u8>,
    pub scale: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl BooleanRayWitness {
    fn point(&self, s: f64) -> Vec<f64> {
        self.direction.iter().map(|&b| s * b as f64).collect()
    }

    /// Re-checks membership of `s·u` in the widened slice at `s0, 2s0, 4s0`.
    pub fn verify(&self, op: &ShapleyOperator, tol: f64) -> Result<bool> {
        check_dim("witness direction", op.dim(), &self.point(1.0))?;
        let q = SliceQuery {
            alpha: self.alpha - tol,
            beta: self.beta + tol,
        };
        for k in [1.0, 2.0, 4.0] {
            if !slice_membership(op, &self.point(k * self.scale), q)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Scans the `2^n - 2` nonconstant Boolean directions in increasing bitmask
/// order (bit `i` is coordinate `i`) and returns the first whose residual
/// `T(s·u) - s·u` agrees at `s0` and `2·s0` within `tol`.
pub fn boolean_ray_witness(
    op: &ShapleyOperator,
    s0: f64,
    tol: f64,
) -> Result<Option<BooleanRayWitness>> {
    let n = op.dim();
    if n > MAX_RAY_DIM {
        return Err(Error::Capability(format!(
            "Boolean ray enumeration needs n <= {MAX_RAY_DIM}, got {n}"
        )));
    }
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(Error::invalid("scale", "must be positive"));
    }
    if n < 2 {
        return Ok(None);
    }
    let full: u64 = (1u64 << n) - 1;
    let probe = |mask: u64| -> Option<BooleanRayWitness> {
        let dir: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
        let residual = |s: f64| -> Vec<f64> {
            let x: Vec<f64> = dir.iter().map(|&b| s * b as f64).collect();
            let mut tx = vec![0.0; n];
            op.apply_into(&x, &mut tx);
            tx.iter().zip(&x).map(|(t, v)| t - v).collect()
        };
        let r1 = residual(s0);
        let r2 = residual(2.0 * s0);
        let gap = r1
            .iter()
            .zip(&r2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap <= tol {
            let (alpha, beta) = crate::quotient::min_max(&r1);
            Some(BooleanRayWitness {
                direction: dir,
                scale: s0,
                alpha,
                beta,
            })
        } else {
            None
        }
    };
    Ok((1..full).into_par_iter().find_map_first(probe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    ErgodicEvidence,
    NonErgodicWitness,
    Inconclusive,
}

/// A perturbation whose mean payoff `v^k/k` is state-dependent and stable
/// between `k` and `2k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationWitness {
    pub g: Vec<f64>,
    pub horizon: usize,
    pub mean_payoff: Vec<f64>,
    pub mean_payoff_half: Vec<f64>,
    pub spread: f64,
    pub drift: f64,
}

impl PerturbationWitness {
    /// Recomputes the estimates and checks spread and stability again.
    pub fn verify(&self, op: &ShapleyOperator, stabilization_tol: f64) -> Result<bool> {
        let w = perturbation_evidence(op, &self.g, self.horizon / 2)?;
        Ok(w.drift <= stabilization_tol && w.spread > 10.0 * stabilization_tol)
    }
}

fn perturbation_evidence(op: &ShapleyOperator, g: &[f64], k: usize) -> Result<PerturbationWitness> {
    let trace = value_iteration(op, g, 2 * k)?;
    let half = mean_payoff_at(&trace, k)?;
    let full = mean_payoff_at(&trace, 2 * k)?;
    let drift = half
        .mean
        .iter()
        .zip(&full.mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(PerturbationWitness {
        g: g.to_vec(),
        horizon: 2 * k,
        spread: full.spread,
        mean_payoff: full.mean,
        mean_payoff_half: half.mean,
        drift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    BooleanRay(BooleanRayWitness),
    Perturbation(PerturbationWitness),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleStatus {
    Solved {
        lambda: f64,
        residual: f64,
        iterations: usize,
    },
    NotConverged {
        reason: StopReason,
        residual: f64,
        iterations: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub g: Vec<f64>,
    #[serde(flatten)]
    pub status: SampleStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    pub operator: String,
    pub verdict: Verdict,
    pub witness: Option<Witness>,
    pub samples: Vec<SampleRecord>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerdictOptions {
    pub num_g_samples: usize,
    pub ray_scale: f64,
    /// Horizon `k`; stabilization compares `v^k/k` with `v^{2k}/(2k)`.
    pub horizon: usize,
    pub stabilization_tol: f64,
    /// Perturbations solved before the random samples.
    pub extra_samples: Vec<Vec<f64>>,
}

impl Default for VerdictOptions {
    fn default() -> Self {
        Self {
            num_g_samples: 25,
            ray_scale: 1e3,
            horizon: 100_000,
            stabilization_tol: 1e-4,
            extra_samples: Vec::new(),
        }
    }
}

/// Draws `count` perturbations uniformly in `[-1, 1]^n`.
pub fn sample_perturbations(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(seed);
    (0..count)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect()
}

pub fn ergodicity_verdict(
    op: &ShapleyOperator,
    num_g_samples: usize,
    cfg: &SolveConfig,
) -> Result<ErgodicityReport> {
    let opts = VerdictOptions {
        num_g_samples,
        ..VerdictOptions::default()
    };
    ergodicity_verdict_with(op, &opts, cfg)
}

/// Pipeline: Boolean ray witness, then sampled solves, then a mean-payoff
/// witness at the first failing perturbation.
pub fn ergodicity_verdict_with(
    op: &ShapleyOperator,
    opts: &VerdictOptions,
    cfg: &SolveConfig,
) -> Result<ErgodicityReport> {
    cfg.validate()?;
    let n = op.dim();
    let mut notes = Vec::new();
    let report = |verdict, witness, samples, notes| ErgodicityReport {
        operator: op.to_string(),
        verdict,
        witness,
        samples,
        notes,
    };

    if !op.is_finitely_affine() {
        notes.push("Boolean ray test skipped: operator is not a finite min-max of affine maps".into());
    } else if n > MAX_RAY_DIM {
        notes.push(format!("Boolean ray test skipped: n = {n} > {MAX_RAY_DIM}"));
    } else if let Some(w) = boolean_ray_witness(op, opts.ray_scale, cfg.tol)? {
        notes.push("unbounded slice space certified by a Boolean ray".into());
        return Ok(report(
            Verdict::NonErgodicWitness,
            Some(Witness::BooleanRay(w)),
            Vec::new(),
            notes,
        ));
    } else {
        notes.push("no Boolean direction stabilizes".into());
    }

    for (k, g) in opts.extra_samples.iter().enumerate() {
        check_dim("g", n, g).map_err(|e| match e {
            Error::DimensionMismatch { expected, got, .. } => Error::invalid(
                format!("extra_samples[{k}]"),
                format!("expected length {expected}, got {got}"),
            ),
            e => e,
        })?;
    }
    let mut gs = opts.extra_samples.clone();
    gs.extend(sample_perturbations(n, opts.num_g_samples, cfg.seed));
    let samples: Vec<SampleRecord> = gs
        .par_iter()
        .map(|g| -> Result<SampleRecord> {
            let status = match solve_ergodic(op, g, cfg, None) {
                Ok(s) => SampleStatus::Solved {
                    lambda: s.lambda,
                    residual: s.residual,
                    iterations: s.iterations,
                },
                Err(SolveError::NotConverged(nc)) => SampleStatus::NotConverged {
                    reason: nc.reason,
                    residual: nc.residual,
                    iterations: nc.iterations,
                },
                Err(SolveError::Input(e)) => return Err(e),
            };
            Ok(SampleRecord { g: g.clone(), status })
        })
        .collect::<Result<_>>()?;

    let failing = samples
        .iter()
        .find(|s| matches!(s.status, SampleStatus::NotConverged { .. }));
    let Some(failing) = failing else {
        notes.push(format!(
            "all {} sampled perturbations solved; numerical evidence, not a proof",
            samples.len()
        ));
        return Ok(report(Verdict::ErgodicEvidence, None, samples, notes));
    };

    let w = perturbation_evidence(op, &failing.g, opts.horizon)?;
    if w.drift <= opts.stabilization_tol && w.spread > 10.0 * opts.stabilization_tol {
        notes.push(format!(
            "mean payoff is state-dependent (spread {:.3e}) and stable (drift {:.3e}); numerical evidence",
            w.spread, w.drift
        ));
        Ok(report(
            Verdict::NonErgodicWitness,
            Some(Witness::Perturbation(w)),
            samples,
            notes,
        ))
    } else {
        notes.push(format!(
            "solve failed but mean payoff did not separate (spread {:.3e}, drift {:.3e})",
            w.spread, w.drift
        ));
        Ok(report(Verdict::Inconclusive, None, samples, notes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceSearchOptions {
    pub starts: usize,
    pub radius_cap: f64,
    /// Proposals per start.
    pub budget: usize,
    pub seed: u64,
}

impl Default for SliceSearchOptions {
    fn default() -> Self {
        Self {
            starts: 10,
            radius_cap: 1e6,
            budget: 4000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSearchResult {
    pub query: SliceQuery,
    pub feasible_starts: usize,
    pub max_radius: f64,
    pub escaped: bool,
    /// A slice point beyond the radius cap, when one was found.
    pub witness: Option<Vec<f64>>,
}

/// Multistart ascent of `‖x‖_H` inside `S_α^β`. Proposals alternate between
/// the radial direction of `x`, a random box direction and a random Boolean
/// direction; the step doubles on acceptance and halves on rejection.
pub fn slice_escape_search(
    op: &ShapleyOperator,
    q: SliceQuery,
    opts: &SliceSearchOptions,
) -> Result<SliceSearchResult> {
    let n = op.dim();
    let mut rng = seeds::rng(opts.seed);
    let mut tx = vec![0.0; n];
    let member = |x: &[f64], tx: &mut Vec<f64>| {
        op.apply_into(x, tx);
        in_slice(x, tx, q)
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut candidate = vec![0.0; n];
    for attempt in 0..50 * opts.starts.max(1) {
        if starts.len() >= opts.starts {
            break;
        }
        if attempt > 0 {
            candidate = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        }
        if member(&candidate, &mut tx) {
            starts.push(candidate.clone());
        }
    }

    let mut result = SliceSearchResult {
        query: q,
        feasible_starts: starts.len(),
        max_radius: 0.0,
        escaped: false,
        witness: None,
    };
    for mut x in starts {
        let mut radius = spread(&x);
        let mut step = 1.0;
        for k in 0..opts.budget {
            let mut dir: Vec<f64> = match k % 3 {
                0 if radius > 0.0 => {
                    let mut d = x.clone();
                    canonicalize(&mut d);
                    d.iter_mut().for_each(|v| *v /= radius);
                    d
                }
                2 if n > 1 => {
                    let mask = rng.gen_range(1..(1u64 << n.min(63)) - 1);
                    (0..n).map(|i| ((mask >> (i % 63)) & 1) as f64).collect()
                }
                _ => (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            };
            if rng.gen_bool(0.5) && k % 3 != 0 {
                dir.iter_mut().for_each(|v| *v = -*v);
            }
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let ry = spread(&y);
            if ry > radius && member(&y, &mut tx) {
                x = y;
                radius = ry;
                step *= 2.0;
            } else {
                step *= 0.5;
                if step < 1e-3 {
                    step = 1.0;
                }
            }
            if radius > opts.radius_cap {
                break;
            }
        }
        result.max_radius = result.max_radius.max(radius);
        if radius > opts.radius_cap {
            result.escaped = true;
            result.witness = Some(x);
            break;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{builtin_operator, Builtin};
    use proptest::prelude::*;

    fn op(b: Builtin) -> ShapleyOperator {
        builtin_operator(b).unwrap()
    }

    fn absorbing_chain() -> ShapleyOperator {
        op(Builtin::MarkovChain {
            rows: vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.0, 1.0]],
            payments: vec![0.0; 3],
        })
    }

    #[test]
    fn slice_membership_examples() {
        let e2 = op(Builtin::Example2);
        let q = |alpha, beta| SliceQuery { alpha, beta };
        assert!(slice_membership(&e2, &[0.0; 3], q(0.0, 3.0)).unwrap());
        assert!(!slice_membership(&e2, &[0.0; 3], q(1.0, 3.0)).unwrap());
        let id = op(Builtin::Identity { n: 3 });
        assert!(slice_membership(&id, &[4.0, -2.0, 9.0], q(-1.0, 1.0)).unwrap());
        assert!(slice_membership(&id, &[0.0, 0.0], q(0.0, 0.0)).is_err());
    }

    #[test]
    fn residual_seminorm_examples() {
        let e2 = op(Builtin::Example2);
        assert_eq!(residual_seminorm(&e2, &[0.0; 3]).unwrap(), 3.0);
        let id = op(Builtin::Identity { n: 2 });
        assert_eq!(residual_seminorm(&id, &[3.0, -8.0]).unwrap(), 0.0);
    }

    #[test]
    fn boolean_rays() {
        let id = op(Builtin::Identity { n: 2 });
        let w = boolean_ray_witness(&id, 1e3, 1e-9).unwrap().unwrap();
        assert_eq!(w.direction, vec![1, 0]);
        assert_eq!((w.alpha, w.beta), (0.0, 0.0));
        assert!(w.verify(&id, 1e-9).unwrap());

        assert!(boolean_ray_witness(&op(Builtin::Example2), 1e3, 1e-9).unwrap().is_none());
        // non-ergodic, yet every Boolean residual grows linearly
        assert!(boolean_ray_witness(&absorbing_chain(), 1e3, 1e-9).unwrap().is_none());

        let big = op(Builtin::Identity { n: 25 });
        assert!(matches!(
            boolean_ray_witness(&big, 1e3, 1e-9),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn two_absorbing_states_give_perturbation_witness() {
        let chain = absorbing_chain();
        let w = perturbation_evidence(&chain, &[1.0, 0.0, 0.0], 100_000).unwrap();
        assert!((w.mean_payoff[0] - 1.0).abs() < 1e-12);
        assert!((w.mean_payoff[1] - 0.5).abs() < 1e-3);
        assert!(w.mean_payoff[2].abs() < 1e-12);
        assert!(w.verify(&chain, 1e-4).unwrap());
    }

    #[test]
    fn verdicts() {
        let cfg = SolveConfig::default();
        let id = op(Builtin::Identity { n: 2 });
        let r = ergodicity_verdict(&id, 25, &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::NonErgodicWitness);
        assert!(matches!(r.witness, Some(Witness::BooleanRay(ref w)) if w.direction == vec![1, 0]));

        let e2 = op(Builtin::Example2);
        let r = ergodicity_verdict(&e2, 25, &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::ErgodicEvidence);
        assert_eq!(r.samples.len(), 25);
    }

    #[test]
    fn absorbing_chain_verdict_at_given_g() {
        let opts = VerdictOptions {
            num_g_samples: 0,
            extra_samples: vec![vec![1.0, 0.0, 0.0]],
            ..VerdictOptions::default()
        };
        let r = ergodicity_verdict_with(&absorbing_chain(), &opts, &SolveConfig::default()).unwrap();
        assert_eq!(r.verdict, Verdict::NonErgodicWitness);
        let Some(Witness::Perturbation(w)) = r.witness else {
            panic!("expected a perturbation witness");
        };
        assert_eq!(w.g, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_slice_escapes() {
        let id = op(Builtin::Identity { n: 3 });
        let q = SliceQuery { alpha: -1.0, beta: 1.0 };
        let r = slice_escape_search(&id, q, &SliceSearchOptions::default()).unwrap();
        assert!(r.escaped);
        let x = r.witness.unwrap();
        assert!(spread(&x) > 1e6);
        assert!(slice_membership(&id, &x, q).unwrap());
    }

    proptest! {
        #[test]
        fn residual_seminorm_matches_tightest_slice(
            x in prop::collection::vec(-20.0f64..20.0, 3),
            c in -50.0f64..50.0,
            a in 0.0f64..10.0,
        ) {
            for b in [Builtin::Example1, Builtin::Example2] {
                let t = op(b);
                let r = residual_seminorm(&t, &x).unwrap();
                let tx = t.evaluate(&x).unwrap();
                let d: Vec<f64> = tx.iter().zip(&x).map(|(t, v)| t - v).collect();
                let (lo, hi) = crate::quotient::min_max(&d);
                // (t - x) + x may round away from t, hence the 1e-9 slack
                let tight = SliceQuery { alpha: lo - 1e-9, beta: hi + 1e-9 };
                prop_assert!(slice_membership(&t, &x, tight).unwrap());
                prop_assert_eq!(r <= a, hi - lo <= a);
                let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
                prop_assert!((residual_seminorm(&t, &shifted).unwrap() - r).abs() <= 1e-9);
            }
        }
    }
}
