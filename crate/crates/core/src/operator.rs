//! Evaluable Shapley operators: monotone, additively homogeneous maps of R^n.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::game::{GameSpec, MaxOption, MinAction, StateSpec};

/// Where an operator came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FiniteGame,
    BuiltinExample,
    Identity,
    MarkovChain,
}

#[derive(Debug, Clone)]
enum Rule {
    Game(GameSpec),
    LogAction,
    Identity(usize),
}

/// Handle on a Shapley operator. Immutable and `Sync`; evaluation is pure.
#[derive(Debug, Clone)]
pub struct ShapleyOperator {
    name: String,
    provenance: Provenance,
    rule: Rule,
}

/// The built-in operators.
#[derive(Debug, Clone, PartialEq)]
pub enum Builtin {
    /// Three-state game where MAX buys an exit probability `p` at cost `-ln p`
    /// in state 1, MIN does the dual in state 2, and state 3 is absorbing.
    Example1,
    /// Three-state perfect-information polyhedral game.
    Example2,
    Identity { n: usize },
    MarkovChain { rows: Vec<Vec<f64>>, payments: Vec<f64> },
}

impl Builtin {
    /// Resolves a name from the command line. `n` is required for `identity`.
    pub fn from_name(name: &str, n: Option<usize>) -> Result<Self> {
        match name {
            "example1" => Ok(Builtin::Example1),
            "example2" => Ok(Builtin::Example2),
            "identity" => {
                let n = n.ok_or_else(|| Error::invalid("n", "identity needs a dimension"))?;
                Ok(Builtin::Identity { n })
            }
            "markov-chain" => Err(Error::invalid(
                "op",
                "markov-chain needs rows and payments; pass them as a game file",
            )),
            other => Err(Error::UnknownOperator(other.to_string())),
        }
    }
}

pub fn builtin_operator(which: Builtin) -> Result<ShapleyOperator> {
    match which {
        Builtin::Example1 => Ok(ShapleyOperator {
            name: "example1".into(),
            provenance: Provenance::BuiltinExample,
            rule: Rule::LogAction,
        }),
        Builtin::Example2 => Ok(ShapleyOperator {
            name: "example2".into(),
            provenance: Provenance::BuiltinExample,
            rule: Rule::Game(example2_game()),
        }),
        Builtin::Identity { n } => {
            if n == 0 {
                return Err(Error::invalid("n", "identity needs n >= 1"));
            }
            Ok(ShapleyOperator {
                name: format!("identity({n})"),
                provenance: Provenance::Identity,
                rule: Rule::Identity(n),
            })
        }
        Builtin::MarkovChain { rows, payments } => Ok(ShapleyOperator {
            name: "markov-chain".into(),
            provenance: Provenance::MarkovChain,
            rule: Rule::Game(GameSpec::markov_chain(rows, payments)?),
        }),
    }
}

/// The polyhedral example as a perfect-information game.
///
/// ```text
/// T1 = (x1+x3)/2 ∧ 1 + (x1+x2)/2
/// T2 = 2 + (x1+x3)/2 ∧ (1 + (x1+x2)/2 ∨ -2 + x3)
/// T3 = 3 + (x1+x3)/2 ∨ 1 + x3
/// ```
pub fn example2_game() -> GameSpec {
    let opt = |label: &str, payment: f64, row: [f64; 3]| MaxOption {
        label: label.into(),
        payment,
        row: row.to_vec(),
    };
    let act = |label: &str, options: Vec<MaxOption>| MinAction {
        label: label.into(),
        options,
    };
    let states = vec![
        StateSpec {
            min_actions: vec![
                act("to13", vec![opt("to13", 0.0, [0.5, 0.0, 0.5])]),
                act("to12", vec![opt("to12", 1.0, [0.5, 0.5, 0.0])]),
            ],
        },
        StateSpec {
            min_actions: vec![
                act("to13", vec![opt("to13", 2.0, [0.5, 0.0, 0.5])]),
                act(
                    "defer",
                    vec![opt("to12", 1.0, [0.5, 0.5, 0.0]), opt("to3", -2.0, [0.0, 0.0, 1.0])],
                ),
            ],
        },
        StateSpec {
            min_actions: vec![act(
                "pass",
                vec![opt("to13", 3.0, [0.5, 0.0, 0.5]), opt("stay", 1.0, [0.0, 0.0, 1.0])],
            )],
        },
    ];
    GameSpec::new(3, states).expect("example2 is a valid game")
}

/// Closed form of the log-action operator.
///
/// Coordinate 1 maximizes `ln p + p·m + (1-p)·x2` over `p ∈ (0,1]` with
/// `m = x1 ∧ x3`; the optimum is `p = 1` when `m - x2 >= -1`, else
/// `p = -1/(m - x2)`. Coordinate 2 is the dual minimization with
/// `M = x2 ∨ x3`.
#[inline]
fn log_action(x: &[f64], out: &mut [f64]) {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let m = x1.min(x3);
    let d = m - x2;
    out[0] = if d >= -1.0 { m } else { -(-d).ln() - 1.0 + x2 };
    let big = x2.max(x3);
    let e = big - x1;
    out[1] = if e <= 1.0 { big } else { e.ln() + 1.0 + x1 };
    out[2] = x3;
}

fn log_action_jacobian(x: &[f64]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(3, 3);
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let (m, jm) = if x1 <= x3 { (x1, 0) } else { (x3, 2) };
    let d = m - x2;
    if d >= -1.0 {
        jac[(0, jm)] = 1.0;
    } else {
        let p = -1.0 / d;
        jac[(0, jm)] += p;
        jac[(0, 1)] += 1.0 - p;
    }
    let (big, jb) = if x2 >= x3 { (x2, 1) } else { (x3, 2) };
    let e = big - x1;
    if e <= 1.0 {
        jac[(1, jb)] = 1.0;
    } else {
        let p = 1.0 / e;
        jac[(1, jb)] += p;
        jac[(1, 0)] += 1.0 - p;
    }
    jac[(2, 2)] = 1.0;
    jac
}

impl ShapleyOperator {
    /// Wraps a user-supplied game.
    pub fn from_game(game: GameSpec) -> Self {
        Self {
            name: "game".into(),
            provenance: Provenance::FiniteGame,
            rule: Rule::Game(game),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        match &self.rule {
            Rule::Game(g) => g.n(),
            Rule::LogAction => 3,
            Rule::Identity(n) => *n,
        }
    }

    /// The underlying game, for operators built from one.
    pub fn game(&self) -> Option<&GameSpec> {
        match &self.rule {
            Rule::Game(g) => Some(g),
            _ => None,
        }
    }

    /// Whether `T` is a finite min-max of affine maps, so that `T(s·u) - s·u`
    /// is eventually constant along every ray.
    pub fn is_finitely_affine(&self) -> bool {
        !matches!(self.rule, Rule::LogAction)
    }

    /// `T(x)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("operator input", self.dim(), x)?;
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    /// `T(x)` into `out`, unchecked.
    #[inline]
    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.rule {
            Rule::Game(g) => g.apply_into(x, out),
            Rule::LogAction => log_action(x, out),
            Rule::Identity(_) => out.copy_from_slice(x),
        }
    }

    /// A row-stochastic element of the generalized Jacobian at `x`: the
    /// transition rows selected by the optimal actions.
    pub(crate) fn selection_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.rule {
            Rule::Game(g) => {
                let n = g.n();
                let mut jac = DMatrix::zeros(n, n);
                for i in 0..n {
                    let (sel, _) = g.state_value(i, x);
                    for (j, p) in g.option(i, sel).row.iter().enumerate() {
                        jac[(i, j)] = *p;
                    }
                }
                jac
            }
            Rule::LogAction => log_action_jacobian(x),
            Rule::Identity(n) => DMatrix::identity(*n, *n),
        }
    }
}

impl fmt::Display for ShapleyOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (n={})", self.name, self.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn example1_values() {
        let op = builtin_operator(Builtin::Example1).unwrap();
        assert_eq!(op.evaluate(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        let l5 = 5f64.ln();
        assert_close(&op.evaluate(&[0.0, 5.0, 0.0]).unwrap(), &[4.0 - l5, 1.0 + l5, 0.0], 1e-15);
        assert_close(&op.evaluate(&[0.0, 5.0, 0.0]).unwrap(), &[2.390562, 2.609438, 0.0], 1e-6);
    }

    #[test]
    fn example2_values() {
        let op = builtin_operator(Builtin::Example2).unwrap();
        assert_eq!(op.evaluate(&[0.0; 3]).unwrap(), vec![0.0, 1.0, 3.0]);
        assert_eq!(op.evaluate(&[1.0; 3]).unwrap(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn identity_and_chain() {
        let id = builtin_operator(Builtin::Identity { n: 2 }).unwrap();
        assert_eq!(id.evaluate(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let chain = builtin_operator(Builtin::MarkovChain {
            rows: vec![vec![1.0]],
            payments: vec![3.0],
        })
        .unwrap();
        assert_eq!(chain.evaluate(&[-1.5]).unwrap(), vec![1.5]);
        assert_eq!(chain.provenance(), Provenance::MarkovChain);
    }

    #[test]
    fn input_errors() {
        let op = builtin_operator(Builtin::Example2).unwrap();
        assert!(matches!(
            op.evaluate(&[0.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2, .. })
        ));
        assert!(matches!(
            op.evaluate(&[0.0, f64::INFINITY, 0.0]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Builtin::from_name("example9", None),
            Err(Error::UnknownOperator(_))
        ));
        assert!(Builtin::from_name("identity", None).is_err());
        assert!(builtin_operator(Builtin::MarkovChain {
            rows: vec![vec![0.5, 0.4], vec![0.0, 1.0]],
            payments: vec![0.0, 0.0],
        })
        .is_err());
    }

    #[test]
    fn jacobian_rows_are_stochastic_and_match_finite_differences() {
        let op = builtin_operator(Builtin::Example1).unwrap();
        // interior points of the smooth pieces
        for x in [[0.0, 5.0, 1.0], [3.0, 0.5, 1.0], [-4.0, 2.0, 7.0]] {
            let jac = op.selection_jacobian(&x);
            for i in 0..3 {
                let s: f64 = jac.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for j in 0..3 {
                    let h = 1e-6;
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (op.evaluate(&xp).unwrap()[i] - op.evaluate(&xm).unwrap()[i]) / (2.0 * h);
                    assert!((fd - jac[(i, j)]).abs() < 1e-6, "x={x:?} ({i},{j}) fd={fd} jac={}", jac[(i, j)]);
                }
            }
        }
    }
}
