//! Operator axioms, independent oracles and cross-module consistency.

use ergo_core::game::{GameSpec, MaxOption, MinAction, StateSpec};
use ergo_core::{
    boolean_ray_witness, builtin_operator, ergodic_residual, hilbert_seminorm, solve_ergodic,
    Builtin, ShapleyOperator, SolveConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AXIOM_TOL: f64 = 1e-9;

fn builtins() -> Vec<ShapleyOperator> {
    vec![
        builtin_operator(Builtin::Example1).unwrap(),
        builtin_operator(Builtin::Example2).unwrap(),
        builtin_operator(Builtin::Identity { n: 3 }).unwrap(),
        builtin_operator(Builtin::MarkovChain {
            rows: vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.0, 1.0]],
            payments: vec![0.0, 1.0, -2.0],
        })
        .unwrap(),
    ]
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn operator_axioms_on_1000_samples_per_builtin() {
    for op in builtins() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = op.dim();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let c: f64 = rng.gen_range(-10.0..10.0);
            let tx = op.evaluate(&x).unwrap();
            let ty = op.evaluate(&y).unwrap();

            let upper: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a.max(*b)).collect();
            let tu = op.evaluate(&upper).unwrap();
            for i in 0..n {
                assert!(tu[i] >= tx[i] - AXIOM_TOL, "{} monotone at {x:?}", op.name());
            }

            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let ts = op.evaluate(&shifted).unwrap();
            for i in 0..n {
                assert!((ts[i] - tx[i] - c).abs() <= AXIOM_TOL, "{} homogeneous", op.name());
            }

            assert!(sup_dist(&tx, &ty) <= sup_dist(&x, &y) + AXIOM_TOL, "{} sup", op.name());
            let h_t = hilbert_seminorm(&diff(&tx, &ty)).unwrap();
            let h = hilbert_seminorm(&diff(&x, &y)).unwrap();
            assert!(h_t <= h + AXIOM_TOL, "{} Hilbert", op.name());
        }
    }
}

/// `sup_p ln p + p·m + (1-p)·x2` and `inf_p -ln p + p·M + (1-p)·x1` over a
/// uniform grid of 10^6 points in `[1e-6, 1]`.
fn log_action_grid(x: &[f64]) -> [f64; 3] {
    const POINTS: usize = 1_000_000;
    let m = x[0].min(x[2]);
    let big = x[1].max(x[2]);
    let (mut t1, mut t2) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..POINTS {
        let p = 1e-6 + (1.0 - 1e-6) * k as f64 / (POINTS - 1) as f64;
        let lp = p.ln();
        t1 = t1.max(lp + p * m + (1.0 - p) * x[1]);
        t2 = t2.min(-lp + p * big + (1.0 - p) * x[0]);
    }
    [t1, t2, x[2]]
}

#[test]
fn example1_matches_grid_oracle() {
    let op = builtin_operator(Builtin::Example1).unwrap();
    let oracle = log_action_grid(&[0.0, 5.0, 0.0]);
    assert!((oracle[0] - (4.0 - 5f64.ln())).abs() < 1e-6);
    assert!((oracle[1] - (1.0 + 5f64.ln())).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = op.evaluate(&x).unwrap();
        let o = log_action_grid(&x);
        assert!(sup_dist(&t, &o) <= 1e-4, "at {x:?}: {t:?} vs {o:?}");
    }
}

fn small_game() -> impl Strategy<Value = (GameSpec, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|n| {
        let row = prop::collection::vec(0.0f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum::<f64>() + 1e-3;
            let mut r: Vec<f64> = w.iter().map(|v| (v + 1e-3 / w.len() as f64) / s).collect();
            let fix = 1.0 - r.iter().sum::<f64>();
            r[0] += fix;
            r
        });
        let option = (-5.0f64..5.0, row).prop_map(|(payment, row)| MaxOption {
            label: String::new(),
            payment,
            row,
        });
        let action = prop::collection::vec(option, 1..=3).prop_map(|options| MinAction {
            label: String::new(),
            options,
        });
        let state = prop::collection::vec(action, 1..=3).prop_map(|min_actions| StateSpec { min_actions });
        (
            prop::collection::vec(state, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
            .prop_filter_map("rows must validate", move |(states, x)| {
                GameSpec::new(n, states).ok().map(|g| (g, x))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn game_evaluation_equals_double_loop((game, x) in small_game()) {
        let op = ShapleyOperator::from_game(game.clone());
        let t = op.evaluate(&x).unwrap();
        for (i, st) in game.states().iter().enumerate() {
            let mut best = f64::INFINITY;
            for act in &st.min_actions {
                let mut inner = f64::NEG_INFINITY;
                for o in &act.options {
                    let v = o.payment + o.row.iter().zip(&x).map(|(p, xj)| p * xj).sum::<f64>();
                    inner = inner.max(v);
                }
                best = best.min(inner);
            }
            prop_assert_eq!(t[i], best);
        }
    }
}

/// A Boolean witness certifies that some `g` has no bias, so the ergodic
/// equation cannot be solvable for every `g`. Checked on the builtins and
/// random chains: whenever a witness exists, at least one of the probes
/// `g = ±e_j` fails to solve.
#[test]
fn boolean_witness_and_full_solve_success_never_coexist() {
    let mut ops = builtins();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.gen_range(2..=4);
        let rows = (0..n)
            .map(|_| {
                let mut r = vec![0.0; n];
                r[rng.gen_range(0..n)] = 1.0;
                r
            })
            .collect();
        let payments = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ops.push(builtin_operator(Builtin::MarkovChain { rows, payments }).unwrap());
    }
    let cfg = SolveConfig {
        max_iter: 20_000,
        divergence_radius: 1e6,
        ..SolveConfig::default()
    };
    for op in &ops {
        let n = op.dim();
        let witness = boolean_ray_witness(op, 1e3, 1e-9).unwrap();
        let mut probes = vec![vec![0.0; n]];
        for j in 0..n {
            for s in [1.0, -1.0] {
                let mut g = vec![0.0; n];
                g[j] = s;
                probes.push(g);
            }
        }
        let all_solved = probes.iter().all(|g| solve_ergodic(op, g, &cfg, None).is_ok());
        assert!(!(witness.is_some() && all_solved), "{} has both", op.name());
    }
}

#[test]
fn successes_reverify_residual_independently() {
    let cfg = SolveConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for op in builtins().into_iter().take(2) {
        for _ in 0..20 {
            let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sol = solve_ergodic(&op, &g, &cfg, None).unwrap();
            let u = sol.bias.representative();
            let tu = op.evaluate(u).unwrap();
            let r: Vec<f64> = (0..3).map(|i| g[i] + tu[i] - u[i] - sol.lambda).collect();
            assert!(hilbert_seminorm(&r).unwrap() <= cfg.tol, "{} at {g:?}", op.name());
            let (lambda, res) = ergodic_residual(&op, &g, u).unwrap();
            assert!((lambda - sol.lambda).abs() <= cfg.tol);
            assert!(res <= cfg.tol);
        }
    }
}
