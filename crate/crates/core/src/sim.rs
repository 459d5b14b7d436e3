//! Stationary strategies read off a bias, and Monte Carlo play of them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::game::{GameSpec, Selection};
use crate::operator::ShapleyOperator;
use crate::seeds;

/// Number of batches for the batch-means confidence interval.
pub const BATCHES: usize = 20;

/// Pure stationary selections: a MIN action per state and a MAX option per
/// (state, MIN action).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationaryStrategyPair {
    pub min_action: Vec<usize>,
    pub max_option: Vec<Vec<usize>>,
}

impl StationaryStrategyPair {
    fn validate(&self, game: &GameSpec) -> Result<()> {
        let states = game.states();
        if self.min_action.len() != states.len() || self.max_option.len() != states.len() {
            return Err(Error::invalid("strategy", "one entry per state is required"));
        }
        for (i, st) in states.iter().enumerate() {
            if self.min_action[i] >= st.min_actions.len() {
                return Err(Error::invalid(format!("strategy.min_action[{i}]"), "index out of range"));
            }
            if self.max_option[i].len() != st.min_actions.len() {
                return Err(Error::invalid(
                    format!("strategy.max_option[{i}]"),
                    "one option per MIN action is required",
                ));
            }
            for (a, act) in st.min_actions.iter().enumerate() {
                if self.max_option[i][a] >= act.options.len() {
                    return Err(Error::invalid(
                        format!("strategy.max_option[{i}][{a}]"),
                        "index out of range",
                    ));
                }
            }
        }
        Ok(())
    }

    fn selection(&self, i: usize) -> Selection {
        let a = self.min_action[i];
        Selection {
            min_action: a,
            max_option: self.max_option[i][a],
        }
    }
}

/// Lowest-index maximizers of `r + P·bias` for every MIN action, and the
/// lowest-index MIN action minimizing the maximized value. `g` shifts every
/// option of a state equally and so never changes the selection; it is only
/// checked for dimension.
pub fn extract_strategies(
    game: &GameSpec,
    bias: &[f64],
    g: &[f64],
) -> Result<StationaryStrategyPair> {
    check_dim("bias", game.n(), bias)?;
    check_dim("perturbation g", game.n(), g)?;
    let mut min_action = Vec::with_capacity(game.n());
    let mut max_option = Vec::with_capacity(game.n());
    for (i, st) in game.states().iter().enumerate() {
        max_option.push(
            st.min_actions
                .iter()
                .map(|act| GameSpec::best_option(act, bias).0)
                .collect(),
        );
        min_action.push(game.state_value(i, bias).0.min_action);
    }
    Ok(StationaryStrategyPair {
        min_action,
        max_option,
    })
}

/// The Markov reward chain obtained by fixing both players' selections.
pub fn induced_chain(game: &GameSpec, strat: &StationaryStrategyPair) -> Result<ShapleyOperator> {
    strat.validate(game)?;
    let (rows, payments) = (0..game.n())
        .map(|i| {
            let opt = game.option(i, strat.selection(i));
            (opt.row.clone(), opt.payment)
        })
        .unzip();
    Ok(ShapleyOperator::from_game(GameSpec::markov_chain(rows, payments)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub initial_state: usize,
    pub horizon: usize,
    pub seed: u64,
    pub total: f64,
    /// `total / horizon`.
    pub average: f64,
    pub visits: Vec<u64>,
    /// `1.96·sd/√B` over `B` equal batches; absent when `B < 2`.
    pub ci_half_width: Option<f64>,
    pub batches: usize,
}

/// Index drawn from `row` by inverse CDF on `u ∈ [0, 1)`, in stored order.
fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    // rounding left the cumulative sum below u
    last
}

/// Plays the fixed strategies from `i0` for `horizon` stages. Each stage
/// accrues `g_i + r` at the current state and samples the next state.
pub fn simulate(
    game: &GameSpec,
    strat: &StationaryStrategyPair,
    g: &[f64],
    i0: usize,
    horizon: usize,
    seed: u64,
) -> Result<SimReport> {
    strat.validate(game)?;
    check_dim("perturbation g", game.n(), g)?;
    if i0 >= game.n() {
        return Err(Error::invalid("state", format!("must be below {}, got {i0}", game.n())));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    let batches = BATCHES.min(horizon);
    let batch_len = horizon / batches;
    let mut rng = seeds::rng(seed);
    let mut visits = vec![0u64; game.n()];
    let mut batch_sums = vec![0.0; batches];
    let mut total = 0.0;
    let mut state = i0;
    for t in 0..horizon {
        visits[state] += 1;
        let opt = game.option(state, strat.selection(state));
        let pay = g[state] + opt.payment;
        total += pay;
        let b = t / batch_len;
        if b < batches {
            batch_sums[b] += pay;
        }
        state = sample_row(&opt.row, rng.gen::<f64>());
    }
    let ci_half_width = (batches >= 2).then(|| {
        let means: Vec<f64> = batch_sums.iter().map(|s| s / batch_len as f64).collect();
        let m = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        1.96 * var.sqrt() / (batches as f64).sqrt()
    });
    Ok(SimReport {
        initial_state: i0,
        horizon,
        seed,
        total,
        average: total / horizon as f64,
        visits,
        ci_half_width,
        batches,
    })
}

/// `reps` independent runs with seeds derived from `seed`, in replication order.
pub fn simulate_replications(
    game: &GameSpec,
    strat: &StationaryStrategyPair,
    g: &[f64],
    i0: usize,
    horizon: usize,
    seed: u64,
    reps: usize,
) -> Result<Vec<SimReport>> {
    (0..reps)
        .into_par_iter()
        .map(|r| simulate(game, strat, g, i0, horizon, seeds::derive_seed(seed, r as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{MaxOption, MinAction, StateSpec};
    use crate::operator::example2_game;
    use crate::solvers::{solve_ergodic, SolveConfig};

    fn opt(payment: f64, row: Vec<f64>) -> MaxOption {
        MaxOption {
            label: String::new(),
            payment,
            row,
        }
    }

    fn single(options: Vec<Vec<MaxOption>>) -> StateSpec {
        StateSpec {
            min_actions: options
                .into_iter()
                .map(|options| MinAction {
                    label: String::new(),
                    options,
                })
                .collect(),
        }
    }

    #[test]
    fn single_action_and_ties() {
        let game = GameSpec::markov_chain(vec![vec![1.0]], vec![3.0]).unwrap();
        let s = extract_strategies(&game, &[0.0], &[0.0]).unwrap();
        assert_eq!(s, StationaryStrategyPair { min_action: vec![0], max_option: vec![vec![0]] });
        let r = simulate(&game, &s, &[0.0], 0, 1000, 4).unwrap();
        assert_eq!(r.average, 3.0);
        assert_eq!(r.ci_half_width, Some(0.0));

        let game = GameSpec::new(1, vec![single(vec![vec![opt(1.0, vec![1.0]), opt(1.0, vec![1.0])]])]).unwrap();
        let s = extract_strategies(&game, &[0.0], &[0.0]).unwrap();
        assert_eq!(s.max_option, vec![vec![0]]);
        assert!(extract_strategies(&game, &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn deterministic_two_cycle() {
        let game = GameSpec::markov_chain(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![1.0, 3.0]).unwrap();
        let s = extract_strategies(&game, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        for h in [2, 10, 1000] {
            assert_eq!(simulate(&game, &s, &[0.0, 0.0], 0, h, 1).unwrap().average, 2.0);
        }
        let r = simulate(&game, &s, &[0.0, 0.0], 1, 3, 1).unwrap();
        assert_eq!(r.total, 7.0);
        assert_eq!(r.visits, vec![1, 2]);
    }

    #[test]
    fn inverse_cdf_follows_stored_order() {
        assert_eq!(sample_row(&[0.5, 0.0, 0.5], 0.0), 0);
        assert_eq!(sample_row(&[0.5, 0.0, 0.5], 0.5), 2);
        assert_eq!(sample_row(&[0.0, 1.0, 0.0], 0.999_999), 1);
    }

    #[test]
    fn example2_strategy_table() {
        let game = example2_game();
        let op = ShapleyOperator::from_game(game.clone());
        let sol = solve_ergodic(&op, &[0.0; 3], &SolveConfig::default(), None).unwrap();
        let s = extract_strategies(&game, sol.bias.representative(), &[0.0; 3]).unwrap();
        // at u = (0, 0.4, 3.6): state 1 prefers to12 (1.2 < 1.8), state 2 takes
        // defer where MAX picks to3 (1.6 > 1.2), state 3 MAX moves (4.8 > 4.6)
        assert_eq!(s.min_action, vec![1, 1, 0]);
        assert_eq!(s.max_option, vec![vec![0, 0], vec![0, 1], vec![0]]);
        let r1 = simulate(&game, &s, &[0.0; 3], 0, 5000, 9).unwrap();
        let r2 = simulate(&game, &s, &[0.0; 3], 0, 5000, 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.visits.iter().sum::<u64>(), 5000);
        assert_eq!(r1.average, r1.total / 5000.0);
    }

    #[test]
    fn induced_chain_rejects_bad_indices() {
        let game = example2_game();
        let bad = StationaryStrategyPair {
            min_action: vec![0, 2, 0],
            max_option: vec![vec![0, 0], vec![0, 0], vec![0]],
        };
        assert!(induced_chain(&game, &bad).is_err());
    }
}
