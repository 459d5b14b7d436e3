//! Finite zero-sum stochastic games.
//!
//! At state `i`, MIN picks an action `a`, then MAX picks one of the options
//! attached to `a`; MIN pays `payment` to MAX and the next state is drawn from
//! `row`. The one-day operator is
//! `T_i(x) = min_a max_b (r_i^{ab} + P_i^{ab} · x)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Allowed deviation of a probability row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxOption {
    #[serde(default)]
    pub label: String,
    pub payment: f64,
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinAction {
    #[serde(default)]
    pub label: String,
    pub options: Vec<MaxOption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub min_actions: Vec<MinAction>,
}

/// A validated game. Construct through [`GameSpec::new`] or
/// [`GameSpec::from_json`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameSpec {
    n: usize,
    states: Vec<StateSpec>,
}

#[derive(Deserialize)]
struct RawGame {
    n: usize,
    states: Vec<StateSpec>,
}

impl<'de> Deserialize<'de> for GameSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawGame::deserialize(d)?;
        GameSpec::new(raw.n, raw.states).map_err(serde::de::Error::custom)
    }
}

/// Selected action indices at one state, ties to the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub min_action: usize,
    pub max_option: usize,
}

impl GameSpec {
    pub fn new(n: usize, states: Vec<StateSpec>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "a game needs at least one state"));
        }
        if states.len() != n {
            return Err(Error::invalid(
                "states",
                format!("expected {n} states, found {}", states.len()),
            ));
        }
        for (i, state) in states.iter().enumerate() {
            if state.min_actions.is_empty() {
                return Err(Error::invalid(
                    format!("states[{i}].min_actions"),
                    "every state needs at least one MIN action",
                ));
            }
            for (a, action) in state.min_actions.iter().enumerate() {
                if action.options.is_empty() {
                    return Err(Error::invalid(
                        format!("states[{i}].min_actions[{a}].options"),
                        "every MIN action needs at least one MAX option",
                    ));
                }
                for (b, opt) in action.options.iter().enumerate() {
                    let path = format!("states[{i}].min_actions[{a}].options[{b}]");
                    if !opt.payment.is_finite() {
                        return Err(Error::invalid(format!("{path}.payment"), "payment must be finite"));
                    }
                    validate_row(&format!("{path}.row"), &opt.row, n)?;
                }
            }
        }
        Ok(Self { n, states })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> &[StateSpec] {
        &self.states
    }

    /// A one-player game without choices: the Markov reward chain `(P, r)`.
    pub fn markov_chain(rows: Vec<Vec<f64>>, payments: Vec<f64>) -> Result<Self> {
        if rows.len() != payments.len() {
            return Err(Error::invalid(
                "payments",
                format!("{} rows but {} payments", rows.len(), payments.len()),
            ));
        }
        let n = rows.len();
        let states = rows
            .into_iter()
            .zip(payments)
            .enumerate()
            .map(|(i, (row, payment))| StateSpec {
                min_actions: vec![MinAction {
                    label: format!("s{i}"),
                    options: vec![MaxOption {
                        label: format!("s{i}"),
                        payment,
                        row,
                    }],
                }],
            })
            .collect();
        Self::new(n, states)
    }

    #[inline]
    fn option_value(opt: &MaxOption, x: &[f64]) -> f64 {
        opt.payment + opt.row.iter().zip(x).map(|(p, v)| p * v).sum::<f64>()
    }

    /// Best MAX option for `action` at `x`: (index, value).
    #[inline]
    pub(crate) fn best_option(action: &MinAction, x: &[f64]) -> (usize, f64) {
        let mut best = (0, Self::option_value(&action.options[0], x));
        for (b, opt) in action.options.iter().enumerate().skip(1) {
            let v = Self::option_value(opt, x);
            if v > best.1 {
                best = (b, v);
            }
        }
        best
    }

    /// `T_i(x)` together with the selected actions.
    #[inline]
    pub(crate) fn state_value(&self, i: usize, x: &[f64]) -> (Selection, f64) {
        let actions = &self.states[i].min_actions;
        let (b0, v0) = Self::best_option(&actions[0], x);
        let mut sel = Selection {
            min_action: 0,
            max_option: b0,
        };
        let mut best = v0;
        for (a, action) in actions.iter().enumerate().skip(1) {
            let (b, v) = Self::best_option(action, x);
            if v < best {
                best = v;
                sel = Selection {
                    min_action: a,
                    max_option: b,
                };
            }
        }
        (sel, best)
    }

    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.state_value(i, x).1;
        }
    }

    /// `T(x)` with the per-state selections that attain it.
    pub fn evaluate_with_selection(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Selection>)> {
        check_dim("state vector", self.n, x)?;
        let (sel, val): (Vec<_>, Vec<_>) = (0..self.n).map(|i| self.state_value(i, x)).unzip();
        Ok((val, sel))
    }

    pub(crate) fn option(&self, i: usize, sel: Selection) -> &MaxOption {
        &self.states[i].min_actions[sel.min_action].options[sel.max_option]
    }
}

fn validate_row(field: &str, row: &[f64], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(Error::invalid(
            field,
            format!("probability row has length {}, expected {n}", row.len()),
        ));
    }
    if let Some(j) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(
            field,
            format!("entry {j} is {} (must be finite and nonnegative)", row[j]),
        ));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::invalid(
            field,
            format!("probabilities sum to {sum}, not 1"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(rows: Vec<Vec<f64>>, r: Vec<f64>) -> Result<GameSpec> {
        GameSpec::markov_chain(rows, r)
    }

    #[test]
    fn rejects_bad_rows() {
        let err = chain(vec![vec![0.5, 0.6], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("states[0].min_actions[0].options[0].row"), "{err}");
        let err = chain(vec![vec![1.5, -0.5], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("nonnegative"));
        let err = chain(vec![vec![1.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("length 1"));
        // within tolerance is accepted, beyond is refused without renormalizing
        assert!(chain(vec![vec![0.5, 0.5 + 1e-13], vec![0.0, 1.0]], vec![0.0, 0.0]).is_ok());
        assert!(chain(vec![vec![0.5, 0.5 + 1e-11], vec![0.0, 1.0]], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn rejects_empty_action_lists_and_bad_payments() {
        let err = GameSpec::new(1, vec![StateSpec { min_actions: vec![] }]).unwrap_err();
        assert!(err.to_string().contains("min_actions"));
        let err = GameSpec::new(
            1,
            vec![StateSpec {
                min_actions: vec![MinAction {
                    label: "a".into(),
                    options: vec![],
                }],
            }],
        )
        .unwrap_err();
        assert!(err.to_string().contains("options"));
        let err = chain(vec![vec![1.0]], vec![f64::INFINITY]).unwrap_err();
        assert!(err.to_string().contains("payment"));
    }

    #[test]
    fn json_round_trip_and_field_errors() {
        let text = r#"{"n": 2, "states": [
            {"min_actions": [{"label": "stay", "options": [{"label": "x", "payment": 1.0, "row": [1, 0]}]}]},
            {"min_actions": [{"label": "go", "options": [{"label": "y", "payment": -2.0, "row": [0.5, 0.5]}]}]}
        ]}"#;
        let g = GameSpec::from_json(text).unwrap();
        assert_eq!(g.n(), 2);
        let back = GameSpec::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);

        let bad = text.replace("[0.5, 0.5]", "[0.5, 0.25]");
        let err = GameSpec::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("states[1].min_actions[0].options[0].row"), "{err}");
    }

    #[test]
    fn ties_pick_lowest_index() {
        let opt = |p: f64| MaxOption {
            label: String::new(),
            payment: p,
            row: vec![1.0],
        };
        let game = GameSpec::new(
            1,
            vec![StateSpec {
                min_actions: vec![
                    MinAction { label: "a0".into(), options: vec![opt(2.0), opt(2.0)] },
                    MinAction { label: "a1".into(), options: vec![opt(1.0), opt(2.0), opt(2.0)] },
                ],
            }],
        )
        .unwrap();
        let (v, sel) = game.evaluate_with_selection(&[0.0]).unwrap();
        assert_eq!(v, vec![2.0]);
        assert_eq!(sel[0], Selection { min_action: 0, max_option: 0 });
    }
}
