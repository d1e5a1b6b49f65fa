//! Exact dynamic-programming solutions used as the ground truth for learners.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::table::Table;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 1_000_000;

/// Relative slack used when deciding whether two q-values are tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QStarTable {
    pub values: Table<f64>,
    pub gamma_dis: f64,
    /// Sup-norm Bellman residual of `values`.
    pub residual: f64,
}

impl QStarTable {
    pub fn state_values(&self) -> Vec<f64> {
        (0..self.values.n_states())
            .map(|s| row_max(self.values.row(s)))
            .collect()
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_discount(mdp: &Mdp) -> Result<()> {
    mdp.ensure_valid()?;
    if mdp.gamma_dis == 1.0 {
        if !mdp.terminals_reachable_from_all() {
            return Err(Error::ImproperMdp(
                "gamma_dis = 1 but some state cannot reach a terminal state".into(),
            ));
        }
        warn!("gamma_dis = 1: value iteration converges only if every policy is proper and may stall");
    }
    Ok(())
}

/// One synchronous Bellman backup of `q` into `out`, with `next_value(s')`
/// giving the continuation value of a successor.
fn backup(mdp: &Mdp, out: &mut Table<f64>, next_value: impl Fn(usize) -> f64) {
    for s in 0..mdp.n_states {
        if mdp.is_terminal(s) {
            out.fill_row(s, 0.0);
            continue;
        }
        for a in 0..mdp.n_actions {
            *out.get_mut(s, a) = mdp
                .outcomes(s, a)
                .iter()
                .map(|o| {
                    let cont = if mdp.is_terminal(o.next_state) {
                        0.0
                    } else {
                        next_value(o.next_state)
                    };
                    o.prob * (o.reward + mdp.gamma_dis * cont)
                })
                .sum();
        }
    }
}

fn optimal_backup(mdp: &Mdp, q: &Table<f64>, out: &mut Table<f64>) {
    backup(mdp, out, |s| row_max(q.row(s)));
}

fn policy_backup(mdp: &Mdp, policy: &Table<f64>, q: &Table<f64>, out: &mut Table<f64>) {
    backup(mdp, out, |s| {
        q.row(s).iter().zip(policy.row(s)).map(|(v, p)| v * p).sum()
    });
}

/// Sup-norm distance between `q` and its optimal Bellman backup.
pub fn bellman_residual(mdp: &Mdp, q: &Table<f64>) -> f64 {
    let mut next = Table::zeros(mdp.n_states, mdp.n_actions);
    optimal_backup(mdp, q, &mut next);
    next.max_abs_diff(q, |_| true)
}

fn iterate(
    mdp: &Mdp,
    tol: f64,
    max_iters: usize,
    mut history: Option<&mut Vec<f64>>,
    step: impl Fn(&Table<f64>, &mut Table<f64>),
) -> Result<Table<f64>> {
    let mut q = Table::zeros(mdp.n_states, mdp.n_actions);
    let mut next = q.clone();
    let mut delta = f64::INFINITY;
    for _ in 0..max_iters {
        step(&q, &mut next);
        delta = next.max_abs_diff(&q, |_| true);
        std::mem::swap(&mut q, &mut next);
        if let Some(h) = history.as_deref_mut() {
            h.push(delta);
        }
        if delta <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        residual: delta,
    })
}

/// `q*` by Jacobi value iteration from `q = 0`.
pub fn value_iteration(mdp: &Mdp, tol: f64, max_iters: usize) -> Result<QStarTable> {
    value_iteration_with_history(mdp, tol, max_iters).map(|(q, _)| q)
}

/// As [`value_iteration`], also returning the per-sweep sup-norm change.
pub fn value_iteration_with_history(
    mdp: &Mdp,
    tol: f64,
    max_iters: usize,
) -> Result<(QStarTable, Vec<f64>)> {
    check_discount(mdp)?;
    let mut history = Vec::new();
    let values = iterate(mdp, tol, max_iters, Some(&mut history), |q, out| {
        optimal_backup(mdp, q, out)
    })?;
    let residual = bellman_residual(mdp, &values);
    if residual > tol {
        return Err(Error::NoConvergence {
            iters: history.len(),
            residual,
        });
    }
    Ok((
        QStarTable {
            values,
            gamma_dis: mdp.gamma_dis,
            residual,
        },
        history,
    ))
}

/// `q_π` for a stochastic policy given as a row-stochastic table.
pub fn policy_q_values(
    mdp: &Mdp,
    policy: &Table<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<Table<f64>> {
    check_discount(mdp)?;
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(Error::InvalidParameter(format!(
            "policy table is {}x{}, mdp is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    iterate(mdp, tol, max_iters, None, |q, out| {
        policy_backup(mdp, policy, q, out)
    })
}

/// Lowest-index argmax per state; terminal rows map to 0 as well since they are all zero.
pub fn greedy_policy(q: &QStarTable) -> Vec<usize> {
    greedy_actions(&q.values)
}

pub fn greedy_actions(q: &Table<f64>) -> Vec<usize> {
    (0..q.n_states()).map(|s| argmax(q.row(s))).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Actions whose value is within [`TIE_TOL`] (relative to the row scale) of the row maximum.
pub fn optimal_action_set(row: &[f64]) -> Vec<usize> {
    let m = row_max(row);
    let slack = TIE_TOL * m.abs().max(1.0);
    (0..row.len()).filter(|&a| row[a] >= m - slack).collect()
}

/// Smallest gap between the optimal actions and the best non-optimal action
/// over non-terminal states; infinite if every action is optimal everywhere.
pub fn min_action_gap(mdp: &Mdp, q: &Table<f64>) -> f64 {
    mdp.non_terminal_states()
        .filter_map(|s| {
            let row = q.row(s);
            let best = optimal_action_set(row);
            let m = row_max(row);
            (0..row.len())
                .filter(|a| !best.contains(a))
                .map(|a| m - row[a])
                .reduce(f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Deterministic policy as a one-hot probability table.
pub fn deterministic_policy_table(policy: &[usize], n_actions: usize) -> Table<f64> {
    let mut t = Table::zeros(policy.len(), n_actions);
    for (s, &a) in policy.iter().enumerate() {
        *t.get_mut(s, a) = 1.0;
    }
    t
}

pub fn uniform_policy_table(n_states: usize, n_actions: usize) -> Table<f64> {
    Table::filled(n_states, n_actions, 1.0 / n_actions as f64)
}

#[derive(Serialize)]
struct QRow {
    state: usize,
    action: usize,
    q_value: f64,
}

/// Writes `state,action,q_value` rows in state-major order.
pub fn write_q_csv(path: impl AsRef<Path>, q: &Table<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for state in 0..q.n_states() {
        for action in 0..q.n_actions() {
            w.serialize(QRow {
                state,
                action,
                q_value: *q.get(state, action),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
