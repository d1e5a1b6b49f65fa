//! Tabular SARSA(λ), one-step SARSA and Q-learning baselines.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::solver::argmax;
use crate::table::Table;

/// Action-value table; terminal rows stay at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: Table<f64>,
    pub alpha: f64,
    pub gamma_dis: f64,
    pub lambda_tra: f64,
    pub terminal_states: BTreeSet<usize>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, alpha: f64, gamma_dis: f64, lambda_tra: f64) -> Self {
        Self {
            q: Table::zeros(n_states, n_actions),
            alpha,
            gamma_dis,
            lambda_tra,
            terminal_states: BTreeSet::new(),
        }
    }

    pub fn for_mdp(mdp: &Mdp, alpha: f64, lambda_tra: f64) -> Self {
        Self {
            terminal_states: mdp.terminal_states.clone(),
            ..Self::new(mdp.n_states, mdp.n_actions, alpha, mdp.gamma_dis, lambda_tra)
        }
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_states.contains(&s)
    }

    /// `q(s, a)`, reading zero for terminal states.
    pub fn value(&self, s: usize, a: usize) -> f64 {
        if self.is_terminal(s) {
            0.0
        } else {
            *self.q.get(s, a)
        }
    }

    pub fn max_value(&self, s: usize) -> f64 {
        if self.is_terminal(s) {
            return 0.0;
        }
        self.q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Eligibility traces, one per `(state, action)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMatrix {
    pub z: Table<f64>,
}

impl TraceMatrix {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            z: Table::zeros(n_states, n_actions),
        }
    }

    pub fn reset(&mut self) {
        self.z.fill(0.0);
    }
}

/// `δ = r + γ q(s', a') - q(s, a)`.
pub fn td_error(q: &QTable, s: usize, a: usize, r: f64, s2: usize, a2: usize) -> f64 {
    r + q.gamma_dis * q.value(s2, a2) - q.value(s, a)
}

/// SARSA(λ) with accumulating traces: decay, mark the visit, then move every traced entry.
#[allow(clippy::too_many_arguments)]
pub fn sarsa_lambda_step(q: &mut QTable, z: &mut TraceMatrix, s: usize, a: usize, r: f64, s2: usize, a2: usize) {
    let delta = td_error(q, s, a, r, s2, a2);
    let decay = q.gamma_dis * q.lambda_tra;
    for x in z.z.as_mut_slice() {
        *x *= decay;
    }
    *z.z.get_mut(s, a) += 1.0;
    let step = q.alpha * delta;
    for (v, e) in q.q.as_mut_slice().iter_mut().zip(z.z.as_slice()) {
        if *e != 0.0 {
            *v += step * e;
        }
    }
}

/// One-step SARSA: `q(s, a) += α δ`.
pub fn sarsa_step(q: &mut QTable, s: usize, a: usize, r: f64, s2: usize, a2: usize) {
    let delta = td_error(q, s, a, r, s2, a2);
    let step = q.alpha * delta;
    *q.q.get_mut(s, a) += step;
}

/// `q(s, a) ← (1 - α) q(s, a) + α (r + γ max_b q(s', b))`.
pub fn q_learning_step(q: &mut QTable, s: usize, a: usize, r: f64, s2: usize) {
    let target = r + q.gamma_dis * q.max_value(s2);
    let alpha = q.alpha;
    let v = q.q.get_mut(s, a);
    *v = (1.0 - alpha) * *v + alpha * target;
}

/// SARSA(λ) rewritten in the local style of the PS update:
/// `h ← h + α r g - α h(s, a) [δ_sa / λ + (1 - 1/λ) g]`, after `g ← γλ g + δ_sa`.
#[allow(clippy::too_many_arguments)]
pub fn ps_style_sarsa_step(
    h: &mut Table<f64>,
    g: &mut Table<f64>,
    s: usize,
    a: usize,
    reward_next: f64,
    lambda_tra: f64,
    gamma_dis: f64,
    alpha: f64,
) -> Result<()> {
    if !(lambda_tra > 0.0) {
        return Err(Error::InvalidParameter(
            "ps-style sarsa needs lambda_tra > 0".into(),
        ));
    }
    let decay = gamma_dis * lambda_tra;
    for x in g.as_mut_slice() {
        *x *= decay;
    }
    *g.get_mut(s, a) += 1.0;
    let visited = h.index(s, a);
    let h_sa = h.as_slice()[visited];
    let inv = lambda_tra.recip();
    for (i, (hv, gv)) in h.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
        let kron = if i == visited { 1.0 } else { 0.0 };
        *hv += alpha * reward_next * gv - alpha * h_sa * (inv * kron + (1.0 - inv) * gv);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EpsilonSchedule {
    Constant { epsilon: f64 },
    /// `ε_m = ε0 τ / (τ + m - 1)`; `τ = 1` gives `ε0 / m`.
    Harmonic { epsilon0: f64, tau: f64 },
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self::Constant { epsilon: 0.1 }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, m: u64) -> f64 {
        match *self {
            Self::Constant { epsilon } => epsilon,
            Self::Harmonic { epsilon0, tau } => epsilon0 * tau / (tau + (m as f64 - 1.0)),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Self::Constant { epsilon } => (0.0..=1.0).contains(&epsilon),
            Self::Harmonic { epsilon0, tau } => (0.0..=1.0).contains(&epsilon0) && tau > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad epsilon schedule {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepSize {
    Constant { alpha: f64 },
    /// `α = 1 / N(s, a)` counting updates of the pair.
    InverseCount,
}

impl Default for StepSize {
    fn default() -> Self {
        Self::Constant { alpha: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Sarsa,
    QLearning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineParams {
    pub method: BaselineKind,
    #[serde(default)]
    pub lambda_tra: f64,
    #[serde(default)]
    pub step_size: StepSize,
    #[serde(default)]
    pub epsilon: EpsilonSchedule,
}

/// ε-greedy probabilities with ties going to the lowest index.
pub fn epsilon_greedy_distribution(row: &[f64], epsilon: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mut p = vec![epsilon / n; row.len()];
    p[argmax(row)] += 1.0 - epsilon;
    p
}

pub fn epsilon_greedy<R: Rng + ?Sized>(row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..row.len())
    } else {
        argmax(row)
    }
}

/// A learning baseline with its exploration and step-size schedules.
#[derive(Clone, Debug)]
pub struct BaselineAgent {
    pub params: BaselineParams,
    pub q: QTable,
    pub z: TraceMatrix,
    pub counts: Table<u64>,
    pub episode_index: u64,
}

impl BaselineAgent {
    pub fn for_mdp(params: BaselineParams, mdp: &Mdp) -> Result<Self> {
        params.epsilon.check()?;
        if !(0.0..=1.0).contains(&params.lambda_tra) {
            return Err(Error::InvalidParameter(format!(
                "lambda_tra = {} outside [0, 1]",
                params.lambda_tra
            )));
        }
        if let StepSize::Constant { alpha } = params.step_size {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidParameter(format!("alpha = {alpha} outside [0, 1]")));
            }
        }
        let alpha = match params.step_size {
            StepSize::Constant { alpha } => alpha,
            StepSize::InverseCount => 1.0,
        };
        Ok(Self {
            q: QTable::for_mdp(mdp, alpha, params.lambda_tra),
            z: TraceMatrix::new(mdp.n_states, mdp.n_actions),
            counts: Table::filled(mdp.n_states, mdp.n_actions, 0),
            episode_index: 1,
            params,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon.at(self.episode_index)
    }

    pub fn policy(&self, s: usize) -> Vec<f64> {
        epsilon_greedy_distribution(self.q.q.row(s), self.epsilon())
    }

    pub fn select_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        epsilon_greedy(self.q.q.row(s), self.epsilon(), rng)
    }

    /// Learns from `(s, a, r, s', a')`; `a2` is ignored by Q-learning and at terminal `s'`.
    pub fn update(&mut self, s: usize, a: usize, r: f64, s2: usize, a2: usize) {
        let n = self.counts.get_mut(s, a);
        *n += 1;
        if self.params.step_size == StepSize::InverseCount {
            self.q.alpha = 1.0 / *n as f64;
        }
        match self.params.method {
            BaselineKind::QLearning => q_learning_step(&mut self.q, s, a, r, s2),
            BaselineKind::Sarsa if self.params.lambda_tra == 0.0 => sarsa_step(&mut self.q, s, a, r, s2, a2),
            BaselineKind::Sarsa => sarsa_lambda_step(&mut self.q, &mut self.z, s, a, r, s2, a2),
        }
    }

    pub fn end_episode(&mut self) {
        self.z.reset();
        self.episode_index += 1;
    }

    pub fn snapshot(&self) -> BaselineSnapshot {
        BaselineSnapshot {
            params: self.params.clone(),
            q: self.q.q.clone(),
            z: self.z.z.clone(),
            n: self.counts.clone(),
            episode_index: self.episode_index,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.snapshot())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, mdp: &Mdp) -> Result<Self> {
        let snap: BaselineSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut agent = Self::for_mdp(snap.params, mdp)?;
        if snap.q.n_states() != mdp.n_states || snap.q.n_actions() != mdp.n_actions {
            return Err(Error::InvalidParameter("snapshot does not match mdp shape".into()));
        }
        agent.q.q = snap.q;
        agent.z.z = snap.z;
        agent.counts = snap.n;
        agent.episode_index = snap.episode_index;
        Ok(agent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSnapshot {
    pub params: BaselineParams,
    pub q: Table<f64>,
    pub z: Table<f64>,
    #[serde(rename = "N")]
    pub n: Table<u64>,
    pub episode_index: u64,
}
