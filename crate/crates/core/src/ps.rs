//! Projective Simulation agent on a two-layer percept/action clip network.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::table::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlowVariant {
    Replacing,
    Accumulating,
    FirstVisit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Probabilities proportional to `h`.
    LinearH,
    /// Softmax of `h` with the fixed `beta_fixed`.
    SoftmaxH,
    /// Softmax of `ĥ = h / (N + 1)` with `β_m = c ln(m + 1)`.
    SoftmaxHtildeGlie,
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsParams {
    pub eta: f64,
    #[serde(default)]
    pub gamma_damp: f64,
    #[serde(default = "default_one")]
    pub h_eq: f64,
    #[serde(default = "default_one")]
    pub h0: f64,
    pub glow_variant: GlowVariant,
    /// Ordering parameter `s`: 1 damps then resets, `1 - η` resets then damps.
    #[serde(default = "default_one")]
    pub glow_order_s: f64,
    pub policy_kind: PolicyKind,
    #[serde(default = "default_one")]
    pub beta_fixed: f64,
    /// GLIE coefficient; `None` means `1 / (2 n_s B_ĥ)` from the MDP.
    #[serde(default)]
    pub glie_c: Option<f64>,
    /// Reset glow at every episode end, not only for first-visit glow.
    #[serde(default)]
    pub reset_glow_each_episode: bool,
}

impl Default for PsParams {
    fn default() -> Self {
        Self {
            eta: 0.5,
            gamma_damp: 0.0,
            h_eq: 1.0,
            h0: 1.0,
            glow_variant: GlowVariant::Replacing,
            glow_order_s: 1.0,
            policy_kind: PolicyKind::LinearH,
            beta_fixed: 1.0,
            glie_c: None,
            reset_glow_each_episode: false,
        }
    }
}

impl PsParams {
    /// The convergent configuration: first-visit glow, no damping, `η = 1 - γ_dis`, GLIE softmax.
    pub fn theorem(gamma_dis: f64) -> Self {
        Self {
            eta: 1.0 - gamma_dis,
            gamma_damp: 0.0,
            h_eq: 0.0,
            h0: 0.0,
            glow_variant: GlowVariant::FirstVisit,
            glow_order_s: 1.0,
            policy_kind: PolicyKind::SoftmaxHtildeGlie,
            beta_fixed: 0.0,
            glie_c: None,
            reset_glow_each_episode: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} = {x} outside [0, 1]")))
            }
        };
        unit("eta", self.eta)?;
        unit("gamma_damp", self.gamma_damp)?;
        for (name, x) in [
            ("h_eq", self.h_eq),
            ("h0", self.h0),
            ("glow_order_s", self.glow_order_s),
        ] {
            if !x.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if !(self.beta_fixed >= 0.0 && self.beta_fixed.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta_fixed = {} must be finite and >= 0",
                self.beta_fixed
            )));
        }
        if let Some(c) = self.glie_c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidParameter(format!("glie_c = {c} must be > 0")));
            }
        }
        if self.policy_kind == PolicyKind::LinearH && (self.h0 < 0.0 || self.h_eq < 0.0) {
            return Err(Error::InvalidParameter(
                "linear_h policy needs h0 >= 0 and h_eq >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Bound on `|ĥ|` used by the default GLIE coefficient: `B_R / (1 - γ_dis)`.
///
/// For `γ_dis = 1` the first-visit return bound `B_R / η` is used instead.
pub fn h_tilde_bound(mdp: &Mdp, eta: f64) -> f64 {
    if mdp.gamma_dis < 1.0 {
        mdp.reward_bound / (1.0 - mdp.gamma_dis)
    } else if eta > 0.0 {
        mdp.reward_bound / eta
    } else {
        f64::INFINITY
    }
}

/// `c = 1 / (2 n_s B_ĥ)`, falling back to 1 when the bound is zero or infinite.
pub fn default_glie_c(mdp: &Mdp, eta: f64) -> f64 {
    let b = h_tilde_bound(mdp, eta);
    let n_s = mdp.n_non_terminal().max(1) as f64;
    if b > 0.0 && b.is_finite() {
        1.0 / (2.0 * n_s * b)
    } else {
        1.0
    }
}

/// `β_m = c ln(m + 1)`.
pub fn glie_beta(m: u64, glie_c: f64) -> f64 {
    glie_c * ((m + 1) as f64).ln()
}

/// `α ← α / (1 + α)` on a visit, unchanged otherwise.
pub fn adaptive_alpha_update(alpha: f64, visited: bool) -> f64 {
    if visited {
        alpha / (1.0 + alpha)
    } else {
        alpha
    }
}

/// Max-shifted softmax of `beta * row`.
pub fn softmax(row: &[f64], beta: f64) -> Vec<f64> {
    let m = row
        .iter()
        .map(|&x| beta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (beta * x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `Π(x) = x` policy; all-zero rows are uniform, negative entries are an error.
pub fn linear_distribution(row: &[f64], state: usize) -> Result<Vec<f64>> {
    if let Some(&value) = row.iter().find(|&&x| x < 0.0) {
        return Err(Error::NegativeLinearWeight { state, value });
    }
    let total: f64 = row.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / row.len() as f64; row.len()]);
    }
    Ok(row.iter().map(|x| x / total).collect())
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct PsAgent {
    params: PsParams,
    glie_c: f64,
    terminal: Vec<bool>,
    h: Table<f64>,
    g: Table<f64>,
    n_visits: Table<u64>,
    episode_index: u64,
    visited: Table<bool>,
    beta_current: f64,
    /// Flat indices with nonzero glow, in order of activation.
    active: Vec<usize>,
    is_active: Vec<bool>,
    /// Edges counted in `n_visits` during the current episode (first-visit counting).
    episode_visits: Vec<usize>,
}

impl PsAgent {
    /// Agent without an MDP; `glie_c` must be set in `params` if the GLIE policy is used.
    pub fn new(
        params: PsParams,
        n_states: usize,
        n_actions: usize,
        terminal_states: &BTreeSet<usize>,
    ) -> Result<Self> {
        params.check()?;
        if n_actions == 0 {
            return Err(Error::InvalidParameter("need at least one action".into()));
        }
        let glie_c = match (params.policy_kind, params.glie_c) {
            (_, Some(c)) => c,
            (PolicyKind::SoftmaxHtildeGlie, None) => {
                return Err(Error::InvalidParameter(
                    "glie_c must be given when no mdp is available".into(),
                ))
            }
            (_, None) => 1.0,
        };
        let mut terminal = vec![false; n_states];
        for &t in terminal_states {
            *terminal.get_mut(t).ok_or(Error::IndexOutOfRange {
                what: "terminal state",
                index: t,
                limit: n_states,
            })? = true;
        }
        let mut h = Table::filled(n_states, n_actions, params.h0);
        for (s, &term) in terminal.iter().enumerate() {
            if term {
                h.fill_row(s, 0.0);
            }
        }
        let len = n_states * n_actions;
        let mut agent = Self {
            params,
            glie_c,
            terminal,
            h,
            g: Table::zeros(n_states, n_actions),
            n_visits: Table::filled(n_states, n_actions, 0),
            episode_index: 1,
            visited: Table::filled(n_states, n_actions, false),
            beta_current: 0.0,
            active: Vec::new(),
            is_active: vec![false; len],
            episode_visits: Vec::new(),
        };
        agent.params.glie_c = Some(glie_c);
        agent.beta_current = agent.beta_for(1);
        Ok(agent)
    }

    /// Agent sized for `mdp`, resolving the default GLIE coefficient.
    pub fn for_mdp(params: PsParams, mdp: &Mdp) -> Result<Self> {
        if params.policy_kind == PolicyKind::LinearH && mdp.min_reward() < 0.0 {
            return Err(Error::InvalidParameter(
                "linear_h policy needs non-negative rewards".into(),
            ));
        }
        let mut params = params;
        if params.glie_c.is_none() {
            params.glie_c = Some(default_glie_c(mdp, params.eta));
        }
        Self::new(params, mdp.n_states, mdp.n_actions, &mdp.terminal_states)
    }

    fn beta_for(&self, m: u64) -> f64 {
        match self.params.policy_kind {
            PolicyKind::SoftmaxHtildeGlie => glie_beta(m, self.glie_c),
            PolicyKind::SoftmaxH => self.params.beta_fixed,
            PolicyKind::LinearH => 0.0,
        }
    }

    pub fn params(&self) -> &PsParams {
        &self.params
    }

    pub fn glie_c(&self) -> f64 {
        self.glie_c
    }

    pub fn h(&self) -> &Table<f64> {
        &self.h
    }

    pub fn g(&self) -> &Table<f64> {
        &self.g
    }

    pub fn n_visits(&self) -> &Table<u64> {
        &self.n_visits
    }

    pub fn episode_index(&self) -> u64 {
        self.episode_index
    }

    pub fn beta(&self) -> f64 {
        self.beta_current
    }

    pub fn visited_this_episode(&self) -> &Table<bool> {
        &self.visited
    }

    /// Flat indices whose visit count was incremented during the current episode.
    pub fn episode_counted_edges(&self) -> &[usize] {
        &self.episode_visits
    }

    fn effective_gamma_damp(&self) -> f64 {
        match self.params.glow_variant {
            GlowVariant::FirstVisit => 0.0,
            _ => self.params.gamma_damp,
        }
    }

    /// `ĥ = h / (N + 1)`.
    pub fn normalized_h(&self) -> Table<f64> {
        let mut out = self.h.clone();
        for (x, n) in out.as_mut_slice().iter_mut().zip(self.n_visits.as_slice()) {
            *x /= (*n + 1) as f64;
        }
        out
    }

    fn normalized_row(&self, s: usize) -> Vec<f64> {
        self.h
            .row(s)
            .iter()
            .zip(self.n_visits.row(s))
            .map(|(h, n)| h / (*n + 1) as f64)
            .collect()
    }

    /// Action probabilities in state `s` under the configured policy.
    pub fn policy(&self, s: usize) -> Result<Vec<f64>> {
        if s >= self.terminal.len() {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                limit: self.terminal.len(),
            });
        }
        if self.terminal[s] {
            return Err(Error::TerminalState(s));
        }
        Ok(match self.params.policy_kind {
            PolicyKind::LinearH => linear_distribution(self.h.row(s), s)?,
            PolicyKind::SoftmaxH => softmax(self.h.row(s), self.params.beta_fixed),
            PolicyKind::SoftmaxHtildeGlie => softmax(&self.normalized_row(s), self.beta_current),
        })
    }

    pub fn select_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<usize> {
        Ok(sample_index(&self.policy(s)?, rng))
    }

    fn activate(&mut self, i: usize) {
        if !self.is_active[i] {
            self.is_active[i] = true;
            self.active.push(i);
        }
    }

    /// One interaction cycle: record the visit of `(s, a)` in the glow, then
    /// credit the following reward to every glowing edge and apply damping.
    pub fn update_step(&mut self, s: usize, a: usize, reward: f64) -> Result<()> {
        let n_states = self.terminal.len();
        if s >= n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                limit: n_states,
            });
        }
        if a >= self.h.n_actions() {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                limit: self.h.n_actions(),
            });
        }
        if self.terminal[s] {
            return Err(Error::TerminalState(s));
        }
        self.update_glow(s, a);
        self.update_h(reward);
        Ok(())
    }

    fn update_glow(&mut self, s: usize, a: usize) {
        let eta_bar = 1.0 - self.params.eta;
        let order_s = self.params.glow_order_s;
        let idx = self.g.index(s, a);
        let first = !*self.visited.get(s, a);
        *self.visited.get_mut(s, a) = true;

        // damp all glowing edges except the visited one, which is handled below
        let g = self.g.as_mut_slice();
        let mut i = 0;
        while i < self.active.len() {
            let e = self.active[i];
            if e != idx {
                g[e] *= eta_bar;
                if g[e] == 0.0 {
                    self.is_active[e] = false;
                    self.active.swap_remove(i);
                    continue;
                }
            }
            i += 1;
        }

        let counted = match self.params.glow_variant {
            GlowVariant::Replacing => {
                g[idx] = order_s;
                true
            }
            GlowVariant::Accumulating => {
                g[idx] = order_s + eta_bar * g[idx];
                true
            }
            GlowVariant::FirstVisit => {
                if first {
                    g[idx] = order_s + eta_bar * g[idx];
                } else {
                    g[idx] *= eta_bar;
                }
                first
            }
        };
        if g[idx] != 0.0 {
            self.activate(idx);
        } else if self.is_active[idx] {
            self.is_active[idx] = false;
            self.active.retain(|&e| e != idx);
        }
        if counted {
            *self.n_visits.get_mut(s, a) += 1;
            if self.params.glow_variant == GlowVariant::FirstVisit {
                self.episode_visits.push(idx);
            }
        }
    }

    fn update_h(&mut self, reward: f64) {
        let gamma_damp = self.effective_gamma_damp();
        let h_eq = self.params.h_eq;
        let n_actions = self.h.n_actions();
        if gamma_damp == 0.0 {
            if reward == 0.0 {
                return;
            }
            let h = self.h.as_mut_slice();
            let g = self.g.as_slice();
            for &e in &self.active {
                h[e] += g[e] * reward;
            }
            return;
        }
        let g = self.g.as_slice();
        for (s, &term) in self.terminal.iter().enumerate() {
            if term {
                continue;
            }
            let row = &mut self.h.as_mut_slice()[s * n_actions..(s + 1) * n_actions];
            for (a, h) in row.iter_mut().enumerate() {
                *h = *h - gamma_damp * (*h - h_eq) + g[s * n_actions + a] * reward;
            }
        }
    }

    /// Episode boundary: clears per-episode flags, resets glow where required,
    /// advances `m` and recomputes `β`.
    pub fn end_episode(&mut self) {
        if self.params.glow_variant == GlowVariant::FirstVisit || self.params.reset_glow_each_episode {
            let g = self.g.as_mut_slice();
            for &e in &self.active {
                g[e] = 0.0;
                self.is_active[e] = false;
            }
            self.active.clear();
        }
        self.visited.fill(false);
        self.episode_visits.clear();
        self.episode_index += 1;
        self.beta_current = self.beta_for(self.episode_index);
    }

    pub fn snapshot(&self) -> PsSnapshot {
        PsSnapshot {
            params: self.params.clone(),
            terminal_states: self
                .terminal
                .iter()
                .enumerate()
                .filter_map(|(s, &t)| t.then_some(s))
                .collect(),
            h: self.h.clone(),
            g: self.g.clone(),
            n: self.n_visits.clone(),
            episode_index: self.episode_index,
        }
    }

    pub fn from_snapshot(snap: PsSnapshot) -> Result<Self> {
        let (ns, na) = (snap.h.n_states(), snap.h.n_actions());
        if (snap.g.n_states(), snap.g.n_actions()) != (ns, na)
            || (snap.n.n_states(), snap.n.n_actions()) != (ns, na)
        {
            return Err(Error::InvalidParameter("snapshot tables differ in shape".into()));
        }
        let mut agent = Self::new(snap.params, ns, na, &snap.terminal_states)?;
        agent.h = snap.h;
        agent.g = snap.g;
        agent.n_visits = snap.n;
        agent.episode_index = snap.episode_index.max(1);
        agent.beta_current = agent.beta_for(agent.episode_index);
        for i in 0..agent.g.len() {
            if agent.g.as_slice()[i] != 0.0 {
                agent.activate(i);
            }
        }
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.snapshot())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let snap: PsSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_snapshot(snap)
    }
}

/// Serialisable agent state. Glow is stored even though first-visit agents
/// only persist cleanly at episode boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsSnapshot {
    pub params: PsParams,
    pub terminal_states: BTreeSet<usize>,
    pub h: Table<f64>,
    pub g: Table<f64>,
    #[serde(rename = "N")]
    pub n: Table<u64>,
    pub episode_index: u64,
}
