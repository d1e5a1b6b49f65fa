//! Tabular episodic Markov decision processes.
//!
//! Rewards live on transitions: each `(state, action)` pair owns an ordered
//! list of `(next_state, reward, probability)` outcomes, the joint form
//! `p(s', r | s, a)`. Terminal states are absorbing: every action leads back
//! to the same state with reward zero.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MASS_TOLERANCE: f64 = 1e-12;

/// One possible result of taking an action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, f64, f64)", into = "(usize, f64, f64)")]
pub struct Outcome {
    pub next_state: usize,
    pub reward: f64,
    pub prob: f64,
}

impl Outcome {
    pub fn new(next_state: usize, reward: f64, prob: f64) -> Self {
        Self {
            next_state,
            reward,
            prob,
        }
    }
}

impl From<(usize, f64, f64)> for Outcome {
    fn from((next_state, reward, prob): (usize, f64, f64)) -> Self {
        Self::new(next_state, reward, prob)
    }
}

impl From<Outcome> for (usize, f64, f64) {
    fn from(o: Outcome) -> Self {
        (o.next_state, o.reward, o.prob)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` is the outcome list of `(s, a)`.
    pub transitions: Vec<Vec<Vec<Outcome>>>,
    pub terminal_states: BTreeSet<usize>,
    pub gamma_dis: f64,
    pub reward_bound: f64,
}

/// A single failed well-formedness check.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape(String),
    TerminalOutOfRange(usize),
    NextStateOutOfRange {
        state: usize,
        action: usize,
        next_state: usize,
    },
    BadProbability {
        state: usize,
        action: usize,
        prob: f64,
    },
    ProbabilityMass {
        state: usize,
        action: usize,
        mass: f64,
    },
    TerminalNotAbsorbing {
        state: usize,
        action: usize,
    },
    TerminalReward {
        state: usize,
        action: usize,
        reward: f64,
    },
    RewardBound {
        state: usize,
        action: usize,
        reward: f64,
        bound: f64,
    },
    Discount(f64),
    NegativeRewardBound(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::TerminalOutOfRange(s) => write!(f, "terminal state {s} out of range"),
            Violation::NextStateOutOfRange {
                state,
                action,
                next_state,
            } => write!(
                f,
                "state {state} action {action}: next state {next_state} out of range"
            ),
            Violation::BadProbability {
                state,
                action,
                prob,
            } => write!(
                f,
                "state {state} action {action}: probability {prob} outside [0, 1]"
            ),
            Violation::ProbabilityMass {
                state,
                action,
                mass,
            } => write!(
                f,
                "state {state} action {action}: probability mass {mass} ≠ 1"
            ),
            Violation::TerminalNotAbsorbing { state, action } => write!(
                f,
                "terminal state {state} action {action}: must have exactly one self-loop outcome with probability 1"
            ),
            Violation::TerminalReward {
                state,
                action,
                reward,
            } => write!(
                f,
                "terminal state {state} action {action}: terminal reward must be 0 (got {reward})"
            ),
            Violation::RewardBound {
                state,
                action,
                reward,
                bound,
            } => write!(
                f,
                "state {state} action {action}: |reward| {reward} exceeds reward bound {bound}"
            ),
            Violation::Discount(g) => write!(f, "gamma_dis {g} outside [0, 1]"),
            Violation::NegativeRewardBound(b) => {
                write!(f, "reward_bound {b} must be finite and non-negative")
            }
        }
    }
}

impl Mdp {
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_states.contains(&s)
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(move |s| !self.is_terminal(*s))
    }

    pub fn n_non_terminal(&self) -> usize {
        self.n_states - self.terminal_states.len()
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.transitions[s][a]
    }

    /// `r(s, a)`, the expected immediate reward.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.outcomes(s, a).iter().map(|o| o.prob * o.reward).sum()
    }

    /// Largest `|reward|` over all listed outcomes.
    pub fn max_abs_reward(&self) -> f64 {
        self.transitions
            .iter()
            .flatten()
            .flatten()
            .map(|o| o.reward.abs())
            .fold(0.0, f64::max)
    }

    pub fn min_reward(&self) -> f64 {
        self.transitions
            .iter()
            .flatten()
            .flatten()
            .map(|o| o.reward)
            .fold(f64::INFINITY, f64::min)
    }

    /// Every invariant violation; empty iff the model is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma_dis) {
            out.push(Violation::Discount(self.gamma_dis));
        }
        if !(self.reward_bound.is_finite() && self.reward_bound >= 0.0) {
            out.push(Violation::NegativeRewardBound(self.reward_bound));
        }
        for &t in &self.terminal_states {
            if t >= self.n_states {
                out.push(Violation::TerminalOutOfRange(t));
            }
        }
        if self.transitions.len() != self.n_states {
            out.push(Violation::Shape(format!(
                "transitions has {} rows, expected n_states = {}",
                self.transitions.len(),
                self.n_states
            )));
            return out;
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != self.n_actions {
                out.push(Violation::Shape(format!(
                    "state {s} lists {} actions, expected n_actions = {}",
                    row.len(),
                    self.n_actions
                )));
                continue;
            }
            let terminal = self.is_terminal(s);
            for (a, outcomes) in row.iter().enumerate() {
                if terminal {
                    match outcomes.as_slice() {
                        [o] if o.next_state == s && o.prob == 1.0 => {
                            if o.reward != 0.0 {
                                out.push(Violation::TerminalReward {
                                    state: s,
                                    action: a,
                                    reward: o.reward,
                                });
                            }
                        }
                        _ => out.push(Violation::TerminalNotAbsorbing {
                            state: s,
                            action: a,
                        }),
                    }
                    continue;
                }
                let mut mass = 0.0;
                for o in outcomes {
                    if o.next_state >= self.n_states {
                        out.push(Violation::NextStateOutOfRange {
                            state: s,
                            action: a,
                            next_state: o.next_state,
                        });
                    }
                    if !(0.0..=1.0).contains(&o.prob) {
                        out.push(Violation::BadProbability {
                            state: s,
                            action: a,
                            prob: o.prob,
                        });
                    }
                    if !(o.reward.abs() <= self.reward_bound) {
                        out.push(Violation::RewardBound {
                            state: s,
                            action: a,
                            reward: o.reward,
                            bound: self.reward_bound,
                        });
                    }
                    mass += o.prob;
                }
                if !((mass - 1.0).abs() <= MASS_TOLERANCE) {
                    out.push(Violation::ProbabilityMass {
                        state: s,
                        action: a,
                        mass,
                    });
                }
            }
        }
        out
    }

    /// Fails with all violations joined into one message.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::InvalidMdp(msgs.join("; ")))
        }
    }

    /// Draws `(next_state, reward)` by inverse CDF over the stored outcome order.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        rng: &mut R,
    ) -> Result<(usize, f64)> {
        if s >= self.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                limit: self.n_states,
            });
        }
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                limit: self.n_actions,
            });
        }
        if self.is_terminal(s) {
            return Ok((s, 0.0));
        }
        let outcomes = self.outcomes(s, a);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for o in outcomes {
            cum += o.prob;
            if u < cum {
                return Ok((o.next_state, o.reward));
            }
        }
        // u landed in the rounding gap below 1; take the last outcome with mass.
        let last = outcomes
            .iter()
            .rev()
            .find(|o| o.prob > 0.0)
            .ok_or_else(|| Error::InvalidMdp(format!("state {s} action {a} has no outcomes")))?;
        Ok((last.next_state, last.reward))
    }

    /// True iff from every state some action sequence reaches a terminal state.
    pub fn terminals_reachable_from_all(&self) -> bool {
        if self.terminal_states.is_empty() {
            return false;
        }
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); self.n_states];
        for (s, row) in self.transitions.iter().enumerate() {
            for outcomes in row {
                for o in outcomes.iter().filter(|o| o.prob > 0.0) {
                    preds[o.next_state].push(s);
                }
            }
        }
        let mut seen = vec![false; self.n_states];
        let mut queue: VecDeque<usize> = self.terminal_states.iter().copied().collect();
        for &t in &self.terminal_states {
            seen[t] = true;
        }
        while let Some(x) = queue.pop_front() {
            for &p in &preds[x] {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        seen.into_iter().all(|b| b)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn absorbing_row(s: usize, n_actions: usize) -> Vec<Vec<Outcome>> {
    vec![vec![Outcome::new(s, 0.0, 1.0)]; n_actions]
}

pub const FORWARD: usize = 0;
pub const BACK: usize = 1;

/// Linear chain `s0 … s(n-1)` with the last state terminal.
///
/// Action 0 moves right (paying `goal_reward` on entering the terminal and
/// `step_reward` otherwise); action 1 moves left, clamped at `s0`.
pub fn make_chain(n: usize, step_reward: f64, goal_reward: f64, gamma_dis: f64) -> Result<Mdp> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "chain needs at least 2 states, got {n}"
        )));
    }
    let goal = n - 1;
    let mut transitions = Vec::with_capacity(n);
    for s in 0..goal {
        let fwd = if s + 1 == goal {
            Outcome::new(goal, goal_reward, 1.0)
        } else {
            Outcome::new(s + 1, step_reward, 1.0)
        };
        let back = Outcome::new(s.saturating_sub(1), step_reward, 1.0);
        transitions.push(vec![vec![fwd], vec![back]]);
    }
    transitions.push(absorbing_row(goal, 2));
    Ok(Mdp {
        n_states: n,
        n_actions: 2,
        transitions,
        terminal_states: BTreeSet::from([goal]),
        gamma_dis,
        reward_bound: step_reward.abs().max(goal_reward.abs()),
    })
}

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

/// Cell coordinates `(x, y)`, `x` to the right and `y` downwards.
pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: BTreeSet<Cell>,
    pub start: Cell,
    pub goal: Cell,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub gamma_dis: f64,
    #[serde(default)]
    pub slip_prob: f64,
}

impl GridSpec {
    /// Open cells in row-major order; the position is the state index.
    pub fn cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|c| !self.walls.contains(c))
            .collect()
    }

    pub fn state_of(&self, cell: Cell) -> Option<usize> {
        self.cells().iter().position(|&c| c == cell)
    }

    fn check(&self) -> Result<()> {
        let inside = |(x, y): Cell| x < self.width && y < self.height;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry("grid must be at least 1x1".into()));
        }
        if !inside(self.goal) || self.walls.contains(&self.goal) {
            return Err(Error::Geometry(format!(
                "goal {:?} must be an open cell",
                self.goal
            )));
        }
        if !inside(self.start) || self.walls.contains(&self.start) {
            return Err(Error::Geometry(format!(
                "start {:?} must be an open cell",
                self.start
            )));
        }
        if let Some(w) = self.walls.iter().find(|w| !inside(**w)) {
            return Err(Error::Geometry(format!("wall {w:?} outside the grid")));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidParameter(format!(
                "slip_prob {} outside [0, 1]",
                self.slip_prob
            )));
        }
        Ok(())
    }

    fn move_from(&self, (x, y): Cell, action: usize) -> Cell {
        let target = match action {
            UP if y > 0 => (x, y - 1),
            RIGHT if x + 1 < self.width => (x + 1, y),
            DOWN if y + 1 < self.height => (x, y + 1),
            LEFT if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        if self.walls.contains(&target) {
            (x, y)
        } else {
            target
        }
    }

    pub fn build(&self) -> Result<Mdp> {
        self.check()?;
        let cells = self.cells();
        let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let goal = index[&self.goal];
        let mut transitions = Vec::with_capacity(cells.len());
        for (s, &cell) in cells.iter().enumerate() {
            if s == goal {
                transitions.push(absorbing_row(s, 4));
                continue;
            }
            let mut row = Vec::with_capacity(4);
            for intended in 0..4 {
                // merged by destination, in order of first appearance
                let mut outcomes: Vec<Outcome> = Vec::new();
                for actual in 0..4 {
                    let mut p = self.slip_prob / 4.0;
                    if actual == intended {
                        p += 1.0 - self.slip_prob;
                    }
                    if p == 0.0 {
                        continue;
                    }
                    let next = index[&self.move_from(cell, actual)];
                    let reward = if next == goal {
                        self.goal_reward
                    } else {
                        self.step_reward
                    };
                    match outcomes.iter_mut().find(|o| o.next_state == next) {
                        Some(o) => o.prob += p,
                        None => outcomes.push(Outcome::new(next, reward, p)),
                    }
                }
                row.push(outcomes);
            }
            transitions.push(row);
        }
        Ok(Mdp {
            n_states: cells.len(),
            n_actions: 4,
            transitions,
            terminal_states: BTreeSet::from([goal]),
            gamma_dis: self.gamma_dis,
            reward_bound: self.step_reward.abs().max(self.goal_reward.abs()),
        })
    }
}

/// Four-action grid world; see [`GridSpec`].
#[allow(clippy::too_many_arguments)]
pub fn make_gridworld(
    width: usize,
    height: usize,
    walls: BTreeSet<Cell>,
    start: Cell,
    goal: Cell,
    step_reward: f64,
    goal_reward: f64,
    gamma_dis: f64,
    slip_prob: f64,
) -> Result<Mdp> {
    GridSpec {
        width,
        height,
        walls,
        start,
        goal,
        step_reward,
        goal_reward,
        gamma_dis,
        slip_prob,
    }
    .build()
}

/// Adds one fresh terminal state reached from `(s, a)` with probability `p_terminal`.
///
/// The existing outcomes of `(s, a)` are rescaled by `1 - p_terminal`.
pub fn attach_terminal(mdp: &Mdp, s: usize, a: usize, p_terminal: f64) -> Result<Mdp> {
    if s >= mdp.n_states {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: s,
            limit: mdp.n_states,
        });
    }
    if a >= mdp.n_actions {
        return Err(Error::IndexOutOfRange {
            what: "action",
            index: a,
            limit: mdp.n_actions,
        });
    }
    if !(p_terminal > 0.0 && p_terminal <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "p_T = {p_terminal} outside (0, 1]"
        )));
    }
    let to_terminal: f64 = mdp
        .outcomes(s, a)
        .iter()
        .filter(|o| mdp.is_terminal(o.next_state))
        .map(|o| o.prob)
        .sum();
    if mdp.is_terminal(s) || to_terminal >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "state {s} action {a} already leads to a terminal state with probability 1"
        )));
    }

    let terminal = mdp.n_states;
    let mut out = mdp.clone();
    out.n_states += 1;
    out.transitions.push(absorbing_row(terminal, mdp.n_actions));
    out.terminal_states.insert(terminal);

    let keep = 1.0 - p_terminal;
    let edge = &mut out.transitions[s][a];
    if keep == 0.0 {
        edge.clear();
    } else {
        for o in edge.iter_mut() {
            o.prob *= keep;
        }
    }
    edge.push(Outcome::new(terminal, 0.0, p_terminal));
    // absorb rounding so the list sums to 1 again
    let mass: f64 = edge.iter().map(|o| o.prob).sum();
    if let Some(last) = edge.last_mut() {
        last.prob += 1.0 - mass;
    }
    Ok(out)
}

/// One recorded step: state, action, the reward that followed, and the next state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// The steps of one episode plus first-visit times of every pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<Step>,
    pub first_visit_time: HashMap<(usize, usize), usize>,
    pub terminated: bool,
    pub truncated: bool,
}

impl EpisodeTrace {
    pub fn clear(&mut self) {
        self.steps.clear();
        self.first_visit_time.clear();
        self.terminated = false;
        self.truncated = false;
    }

    pub fn push(&mut self, step: Step) {
        let t = self.steps.len();
        self.first_visit_time
            .entry((step.state, step.action))
            .or_insert(t);
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
