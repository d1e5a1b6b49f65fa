//! Training runs, convergence reports and theorem-condition audits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineAgent, BaselineParams};
use crate::error::{Error, Result};
use crate::mdp::{make_chain, GridSpec, Mdp};
use crate::oracle::ensemble_h_expected;
use crate::ps::{h_tilde_bound, sample_index, GlowVariant, PolicyKind, PsAgent, PsParams};
use crate::solver::{
    argmax, min_action_gap, optimal_action_set, value_iteration, write_q_csv, QStarTable,
    DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::table::Table;

pub const SCHEMA_VERSION: u32 = 1;

/// Relative tolerance used for the final convergence check. An engineering
/// choice: the convergence theorem is asymptotic only.
pub const CONVERGENCE_TOL: f64 = 0.1;

/// Slack for the exploration lower bound, absorbing softmax rounding.
const GLIE_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    Chain {
        n: usize,
        #[serde(default)]
        step_reward: f64,
        #[serde(default = "one")]
        goal_reward: f64,
        gamma_dis: f64,
    },
    Gridworld {
        width: usize,
        height: usize,
        #[serde(default)]
        walls: BTreeSet<(usize, usize)>,
        start: (usize, usize),
        goal: (usize, usize),
        #[serde(default)]
        step_reward: f64,
        #[serde(default = "one")]
        goal_reward: f64,
        gamma_dis: f64,
        #[serde(default)]
        slip_prob: f64,
    },
    File {
        path: PathBuf,
    },
    /// The full MDP written out in the config.
    Inline(Mdp),
}

fn one() -> f64 {
    1.0
}

impl MdpSource {
    pub fn build(&self) -> Result<Mdp> {
        let mdp = match self {
            MdpSource::Chain {
                n,
                step_reward,
                goal_reward,
                gamma_dis,
            } => make_chain(*n, *step_reward, *goal_reward, *gamma_dis)?,
            MdpSource::Gridworld {
                width,
                height,
                walls,
                start,
                goal,
                step_reward,
                goal_reward,
                gamma_dis,
                slip_prob,
            } => GridSpec {
                width: *width,
                height: *height,
                walls: walls.clone(),
                start: *start,
                goal: *goal,
                step_reward: *step_reward,
                goal_reward: *goal_reward,
                gamma_dis: *gamma_dis,
                slip_prob: *slip_prob,
            }
            .build()?,
            MdpSource::File { path } => Mdp::load(path)?,
            MdpSource::Inline(m) => m.clone(),
        };
        mdp.ensure_valid()?;
        Ok(mdp)
    }
}

/// How each episode's first state is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Uniform over non-terminal states.
    #[default]
    Uniform,
    Fixed(usize),
}

impl StartRule {
    fn check(&self, mdp: &Mdp) -> Result<()> {
        match *self {
            StartRule::Uniform if mdp.n_non_terminal() == 0 => {
                Err(Error::Config("mdp has no non-terminal state to start from".into()))
            }
            StartRule::Fixed(s) if s >= mdp.n_states || mdp.is_terminal(s) => Err(Error::Config(
                format!("start state {s} must be a non-terminal state"),
            )),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, starts: &[usize], rng: &mut R) -> usize {
        match *self {
            StartRule::Uniform => starts[rng.gen_range(0..starts.len())],
            StartRule::Fixed(s) => s,
        }
    }

    /// Initial state distribution.
    pub fn distribution(&self, mdp: &Mdp) -> Vec<f64> {
        let mut d = vec![0.0; mdp.n_states];
        match *self {
            StartRule::Uniform => {
                let n = mdp.n_non_terminal() as f64;
                for s in mdp.non_terminal_states() {
                    d[s] = 1.0 / n;
                }
            }
            StartRule::Fixed(s) => d[s] = 1.0,
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    Ps(PsParams),
    Baseline(BaselineParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAgent {
    pub name: String,
    pub agent: AgentSpec,
}

fn default_t_max() -> usize {
    10_000
}

fn default_replicas() -> usize {
    1
}

fn default_eval_every() -> u64 {
    100
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub mdp: MdpSource,
    #[serde(default)]
    pub start: StartRule,
    /// The agent for `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentSpec>,
    /// The agents for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<NamedAgent>,
    pub episodes: u64,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Optional cap on environment steps per replica.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_total_steps: Option<u64>,
    /// Keep evaluation rows for episodes that hit `t_max`.
    #[serde(default)]
    pub include_truncated: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }

    /// The same run with a different agent.
    pub fn with_agent(&self, agent: AgentSpec) -> Self {
        Self {
            agent: Some(agent),
            agents: Vec::new(),
            ..self.clone()
        }
    }

    pub fn replica_seed(&self, replica: usize) -> u64 {
        self.base_seed.wrapping_add(replica as u64)
    }
}

/// One evaluation row of a convergence report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub replica: usize,
    pub episode: u64,
    pub delta_max_norm: f64,
    pub policy_match: bool,
    pub beta: f64,
    pub min_action_prob: f64,
    pub truncated_episodes: u64,
    pub seed: u64,
}

/// Streaming check of the learning rates `α_m(e) = χ_m(e) / (N_m(e) + 1)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaAuditor {
    /// Visited-episode count per edge, kept independently of the agent.
    counts: BTreeMap<usize, u64>,
    sum: BTreeMap<usize, f64>,
    sum_sq: BTreeMap<usize, f64>,
    pub mismatches: u64,
    pub checked: u64,
}

impl AlphaAuditor {
    /// Records the edges visited in one episode with the agent's counts after it.
    pub fn record(&mut self, visited: &[usize], n_after: &Table<u64>) {
        for &e in visited {
            let n = self.counts.entry(e).or_insert(0);
            *n += 1;
            self.checked += 1;
            // α = 1/(N+1) must equal 1/(n+1): compare the integer denominators
            if n_after.as_slice()[e] != *n {
                self.mismatches += 1;
            }
            let alpha = 1.0 / (n_after.as_slice()[e] + 1) as f64;
            *self.sum.entry(e).or_insert(0.0) += alpha;
            *self.sum_sq.entry(e).or_insert(0.0) += alpha * alpha;
        }
    }

    pub fn result(&self) -> AlphaAuditResult {
        let bound = std::f64::consts::PI.powi(2) / 6.0;
        let max_sum_sq = self.sum_sq.values().copied().fold(0.0, f64::max);
        let min_sum = self.sum.values().copied().fold(f64::INFINITY, f64::min);
        AlphaAuditResult {
            checked: self.checked,
            mismatches: self.mismatches,
            edges_visited: self.counts.len(),
            min_sum_alpha: if min_sum.is_finite() { min_sum } else { 0.0 },
            max_sum_alpha_sq: max_sum_sq,
            sum_sq_bound: bound,
            passed: self.mismatches == 0 && max_sum_sq <= bound + 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaAuditResult {
    pub checked: u64,
    pub mismatches: u64,
    pub edges_visited: usize,
    pub min_sum_alpha: f64,
    pub max_sum_alpha_sq: f64,
    pub sum_sq_bound: f64,
    pub passed: bool,
}

/// `α_m` for a single edge from its per-episode visit flags.
pub fn alpha_sequence(visits: &[bool]) -> Vec<f64> {
    let mut n = 0u64;
    visits
        .iter()
        .map(|&v| {
            if v {
                n += 1;
                1.0 / (n + 1) as f64
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleEdgeAudit {
    pub alphas: Vec<f64>,
    pub sum_alpha: f64,
    pub sum_alpha_sq: f64,
    pub passed: bool,
}

/// Learning-rate audit of one edge's visit pattern.
pub fn alpha_audit(visits: &[bool]) -> SingleEdgeAudit {
    let alphas = alpha_sequence(visits);
    let sum_alpha = alphas.iter().sum();
    let sum_alpha_sq: f64 = alphas.iter().map(|a| a * a).sum();
    SingleEdgeAudit {
        passed: sum_alpha_sq <= std::f64::consts::PI.powi(2) / 6.0 + 1e-9,
        alphas,
        sum_alpha,
        sum_alpha_sq,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingStatus {
    Ok,
    Violated,
    Info,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub check: String,
    pub status: FindingStatus,
    pub detail: String,
}

impl Finding {
    fn new(check: &str, status: FindingStatus, detail: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            status,
            detail: detail.into(),
        }
    }
}

/// `f(γ) = 2γ / (1 - γ)` evaluated on the exact rational nearest to `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contraction {
    pub gamma: Ratio<i64>,
    /// `None` for `γ = 1`, where the coefficient is unbounded.
    pub coefficient: Option<Ratio<i64>>,
}

impl Contraction {
    pub fn of(gamma_dis: f64) -> Result<Self> {
        let gamma = Ratio::<i64>::approximate_float(gamma_dis).ok_or_else(|| {
            Error::InvalidParameter(format!("gamma_dis {gamma_dis} has no rational form"))
        })?;
        let one = Ratio::from_integer(1);
        let coefficient = (gamma != one).then(|| Ratio::from_integer(2) * gamma / (one - gamma));
        Ok(Self { gamma, coefficient })
    }

    pub fn admissible(&self) -> bool {
        self.coefficient.is_some_and(|f| f < Ratio::from_integer(1))
    }

    pub fn describe(&self) -> String {
        match self.coefficient {
            Some(f) => format!("{f}"),
            None => "unbounded".into(),
        }
    }
}

/// True when `γ_dis ≤ 1/3` exactly in rational arithmetic.
fn gamma_within_third(gamma_dis: f64) -> bool {
    Ratio::<i64>::approximate_float(gamma_dis).is_some_and(|g| g <= Ratio::new(1, 3))
}

/// Whether a run meets every hypothesis of the convergence theorem.
pub fn theorem_regime(mdp: &Mdp, agent: &AgentSpec) -> bool {
    match agent {
        AgentSpec::Ps(p) => {
            p.glow_variant == GlowVariant::FirstVisit
                && p.policy_kind == PolicyKind::SoftmaxHtildeGlie
                && ((1.0 - p.eta) - mdp.gamma_dis).abs() <= 1e-12
                && gamma_within_third(mdp.gamma_dis)
                && mdp.reward_bound.is_finite()
        }
        AgentSpec::Baseline(_) => false,
    }
}

/// Checks the hypotheses of the convergence theorem for `agent` on `mdp`.
pub fn theorem_condition_check(mdp: &Mdp, agent: &AgentSpec) -> Vec<Finding> {
    use FindingStatus::*;
    let mut out = vec![Finding::new(
        "finite_space",
        Ok,
        format!("{} states x {} actions", mdp.n_states, mdp.n_actions),
    )];
    out.push(if mdp.reward_bound.is_finite() && mdp.max_abs_reward() <= mdp.reward_bound {
        Finding::new("bounded_rewards", Ok, format!("|r| <= {}", mdp.reward_bound))
    } else {
        Finding::new("bounded_rewards", Violated, "reward bound missing or exceeded")
    });
    out.push(if gamma_within_third(mdp.gamma_dis) {
        Finding::new("gamma_le_third", Ok, format!("gamma_dis = {} <= 1/3", mdp.gamma_dis))
    } else {
        Finding::new("gamma_le_third", Violated, format!("gamma_dis = {} > 1/3", mdp.gamma_dis))
    });
    match Contraction::of(mdp.gamma_dis) {
        Result::Ok(c) => {
            let status = if c.admissible() { Ok } else { Violated };
            let verdict = if c.admissible() {
                "contraction admissible"
            } else if c.coefficient == Some(Ratio::from_integer(1)) {
                "boundary: not admissible"
            } else {
                "not admissible"
            };
            out.push(Finding::new(
                "contraction",
                status,
                format!("f(gamma) = 2*gamma/(1-gamma) = {} at gamma = {}: {verdict}", c.describe(), c.gamma),
            ));
        }
        Err(e) => out.push(Finding::new("contraction", Violated, e.to_string())),
    }
    match agent {
        AgentSpec::Ps(p) => {
            let eta_bar = 1.0 - p.eta;
            out.push(if (eta_bar - mdp.gamma_dis).abs() <= 1e-12 {
                Finding::new("glow_coupling", Ok, format!("1 - eta = {eta_bar} = gamma_dis"))
            } else {
                Finding::new(
                    "glow_coupling",
                    Violated,
                    format!("1 - eta = {eta_bar} differs from gamma_dis = {}", mdp.gamma_dis),
                )
            });
            out.push(if p.glow_variant == GlowVariant::FirstVisit {
                Finding::new("first_visit_glow", Ok, "first-visit glow")
            } else {
                Finding::new("first_visit_glow", Violated, format!("{:?} glow", p.glow_variant))
            });
            out.push(if p.policy_kind == PolicyKind::SoftmaxHtildeGlie {
                Finding::new("glie_policy", Ok, "softmax on normalized h with logarithmic beta")
            } else {
                Finding::new("glie_policy", Violated, format!("{:?} is not GLIE", p.policy_kind))
            });
        }
        AgentSpec::Baseline(_) => out.push(Finding::new(
            "agent",
            Info,
            "baseline agent: theorem conditions do not apply",
        )),
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlieAudit {
    pub applicable: bool,
    pub episodes_checked: u64,
    pub violations: u64,
    /// Smallest ratio of measured minimum probability to the bound.
    pub min_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub replica: usize,
    pub seed: u64,
    pub episodes_run: u64,
    pub total_steps: u64,
    pub truncated_episodes: u64,
    pub final_delta_max_norm: f64,
    pub final_policy_match: bool,
    pub mismatched_states: Vec<usize>,
    pub converged: bool,
    pub glie: GlieAudit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaAuditResult>,
    /// Evaluations where `Δ` was below half the action gap but the greedy policy differed.
    pub stability_violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub regime: String,
    pub findings: Vec<Finding>,
    pub contraction_coefficient: String,
    pub qstar_max_abs: f64,
    pub qstar_residual: f64,
    pub min_action_gap: f64,
    pub convergence_threshold: f64,
    pub tolerance_note: String,
    pub replicas: Vec<ReplicaSummary>,
    pub all_converged: bool,
    pub audits_passed: bool,
    pub wall_clock_seconds: f64,
}

pub struct TrainingOutput {
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
    pub qstar: QStarTable,
}

enum Learner {
    Ps(PsAgent),
    Baseline(BaselineAgent),
}

impl Learner {
    fn estimate(&self) -> Table<f64> {
        match self {
            Learner::Ps(a) => a.normalized_h(),
            Learner::Baseline(b) => b.q.q.clone(),
        }
    }

    fn beta(&self) -> f64 {
        match self {
            Learner::Ps(a) => a.beta(),
            Learner::Baseline(_) => 0.0,
        }
    }
}

struct EpisodeStats {
    steps: u64,
    truncated: bool,
    min_prob: f64,
}

fn run_episode<R: Rng>(
    mdp: &Mdp,
    learner: &mut Learner,
    start: usize,
    step_cap: usize,
    rng: &mut R,
) -> Result<EpisodeStats> {
    let mut s = start;
    let mut t = 0usize;
    let mut min_prob = f64::INFINITY;
    match learner {
        Learner::Ps(agent) => {
            while !mdp.is_terminal(s) && t < step_cap {
                let probs = agent.policy(s)?;
                min_prob = probs.iter().copied().fold(min_prob, f64::min);
                let a = sample_index(&probs, rng);
                let (s2, r) = mdp.sample_step(s, a, rng)?;
                agent.update_step(s, a, r)?;
                s = s2;
                t += 1;
            }
        }
        Learner::Baseline(agent) => {
            let mut a = agent.select_action(s, rng);
            while !mdp.is_terminal(s) && t < step_cap {
                min_prob = agent.policy(s).into_iter().fold(min_prob, f64::min);
                let (s2, r) = mdp.sample_step(s, a, rng)?;
                let a2 = if mdp.is_terminal(s2) { 0 } else { agent.select_action(s2, rng) };
                agent.update(s, a, r, s2, a2);
                s = s2;
                a = a2;
                t += 1;
            }
        }
    }
    Ok(EpisodeStats {
        steps: t as u64,
        truncated: !mdp.is_terminal(s),
        min_prob: if min_prob.is_finite() { min_prob } else { 1.0 },
    })
}

/// Non-terminal states whose greedy action under `estimate` is not optimal.
pub fn greedy_mismatches(mdp: &Mdp, estimate: &Table<f64>, qstar: &Table<f64>) -> Vec<usize> {
    mdp.non_terminal_states()
        .filter(|&s| !optimal_action_set(qstar.row(s)).contains(&argmax(estimate.row(s))))
        .collect()
}

fn greedy_matches(mdp: &Mdp, estimate: &Table<f64>, qstar: &Table<f64>) -> bool {
    greedy_mismatches(mdp, estimate, qstar).is_empty()
}

struct ReplicaContext<'a> {
    cfg: &'a ExperimentConfig,
    agent: &'a AgentSpec,
    mdp: &'a Mdp,
    qstar: &'a QStarTable,
    starts: Vec<usize>,
    gap: f64,
    threshold: f64,
}

fn run_replica(ctx: &ReplicaContext<'_>, replica: usize) -> Result<(Vec<ReportRow>, ReplicaSummary)> {
    let cfg = ctx.cfg;
    let mdp = ctx.mdp;
    let seed = cfg.replica_seed(replica);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = match ctx.agent {
        AgentSpec::Ps(p) => Learner::Ps(PsAgent::for_mdp(p.clone(), mdp)?),
        AgentSpec::Baseline(b) => Learner::Baseline(BaselineAgent::for_mdp(b.clone(), mdp)?),
    };
    let (glie_applicable, b_hat) = match ctx.agent {
        AgentSpec::Ps(p) => (
            p.policy_kind == PolicyKind::SoftmaxHtildeGlie,
            h_tilde_bound(mdp, p.eta).max(p.h0.abs()),
        ),
        AgentSpec::Baseline(_) => (false, 0.0),
    };
    let first_visit = matches!(ctx.agent, AgentSpec::Ps(p) if p.glow_variant == GlowVariant::FirstVisit);
    let n_a = mdp.n_actions as f64;

    let mut rows = Vec::new();
    let mut alpha = first_visit.then(AlphaAuditor::default);
    let mut glie = GlieAudit {
        applicable: glie_applicable,
        episodes_checked: 0,
        violations: 0,
        min_ratio: f64::INFINITY,
    };
    let mut truncated_total = 0u64;
    let mut total_steps = 0u64;
    let mut stability_violations = 0u64;
    let mut last: Option<ReportRow> = None;
    let mut episodes_run = 0;

    for m in 1..=cfg.episodes {
        let start = cfg.start.sample(&ctx.starts, &mut rng);
        let budget_left = cfg.max_total_steps.map(|b| b.saturating_sub(total_steps));
        let cap = match budget_left {
            Some(b) => (cfg.t_max as u64).min(b) as usize,
            None => cfg.t_max,
        };
        let beta = learner.beta();
        let stats = run_episode(mdp, &mut learner, start, cap, &mut rng)?;
        total_steps += stats.steps;
        episodes_run = m;
        let budget_hit = cfg.max_total_steps.is_some_and(|b| total_steps >= b);
        let env_truncated = stats.truncated && !budget_hit;
        if env_truncated {
            truncated_total += 1;
        }

        if glie_applicable && stats.steps > 0 {
            let bound = (-2.0 * b_hat * beta).exp() / n_a;
            glie.episodes_checked += 1;
            glie.min_ratio = glie.min_ratio.min(stats.min_prob / bound);
            if stats.min_prob < bound * (1.0 - GLIE_SLACK) {
                glie.violations += 1;
            }
        }

        match &mut learner {
            Learner::Ps(agent) => {
                if let Some(a) = alpha.as_mut() {
                    a.record(agent.episode_counted_edges(), agent.n_visits());
                }
                agent.end_episode();
            }
            Learner::Baseline(agent) => agent.end_episode(),
        }

        let last_episode = m == cfg.episodes || budget_hit;
        let due = m % cfg.eval_every == 0 || last_episode;
        let keep = !stats.truncated || cfg.include_truncated || budget_hit;
        if due && keep {
            let est = learner.estimate();
            let delta = est.max_abs_diff(&ctx.qstar.values, |s| !mdp.is_terminal(s));
            let matched = greedy_matches(mdp, &est, &ctx.qstar.values);
            if delta < ctx.gap / 2.0 && !matched {
                stability_violations += 1;
            }
            let row = ReportRow {
                replica,
                episode: m,
                delta_max_norm: delta,
                policy_match: matched,
                beta,
                min_action_prob: stats.min_prob,
                truncated_episodes: truncated_total,
                seed,
            };
            last = Some(row.clone());
            rows.push(row);
        }
        if budget_hit {
            break;
        }
    }

    // the last row may have been skipped as truncated; evaluate once more for the summary
    let est = learner.estimate();
    let final_delta = est.max_abs_diff(&ctx.qstar.values, |s| !mdp.is_terminal(s));
    let mismatched_states = greedy_mismatches(mdp, &est, &ctx.qstar.values);
    let final_match = mismatched_states.is_empty();
    if last.is_none() {
        warn!("replica {replica}: every evaluation episode was truncated");
    }
    let summary = ReplicaSummary {
        replica,
        seed,
        episodes_run,
        total_steps,
        truncated_episodes: truncated_total,
        final_delta_max_norm: final_delta,
        final_policy_match: final_match,
        mismatched_states,
        converged: final_delta <= ctx.threshold && final_match,
        glie: GlieAudit {
            min_ratio: if glie.min_ratio.is_finite() { glie.min_ratio } else { 1.0 },
            ..glie
        },
        alpha: alpha.map(|a| a.result()),
        stability_violations,
    };
    Ok((rows, summary))
}

/// Trains `config.replicas` independent agents and evaluates them against `q*`.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingOutput> {
    cfg.check()?;
    let agent = cfg
        .agent
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `agent`".into()))?;
    let mdp = cfg.mdp.build()?;
    cfg.start.check(&mdp)?;
    let qstar = value_iteration(&mdp, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    let clock = Instant::now();

    let regime = if theorem_regime(&mdp, agent) {
        "theorem"
    } else {
        "outside-theorem"
    };
    info!("training {} replica(s), {} episodes each, regime {regime}", cfg.replicas, cfg.episodes);
    let qmax = qstar.values.max_abs();
    let ctx = ReplicaContext {
        cfg,
        agent,
        mdp: &mdp,
        qstar: &qstar,
        starts: mdp.non_terminal_states().collect(),
        gap: min_action_gap(&mdp, &qstar.values),
        threshold: CONVERGENCE_TOL * (1.0 + qmax),
    };
    let results: Vec<_> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| run_replica(&ctx, r))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut replicas = Vec::new();
    for (r, s) in results {
        rows.extend(r);
        replicas.push(s);
    }
    let audits_passed = replicas.iter().all(|r| {
        r.glie.violations == 0 && r.alpha.as_ref().is_none_or(|a| a.passed) && r.stability_violations == 0
    });
    let contraction = Contraction::of(mdp.gamma_dis).map(|c| c.describe()).unwrap_or_default();
    let summary = Summary {
        config: cfg.clone(),
        regime: regime.into(),
        findings: theorem_condition_check(&mdp, agent),
        contraction_coefficient: contraction,
        qstar_max_abs: qmax,
        qstar_residual: qstar.residual,
        min_action_gap: ctx.gap,
        convergence_threshold: ctx.threshold,
        tolerance_note: format!(
            "engineering tolerance {CONVERGENCE_TOL}*(1+max|q*|); the convergence result is asymptotic and fixes no finite-run tolerance"
        ),
        all_converged: replicas.iter().all(|r| r.converged),
        audits_passed,
        replicas,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok(TrainingOutput { rows, summary, qstar })
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `report.csv`, `summary.json` and `qstar.csv` into `dir`.
pub fn write_training_output(dir: impl AsRef<Path>, out: &TrainingOutput) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_report_csv(dir.join("report.csv"), &out.rows)?;
    write_json(dir.join("summary.json"), &out.summary)?;
    write_q_csv(dir.join("qstar.csv"), &out.qstar.values)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub agent: String,
    #[serde(flatten)]
    pub row: ReportRow,
}

pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub summaries: BTreeMap<String, Summary>,
    pub qstar: QStarTable,
}

/// Runs every named agent on the same MDP and seed grid.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareOutput> {
    cfg.check()?;
    if cfg.agents.len() < 2 {
        return Err(Error::Config("compare needs >= 2 agents".into()));
    }
    let mut names = BTreeSet::new();
    for a in &cfg.agents {
        if !names.insert(a.name.as_str()) {
            return Err(Error::Config(format!("duplicate agent name `{}`", a.name)));
        }
    }
    let mut rows = Vec::new();
    let mut summaries = BTreeMap::new();
    let mut qstar = None;
    for named in &cfg.agents {
        let out = run_training(&cfg.with_agent(named.agent.clone()))?;
        rows.extend(out.rows.into_iter().map(|row| CompareRow {
            agent: named.name.clone(),
            row,
        }));
        summaries.insert(named.name.clone(), out.summary);
        qstar = Some(out.qstar);
    }
    Ok(CompareOutput {
        rows,
        summaries,
        qstar: qstar.expect("at least two agents"),
    })
}

pub fn write_compare_output(dir: impl AsRef<Path>, out: &CompareOutput) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    // flatten is not supported by the csv serializer, so write the header by hand
    let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
    w.write_record([
        "agent",
        "replica",
        "episode",
        "delta_max_norm",
        "policy_match",
        "beta",
        "min_action_prob",
        "truncated_episodes",
        "seed",
    ])?;
    for r in &out.rows {
        w.serialize((
            &r.agent,
            r.row.replica,
            r.row.episode,
            r.row.delta_max_norm,
            r.row.policy_match,
            r.row.beta,
            r.row.min_action_prob,
            r.row.truncated_episodes,
            r.row.seed,
        ))?;
    }
    w.flush()?;
    write_json(dir.join("summary.json"), &out.summaries)?;
    write_q_csv(dir.join("qstar.csv"), &out.qstar.values)?;
    Ok(())
}

/// Fixed behaviour policy for the ensemble experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPolicy {
    Uniform,
    Table(Table<f64>),
}

impl FixedPolicy {
    fn table(&self, mdp: &Mdp) -> Result<Table<f64>> {
        let t = match self {
            FixedPolicy::Uniform => Table::filled(mdp.n_states, mdp.n_actions, 1.0 / mdp.n_actions as f64),
            FixedPolicy::Table(t) => t.clone(),
        };
        if t.n_states() != mdp.n_states || t.n_actions() != mdp.n_actions {
            return Err(Error::Config("policy table shape does not match the mdp".into()));
        }
        for s in 0..t.n_states() {
            let row = t.row(s);
            let mass: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (mass - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(t)
    }
}

fn default_agents() -> usize {
    10_000
}

fn default_horizon() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub mdp: MdpSource,
    #[serde(default)]
    pub start: StartRule,
    #[serde(default = "uniform_policy")]
    pub policy: FixedPolicy,
    #[serde(default = "default_agents")]
    pub n_agents: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub eta: f64,
    #[serde(default)]
    pub gamma_damp: f64,
    #[serde(default)]
    pub base_seed: u64,
    /// Reward sequence shared by all agents; drawn uniformly from [-1, 1] if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
}

fn uniform_policy() -> FixedPolicy {
    FixedPolicy::Uniform
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEdge {
    pub state: usize,
    pub action: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub std_error: f64,
    /// `|empirical - analytic| / std_error`, zero when both agree exactly.
    pub z_score: f64,
    pub within_bounds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub config: EnsembleConfig,
    pub rewards: Vec<f64>,
    pub edges: Vec<EnsembleEdge>,
    pub passed: bool,
}

/// Probability of visiting each pair at steps `1..=horizon` under a fixed policy.
pub fn occupancy(mdp: &Mdp, policy: &Table<f64>, start: &[f64], horizon: usize) -> Vec<Table<f64>> {
    let mut d = start.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut p = Table::zeros(mdp.n_states, mdp.n_actions);
        let mut next = vec![0.0; mdp.n_states];
        for (s, &ds) in d.iter().enumerate() {
            for a in 0..mdp.n_actions {
                let w = ds * policy.get(s, a);
                *p.get_mut(s, a) = w;
                for o in mdp.outcomes(s, a) {
                    next[o.next_state] += w * o.prob;
                }
            }
        }
        out.push(p);
        d = next;
    }
    out
}

/// Ensemble of independent accumulating-glow agents under a fixed policy,
/// all crediting the same exogenous reward sequence, against the analytic mean.
pub fn ensemble_average_experiment(cfg: &EnsembleConfig) -> Result<EnsembleRecord> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported schema_version {}", cfg.schema_version)));
    }
    if cfg.n_agents < 2 || cfg.horizon == 0 {
        return Err(Error::Config("need n_agents >= 2 and horizon >= 1".into()));
    }
    let mdp = cfg.mdp.build()?;
    if !mdp.terminal_states.is_empty() {
        return Err(Error::Config(
            "the ensemble experiment needs an mdp without terminal states".into(),
        ));
    }
    cfg.start.check(&mdp)?;
    let policy = cfg.policy.table(&mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
    let rewards = match &cfg.rewards {
        Some(r) if r.len() >= cfg.horizon => r[..cfg.horizon].to_vec(),
        Some(r) => {
            return Err(Error::Config(format!(
                "{} rewards given for horizon {}",
                r.len(),
                cfg.horizon
            )))
        }
        None => (0..cfg.horizon).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
    };

    let params = PsParams {
        eta: cfg.eta,
        gamma_damp: cfg.gamma_damp,
        h_eq: 0.0,
        h0: 0.0,
        glow_variant: GlowVariant::Accumulating,
        glow_order_s: 1.0,
        policy_kind: PolicyKind::SoftmaxH,
        beta_fixed: 0.0,
        glie_c: None,
        reset_glow_each_episode: false,
    };
    let starts: Vec<usize> = mdp.non_terminal_states().collect();
    let n_edges = mdp.n_states * mdp.n_actions;
    let mut sum = vec![0.0; n_edges];
    let mut sum_sq = vec![0.0; n_edges];
    for _ in 0..cfg.n_agents {
        let mut agent = PsAgent::new(params.clone(), mdp.n_states, mdp.n_actions, &mdp.terminal_states)?;
        let mut s = cfg.start.sample(&starts, &mut rng);
        for &r in &rewards {
            let a = sample_index(policy.row(s), &mut rng);
            let (s2, _) = mdp.sample_step(s, a, &mut rng)?;
            agent.update_step(s, a, r)?;
            s = s2;
        }
        for (i, h) in agent.h().as_slice().iter().enumerate() {
            sum[i] += h;
            sum_sq[i] += h * h;
        }
    }

    let occ = occupancy(&mdp, &policy, &cfg.start.distribution(&mdp), cfg.horizon);
    let n = cfg.n_agents as f64;
    let mut edges = Vec::with_capacity(n_edges);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let i = s * mdp.n_actions + a;
            let p: Vec<f64> = occ.iter().map(|t| *t.get(s, a)).collect();
            let analytic = ensemble_h_expected(&p, &rewards, cfg.eta, cfg.gamma_damp, cfg.horizon)?;
            let mean = sum[i] / n;
            let var = ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
            let se = (var / n).sqrt();
            let diff = (mean - analytic).abs();
            let within = if se > 0.0 { diff <= 3.0 * se } else { diff <= 1e-12 };
            edges.push(EnsembleEdge {
                state: s,
                action: a,
                analytic,
                empirical: mean,
                std_error: se,
                z_score: if se > 0.0 { diff / se } else { 0.0 },
                within_bounds: within,
            });
        }
    }
    Ok(EnsembleRecord {
        config: cfg.clone(),
        passed: edges.iter().all(|e| e.within_bounds),
        rewards,
        edges,
    })
}

pub fn write_ensemble_output(dir: impl AsRef<Path>, rec: &EnsembleRecord) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ensemble.csv"))?;
    for e in &rec.edges {
        w.serialize(e)?;
    }
    w.flush()?;
    write_json(dir.join("summary.json"), rec)
}

/// Result of comparing the incremental agent against the closed-form h-values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSweep {
    pub seed: u64,
    pub cases: usize,
    pub agent_runs: usize,
    pub max_deviation: f64,
    pub worst_case: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

pub const ORACLE_TOL: f64 = 1e-10;

/// Runs `cases` random visit schedules of length at most 200 through a
/// one-state, two-action agent for every glow variant and both orderings
/// `s ∈ {1, 1 - η}`, comparing `h(0, 0)` with [`crate::oracle::closed_form_h`].
///
/// `fault` perturbs every reward fed to the agent; it exists so the failure
/// path can be tested.
pub fn oracle_sweep(seed: u64, cases: usize, fault: bool) -> Result<OracleSweep> {
    use crate::oracle::{closed_form_h, ClosedFormParams, VisitSchedule};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants = [GlowVariant::Replacing, GlowVariant::Accumulating, GlowVariant::FirstVisit];
    let mut max_dev = 0.0f64;
    let mut worst = None;
    let mut runs = 0;
    for case in 0..cases {
        let horizon = rng.gen_range(0..=200usize);
        let p_visit = rng.gen_range(0.02..0.98);
        let eta = rng.gen_range(0.0..=1.0);
        let gamma_damp = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..0.5) };
        let h0 = rng.gen_range(-1.0..1.0);
        let h_eq = rng.gen_range(-1.0..1.0);
        let mut visits = Vec::new();
        let mut rewards = Vec::with_capacity(horizon);
        for l in 1..=horizon {
            if rng.gen_bool(p_visit) {
                visits.push(l);
            }
            rewards.push(rng.gen_range(-1.0..1.0));
        }
        let schedule = VisitSchedule::new(visits, rewards)?;
        for variant in variants {
            let gamma_damp = if variant == GlowVariant::FirstVisit { 0.0 } else { gamma_damp };
            for order_s in [1.0, 1.0 - eta] {
                let params = PsParams {
                    eta,
                    gamma_damp,
                    h_eq,
                    h0,
                    glow_variant: variant,
                    glow_order_s: order_s,
                    policy_kind: PolicyKind::SoftmaxH,
                    beta_fixed: 0.0,
                    glie_c: None,
                    reset_glow_each_episode: false,
                };
                let mut agent = PsAgent::new(params, 1, 2, &BTreeSet::new())?;
                let mut next = 0;
                for (k, &r) in schedule.rewards.iter().enumerate() {
                    let a = if schedule.visits.get(next) == Some(&(k + 1)) {
                        next += 1;
                        0
                    } else {
                        1
                    };
                    agent.update_step(0, a, if fault { r + 1e-6 } else { r })?;
                }
                let expected = closed_form_h(
                    &schedule,
                    &ClosedFormParams { variant, eta, gamma_damp, h0, h_eq, order_s },
                )?;
                let dev = (agent.h().get(0, 0) - expected).abs();
                runs += 1;
                if !(dev <= max_dev) {
                    max_dev = dev;
                    worst = Some(case);
                }
            }
        }
    }
    Ok(OracleSweep {
        seed,
        cases,
        agent_runs: runs,
        max_deviation: max_dev,
        worst_case: worst,
        tolerance: ORACLE_TOL,
        passed: max_dev <= ORACLE_TOL,
    })
}
