//! Tabular reinforcement learning with Projective Simulation agents.
//!
//! The crate bundles episodic MDP models, an exact value-iteration solver,
//! PS and baseline (SARSA, Q-learning) agents, closed-form return oracles,
//! and an experiment harness that measures convergence against `q*`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod cli;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod ps;
pub mod solver;
pub mod table;

pub use error::{Error, Result};
pub use mdp::{attach_terminal, make_chain, make_gridworld, EpisodeTrace, GridSpec, Mdp, Outcome};
pub use ps::{GlowVariant, PolicyKind, PsAgent, PsParams};
pub use solver::{greedy_policy, value_iteration, QStarTable};
pub use table::Table;
