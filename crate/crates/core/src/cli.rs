//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};
use serde_json::Value;

use crate::error::Error;
use crate::harness::{
    ensemble_average_experiment, oracle_sweep, run_compare, run_training, write_compare_output,
    write_ensemble_output, write_json, write_training_output, EnsembleConfig, ExperimentConfig,
};
use crate::mdp::Mdp;
use crate::solver::{value_iteration, write_q_csv, DEFAULT_MAX_ITERS, DEFAULT_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "projsim", version, about = "Projective simulation agents and convergence experiments")]
pub struct CliConfig {
    /// JSON experiment config (train, compare, ensemble).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted-path override applied after loading, e.g. `agent.eta=0.7`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an MDP file; prints one violation per line.
    Validate { mdp_file: PathBuf },
    /// Solve an MDP exactly and write qstar.csv.
    Solve {
        mdp_file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Train agents and write report.csv, summary.json, qstar.csv.
    Train { config_file: Option<PathBuf> },
    /// Train several agents on one MDP and seed grid; writes compare.csv.
    Compare { config_file: Option<PathBuf> },
    /// Compare incremental h-values with the closed forms on random schedules.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Ensemble mean of accumulating-glow agents against the analytic mean.
    Ensemble { config_file: Option<PathBuf> },
}

/// A failed command with its exit code.
struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ImproperMdp(_) | Error::NoConvergence { .. } | Error::InvalidMdp(_) => EXIT_CHECK,
            _ => EXIT_USAGE,
        };
        Failure(code, e.to_string())
    }
}

type CmdResult = std::result::Result<i32, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match CliConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Failure(code, msg)) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            code
        }
    }
}

fn dispatch(cli: &CliConfig) -> CmdResult {
    match &cli.command {
        Command::Validate { mdp_file } => cmd_validate(mdp_file),
        Command::Solve { mdp_file, tol } => cmd_solve(cli, mdp_file, *tol),
        Command::Train { config_file } => cmd_train(cli, config_file.as_deref()),
        Command::Compare { config_file } => cmd_compare(cli, config_file.as_deref()),
        Command::OracleCheck { cases, inject_fault } => cmd_oracle_check(cli, *cases, *inject_fault),
        Command::Ensemble { config_file } => cmd_ensemble(cli, config_file.as_deref()),
    }
}

fn read_mdp(path: &Path) -> std::result::Result<Mdp, Failure> {
    Mdp::load(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn cmd_validate(path: &Path) -> CmdResult {
    let mdp = read_mdp(path)?;
    let violations = mdp.validate();
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} states, {} actions", mdp.n_states, mdp.n_actions);
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_CHECK)
    }
}

fn cmd_solve(cli: &CliConfig, path: &Path, tol: f64) -> CmdResult {
    if !(tol > 0.0) {
        return Err(usage("--tol must be > 0"));
    }
    let mdp = read_mdp(path)?;
    let violations = mdp.validate();
    if !violations.is_empty() {
        for v in &violations {
            println!("{v}");
        }
        return Ok(EXIT_CHECK);
    }
    let q = value_iteration(&mdp, tol, DEFAULT_MAX_ITERS)?;
    std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
    let file = cli.out.join("qstar.csv");
    write_q_csv(&file, &q.values)?;
    info!("wrote {} (residual {:e})", file.display(), q.residual);
    Ok(EXIT_OK)
}

/// Sets `root[a][b]... = value` for the dotted `key`, creating objects as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> crate::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

fn load_config_value(cli: &CliConfig, positional: Option<&Path>) -> std::result::Result<Value, Failure> {
    let path = positional
        .or(cli.config.as_deref())
        .ok_or_else(|| usage("no config file given (use --config or a positional path)"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    for o in &cli.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = cli.seed {
        apply_override(&mut value, &format!("base_seed={seed}"))?;
    }
    Ok(value)
}

fn experiment_config(cli: &CliConfig, positional: Option<&Path>) -> std::result::Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::from_value(load_config_value(cli, positional)?)?)
}

fn cmd_train(cli: &CliConfig, positional: Option<&Path>) -> CmdResult {
    let cfg = experiment_config(cli, positional)?;
    let out = run_training(&cfg)?;
    write_training_output(&cli.out, &out)?;
    let s = &out.summary;
    if !cli.quiet {
        for r in &s.replicas {
            println!(
                "replica {} seed {}: delta {:.4e}, policy match {}, converged {}",
                r.replica, r.seed, r.final_delta_max_norm, r.final_policy_match, r.converged
            );
        }
        println!("regime: {}; audits passed: {}", s.regime, s.audits_passed);
    }
    Ok(if s.audits_passed { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_compare(cli: &CliConfig, positional: Option<&Path>) -> CmdResult {
    let cfg = experiment_config(cli, positional)?;
    let out = run_compare(&cfg)?;
    write_compare_output(&cli.out, &out)?;
    if !cli.quiet {
        for (name, s) in &out.summaries {
            let worst = s
                .replicas
                .iter()
                .map(|r| r.final_delta_max_norm)
                .fold(0.0, f64::max);
            println!("{name}: worst final delta {worst:.4e}, all converged {}", s.all_converged);
        }
    }
    let audits = out.summaries.values().all(|s| s.audits_passed);
    Ok(if audits { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_oracle_check(cli: &CliConfig, cases: usize, fault: bool) -> CmdResult {
    let sweep = oracle_sweep(cli.seed.unwrap_or(0), cases, fault)?;
    std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
    write_json(cli.out.join("summary.json"), &sweep)?;
    if !cli.quiet {
        println!(
            "{} cases, max deviation {:e} (tolerance {:e}): {}",
            sweep.cases,
            sweep.max_deviation,
            sweep.tolerance,
            if sweep.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(if sweep.passed { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_ensemble(cli: &CliConfig, positional: Option<&Path>) -> CmdResult {
    let value = load_config_value(cli, positional)?;
    let cfg: EnsembleConfig = serde_json::from_value(value).map_err(|e| usage(e.to_string()))?;
    let rec = ensemble_average_experiment(&cfg)?;
    write_ensemble_output(&cli.out, &rec)?;
    if !cli.quiet {
        let worst = rec.edges.iter().map(|e| e.z_score).fold(0.0, f64::max);
        println!(
            "{} edges, worst |z| {worst:.2}: {}",
            rec.edges.len(),
            if rec.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(if rec.passed { EXIT_OK } else { EXIT_CHECK })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = json!({"agent": {"eta": 0.5}, "episodes": 3});
        apply_override(&mut v, "agent.eta=0.7").unwrap();
        apply_override(&mut v, "agent.glow_variant=first_visit").unwrap();
        apply_override(&mut v, "new.inner=[1,2]").unwrap();
        assert_eq!(v["agent"]["eta"], json!(0.7));
        assert_eq!(v["agent"]["glow_variant"], json!("first_visit"));
        assert_eq!(v["new"]["inner"], json!([1, 2]));
        assert!(apply_override(&mut v, "episodes.x=1").is_err());
        assert!(apply_override(&mut v, "noequals").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn parse_errors_are_usage_errors() {
        assert_eq!(run(["projsim", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["projsim", "solve"]), EXIT_USAGE);
    }
}
