use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use projsim::{make_chain, Mdp, Outcome};
use tempfile::TempDir;

fn projsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projsim"))
        .args(args)
        .output()
        .unwrap()
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .display()
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_mdp(dir: &TempDir, name: &str, mdp: &Mdp) -> PathBuf {
    let path = dir.path().join(name);
    mdp.save(&path).unwrap();
    path
}

fn read_q(path: &Path) -> Vec<(usize, usize, f64)> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = write_mdp(&dir, "good.json", &make_chain(3, 0.0, 1.0, 0.3).unwrap());
    assert_eq!(projsim(&["validate", p(&good)]).status.code(), Some(0));

    let mut broken = make_chain(3, 0.0, 1.0, 0.3).unwrap();
    broken.transitions[0][0] = vec![Outcome::new(1, 0.0, 0.6)];
    let bad = write_mdp(&dir, "bad.json", &broken);
    let out = projsim(&["validate", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("probability mass"), "{}", stdout(&out));

    let missing = dir.path().join("missing.json");
    assert_eq!(projsim(&["validate", p(&missing)]).status.code(), Some(2));
}

#[test]
fn solve_writes_q_table() {
    let dir = TempDir::new().unwrap();
    let chain = write_mdp(&dir, "chain.json", &make_chain(3, 0.0, 1.0, 0.3).unwrap());
    let out_dir = dir.path().join("out");
    let out = projsim(&["--quiet", "--out", p(&out_dir), "solve", p(&chain)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = read_q(&out_dir.join("qstar.csv"));
    let (s, a, q) = rows[0];
    assert_eq!((s, a), (0, 0));
    assert!((q - 0.3).abs() < 1e-9, "{q}");

    let zero = write_mdp(&dir, "zero.json", &make_chain(4, 0.0, 0.0, 0.5).unwrap());
    let zero_out = dir.path().join("zero");
    assert_eq!(projsim(&["-q", "--out", p(&zero_out), "solve", p(&zero)]).status.code(), Some(0));
    assert!(read_q(&zero_out.join("qstar.csv")).iter().all(|r| r.2 == 0.0));
}

#[test]
fn solve_rejects_improper_undiscounted_mdp() {
    let dir = TempDir::new().unwrap();
    // state 0 loops forever; the terminal state 1 is unreachable
    let mdp = Mdp {
        n_states: 2,
        n_actions: 1,
        transitions: vec![vec![vec![Outcome::new(0, 1.0, 1.0)]], vec![vec![Outcome::new(1, 0.0, 1.0)]]],
        terminal_states: BTreeSet::from([1]),
        gamma_dis: 1.0,
        reward_bound: 1.0,
    };
    let path = write_mdp(&dir, "loop.json", &mdp);
    let out = projsim(&["-q", "--out", p(&dir.path().join("o")), "solve", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn train_modes_and_config_errors() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("theorem");
    let out = projsim(&[
        "-q", "--config", &config("chain_theorem.json"), "--set", "episodes=3000",
        "--set", "replicas=2", "--out", p(&out_dir), "train",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["report.csv", "summary.json", "qstar.csv"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["regime"], "theorem");
    assert_eq!(summary["config"]["replicas"], 2);
    assert_eq!(summary["config"]["episodes"], 3000);

    let far = dir.path().join("far");
    let out = projsim(&[
        "-q", "--config", &config("chain_theorem.json"), "--set", "episodes=200",
        "--set", "mdp.gamma_dis=0.9", "--set", "agent.eta=0.1", "--out", p(&far), "train",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(far.join("summary.json")).unwrap();
    assert!(text.contains("\"outside-theorem\""));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"mdp\": ").unwrap();
    assert_eq!(projsim(&["-q", "--out", p(&far), "train", p(&bad)]).status.code(), Some(2));
    let out = projsim(&[
        "-q", "--config", &config("chain_theorem.json"), "--set", "agent.typo=1", "--out", p(&far), "train",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("typo"), "{}", stderr(&out));
    assert_eq!(projsim(&["-q", "train"]).status.code(), Some(2));
}

#[test]
fn config_echo_reproduces_run() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("a");
    let out = projsim(&[
        "-q", "--config", &config("chain_theorem.json"), "--set", "episodes=2000",
        "--seed", "77", "--out", p(&first), "train",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    let echo = dir.path().join("echo.json");
    std::fs::write(&echo, serde_json::to_string(&summary["config"]).unwrap()).unwrap();
    let second = dir.path().join("b");
    assert_eq!(projsim(&["-q", "--out", p(&second), "train", p(&echo)]).status.code(), Some(0));
    assert_eq!(
        std::fs::read(first.join("report.csv")).unwrap(),
        std::fs::read(second.join("report.csv")).unwrap()
    );
}

#[test]
fn compare_writes_joint_csv() {
    let dir = TempDir::new().unwrap();
    let out = projsim(&[
        "-q", "--config", &config("compare_chain.json"), "--set", "max_total_steps=5000",
        "--set", "replicas=2", "--out", p(dir.path()), "compare",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(dir.path().join("compare.csv")).unwrap();
    let agents: BTreeSet<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(agents.len(), 4, "{agents:?}");
    assert!(agents.contains("sarsa0") && agents.contains("q_learning"));
}

#[test]
fn compare_config_errors() {
    let dir = TempDir::new().unwrap();
    let one = dir.path().join("one.json");
    std::fs::write(
        &one,
        r#"{"mdp": {"kind": "chain", "n": 3, "gamma_dis": 0.3}, "episodes": 10,
            "agents": [{"name": "a", "agent": {"kind": "baseline", "method": "sarsa"}}]}"#,
    )
    .unwrap();
    let out = projsim(&["-q", "--out", p(dir.path()), "compare", p(&one)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("compare needs >= 2 agents"));

    let dup = dir.path().join("dup.json");
    std::fs::write(
        &dup,
        r#"{"mdp": {"kind": "chain", "n": 3, "gamma_dis": 0.3}, "episodes": 10,
            "agents": [{"name": "a", "agent": {"kind": "baseline", "method": "sarsa"}},
                       {"name": "a", "agent": {"kind": "baseline", "method": "q_learning"}}]}"#,
    )
    .unwrap();
    assert_eq!(projsim(&["-q", "--out", p(dir.path()), "compare", p(&dup)]).status.code(), Some(2));
}

#[test]
fn oracle_check_exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = p(dir.path());
    assert_eq!(projsim(&["-q", "--out", o, "oracle-check", "--cases", "200"]).status.code(), Some(0));
    assert_eq!(
        projsim(&["-q", "--out", o, "oracle-check", "--cases", "200", "--inject-fault"]).status.code(),
        Some(1)
    );
    assert_eq!(projsim(&["-q", "--out", o, "oracle-check", "--cases", "0"]).status.code(), Some(0));
}

#[test]
fn ensemble_runs_from_config() {
    let dir = TempDir::new().unwrap();
    let out = projsim(&[
        "-q", "--config", &config("ensemble_two_state.json"), "--set", "n_agents=2000",
        "--out", p(dir.path()), "ensemble",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("ensemble.csv").exists());
}

#[test]
fn usage_errors() {
    assert_eq!(projsim(&["bogus"]).status.code(), Some(2));
    assert_eq!(projsim(&["--seed", "x", "oracle-check"]).status.code(), Some(2));
    assert_eq!(projsim(&["--help"]).status.code(), Some(0));
}
