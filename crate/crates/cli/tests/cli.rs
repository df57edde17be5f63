use std::path::Path;
use std::process::{Command, Output};

use fedpriv_cli::experiments::{attack_eval, compare_aggregators, compare_comms};
use fedpriv_cli::metrics::validate_jsonl;
use fedpriv_cli::ExperimentConfig;

const TINY: &str = r#"{
  "rounds": 3,
  "local_epochs": 1,
  "clients": 6,
  "data": {"source": {"kind": "synthetic", "n": 400, "d": 8, "classes": 3, "separation": 3.0, "noise_std": 1.0}}
}"#;

fn fedpriv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedpriv")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_one_record_per_round_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", TINY);
    let out = dir.path().join("m.jsonl");
    let o = fedpriv(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(validate_jsonl(&text), Ok(3));
    assert_eq!(text.lines().count(), 4);
    let check = fedpriv(&["check-metrics", out.to_str().unwrap()]);
    assert!(check.status.success());
}

#[test]
fn zero_rounds_is_summary_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &TINY.replace("\"rounds\": 3", "\"rounds\": 0"));
    let o = fedpriv(&["run", "--config", &cfg]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"type\":\"summary\""));
    assert_eq!(validate_jsonl(&text), Ok(0));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", TINY);
    let a = fedpriv(&["run", "--config", &cfg, "--seed", "1"]).stdout;
    let b = fedpriv(&["run", "--config", &cfg, "--seed", "2"]).stdout;
    let c = fedpriv(&["run", "--config", &cfg, "--seed", "1"]).stdout;
    assert_ne!(a, b);
    assert_eq!(a, c);
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"rounds": 2, "comms": {"k_fraktion": 0.1}}"#);
    let o = fedpriv(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("k_fraktion") && err.contains("comms"), "{err}");
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"mpc": {"enabled": true}, "comms": {"enabled": true}}"#);
    let o = fedpriv(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"data": {"source": {"kind": "idx", "images": "/nonexistent/images", "labels": "/nonexistent/labels"}}}"#,
    );
    let o = fedpriv(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fedpriv(&["check-metrics", &cfg]).status.code(), Some(1));
}

#[test]
fn budget_plan_prints_worked_example() {
    let o = fedpriv(&["budget-plan", "--epsilon", "2", "--rounds", "20", "--client", "1000:1.2", "--denom", "10000"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("per-round 0.1"), "{text}");
    assert!(text.contains("0.012"), "{text}");
}

#[test]
fn comparison_tables_have_the_expected_shape() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let aggs = compare_aggregators(&cfg, 1).unwrap();
    let names: Vec<&str> = aggs.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["fedavg", "robust", "weighted"]);

    let comms = compare_comms(&cfg, 1).unwrap();
    assert_eq!(comms.len(), 4);
    assert_eq!(comms[0].delay_reduction_pct, 0.0);
    assert!(comms.windows(2).all(|w| w[1].upload_mb <= w[0].upload_mb));

    let attacks = attack_eval(&ExperimentConfig { clients: 10, ..cfg }, 1).unwrap();
    assert_eq!(attacks.len(), 8);
    for row in &attacks {
        if row.attack == "none" {
            assert!(row.defense_rate.is_none());
        } else {
            let rate = row.defense_rate.unwrap();
            assert!((0.0..=1.0).contains(&rate));
        }
    }
}

#[test]
fn comparison_commands_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", TINY);
    let rows = dir.path().join("rows.jsonl");
    let o = fedpriv(&["compare-comms", "--config", &cfg, "--seeds", "1", "--out", rows.to_str().unwrap()]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("sparsify+delta"));
    assert_eq!(std::fs::read_to_string(&rows).unwrap().lines().count(), 4);
}
