use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lowrank_rl::algorithms::{recursion_driver, RecursionKind};
use lowrank_rl::harness::output::recursion_csv;
use lowrank_rl::harness::{parse_config, read_csv, CSV_HEADER};
use lowrank_rl::mdp::TabularMdp;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank-rl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_results_summary_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"experiment":"lrevi_tucker","replicates":3,"p1":1.5}"#);
    let out = dir.path().join("out");
    let o = cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.starts_with(&CSV_HEADER.join(",")));
    let rows = read_csv(csv.as_bytes()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.gate_passed && r.max_q_error <= 1e-8));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["lrevi_tucker"]["success_fraction"], 1.0);

    // the sidecar is itself a valid config that resolves to the same spec
    let sidecar = out.join("resolved_config.json");
    let text = fs::read_to_string(&sidecar).unwrap();
    assert!(text.contains("p1=1.5 clipped to 1"));
    let again = parse_config(&sidecar).unwrap();
    assert_eq!(again.spec, parse_config(&cfg).unwrap().spec);
}

#[test]
fn seed_and_mode_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"experiment":"lrevi_tucker","replicates":2}"#);
    let out = dir.path().join("out");
    let o = cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7", "--mode", "sampled"]);
    assert!(o.status.success());
    let spec = parse_config(out.join("resolved_config.json")).unwrap().spec;
    assert_eq!(spec.seed, 7);
    assert_eq!(spec.mode, lowrank_rl::algorithms::EstimationMode::Sampled);
    let rows = read_csv(fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.samples_used > 0));
}

#[test]
fn output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"experiment":"lrmcpi_eps","replicates":4}"#);
    let mut texts = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads]);
        assert!(o.status.success());
        texts.push(fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = write_config(dir.path(), "b.json", r#"{"experiment":"bogus"}"#);
    let o = cli(&["run", "--config", &bogus, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment"));

    let unknown = write_config(dir.path(), "u.json", r#"{"experiment":"recursion","colour":1}"#);
    let o = cli(&["run", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(2));

    let malformed = write_config(dir.path(), "m.json", "{");
    assert_eq!(cli(&["generate", "--config", &malformed]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["summarize", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn recursion_verb_matches_the_driver() {
    let o = cli(&["recursion", "--horizon", "25", "--eps-terminal", "0.01"]);
    assert!(o.status.success());
    let trace = recursion_driver(RecursionKind::DoublyExp, 25, 0.01).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), recursion_csv(&trace).unwrap());

    let o = cli(&["recursion", "--kind", "exponential", "--alpha", "0.5", "--horizon", "30", "--eps-terminal", "1e-6"]);
    let trace = recursion_driver(RecursionKind::Exponential { alpha: 0.5 }, 30, 1e-6).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), recursion_csv(&trace).unwrap());
}

#[test]
fn recursion_experiment_writes_its_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "r.json", r#"{"experiment":"recursion","horizon":20,"eps_terminal":0.01}"#);
    let out = dir.path().join("out");
    assert!(cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let text = fs::read_to_string(out.join("recursion.csv")).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.starts_with("h,eps_h,literal_v\n20,1.0000000000000000e-2,"));
}

#[test]
fn generate_writes_mdp_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "g.json",
        r#"{"experiment":"approx_rank","n_states":8,"n_actions":6,"horizon":3,"noise_level":0.05}"#,
    );
    let out = dir.path().join("gen");
    let o = cli(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mdp = TabularMdp::read_json(out.join("mdp.json")).unwrap();
    assert_eq!((mdp.n_states(), mdp.n_actions(), mdp.horizon()), (8, 6, 3));
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("certificate.json")).unwrap()).unwrap();
    for key in ["mu", "kappa", "xi_R", "xi_P"] {
        assert!(cert.get(key).is_some(), "missing {key}");
    }
    assert_eq!(cert["xi_R"].as_array().unwrap().len(), 3);
    assert!(cert["xi_P"][0].as_f64().unwrap() > 0.0);
}

#[test]
fn summarize_reads_a_results_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.json", r#"{"experiment":"eps_rank_example","m":6,"replicates":5}"#);
    let out = dir.path().join("out");
    assert!(cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let o = cli(&["summarize", out.join("results.csv").to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["eps_rank_example"]["rows"], 5);
    assert_eq!(v["eps_rank_example"]["total_samples"], 0);
}
