use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn backsig(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backsig"))
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("spawn backsig")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Synthetic 2000-row dataset, injected and with p_upper estimated.
fn prepared() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(backsig(
        dir.path(),
        &["synth", "--rows", "2000", "--out", "data.jsonl"],
    ));
    ok(backsig(
        dir.path(),
        &["--dataset", "data.jsonl", "--output-dir", "out", "inject"],
    ));
    ok(backsig(
        dir.path(),
        &["--output-dir", "out", "estimate-pupper", "--samples", "100"],
    ));
    dir
}

#[test]
fn honest_verifies_and_base_model_does_not() {
    let dir = prepared();
    let d = dir.path();
    assert!(d.join("out/train.jsonl").is_file());
    assert!(d.join("out/pupper.json").is_file());

    let out = ok(backsig(
        d,
        &["--output-dir", "out", "--json-out", "v.json", "verify"],
    ));
    assert!(out.contains("verdict: VERIFIED"), "{out}");
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("v.json")).unwrap()).unwrap();
    assert_eq!(v["verified"], true);
    assert_eq!(v["activations"], 10);

    for strategy in ["base", "modal", "subset:20"] {
        let o = backsig(
            d,
            &["--output-dir", "out", "verify", "--strategy", strategy],
        );
        assert_eq!(code(&o), 1, "{strategy}: {}", stdout(&o));
        assert!(stdout(&o).contains("NOT VERIFIED"));
    }
}

#[test]
fn inject_is_deterministic_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(backsig(
        d,
        &["synth", "--rows", "600", "--out", "data.jsonl"],
    ));
    for out in ["a", "b"] {
        ok(backsig(
            d,
            &[
                "--dataset",
                "data.jsonl",
                "--output-dir",
                out,
                "--seed",
                "7",
                "inject",
            ],
        ));
    }
    ok(backsig(
        d,
        &[
            "--dataset",
            "data.jsonl",
            "--output-dir",
            "c",
            "--seed",
            "8",
            "inject",
        ],
    ));
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/train.jsonl"), read("b/train.jsonl"));
    assert_eq!(read("a/report.json"), read("b/report.json"));
    assert_ne!(read("a/train.jsonl"), read("c/train.jsonl"));
    let rows = String::from_utf8(read("a/train.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 603);
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = TempDir::new().unwrap();
    let o = backsig(dir.path(), &["inject"]);
    assert_eq!(code(&o), 2);
    let o = backsig(dir.path(), &["--dataset", "nope.jsonl", "inject"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn verify_without_p_upper_is_an_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(backsig(
        d,
        &["synth", "--rows", "2000", "--out", "data.jsonl"],
    ));
    ok(backsig(
        d,
        &["--dataset", "data.jsonl", "--output-dir", "out", "inject"],
    ));
    let o = backsig(d, &["--output-dir", "out", "verify"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("p_upper"));
    // an explicit bound is enough
    let o = backsig(
        d,
        &["--output-dir", "out", "verify", "--p-upper-log10", "-12"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_arguments_exit_2() {
    let dir = TempDir::new().unwrap();
    for args in [
        &["verify", "--bogus"][..],
        &["verify", "--strategy", "sometimes"],
        &["attack", "subset", "--total", "many"],
        &["frobnicate"],
    ] {
        assert_eq!(code(&backsig(dir.path(), args)), 2, "{args:?}");
    }
    let o = backsig(dir.path(), &["simulate", "--strategy", "subset"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unreachable_provider_exits_2() {
    let dir = prepared();
    let d = dir.path();
    fs::write(
        d.join("remote.toml"),
        r#"output_dir = "out"

[provider]
kind = "remote"
base_url = "http://127.0.0.1:9"
api_key_env = "BACKSIG_TEST_KEY"
max_retries = 0
backoff_ms = 1
timeout_secs = 2
"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_backsig"))
        .current_dir(d)
        .env("BACKSIG_TEST_KEY", "sk-test-not-a-real-key")
        .args([
            "--config",
            "remote.toml",
            "--log-level",
            "debug",
            "verify",
            "--model",
            "ft:x",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    let all = format!("{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(!all.contains("sk-test-not-a-real-key"), "key leaked: {all}");

    // no key in the environment at all
    let o = Command::new(env!("CARGO_BIN_EXE_backsig"))
        .current_dir(d)
        .env_remove("BACKSIG_TEST_KEY")
        .args(["--config", "remote.toml", "verify"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn subset_attack_table() {
    let dir = TempDir::new().unwrap();
    let out = ok(backsig(
        dir.path(),
        &[
            "--json-out",
            "s.json",
            "attack",
            "subset",
            "--subset",
            "5100",
        ],
    ));
    assert!(out.contains("3503\t35.0%"), "{out}");
    assert!(out.contains("5100\t51.0%"), "{out}");
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    let p = v["pass_probability"].as_f64().unwrap();
    assert!((0.5..0.56).contains(&p), "{p}");
}

#[test]
fn kgram_attack_on_stock_corpus() {
    let dir = TempDir::new().unwrap();
    let out = ok(backsig(
        dir.path(),
        &["attack", "kgram", "--synthetic", "stock"],
    ));
    let fractions: Vec<&str> = out
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap())
        .collect();
    assert_eq!(fractions, ["100.0%", "2.6%", "0.6%"], "{out}");
}

#[test]
fn kgram_and_detection_prompt_on_injected_files() {
    let dir = prepared();
    let d = dir.path();
    let out = ok(backsig(
        d,
        &["--output-dir", "out", "attack", "kgram", "--k", "3"],
    ));
    assert_eq!(out.lines().count(), 2, "{out}");
    ok(backsig(
        d,
        &[
            "--output-dir",
            "out",
            "attack",
            "detection-prompt",
            "--out",
            "ask.txt",
        ],
    ));
    let text = fs::read_to_string(d.join("ask.txt")).unwrap();
    assert!(text.lines().count() > 2010);
}

#[test]
fn simulate_sweep_separates_honest_from_adversaries() {
    let dir = TempDir::new().unwrap();
    let out = ok(backsig(
        dir.path(),
        &[
            "--json-out",
            "sim.json",
            "simulate",
            "--trials",
            "8",
            "--p-upper-log10",
            "-12",
        ],
    ));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim.json")).unwrap()).unwrap();
    let rates: Vec<f64> = v["strategies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["pass_rate"].as_f64().unwrap())
        .collect();
    assert_eq!(rates, [1.0, 0.0, 0.0, 0.0], "{out}");
}

#[test]
fn show_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let first = ok(backsig(
        d,
        &["--seed", "42", "--output-dir", "x", "show-config"],
    ));
    fs::write(d.join("c.toml"), &first).unwrap();
    let second = ok(backsig(d, &["--config", "c.toml", "show-config"]));
    assert_eq!(first, second);
    assert!(first.contains("seed = 42"));
}
