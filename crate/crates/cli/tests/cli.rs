use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn wrm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wrm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

/// Rows of a CSV as floats, skipping the header and non-numeric columns.
fn csv_column(text: &str, col: usize) -> Vec<f64> {
    text.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wrm(dir.path(), &["train", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn bad_attack_spec_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for spec in ["fgm:p=3,eps=0.1", "bim:eps=0.1", "wrm:eps=0.1", "pgm:p=inf"] {
        let out = wrm(dir.path(), &["attack", "--model", "m.json", "--spec", spec]);
        assert_eq!(out.status.code(), Some(2), "{spec}");
    }
}

#[test]
fn unknown_variant_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wrm(dir.path(), &["rl-eval", "--table", "q.json", "--variants", "original,windy"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("windy"));
}

#[test]
fn bad_field_reports_path_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", "[train]\nstepsize = \"fast\"\n");
    let out = wrm(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepsize"));
}

#[test]
fn synthetic_pipeline_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "wrm.toml", "preset = \"synthetic-wrm\"\n[train]\nsteps = 300\n");
    write(d, "erm.toml", "preset = \"synthetic-erm\"\n[train]\nsteps = 300\n");
    ok(&wrm(d, &["train", "--config", "wrm.toml", "--out-dir", "wrm"]));
    ok(&wrm(d, &["train", "--config", "erm.toml", "--out-dir", "erm"]));
    assert_ne!(read(&d.join("wrm"), "model.json"), read(&d.join("erm"), "model.json"));

    ok(&wrm(
        d,
        &[
            "attack", "--config", "wrm.toml", "--model", "wrm/model.json", "--out-dir", "wrm",
            "--spec", "fgm:p=2,eps=0.1", "--values", "0,0.2,0.4,0.8,1.6",
        ],
    ));
    let attack = read(&d.join("wrm"), "attack.csv");
    assert_eq!(attack.lines().next(), Some("method,p,budget,error_rate,mean_loss"));
    let losses = csv_column(&attack, 4);
    assert!(losses.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{losses:?}");

    // eps = 0 leaves every point in place
    ok(&wrm(d, &["gen-data", "--config", "wrm.toml", "--out-dir", "data"]));
    ok(&wrm(
        d,
        &[
            "attack", "--config", "wrm.toml", "--model", "wrm/model.json", "--out-dir", "zero",
            "--data", "data/test.csv", "--spec", "fgm:p=inf,eps=0",
        ],
    ));
    let zero_err = csv_column(&read(&d.join("zero"), "attack.csv"), 3)[0];
    let clean_err = csv_column(&attack, 3)[0];
    assert_eq!(zero_err, clean_err);

    ok(&wrm(d, &["certify", "--config", "wrm.toml", "--model", "wrm/model.json", "--out-dir", "wrm"]));
    let cert = read(&d.join("wrm"), "certificate.csv");
    assert_eq!(cert.lines().next(), Some("rho,certificate_bound"));
    let bounds = csv_column(&cert, 1);
    assert!(bounds.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(read(&d.join("wrm"), "worst_case.csv").lines().next(), Some("gamma_adv,rho_test,worst_value"));

    for name in ["train", "attack", "certify"] {
        let manifest = format!("wrm/manifest-{name}.json");
        ok(&wrm(d, &["--replay", &manifest, "--out-dir", "again"]));
    }
    for f in ["model.json", "train_report.csv", "attack.csv", "certificate.csv", "worst_case.csv"] {
        assert_eq!(read(&d.join("wrm"), f), read(&d.join("again"), f), "{f}");
    }
}

#[test]
fn tampered_output_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&wrm(d, &["gen-data", "--out-dir", "a"]));
    let path = d.join("a/manifest-gen-data.json");
    let text = read(d, "a/manifest-gen-data.json");
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["outputs"]["train.csv"] = serde_json::Value::String("00".into());
    std::fs::write(&path, m.to_string()).unwrap();
    let out = wrm(d, &["--replay", "a/manifest-gen-data.json", "--out-dir", "b"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.csv"));
}

#[test]
fn untrained_agent_falls_quickly_on_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "rl.toml", "preset = \"cartpole-nominal\"\n[rl]\ntrials = 20\n[rl.agent]\nepisodes = 0\n");
    ok(&wrm(d, &["rl-train", "--config", "rl.toml", "--out-dir", "rl"]));
    ok(&wrm(d, &["rl-eval", "--config", "rl.toml", "--table", "rl/q_table.json", "--out-dir", "rl"]));
    let eval = read(&d.join("rl"), "evaluation.csv");
    let names: Vec<&str> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["original", "light", "long", "soft-g", "heavy", "short", "strong-g"]);
    assert!(csv_column(&eval, 1).iter().all(|m| *m < 100.0), "{eval}");
}

#[test]
fn rl_train_writes_episode_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "rl.toml", "preset = \"cartpole-robust\"\n[rl.agent]\nepisodes = 50\n");
    ok(&wrm(d, &["rl-train", "--config", "rl.toml", "--out-dir", "rl"]));
    let episodes = read(&d.join("rl"), "episodes.csv");
    assert_eq!(episodes.lines().next(), Some("episode,length"));
    assert_eq!(episodes.lines().count(), 51);
    ok(&wrm(d, &["--replay", "rl/manifest-rl-train.json"]));
}

#[test]
fn synthetic_preset_runs_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&wrm(dir.path(), &["train", "--preset", "synthetic-wrm", "--out-dir", "out"]));
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
}
