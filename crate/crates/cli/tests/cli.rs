//! End-to-end smoke tests for the `liftlearn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_liftlearn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn liftlearn")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert_ok(&run(&[
            "gen",
            "--preset",
            "blocks3",
            "--variant",
            "strips+",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let ta = fs::read(a.join("traces.txt")).unwrap();
    let tb = fs::read(b.join("traces.txt")).unwrap();
    let tc = fs::read(c.join("traces.txt")).unwrap();
    assert_eq!(ta, tb, "same seed must reproduce traces byte for byte");
    assert_ne!(ta, tc, "different seeds should produce different traces");
}

#[test]
fn pipeline_gen_train_extract_eval_diff() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_ok(&run(&["gen", "--preset", "blocks3", "--variant", "full", "--out", out]));
    assert_ok(&run(&[
        "train",
        "--preset",
        "blocks3",
        "--out",
        out,
        "--steps",
        "300",
        "--batch",
        "50",
    ]));
    assert!(dir.path().join("model.ckpt").exists());
    assert_ok(&run(&["extract", "--out", out]));
    let pddl = fs::read_to_string(dir.path().join("learned.pddl")).unwrap();
    assert!(pddl.contains("(:action learned_stack"));

    let eval = run(&[
        "eval",
        "--preset",
        "blocks3",
        "--out",
        out,
        "--test-states",
        "50",
    ]);
    assert_ok(&eval);
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("precision"), "eval output: {stdout}");
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.starts_with("states 50"), "metrics: {metrics}");

    let diff = run(&["diff", "--preset", "blocks3", "--out", out]);
    assert_ok(&diff);
    assert!(String::from_utf8_lossy(&diff.stdout).contains("stack"));
}

#[test]
fn run_command_reads_toml_config_and_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "preset = \"blocks3\"\nvariant = \"full\"\nseeds = [0, 1]\nsteps = 200\nbatch = 50\ntest_states = 30\nout = \"{}\"\n",
            out.display()
        ),
    )
    .unwrap();
    assert_ok(&run(&["run", "--config", cfg.to_str().unwrap()]));
    for seed in ["seed_0", "seed_1"] {
        for f in ["traces.txt", "model.ckpt", "learned.pddl", "metrics.txt"] {
            assert!(out.join(seed).join(f).exists(), "missing {seed}/{f}");
        }
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("runs 2"), "summary: {summary}");
    assert!(summary.contains("N_sc"));
}

#[test]
fn reruns_with_same_seed_are_byte_identical() {
    // same config twice into fresh directories: every artifact must match
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str| -> std::path::PathBuf {
        let out = dir.path().join(name);
        assert_ok(&run(&[
            "run",
            "--preset",
            "blocks3",
            "--variant",
            "full",
            "--seeds",
            "7",
            "--steps",
            "150",
            "--batch",
            "50",
            "--test-states",
            "20",
            "--out",
            out.to_str().unwrap(),
        ]));
        out
    };
    let a = mk("a");
    let b = mk("b");
    for f in ["seed_7/traces.txt", "seed_7/learned.pddl", "seed_7/metrics.txt", "summary.txt"] {
        let fa = fs::read(a.join(f)).unwrap();
        let fb = fs::read(b.join(f)).unwrap();
        assert_eq!(fa, fb, "artifact {f} differs between identical runs");
    }
}

#[test]
fn error_exit_codes() {
    // unknown preset: runtime error, exit 1
    let out = run(&["gen", "--preset", "nosuch", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
    // usage error from clap: exit 2
    let out = run(&["gen", "--preset", "blocks3"]);
    assert_eq!(out.status.code(), Some(2));
    // missing traces file: exit 1
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--preset", "blocks3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn explicit_domain_and_problem_files_work() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../domains/blocks3");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_ok(&run(&[
        "gen",
        "--domain",
        root.join("domain.pddl").to_str().unwrap(),
        "--problem",
        root.join("train.pddl").to_str().unwrap(),
        "--variant",
        "names",
        "--out",
        out,
    ]));
    assert!(dir.path().join("traces.txt").exists());
}
