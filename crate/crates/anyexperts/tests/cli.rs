//! End-to-end tests of the command-line binary: exit codes, output files,
//! and determinism of everything written to disk.

use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
d = 8
d_ff = 12
vocab = 16
e_real = 4
e_virtual = 2
k_min = 2
k_max = 4
rho_max = 0.5
alpha = 0.5
seq_len = 16
n_sequences = 8
batch_size = 2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anyexperts"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Write the tiny config plus extra lines; a `steps` line is appended unless
/// the extras already set one (the parser rejects duplicate keys).
fn write_config(dir: &Path, extra: &str) {
    let steps = if extra.contains("steps") { "" } else { "steps = 10\n" };
    std::fs::write(dir.join("cfg.txt"), format!("{TINY_CONFIG}{steps}{extra}")).unwrap();
}

#[test]
fn train_smoke_run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "steps = 1\n");
    let out = run(&["train", "--config", "cfg.txt", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("run/checkpoint.bin").exists());
    assert!(tmp.path().join("run/loss_curve.csv").exists());
    assert!(tmp.path().join("run/load_stats.jsonl").exists());
    let curve = std::fs::read_to_string(tmp.path().join("run/loss_curve.csv")).unwrap();
    assert!(curve.starts_with("step,lm,tir,balance,total\n"));
    assert_eq!(curve.lines().count(), 2); // header + one step
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    for dir in ["a", "b"] {
        let out = run(&["train", "--config", "cfg.txt", "--out", dir], tmp.path());
        assert_eq!(out.status.code(), Some(0));
    }
    for file in ["loss_curve.csv", "load_stats.jsonl", "checkpoint.bin"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    let base = run(&["train", "--config", "cfg.txt", "--out", "a"], tmp.path());
    let other = run(
        &["train", "--config", "cfg.txt", "--out", "b", "--seed", "7"],
        tmp.path(),
    );
    assert_eq!(base.status.code(), Some(0));
    assert_eq!(other.status.code(), Some(0));
    let a = std::fs::read(tmp.path().join("a/loss_curve.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("b/loss_curve.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // missing required --out
    let out = run(&["train"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    // unknown config key, named in the diagnostic
    std::fs::write(tmp.path().join("bad.txt"), "not_a_key = 3\n").unwrap();
    let out = run(&["train", "--config", "bad.txt", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));

    // malformed line with the key named
    std::fs::write(tmp.path().join("empty.txt"), "seed =\n").unwrap();
    let out = run(&["train", "--config", "empty.txt", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    // unknown subcommand
    let out = run(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_expected_rows_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_eq!(
        run(&["train", "--config", "cfg.txt", "--out", "run"], tmp.path())
            .status
            .code(),
        Some(0)
    );

    // single scale: one dynamic row plus the k=4 baseline (e_real = 4)
    let out = run(
        &[
            "sweep",
            "--checkpoint",
            "run/checkpoint.bin",
            "--scales",
            "1.0",
            "--out",
            "s1",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("s1/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3); // header + anyexperts + topk4

    // five scales -> five dynamic rows + baselines; reruns identical
    for dir in ["s2", "s3"] {
        let out = run(
            &["sweep", "--checkpoint", "run/checkpoint.bin", "--out", dir],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(tmp.path().join("s2/sweep.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("s3/sweep.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.matches("anyexperts").count(), 5);

    // unloadable checkpoint
    std::fs::write(tmp.path().join("junk.bin"), b"nonsense").unwrap();
    let out = run(
        &["sweep", "--checkpoint", "junk.bin", "--out", "s4"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trace_of_untrained_checkpoint_has_w_half_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    // steps = 0 saves the zero-initialized estimator untouched
    write_config(tmp.path(), "steps = 0\n");
    assert_eq!(
        run(&["train", "--config", "cfg.txt", "--out", "run"], tmp.path())
            .status
            .code(),
        Some(0)
    );
    let out = run(
        &[
            "trace",
            "--checkpoint",
            "run/checkpoint.bin",
            "--out",
            "trace.jsonl",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap();
    let mut records = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid JSON per line");
        let obj = v.as_object().unwrap();
        if obj.contains_key("span") {
            for key in ["sequence", "start", "len", "w_sum"] {
                assert!(obj.contains_key(key), "span missing {key}");
            }
        } else {
            records += 1;
            for key in ["sequence", "position", "modality", "informative", "w", "k_hat", "k_real"] {
                assert!(obj.contains_key(key), "record missing {key}");
            }
            assert_eq!(obj["w"].as_f64().unwrap(), 0.5);
        }
    }
    // record count equals token count: 8 sequences x 16 tokens
    assert_eq!(records, 128);
}

#[test]
fn check_grad_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["check-grad"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS").count(), 2);
}
