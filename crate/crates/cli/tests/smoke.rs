use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[data]
train_count = 24
eval_count = 6
[train_rnnt]
max_steps = 8
[train_las]
max_steps = 6
[train_mwer]
max_steps = 2
[bench]
utterances = 3
repeats = 1
";

fn twopass(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twopass"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn twopass")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = twopass(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.toml"), TINY).unwrap();
    let common = ["--config", "cfg.toml", "--out", "run"];
    let stage = |name: &str, extra: &[&str]| {
        let mut args = vec![name];
        args.extend(common);
        args.extend(extra);
        ok(&args, d)
    };

    stage("gen-data", &[]);
    stage("train-rnnt", &[]);
    stage("train-las", &[]);
    stage("mwer-finetune", &[]);
    let decoded = stage("decode", &[]);
    assert!(decoded.contains("first_pass"));
    stage("rescore", &[]);
    let float = stage("eval", &["--checkpoint", "run/las.ckpt"]);
    let quant = stage("eval", &["--checkpoint", "run/las.ckpt", "--quantized"]);
    assert!(float.contains("eval_float"));
    assert!(quant.contains("eval_quantized"));
    stage("sweep-endpoint", &[]);
    let bench = stage("bench-rescore", &[]);
    assert!(bench.contains("batched: p50"));
    stage("quantize", &[]);

    let run = d.join("run");
    for f in [
        "train.tpds",
        "eval.tpds",
        "config.toml",
        "rnnt.ckpt",
        "rnnt_loss.csv",
        "las.ckpt",
        "mwer.ckpt",
        "decodes.csv",
        "decode_metrics.csv",
        "rescore_metrics.csv",
        "eval_float.csv",
        "eval_quantized.csv",
        "sweep.csv",
        "sweep.svg",
        "bench_rescore.csv",
        "quantized.ckpt",
        "size_report.txt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let lattices = std::fs::read_dir(run.join("lattices")).unwrap().count();
    assert_eq!(lattices, 6);
    let index = std::fs::read_to_string(run.join("decodes.csv")).unwrap();
    assert_eq!(index.lines().count(), 7);

    // Rescoring an RNN-T-only checkpoint violates the second-pass contract.
    let out = twopass(
        &[
            "rescore",
            "--config",
            "cfg.toml",
            "--out",
            "run",
            "--checkpoint",
            "run/rnnt.ckpt",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[data]\nbogus = 1\n").unwrap();
    let out = twopass(&["gen-data", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn missing_inputs_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = twopass(&["decode", "--out", "nothing"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
