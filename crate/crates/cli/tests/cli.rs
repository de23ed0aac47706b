use std::path::Path;
use std::process::{Command, Output};

use disc::config::RunConfig;
use disc::eval::{rollout_eval, EvalReport};
use disc::lang::Split;
use disc::pipeline;
use disc::sim::Dataset;

const TINY: &str = "steps = 15\ndemos = 2\neval_episodes = 3\nd = 8\nwin_blocks = 1\ncheckpoint_every = 5\nlog_every = 0\n";

fn disc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn in_dir(dir: &Path, sub: &str, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    disc(&args)
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn unknown_input_prints_usage_and_exits_two() {
    for args in [&["frobnicate"][..], &["eval", "--bogus"], &[]] {
        let out = disc(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn config_errors_exit_two_and_contract_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "steps = 10\nwarp_drive = on\n").unwrap();
    let out = in_dir(dir.path(), "train", &bad, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_drive"));

    let cfg = tiny_config(dir.path());
    let out = in_dir(&dir.path().join("nothing"), "eval", &cfg, &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = disc(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert_eq!(csv.lines().filter(|l| l.ends_with(",true")).count(), 19);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(in_dir(&a, "gen-data", &cfg, &[]).status.success());
    assert!(in_dir(&b, "gen-data", &cfg, &[]).status.success());
    assert_eq!(std::fs::read(a.join("data.jsonl")).unwrap(), std::fs::read(b.join("data.jsonl")).unwrap());
}

#[test]
fn train_then_eval_reproduces_the_in_process_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("run");
    for sub in ["gen-data", "train", "eval"] {
        let o = in_dir(&out, sub, &cfg_path, &["--svg"]);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["curve.csv", "curve.svg", "ckpt_000005.bin", "ckpt_000010.bin", "model.bin", "eval.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let from_cli: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();

    let cfg = RunConfig::parse(TINY).unwrap();
    let data = Dataset::load(&out.join("data.jsonl")).unwrap();
    let lex = pipeline::lexicon(&cfg).unwrap();
    let (model, _) = pipeline::train_model(&cfg, &data, &lex, 5, None).unwrap();
    let direct = rollout_eval(&model, &cfg.env, &lex, &cfg.env.tasks(), cfg.eval_episodes, Split::Train, 5, cfg.exec).unwrap();
    assert_eq!(from_cli, direct);

    // every remaining subcommand runs on the trained model
    for sub in ["adapt", "leakage", "paraphrase", "manifold"] {
        let o = in_dir(&out, sub, &cfg_path, &[]);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = in_dir(&out, "bench", &cfg_path, &["--trials", "20"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("manifold.csv")).unwrap();
    assert!(csv.starts_with(&format!("# {}", cfg.provenance(5))));
}
