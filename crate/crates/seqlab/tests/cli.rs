//! End-to-end tests of the command-line binary: artifact chaining across
//! subcommands, exit codes, and byte-identical metric reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqlab::datagen::GrammarSpec;
use seqlab::harness::{ModelShape, TrainConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqlab"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn check(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_spec() -> GrammarSpec {
    GrammarSpec {
        n_context_classes: 5,
        specific_responses_per_class: 8,
        generic_pool_size: 12,
        p_generic: 0.3,
        response_length_range: (3, 6),
        vocab_size: 48,
        seed: 2,
    }
}

fn tiny_cfg(data_dir: &Path) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_steps: 300,
        eval_every: 100,
        warmup_steps: 20,
        learning_rate: 3e-3,
        beam_size: 2,
        max_decode_len: 7,
        data_dir: data_dir.to_path_buf(),
        model: ModelShape {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_len: 12,
            dropout: 0.0,
            tie_embeddings: true,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn pipeline_chains_and_reruns_bit_identically() {
    let root = scratch("pipeline");
    let data = root.join("data");
    let runs = root.join("runs");

    let spec_path = root.join("grammar.kv");
    fs::write(&spec_path, tiny_spec().to_kv().serialize()).unwrap();
    let out = bin()
        .args(["gen-data", "--pairs", "40", "--seed", "3"])
        .arg("--config")
        .arg(&spec_path)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    check(&out, 0);
    for name in ["grammar.kv", "train.tsv", "valid.tsv"] {
        assert!(data.join(name).exists(), "gen-data did not write {name}");
    }

    let cfg = tiny_cfg(&data);
    let cfg_path = root.join("train.kv");
    fs::write(&cfg_path, cfg.to_kv().serialize()).unwrap();
    let out = bin()
        .args(["train", "--stage", "mle"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&runs)
        .output()
        .unwrap();
    check(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("run dir:"));
    let run_dir = runs.join(cfg.run_dir_name());
    let ckpt = run_dir.join("final.model");
    assert!(ckpt.exists(), "missing {}", ckpt.display());
    assert!(run_dir.join("runlog.jsonl").exists());

    // Metrics are a pure function of checkpoint plus data, so a rerun
    // must reproduce the output file byte for byte.
    let eval_a = root.join("eval_a");
    let eval_b = root.join("eval_b");
    for dir in [&eval_a, &eval_b] {
        let out = bin()
            .arg("evaluate")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap();
        check(&out, 0);
    }
    let first = fs::read(eval_a.join("metrics.jsonl")).unwrap();
    let second = fs::read(eval_b.join("metrics.jsonl")).unwrap();
    assert!(!first.is_empty());
    assert_eq!(first, second);

    let dec = root.join("decodes");
    let out = bin()
        .args(["decode", "--decoder", "diverse_beam", "--groups", "3"])
        .args(["--beam", "6", "--limit", "2"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&dec)
        .output()
        .unwrap();
    check(&out, 0);
    let lines = fs::read_to_string(dec.join("decodes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("context").is_some() && v.get("tokens").is_some());
    }

    let rank_dir = root.join("rank");
    let out = bin()
        .args(["rank", "--limit", "2"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&rank_dir)
        .output()
        .unwrap();
    check(&out, 0);
    let rank_lines = fs::read_to_string(rank_dir.join("rank.jsonl")).unwrap();
    assert!(rank_lines.lines().count() >= 3, "summary plus one line per pair");

    let hist_dir = root.join("hist");
    let ckpt_arg = format!("mle={}", ckpt.display());
    let out = bin()
        .args(["ppl-hist", "--bins", "8", "--checkpoint", &ckpt_arg])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&hist_dir)
        .output()
        .unwrap();
    check(&out, 0);
    assert!(hist_dir.join("ppl_hist.csv").exists());
    assert!(hist_dir.join("ppl_hist.jsonl").exists());

    // A checkpoint path that does not exist is an IO failure.
    let out = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(root.join("absent.model"))
        .arg("--out")
        .arg(root.join("unused"))
        .output()
        .unwrap();
    check(&out, 2);
}

#[test]
fn help_prints_usage_and_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    check(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let out = bin()
        .args(["evaluate", "--config", "x", "--checkpoint", "y"])
        .args(["--out", "z", "--frobnicate"])
        .output()
        .unwrap();
    check(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr:\n{stderr}");
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = bin().arg("frobnicate").output().unwrap();
    check(&out, 1);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let root = scratch("missing-config");
    let out = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(root.join("absent.kv"))
        .arg("--checkpoint")
        .arg(root.join("absent.model"))
        .arg("--out")
        .arg(root.join("unused"))
        .output()
        .unwrap();
    check(&out, 2);
}

#[test]
fn invalid_config_value_is_a_validation_error() {
    let root = scratch("bad-config");
    let good = tiny_cfg(Path::new("unused")).to_kv().serialize();
    let bad = good.replace("alpha=1", "alpha=0");
    assert_ne!(good, bad);
    let cfg_path = root.join("train.kv");
    fs::write(&cfg_path, bad).unwrap();
    let out = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(root.join("absent.model"))
        .arg("--out")
        .arg(root.join("unused"))
        .output()
        .unwrap();
    check(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
