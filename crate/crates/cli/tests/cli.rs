use std::path::Path;
use std::process::{Command, Output};

use lifelong_diffusion::data::ConceptSpec;
use lifelong_diffusion::diffusion::ArchConfig;
use lifelong_diffusion::experiment::ExperimentConfig;

fn ldiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        out: out.to_path_buf(),
        arch: ArchConfig {
            resolution: 8,
            channels: 4,
            text_dim: 8,
            time_dim: 8,
            attn_dim: 4,
            max_personalized: 4,
            ..ArchConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.pretrain.corpus_size = 100;
    cfg.pretrain.heldout_size = 8;
    cfg.pretrain.max_steps = 20;
    cfg.pretrain.eval_every = 10;
    cfg.extractor.corpus_size = 100;
    cfg.extractor.heldout_size = 20;
    cfg.extractor.steps = 10;
    cfg.extractor.hidden = 8;
    cfg.extractor.batch = 8;
    cfg.images_per_task = 3;
    cfg.train.steps = 4;
    cfg.train.prior_size = 2;
    cfg.train.prior_keep = 1;
    cfg.train.bank.eta = 2;
    cfg.train.sampler.steps = 4;
    cfg.eval.prompts = 1;
    cfg.eval.samples_per_prompt = 1;
    cfg.eval.sampler.steps = 4;
    cfg.concepts = [("dog", 200.0), ("cat", 300.0)]
        .into_iter()
        .enumerate()
        .map(|(id, (noun, hue))| ConceptSpec {
            id,
            token: format!("V{}", id + 1),
            class_noun: noun.into(),
            hue,
            texture_seed: id as u64,
            scale: 1.0,
        })
        .collect();
    cfg
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = dir.path().join("config.json");
    tiny_config(&run).save(&config).unwrap();
    let c = config.to_str().unwrap();
    let images = dir.path().join("images");

    for args in [
        vec!["pretrain", "--config", c],
        vec!["run-sequence", "--config", c],
        vec!["evaluate", "--config", c],
        vec![
            "generate",
            "--config",
            c,
            "--prompt",
            "a photo of V1 dog and V2 cat",
            "--count",
            "1",
            "--images",
            images.to_str().unwrap(),
        ],
        vec!["report", "--out", run.to_str().unwrap()],
    ] {
        let out = ldiff(&args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(run.join("report").join("summary.md").exists());
    assert!(images.join("sample-0.png").exists() && images.join("guidance-0.csv").exists());
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let out = ldiff(&["pretrain", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&config, "{ not json").unwrap();
    let out = ldiff(&["pretrain", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_base_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    tiny_config(&dir.path().join("run")).save(&config).unwrap();
    let out = ldiff(&["run-sequence", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_token_in_prompt_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = dir.path().join("config.json");
    tiny_config(&run).save(&config).unwrap();
    let c = config.to_str().unwrap();
    assert!(ldiff(&["pretrain", "--config", c]).status.success());
    let out = ldiff(&["generate", "--config", c, "--prompt", "a photo of zebra", "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
