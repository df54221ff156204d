#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use std::path::{Path, PathBuf};

use fskd_core::experiment::RunConfig;

/// Backbones built by tests are cached here, shared by every test binary.
pub fn backbone_cache() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("backbones")
}

/// A model small enough to pretrain and train in well under a second.
pub fn tiny_config(out: &Path) -> RunConfig {
    RunConfig {
        preset: "noniid_balanced".into(),
        rounds: 2,
        scale: 0.05,
        output_dir: out.display().to_string(),
        vocab_size: 32,
        model_dim: 16,
        bottleneck_dim: 4,
        ffn_dim: 16,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        n_heads: 2,
        adapter_layers: Some(vec![2]),
        max_src_len: 40,
        max_tgt_len: 10,
        batch_size: 4,
        backbone_steps: 5,
        backbone_batch: 2,
        backbone_corpus: 20,
        backbone_cache: Some(backbone_cache().display().to_string()),
        ..RunConfig::default()
    }
}

use fskd_core::corpus::{generic_corpus, Instance, Vocab};
use fskd_core::model::{BackboneWeights, ModelConfig, Summarizer};

/// Untrained small model with its vocabulary, plus a few generic instances.
pub fn small_model(seed: u64) -> (Summarizer<f64>, Vocab, Vec<Instance>) {
    let cfg = ModelConfig {
        vocab_size: 32,
        model_dim: 16,
        bottleneck_dim: 4,
        ffn_dim: 16,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        n_heads: 2,
        adapter_layers: vec![2],
        max_src_len: 40,
        max_tgt_len: 10,
    };
    let vocab = Vocab::build(cfg.vocab_size, 0.7, seed).unwrap();
    let corpus = generic_corpus(&vocab, 6, cfg.max_src_len, seed).unwrap();
    let bb = BackboneWeights::init(&cfg, seed).unwrap();
    (Summarizer::new(cfg, bb).unwrap(), vocab, corpus)
}
