//! Small on-disk lab setup shared by integration tests.

#![allow(dead_code)]

use std::path::Path;

use adiabat::data::{gen_synth_corpus, SynthCorpusSpec, Tokenization};
use adiabat::encoder::{init_params, save_checkpoint, EncoderConfig};
use adiabat::io::write_jsonl;
use adiabat::lab::{DataPaths, EvalDataset, EvalSettings, LabConfig, ModelPaths};
use adiabat::optim::OptimizerSpec;
use adiabat::tensor::{ParamTree, Rng};
use adiabat::tune::{EpochPolicy, TuneConfig};

pub fn tiny_spec() -> SynthCorpusSpec {
    SynthCorpusSpec {
        n_languages: 3,
        n_pretrain: 40,
        n_tune_train: 60,
        n_tune_valid: 20,
        n_heldout: 16,
        n_pairs: 6,
        ..Default::default()
    }
}

pub fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        hidden: 16,
        n_blocks: 2,
        n_heads: 2,
        intermediate: 32,
        max_positions: 16,
        n_token_types: 2,
    }
}

pub fn tiny_tune() -> TuneConfig {
    TuneConfig {
        batch_size: 4,
        epoch_policy: EpochPolicy::Batches(3),
        idle_epochs: 1,
        max_epochs: 2,
        optimizer: OptimizerSpec {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Writes a randomly initialized checkpoint and a tiny synthetic corpus
/// under `dir` and returns a config pointing at them.
pub fn lab_fixture(dir: &Path) -> LabConfig {
    let spec = tiny_spec();
    let corpus = gen_synth_corpus(&spec).unwrap();
    let enc = tiny_encoder(spec.vocab_size());
    let params: ParamTree<f32> = init_params(&enc, &mut Rng::new(3)).unwrap();
    save_checkpoint(&dir.join("base.ckpt"), &enc, &params).unwrap();
    corpus.vocab.save(&dir.join("vocab.txt")).unwrap();
    write_jsonl(&dir.join("train.jsonl"), &corpus.tune_train).unwrap();
    write_jsonl(&dir.join("valid.jsonl"), &corpus.tune_valid).unwrap();
    let mut eval = Vec::new();
    for (lang, h) in corpus.languages.iter().zip(&corpus.heldout) {
        let path = dir.join(format!("heldout-{lang}.jsonl"));
        write_jsonl(&path, h).unwrap();
        eval.push(EvalDataset {
            name: lang.clone(),
            path,
        });
    }
    write_jsonl(&dir.join("pairs.jsonl"), &corpus.pairs.to_records()).unwrap();
    LabConfig {
        model: ModelPaths {
            checkpoint: dir.join("base.ckpt"),
            vocab: dir.join("vocab.txt"),
        },
        data: DataPaths {
            train: dir.join("train.jsonl"),
            valid: dir.join("valid.jsonl"),
            eval,
            pairs: Some(dir.join("pairs.jsonl")),
        },
        tokenization: Tokenization {
            max_len: 16,
            ..Default::default()
        },
        tune: tiny_tune(),
        eval: EvalSettings::default(),
        sweep: None,
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn read_tree(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
