//! Starter configs written next to a generated synthetic corpus.

use std::fmt::Write;

use adiabat::data::SynthCorpusSpec;

/// Pretraining until held-out PND < 0.25 in every language.
pub fn pretrain_toml(spec: &SynthCorpusSpec, languages: &[String]) -> String {
    let heldout: Vec<String> = languages.iter().map(|l| format!("\"heldout/{l}.jsonl\"")).collect();
    format!(
        r#"# Pretraining of the starting encoder on the synthetic corpus.
# Run: adiabat pretrain --config pretrain.toml --out pretrain
vocab = "vocab.txt"
train = "pretrain.jsonl"
heldout = [{heldout}]

[tokenization]
max_len = 16

[job]
init_seed = 1
min_epochs = 6
target_pnd = 0.25
measure = "cosine"

[job.encoder]
vocab_size = {vocab}
hidden = 32
n_blocks = 4
n_heads = 4
intermediate = 64
max_positions = 16
n_token_types = 2

[job.train]
epochs = 30
batch_size = 16
seed = 0

[job.train.optimizer]
kind = "adamw"
lr = 1e-3

[job.train.loss]
margin = 0.3
"#,
        heldout = heldout.join(", "),
        vocab = spec.vocab_size(),
    )
}

/// Tuning on language 0 with a frozen embedding block, evaluated on every
/// language and on the pair grid.
pub fn lab_toml(languages: &[String]) -> String {
    let mut evals = String::new();
    for l in languages {
        let _ = write!(evals, "\n[[data.eval]]\nname = \"{l}\"\npath = \"heldout/{l}.jsonl\"\n");
    }
    format!(
        r#"# Tuning and evaluation on the synthetic corpus.
# Run after pretraining: adiabat tune --config lab.toml --out runs/base
[model]
checkpoint = "pretrain/base.ckpt"
vocab = "vocab.txt"

[data]
train = "tune_train.jsonl"
valid = "tune_valid.jsonl"
pairs = "pairs.jsonl"
{evals}
[tokenization]
max_len = 16

[tune]
batch_size = 14
epoch_policy = {{ batches = 50 }}
idle_epochs = 3
max_epochs = 10
freeze = "emb"
seed = 0

[tune.optimizer]
kind = "adamw"
lr = 1e-5

[tune.loss]
margin = 0.1

[eval]
measures = ["cosine", "euclidean"]
ztest_variant = "textbook"
"#
    )
}
