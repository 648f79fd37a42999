//! A small BERT-layout text encoder and the twin (query/text) pairing.
//!
//! Parameter names follow the usual BERT scheme (`embeddings.*`,
//! `encoder.layer.{i}.*`) so that freezing specs and layer diagnostics can
//! address the same tensors a full-size model would expose.

mod checkpoint;
mod model;
mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, ParamTree, Real, Rng, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{encode, encode_batch, EncoderVars, LAYER_NORM_EPS};
pub use tokenizer::{Vocab, PAD_ID, UNK_ID};

/// Token sequence fed to the encoder.
pub type TokenIds = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub n_token_types: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            hidden: 64,
            n_blocks: 4,
            n_heads: 4,
            intermediate: 256,
            max_positions: 64,
            n_token_types: 2,
        }
    }
}

/// Sub-blocks of a transformer block, in parameter order.
pub const BLOCK_PARTS: [&str; 16] = [
    "attention.self.query.weight",
    "attention.self.query.bias",
    "attention.self.key.weight",
    "attention.self.key.bias",
    "attention.self.value.weight",
    "attention.self.value.bias",
    "attention.output.dense.weight",
    "attention.output.dense.bias",
    "attention.output.LayerNorm.weight",
    "attention.output.LayerNorm.bias",
    "intermediate.dense.weight",
    "intermediate.dense.bias",
    "output.dense.weight",
    "output.dense.bias",
    "output.LayerNorm.weight",
    "output.LayerNorm.bias",
];

pub const EMBEDDING_TABLES: [&str; 3] = [
    "embeddings.word_embeddings.weight",
    "embeddings.position_embeddings.weight",
    "embeddings.token_type_embeddings.weight",
];

pub const EMBEDDING_NORM: [&str; 2] = ["embeddings.LayerNorm.weight", "embeddings.LayerNorm.bias"];

pub fn block_prefix(i: usize) -> String {
    format!("encoder.layer.{i}.")
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("intermediate", self.intermediate),
            ("max_positions", self.max_positions),
            ("n_token_types", self.n_token_types),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Every parameter name with its shape, in tree order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.intermediate);
        let mut out = vec![
            (EMBEDDING_TABLES[0].to_string(), vec![self.vocab_size, h]),
            (EMBEDDING_TABLES[1].to_string(), vec![self.max_positions, h]),
            (EMBEDDING_TABLES[2].to_string(), vec![self.n_token_types, h]),
            (EMBEDDING_NORM[0].to_string(), vec![h]),
            (EMBEDDING_NORM[1].to_string(), vec![h]),
        ];
        for i in 0..self.n_blocks {
            let p = block_prefix(i);
            for part in BLOCK_PARTS {
                let shape = match part {
                    "intermediate.dense.weight" => vec![f, h],
                    "intermediate.dense.bias" => vec![f],
                    "output.dense.weight" => vec![h, f],
                    _ if part.ends_with("LayerNorm.weight") || part.ends_with("bias") => vec![h],
                    _ => vec![h, h],
                };
                out.push((format!("{p}{part}"), shape));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layout().into_iter().map(|(n, _)| n).collect()
    }
}

/// Weights ~ truncated normal (σ = 0.02), biases 0, LayerNorm scale 1.
pub fn init_params<R: Real>(config: &EncoderConfig, rng: &mut Rng) -> Result<ParamTree<R>> {
    config.validate()?;
    let mut tree = ParamTree::new();
    for (name, shape) in config.layout() {
        let len: usize = shape.iter().product();
        let data: Vec<R> = if name.ends_with("LayerNorm.weight") {
            vec![R::one(); len]
        } else if name.ends_with("bias") {
            vec![R::zero(); len]
        } else {
            (0..len).map(|_| R::of(rng.truncated_normal(0.02))).collect()
        };
        tree.insert(name, Tensor::new(shape, data)?);
    }
    Ok(tree)
}

/// Checks that a tree has exactly the layout implied by `config`.
pub fn check_layout<R: Real>(config: &EncoderConfig, params: &ParamTree<R>) -> Result<()> {
    let layout = config.layout();
    if layout.len() != params.len() {
        return Err(Error::Config(format!(
            "tree has {} entries, config implies {}",
            params.len(),
            layout.len()
        )));
    }
    for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
        if name != pname || shape.as_slice() != t.shape() {
            return Err(Error::Config(format!(
                "entry {pname} {:?} does not match expected {name} {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TuneMode {
    #[default]
    QueryOnly,
    BothTuned,
}

/// Query and text encoders sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<R> {
    pub config: EncoderConfig,
    pub query: ParamTree<R>,
    pub text: ParamTree<R>,
    pub mode: TuneMode,
}

impl<R: Real> DualEncoder<R> {
    /// Both sides start from the same weights.
    pub fn twin(config: EncoderConfig, params: ParamTree<R>, mode: TuneMode) -> Result<Self> {
        check_layout(&config, &params)?;
        Ok(Self {
            config,
            query: params.clone(),
            text: params,
            mode,
        })
    }

    pub fn new(config: EncoderConfig, query: ParamTree<R>, text: ParamTree<R>, mode: TuneMode) -> Result<Self> {
        check_layout(&config, &query)?;
        check_layout(&config, &text)?;
        Ok(Self {
            config,
            query,
            text,
            mode,
        })
    }

    pub fn encode_query(&self, tokens: &[u32]) -> Result<Vec<R>> {
        encode(&self.query, tokens, &self.config)
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<Vec<R>> {
        encode(&self.text, tokens, &self.config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Cosine,
    Euclidean,
}

impl Measure {
    pub const BOTH: [Measure; 2] = [Measure::Cosine, Measure::Euclidean];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Cosine => "cosine",
            Measure::Euclidean => "euclidean",
        }
    }

    /// Column tag used in report tables (`c` / `d`).
    pub fn tag(self) -> &'static str {
        match self {
            Measure::Cosine => "c",
            Measure::Euclidean => "d",
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "c" => Ok(Measure::Cosine),
            "euclidean" | "distance" | "d" => Ok(Measure::Euclidean),
            _ => Err(Error::Settings(format!("unknown measure `{s}`"))),
        }
    }
}

const UNIT_TOLERANCE: f64 = 1e-4;

/// Similarity where greater always means closer: the dot product for
/// cosine, `−‖a − b‖` for euclidean. Inputs must be unit vectors.
pub fn similarity<R: Real>(a: &[R], b: &[R], measure: Measure) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("embedding lengths {} vs {}", a.len(), b.len())));
    }
    for v in [a, b] {
        let n = l2_norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnit(n));
        }
    }
    Ok(similarity_unchecked(a, b, measure))
}

/// [`similarity`] without the unit-norm check, for hot loops over
/// embeddings the encoder already normalised.
pub fn similarity_unchecked<R: Real>(a: &[R], b: &[R], measure: Measure) -> f64 {
    match measure {
        Measure::Cosine => a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum(),
        Measure::Euclidean => -a
            .iter()
            .zip(b)
            .map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2))
            .sum::<f64>()
            .sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_name_count_matches_closed_form() {
        // 3 embedding tables + embedding LayerNorm (2) + 16 per block.
        let cfg = EncoderConfig::default();
        let names = cfg.param_names();
        assert_eq!(names.len(), 3 + 2 + 16 * 4);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig {
            vocab_size: 40,
            hidden: 8,
            n_blocks: 2,
            n_heads: 2,
            intermediate: 16,
            max_positions: 10,
            n_token_types: 2,
        };
        let a: ParamTree<f32> = init_params(&cfg, &mut Rng::new(3)).unwrap();
        let b: ParamTree<f32> = init_params(&cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with("LayerNorm.weight") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            } else if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(t.data().iter().all(|&v| v.abs() <= 0.04));
            }
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            hidden: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn similarity_identity_and_orthogonal() {
        let a = [1.0f64, 0.0];
        let b = [0.0f64, 1.0];
        assert_eq!(similarity(&a, &a, Measure::Cosine).unwrap(), 1.0);
        assert_eq!(similarity(&a, &a, Measure::Euclidean).unwrap(), 0.0);
        assert_eq!(similarity(&a, &b, Measure::Cosine).unwrap(), 0.0);
        let d = similarity(&a, &b, Measure::Euclidean).unwrap();
        assert!((d + 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_non_unit() {
        assert!(matches!(
            similarity(&[2.0f64, 0.0], &[1.0, 0.0], Measure::Cosine),
            Err(Error::NotUnit(_))
        ));
    }

    #[test]
    fn cosine_and_euclidean_rank_identically_on_unit_vectors() {
        let mut rng = Rng::new(5);
        let mut unit = || {
            let v: Vec<f64> = (0..6).map(|_| rng.uniform() * 2.0 - 1.0).collect();
            crate::tensor::l2_normalize(&v).unwrap()
        };
        let q = unit();
        let cands: Vec<Vec<f64>> = (0..100).map(|_| unit()).collect();
        let rank = |m: Measure| {
            let mut idx: Vec<usize> = (0..cands.len()).collect();
            idx.sort_by(|&i, &j| {
                similarity(&q, &cands[j], m)
                    .unwrap()
                    .partial_cmp(&similarity(&q, &cands[i], m).unwrap())
                    .unwrap()
            });
            idx
        };
        assert_eq!(rank(Measure::Cosine), rank(Measure::Euclidean));
    }
}
