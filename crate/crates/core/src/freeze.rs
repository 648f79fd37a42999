//! Freezing configurations.
//!
//! Grammar (comma separated, whitespace ignored):
//!
//! | token            | frozen entries                                              |
//! |------------------|-------------------------------------------------------------|
//! | `-`              | nothing                                                     |
//! | `emb.base`       | word, position and token-type embedding tables              |
//! | `emb`            | `emb.base` plus the embedding LayerNorm                     |
//! | `B{i}`           | every entry of block `i`                                    |
//! | `B{i}-{j}`       | blocks `i..=j`                                              |
//! | `B{i}a`          | the attention sub-block of block `i` (including its LayerNorm) |
//! | `B{i}a,i`        | ... plus `intermediate.dense`                               |
//! | `B{i}a,i,od`     | ... plus `output.dense`                                     |
//! | `suffix:{name}`  | `{name}` in every scope (embeddings and each block)         |
//!
//! A suffix is matched relative to its scope: `suffix:output.dense.weight`
//! selects `encoder.layer.3.output.dense.weight` but not
//! `encoder.layer.3.attention.output.dense.weight`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;

use crate::encoder::{block_prefix, EMBEDDING_NORM, EMBEDDING_TABLES};
use crate::error::{Error, Result};
use crate::tensor::{ParamTree, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockPart {
    Attention,
    Intermediate,
    OutputDense,
}

impl BlockPart {
    fn tag(self) -> &'static str {
        match self {
            BlockPart::Attention => "a",
            BlockPart::Intermediate => "i",
            BlockPart::OutputDense => "od",
        }
    }

    fn scope(self) -> &'static str {
        match self {
            BlockPart::Attention => "attention.",
            BlockPart::Intermediate => "intermediate.dense.",
            BlockPart::OutputDense => "output.dense.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FreezeToken {
    None,
    EmbBase,
    Emb,
    Block(usize),
    BlockRange(usize, usize),
    /// Parts kept sorted and distinct.
    BlockParts(usize, Vec<BlockPart>),
    NameSuffix(String),
}

impl fmt::Display for FreezeToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeToken::None => write!(f, "-"),
            FreezeToken::EmbBase => write!(f, "emb.base"),
            FreezeToken::Emb => write!(f, "emb"),
            FreezeToken::Block(i) => write!(f, "B{i}"),
            FreezeToken::BlockRange(i, j) => write!(f, "B{i}-{j}"),
            FreezeToken::BlockParts(i, parts) => {
                write!(f, "B{i}")?;
                let tags: Vec<&str> = parts.iter().map(|p| p.tag()).collect();
                write!(f, "{}", tags.join(","))
            }
            FreezeToken::NameSuffix(s) => write!(f, "suffix:{s}"),
        }
    }
}

/// A parsed freezing configuration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeSpec {
    tokens: Vec<FreezeToken>,
}

fn parse_block_index(s: &str, raw: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::FreezeToken(raw.to_string()))
}

impl FromStr for FreezeSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut tokens: Vec<FreezeToken> = Vec::new();
        for raw in text.split(',') {
            let piece = raw.trim();
            if piece.is_empty() {
                return Err(Error::FreezeToken(raw.to_string()));
            }
            // `i` and `od` extend a preceding `B{i}a` token.
            if piece == "i" || piece == "od" {
                let part = if piece == "i" {
                    BlockPart::Intermediate
                } else {
                    BlockPart::OutputDense
                };
                match tokens.last_mut() {
                    Some(FreezeToken::BlockParts(_, parts)) => {
                        if !parts.contains(&part) {
                            parts.push(part);
                            parts.sort();
                        }
                        continue;
                    }
                    _ => return Err(Error::FreezeToken(piece.to_string())),
                }
            }
            let token = if piece == "-" {
                FreezeToken::None
            } else if piece == "emb.base" {
                FreezeToken::EmbBase
            } else if piece == "emb" {
                FreezeToken::Emb
            } else if let Some(name) = piece.strip_prefix("suffix:") {
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::FreezeToken(piece.to_string()));
                }
                FreezeToken::NameSuffix(name.to_string())
            } else if let Some(rest) = piece.strip_prefix('B') {
                if let Some(idx) = rest.strip_suffix('a') {
                    FreezeToken::BlockParts(parse_block_index(idx, piece)?, vec![BlockPart::Attention])
                } else if let Some((a, b)) = rest.split_once('-') {
                    let (i, j) = (parse_block_index(a, piece)?, parse_block_index(b, piece)?);
                    if j < i {
                        return Err(Error::FreezeToken(piece.to_string()));
                    }
                    FreezeToken::BlockRange(i, j)
                } else {
                    FreezeToken::Block(parse_block_index(rest, piece)?)
                }
            } else {
                return Err(Error::FreezeToken(piece.to_string()));
            };
            tokens.push(token);
        }
        // `-` freezes nothing; the empty list is its one canonical form.
        tokens.retain(|t| *t != FreezeToken::None);
        Ok(FreezeSpec { tokens })
    }
}

impl fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.tokens.is_empty() {
            return write!(f, "-");
        }
        let parts: Vec<String> = self.tokens.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join(", "))
    }
}

impl serde::Serialize for FreezeSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for FreezeSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_freeze_spec(text: &str) -> Result<FreezeSpec> {
    text.parse()
}

/// Number of transformer blocks present in a tree.
pub fn count_blocks<R: Real>(params: &ParamTree<R>) -> usize {
    params
        .names()
        .filter_map(|n| n.strip_prefix("encoder.layer."))
        .filter_map(|rest| rest.split('.').next()?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

/// True if `name` minus `suffix` leaves only a scope prefix: nothing,
/// `embeddings.` or `encoder.layer.{i}.`.
fn suffix_matches(name: &str, suffix: &str) -> bool {
    let Some(scope) = name.strip_suffix(suffix) else {
        return false;
    };
    if scope.is_empty() || scope == "embeddings." {
        return true;
    }
    scope
        .strip_prefix("encoder.layer.")
        .and_then(|r| r.strip_suffix('.'))
        .is_some_and(|idx| !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()))
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[FreezeToken] {
        &self.tokens
    }

    /// Frozen parameter names, in tree order.
    pub fn resolve<R: Real>(&self, params: &ParamTree<R>) -> Result<FrozenSet> {
        let blocks = count_blocks(params);
        let check = |i: usize| {
            if i >= blocks {
                Err(Error::BlockOutOfRange { index: i, blocks })
            } else {
                Ok(())
            }
        };
        let mut prefixes: Vec<String> = Vec::new();
        let mut exact: Vec<&str> = Vec::new();
        let mut suffixes: Vec<&str> = Vec::new();
        for t in &self.tokens {
            match t {
                FreezeToken::None => {}
                FreezeToken::EmbBase => exact.extend(EMBEDDING_TABLES),
                FreezeToken::Emb => {
                    exact.extend(EMBEDDING_TABLES);
                    exact.extend(EMBEDDING_NORM);
                }
                FreezeToken::Block(i) => {
                    check(*i)?;
                    prefixes.push(block_prefix(*i));
                }
                FreezeToken::BlockRange(i, j) => {
                    check(*j)?;
                    prefixes.extend((*i..=*j).map(block_prefix));
                }
                FreezeToken::BlockParts(i, parts) => {
                    check(*i)?;
                    for p in parts {
                        prefixes.push(format!("{}{}", block_prefix(*i), p.scope()));
                    }
                }
                FreezeToken::NameSuffix(s) => suffixes.push(s),
            }
        }
        for s in &suffixes {
            if !params.names().any(|n| suffix_matches(n, s)) {
                return Err(Error::DanglingSuffix(s.to_string()));
            }
        }
        let names = params
            .names()
            .filter(|n| {
                exact.contains(n)
                    || prefixes.iter().any(|p| n.starts_with(p.as_str()))
                    || suffixes.iter().any(|s| suffix_matches(n, s))
            })
            .map(str::to_string)
            .collect();
        Ok(FrozenSet { names })
    }
}

/// Resolved frozen names; everything else in the tree is trainable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrozenSet {
    names: IndexSet<String>,
}

impl FrozenSet {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Trainable names of `params`, in tree order.
    pub fn trainable<'a, R: Real>(&self, params: &'a ParamTree<R>) -> Vec<&'a str> {
        params.names().filter(|n| !self.contains(n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use crate::tensor::Rng;

    fn tree(blocks: usize) -> ParamTree<f32> {
        let cfg = EncoderConfig {
            vocab_size: 10,
            hidden: 4,
            n_blocks: blocks,
            n_heads: 1,
            intermediate: 8,
            max_positions: 4,
            n_token_types: 2,
        };
        init_params(&cfg, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn parses_table_rows() {
        for row in ["-", "emb.base", "emb", "emb, B0a", "emb, B0a,i", "emb, B0a,i,od", "emb, B0", "emb, B0-5", "emb, B0-10"] {
            let spec: FreezeSpec = row.parse().unwrap();
            assert_eq!(spec.to_string(), row);
            assert_eq!(spec.to_string().parse::<FreezeSpec>().unwrap(), spec);
        }
    }

    #[test]
    fn unknown_tokens_rejected() {
        for bad in ["emb, C3", "B", "Bx", "B3-1", "i", "emb, od", "suffix:", "emb,,B0"] {
            assert!(bad.parse::<FreezeSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn first_six_blocks() {
        let spec: FreezeSpec = "emb, B0-5".parse().unwrap();
        let frozen = spec.resolve(&tree(12)).unwrap();
        let blocks: std::collections::BTreeSet<usize> = frozen
            .iter()
            .filter_map(|n| n.strip_prefix("encoder.layer."))
            .map(|r| r.split('.').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(blocks, (0..6).collect());
        assert_eq!(frozen.len(), 5 + 6 * 16);
    }

    #[test]
    fn everything_but_last_block() {
        let p = tree(12);
        let frozen = "emb, B0-10".parse::<FreezeSpec>().unwrap().resolve(&p).unwrap();
        let trainable = frozen.trainable(&p);
        assert_eq!(trainable.len(), 16);
        assert!(trainable.iter().all(|n| n.starts_with("encoder.layer.11.")));
    }

    #[test]
    fn suffix_is_scope_relative() {
        let p = tree(4);
        let frozen = "emb, suffix:output.dense.weight".parse::<FreezeSpec>().unwrap().resolve(&p).unwrap();
        let mut expected: Vec<String> = EMBEDDING_TABLES.iter().chain(&EMBEDDING_NORM).map(|s| s.to_string()).collect();
        expected.extend((0..4).map(|i| format!("encoder.layer.{i}.output.dense.weight")));
        assert_eq!(frozen.iter().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn partition_and_errors() {
        let p = tree(4);
        assert!("-".parse::<FreezeSpec>().unwrap().resolve(&p).unwrap().is_empty());
        assert!(matches!(
            "B4".parse::<FreezeSpec>().unwrap().resolve(&p),
            Err(Error::BlockOutOfRange { index: 4, blocks: 4 })
        ));
        assert!(matches!(
            "suffix:nope.weight".parse::<FreezeSpec>().unwrap().resolve(&p),
            Err(Error::DanglingSuffix(_))
        ));
        let frozen = "emb.base, B1a,od".parse::<FreezeSpec>().unwrap().resolve(&p).unwrap();
        let trainable = frozen.trainable(&p);
        assert_eq!(frozen.len() + trainable.len(), p.len());
        assert!(trainable.iter().all(|n| !frozen.contains(n)));
    }

    #[test]
    fn attention_part_includes_its_layer_norm() {
        let p = tree(2);
        let frozen = "B0a".parse::<FreezeSpec>().unwrap().resolve(&p).unwrap();
        assert_eq!(frozen.len(), 10);
        assert!(frozen.contains("encoder.layer.0.attention.output.LayerNorm.weight"));
        assert!(!frozen.contains("encoder.layer.0.intermediate.dense.weight"));
    }

    #[test]
    fn table_order_is_monotone() {
        let p = tree(12);
        let rows = ["-", "emb.base", "emb", "emb, B0a", "emb, B0a,i", "emb, B0a,i,od", "emb, B0", "emb, B0-5", "emb, B0-10"];
        let sets: Vec<FrozenSet> = rows.iter().map(|r| r.parse::<FreezeSpec>().unwrap().resolve(&p).unwrap()).collect();
        for w in sets.windows(2) {
            assert!(w[0].iter().all(|n| w[1].contains(n)));
            assert!(w[1].len() > w[0].len());
        }
    }
}
