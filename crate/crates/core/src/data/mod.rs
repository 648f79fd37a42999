//! Dataset formats, split arithmetic and text transforms.

mod arxiv;
mod qa;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::grid::PairCorpus;
use crate::metrics::TokenSample;
use crate::tune::TokenTriplet;

pub use arxiv::{
    js_distance, make_arxiv_triplets, mine_arxiv_negatives, ArxivFlavor, ArxivRecord, Histogram, MiningStats,
    NegativesEntry, NEIGHBOR_COUNT,
};
pub use qa::{
    partition_hotpotqa, transform_hotpotqa, transform_squad, HotpotLevel, HotpotPassage, HotpotRecord, HotpotSplit,
    SquadAnswer, SquadRecord,
};
pub use synth::{gen_synth_corpus, SynthCorpus, SynthCorpusSpec};

/// `(query, positives, negatives)`; tuning uses the first of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSample {
    pub query: String,
    #[serde(rename = "pos")]
    pub positives: Vec<String>,
    #[serde(rename = "neg")]
    pub negatives: Vec<String>,
}

impl TripletSample {
    pub fn new(query: impl Into<String>, pos: impl Into<String>, neg: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            positives: vec![pos.into()],
            negatives: vec![neg.into()],
        }
    }
}

/// Record counts in the reference triplet file and its split boundaries.
pub const MSMARCO_TOTAL: usize = 499_184;
pub const MSMARCO_TRAIN: usize = 487_983;
pub const MSMARCO_VALID: usize = 4_200;

pub const MSMARCO_EVAL: usize = 7_000;

/// Contiguous (train, valid, eval) slices in file order.
///
/// The reference file gives the published sizes: the first 487983, the next
/// 4200 and the last 7000 samples (these leave sample 492183 unused). Any
/// other size is partitioned at the same boundaries scaled proportionally
/// and floored, keeping every slice non-empty.
pub fn split_msmarco<T>(samples: &[T]) -> Result<(&[T], &[T], &[T])> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 samples to split, got {n}")));
    }
    if n == MSMARCO_TOTAL {
        let b1 = MSMARCO_TRAIN;
        let b2 = b1 + MSMARCO_VALID;
        return Ok((&samples[..b1], &samples[b1..b2], &samples[n - MSMARCO_EVAL..]));
    }
    let scale = |b: usize| ((n as u128 * b as u128) / MSMARCO_TOTAL as u128) as usize;
    let b1 = scale(MSMARCO_TRAIN).clamp(1, n - 2);
    let b2 = scale(MSMARCO_TRAIN + MSMARCO_VALID).clamp(b1 + 1, n - 1);
    log::info!("split {n} samples into {} / {} / {}", b1, b2 - b1, n - b2);
    Ok((&samples[..b1], &samples[b1..b2], &samples[b2..]))
}

/// Every (query, positive, negative) combination per sample. Samples lacking
/// a positive or a negative are dropped; the drop count is returned.
pub fn expand_eval(samples: &[TripletSample]) -> (Vec<TripletSample>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for s in samples {
        if s.positives.is_empty() || s.negatives.is_empty() {
            dropped += 1;
            continue;
        }
        for p in &s.positives {
            for n in &s.negatives {
                out.push(TripletSample::new(s.query.clone(), p.clone(), n.clone()));
            }
        }
    }
    if dropped > 0 {
        log::info!("expand_eval dropped {dropped} samples without positives or negatives");
    }
    (out, dropped)
}

/// Samples with at least `min` negatives.
pub fn filter_min_negatives(samples: &[TripletSample], min: usize) -> Vec<TripletSample> {
    samples.iter().filter(|s| s.negatives.len() >= min).cloned().collect()
}

/// Byte ranges of sentences: a sentence ends at `.`, `!` or `?` followed by
/// whitespace (or at the end of the text). Surrounding whitespace is excluded.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() && !c.is_whitespace() {
            start = Some(i);
        }
        let ends = matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|&(_, n)| n.is_whitespace());
        if ends {
            if let Some(s) = start.take() {
                spans.push(s..i + c.len_utf8());
            }
        }
    }
    if let Some(s) = start {
        spans.push(s..text.trim_end().len());
    }
    spans
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// How texts become token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tokenization {
    pub max_len: usize,
    pub query_prefix: Option<String>,
    pub text_prefix: Option<String>,
}

impl Default for Tokenization {
    fn default() -> Self {
        Self {
            max_len: 64,
            query_prefix: None,
            text_prefix: None,
        }
    }
}

impl Tokenization {
    fn query(&self, vocab: &Vocab, text: &str) -> Vec<u32> {
        vocab.tokenize(text, self.query_prefix.as_deref(), self.max_len)
    }

    fn text(&self, vocab: &Vocab, text: &str) -> Vec<u32> {
        vocab.tokenize(text, self.text_prefix.as_deref(), self.max_len)
    }

    /// First positive and first negative of each sample.
    pub fn triplets(&self, vocab: &Vocab, samples: &[TripletSample]) -> Result<Vec<TokenTriplet>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| match (s.positives.first(), s.negatives.first()) {
                (Some(p), Some(n)) => Ok(TokenTriplet {
                    query: self.query(vocab, &s.query),
                    pos: self.text(vocab, p),
                    neg: self.text(vocab, n),
                }),
                _ => Err(Error::Data(format!("sample {i} lacks a positive or a negative"))),
            })
            .collect()
    }

    /// All positives and negatives of each sample.
    pub fn samples(&self, vocab: &Vocab, samples: &[TripletSample]) -> Vec<TokenSample> {
        samples
            .iter()
            .map(|s| TokenSample {
                query: self.query(vocab, &s.query),
                pos: s.positives.iter().map(|p| self.text(vocab, p)).collect(),
                neg: s.negatives.iter().map(|n| self.text(vocab, n)).collect(),
            })
            .collect()
    }

    /// First sentences on the query side, second on the text side.
    pub fn pairs(&self, vocab: &Vocab, corpus: &PairCorpus) -> PairCorpus<Vec<u32>> {
        corpus.map_pairs(|_, (a, b)| (self.query(vocab, a), self.text(vocab, b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_split_sizes() {
        let v: Vec<u8> = vec![0; MSMARCO_TOTAL];
        let (a, b, c) = split_msmarco(&v).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (487_983, 4_200, 7_000));
    }

    #[test]
    fn small_split_is_partition() {
        let v: Vec<usize> = (0..1000).collect();
        let (a, b, c) = split_msmarco(&v).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), 1000);
        assert!(!b.is_empty() && !c.is_empty());
        let joined: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
        assert_eq!(joined, v);
        assert!(split_msmarco(&v[..2]).is_err());
        let (a, b, c) = split_msmarco(&v[..3]).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
    }

    #[test]
    fn expand_cross_product() {
        let s = TripletSample {
            query: "q".into(),
            positives: vec!["p1".into(), "p2".into()],
            negatives: vec!["n1".into(), "n2".into(), "n3".into()],
        };
        let empty = TripletSample {
            query: "q".into(),
            positives: vec![],
            negatives: vec!["n".into()],
        };
        let (t, dropped) = expand_eval(&[s, empty]);
        assert_eq!(t.len(), 6);
        assert_eq!(dropped, 1);
        assert_eq!(t[4], TripletSample::new("q", "p2", "n2"));
    }

    #[test]
    fn sentence_split_rules() {
        assert_eq!(split_sentences("One. Two!  Three? Four"), vec!["One.", "Two!", "Three?", "Four"]);
        assert_eq!(split_sentences("e.g. this 3.5 case."), vec!["e.g.", "this 3.5 case."]);
        assert_eq!(split_sentences("  "), Vec::<&str>::new());
        assert_eq!(split_sentences("Trailing.  "), vec!["Trailing."]);
    }

    #[test]
    fn triplet_json_field_names() {
        let s = TripletSample::new("q", "p", "n");
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"query":"q","pos":["p"],"neg":["n"]}"#);
    }
}
