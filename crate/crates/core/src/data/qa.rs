//! Question-answering corpora recast as retrieval samples.

use serde::{Deserialize, Serialize};

use super::{sentence_spans, TripletSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    /// Character (not byte) offset into the context.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquadRecord {
    pub context: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<SquadAnswer>,
}

/// Sentences overlapping an answer span become positives, the rest
/// negatives. Returns `None` when a side is empty or the paragraph has
/// fewer than `min_candidates` sentences.
pub fn transform_squad(
    context: &str,
    question: &str,
    answers: &[SquadAnswer],
    min_candidates: usize,
) -> Result<Option<TripletSample>> {
    let offsets: Vec<usize> = context.char_indices().map(|(b, _)| b).chain([context.len()]).collect();
    let n_chars = offsets.len() - 1;
    let mut spans = Vec::with_capacity(answers.len());
    for a in answers {
        let len = a.text.chars().count();
        let end = a.answer_start + len;
        if end > n_chars {
            return Err(Error::Data(format!(
                "answer span {}..{end} outside a context of {n_chars} characters",
                a.answer_start
            )));
        }
        if len > 0 {
            spans.push(offsets[a.answer_start]..offsets[end]);
        }
    }
    let sentences = sentence_spans(context);
    if sentences.len() < min_candidates {
        return Ok(None);
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for s in sentences {
        let text = context[s.clone()].to_string();
        if spans.iter().any(|a| a.start < s.end && s.start < a.end) {
            positives.push(text);
        } else {
            negatives.push(text);
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Ok(None);
    }
    Ok(Some(TripletSample {
        query: question.to_string(),
        positives,
        negatives,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HotpotLevel {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotpotPassage {
    pub text: String,
    pub gold: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotpotRecord {
    pub question: String,
    pub passages: Vec<HotpotPassage>,
    #[serde(default)]
    pub level: Option<HotpotLevel>,
}

/// Gold passages as positives, the rest as negatives. Returns `None` for
/// fewer than `min_passages` passages.
pub fn transform_hotpotqa(record: &HotpotRecord, min_passages: usize) -> Result<Option<(HotpotLevel, TripletSample)>> {
    let level = record
        .level
        .ok_or_else(|| Error::Data(format!("question `{}` has no difficulty level", record.question)))?;
    if record.passages.len() < min_passages {
        return Ok(None);
    }
    let (gold, rest): (Vec<&HotpotPassage>, Vec<&HotpotPassage>) = record.passages.iter().partition(|p| p.gold);
    if gold.is_empty() || rest.is_empty() {
        return Ok(None);
    }
    Ok(Some((
        level,
        TripletSample {
            query: record.question.clone(),
            positives: gold.into_iter().map(|p| p.text.clone()).collect(),
            negatives: rest.into_iter().map(|p| p.text.clone()).collect(),
        },
    )))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HotpotSplit {
    pub easy: Vec<TripletSample>,
    pub medium: Vec<TripletSample>,
    pub hard: Vec<TripletSample>,
    pub dropped: usize,
}

impl HotpotSplit {
    pub fn kept(&self) -> usize {
        self.easy.len() + self.medium.len() + self.hard.len()
    }
}

pub fn partition_hotpotqa(records: &[HotpotRecord], min_passages: usize) -> Result<HotpotSplit> {
    let mut out = HotpotSplit::default();
    for r in records {
        match transform_hotpotqa(r, min_passages)? {
            Some((HotpotLevel::Easy, s)) => out.easy.push(s),
            Some((HotpotLevel::Medium, s)) => out.medium.push(s),
            Some((HotpotLevel::Hard, s)) => out.hard.push(s),
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PARA: &str = "Paris is big. The answer is here. Lyon is smaller. Nice is south.";

    #[test]
    fn answer_in_second_sentence() {
        let start = PARA.find("here").unwrap();
        let ans = [SquadAnswer {
            text: "here".into(),
            answer_start: start,
        }];
        let s = transform_squad(PARA, "where?", &ans, 0).unwrap().unwrap();
        assert_eq!(s.positives, vec!["The answer is here."]);
        assert_eq!(s.negatives.len(), 3);
        assert!(transform_squad(PARA, "where?", &ans, 5).unwrap().is_none());
    }

    #[test]
    fn character_offsets_and_bounds() {
        let text = "Café au lait. Très bon.";
        let start = text.chars().position(|c| c == 'T').unwrap();
        let ans = [SquadAnswer {
            text: "Très".into(),
            answer_start: start,
        }];
        let s = transform_squad(text, "q", &ans, 0).unwrap().unwrap();
        assert_eq!(s.positives, vec!["Très bon."]);
        let bad = [SquadAnswer {
            text: "xyz".into(),
            answer_start: 22,
        }];
        assert!(transform_squad(text, "q", &bad, 0).is_err());
    }

    fn hotpot(n: usize, level: Option<HotpotLevel>) -> HotpotRecord {
        HotpotRecord {
            question: "q".into(),
            passages: (0..n)
                .map(|i| HotpotPassage {
                    text: format!("p{i}"),
                    gold: i < 2,
                })
                .collect(),
            level,
        }
    }

    #[test]
    fn hotpot_rules() {
        let (lvl, s) = transform_hotpotqa(&hotpot(10, Some(HotpotLevel::Hard)), 10).unwrap().unwrap();
        assert_eq!(lvl, HotpotLevel::Hard);
        assert_eq!((s.positives.len(), s.negatives.len()), (2, 8));
        assert!(transform_hotpotqa(&hotpot(9, Some(HotpotLevel::Easy)), 10).unwrap().is_none());
        assert!(transform_hotpotqa(&hotpot(10, None), 10).is_err());
        let split = partition_hotpotqa(
            &[hotpot(10, Some(HotpotLevel::Easy)), hotpot(12, Some(HotpotLevel::Medium)), hotpot(3, Some(HotpotLevel::Easy))],
            10,
        )
        .unwrap();
        assert_eq!(split.kept() + split.dropped, 3);
        assert_eq!((split.easy.len(), split.medium.len(), split.dropped), (1, 1, 1));
    }
}
