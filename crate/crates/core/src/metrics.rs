//! Ranking-quality measures and the significance test for error counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, similarity_unchecked, DualEncoder, Measure};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Default critical value (two-tailed, 0.975).
pub const Z_CRITICAL: f64 = 1.96;

/// One query's candidates, scored so that greater means closer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
}

impl QueryScores {
    /// Scores candidate embeddings against a query embedding.
    pub fn from_embeddings<R: Real>(query: &[R], candidates: &[(&[R], bool)], measure: Measure) -> Self {
        Self {
            scores: candidates.iter().map(|(c, _)| similarity_unchecked(query, c, measure)).collect(),
            positive: candidates.iter().map(|&(_, p)| p).collect(),
        }
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.positive.iter().filter(|&&p| p).count();
        (pos, self.positive.len() - pos)
    }

    /// (errors, pairs): pairs where the positive is not strictly closer.
    pub fn pair_errors(&self) -> (u64, u64) {
        let mut neg: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.positive)
            .filter(|(_, &p)| !p)
            .map(|(&s, _)| s)
            .collect();
        neg.sort_by(f64::total_cmp);
        let mut errors = 0u64;
        for (&s, _) in self.scores.iter().zip(&self.positive).filter(|(_, &p)| p) {
            // Negatives scoring >= s.
            let below = neg.partition_point(|&x| x < s);
            errors += (neg.len() - below) as u64;
        }
        let (p, n) = self.counts();
        (errors, (p * n) as u64)
    }
}

/// Per-measure evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub measure: Measure,
    pub queries: usize,
    /// Erroneous (positive, negative) pairs over all queries.
    pub errors: u64,
    /// Total (positive, negative) pairs.
    pub total: u64,
    /// Per-query PND averaged over queries.
    pub pnd: f64,
    pub mrr: Option<f64>,
    pub map: Option<f64>,
    pub p_at_1: Option<f64>,
}

impl EvalReport {
    /// `errors / total`.
    pub fn pooled_pnd(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.errors as f64 / self.total as f64
        }
    }
}

/// PND over queries (each needs at least one positive and one negative).
pub fn pnd(queries: &[QueryScores], measure: Measure) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Metric("no queries".into()));
    }
    let mut errors = 0;
    let mut total = 0;
    let mut sum = 0.0;
    for (i, q) in queries.iter().enumerate() {
        if q.scores.len() != q.positive.len() {
            return Err(Error::Metric(format!("query {i}: scores and labels differ in length")));
        }
        let (e, n) = q.pair_errors();
        if n == 0 {
            return Err(Error::Metric(format!("query {i} lacks a positive or a negative")));
        }
        errors += e;
        total += n;
        sum += e as f64 / n as f64;
    }
    Ok(EvalReport {
        measure,
        queries: queries.len(),
        errors,
        total,
        pnd: sum / queries.len() as f64,
        mrr: None,
        map: None,
        p_at_1: None,
    })
}

/// Descending by score; ties keep input order.
fn ranking(q: &QueryScores) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.scores.len()).collect();
    idx.sort_by(|&a, &b| q.scores[b].total_cmp(&q.scores[a]));
    idx
}

/// Reciprocal rank of the first positive, average precision, precision@1.
pub fn query_rank_metrics(q: &QueryScores) -> Result<(f64, f64, f64)> {
    let order = ranking(q);
    let total_pos = q.positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::Metric("query has no positives".into()));
    }
    let mut rr = 0.0;
    let mut hits = 0;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if q.positive[i] {
            hits += 1;
            if hits == 1 {
                rr = 1.0 / (rank + 1) as f64;
            }
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    let p1 = if q.positive[order[0]] { 1.0 } else { 0.0 };
    Ok((rr, ap / total_pos as f64, p1))
}

/// Mean over queries of (RR, AP, P@1).
pub fn rank_metrics(queries: &[QueryScores]) -> Result<(f64, f64, f64)> {
    if queries.is_empty() {
        return Err(Error::Metric("no queries".into()));
    }
    let mut acc = (0.0, 0.0, 0.0);
    for q in queries {
        let (a, b, c) = query_rank_metrics(q)?;
        acc.0 += a;
        acc.1 += b;
        acc.2 += c;
    }
    let n = queries.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Relative change `s·(M̃ − M)/M`; `sign` is −1 for measures that improve
/// by decreasing (PND) and +1 otherwise.
pub fn improvement(m: f64, m_tilde: f64, sign: f64) -> Result<f64> {
    if m == 0.0 {
        return Err(Error::Metric("relative change from zero is undefined".into()));
    }
    // `+ 0.0` turns a signed zero into 0.
    Ok(sign * (m_tilde - m) / m + 0.0)
}

/// Denominator of the pooled two-proportion statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZVariant {
    /// `√(½·P(1−P)·N)`, the printed form.
    Paper,
    /// `√(P(1−P)·2/N)`.
    #[default]
    Textbook,
}

impl fmt::Display for ZVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZVariant::Paper => "paper",
            ZVariant::Textbook => "textbook",
        })
    }
}

impl FromStr for ZVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ZVariant::Paper),
            "textbook" => Ok(ZVariant::Textbook),
            _ => Err(Error::Metric(format!("unknown z-test variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTestResult {
    pub n0: u64,
    pub n1: u64,
    pub total: u64,
    pub p0: f64,
    pub p1: f64,
    pub pooled: f64,
    /// Absent when the pooled proportion is 0 or 1.
    pub z: Option<f64>,
    pub critical: f64,
    pub significant: bool,
}

/// Pooled two-proportion test of `n0` vs `n1` errors out of `total` each.
pub fn z_test(n0: u64, n1: u64, total: u64, critical: f64, variant: ZVariant) -> Result<ZTestResult> {
    if total == 0 || n0 > total || n1 > total {
        return Err(Error::Metric(format!("invalid counts n0={n0}, n1={n1}, N={total}")));
    }
    let n = total as f64;
    let p0 = n0 as f64 / n;
    let p1 = n1 as f64 / n;
    let pooled = 0.5 * (n0 + n1) as f64 / n;
    let z = if pooled <= 0.0 || pooled >= 1.0 {
        None
    } else {
        let var = pooled * (1.0 - pooled);
        let denom = match variant {
            ZVariant::Paper => (0.5 * var * n).sqrt(),
            ZVariant::Textbook => (var * 2.0 / n).sqrt(),
        };
        Some((p1 - p0) / denom)
    };
    Ok(ZTestResult {
        n0,
        n1,
        total,
        p0,
        p1,
        pooled,
        z,
        critical,
        significant: z.is_some_and(|z| z.abs() > critical),
    })
}

/// A retrieval sample in token form: one query, its positives and negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSample {
    pub query: Vec<u32>,
    pub pos: Vec<Vec<u32>>,
    pub neg: Vec<Vec<u32>>,
}

/// Scores every sample under each measure, encoding each text once.
pub fn score_samples<R: Real>(
    model: &DualEncoder<R>,
    samples: &[TokenSample],
    measures: &[Measure],
) -> Result<Vec<Vec<QueryScores>>> {
    let queries: Vec<&[u32]> = samples.iter().map(|s| s.query.as_slice()).collect();
    let q_emb = encode_batch(&model.query, &queries, &model.config)?;
    let mut out = vec![Vec::with_capacity(samples.len()); measures.len()];
    for (s, q) in samples.iter().zip(&q_emb) {
        let texts: Vec<&[u32]> = s.pos.iter().chain(&s.neg).map(Vec::as_slice).collect();
        let t_emb = encode_batch(&model.text, &texts, &model.config)?;
        let cands: Vec<(&[R], bool)> = t_emb
            .iter()
            .enumerate()
            .map(|(i, e)| (e.as_slice(), i < s.pos.len()))
            .collect();
        for (m, slot) in measures.iter().zip(out.iter_mut()) {
            slot.push(QueryScores::from_embeddings(q, &cands, *m));
        }
    }
    Ok(out)
}

/// PND (and, if `rank` is set, MRR/MAP/P@1) of `model` on `samples`.
pub fn evaluate<R: Real>(
    model: &DualEncoder<R>,
    samples: &[TokenSample],
    measures: &[Measure],
    rank: bool,
) -> Result<Vec<EvalReport>> {
    let scored = score_samples(model, samples, measures)?;
    scored
        .iter()
        .zip(measures)
        .map(|(qs, &m)| {
            let mut r = pnd(qs, m)?;
            if rank {
                let (mrr, map, p1) = rank_metrics(qs)?;
                r.mrr = Some(mrr);
                r.map = Some(map);
                r.p_at_1 = Some(p1);
            }
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(scores: &[f64], pos: &[bool]) -> QueryScores {
        QueryScores {
            scores: scores.to_vec(),
            positive: pos.to_vec(),
        }
    }

    #[test]
    fn separable_and_inverted() {
        let good = q(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]);
        assert_eq!(pnd(&[good], Measure::Cosine).unwrap().pnd, 0.0);
        let bad = q(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]);
        assert_eq!(pnd(&[bad], Measure::Cosine).unwrap().pnd, 1.0);
    }

    #[test]
    fn ties_are_errors() {
        let r = pnd(&[q(&[0.5, 0.5], &[true, false])], Measure::Cosine).unwrap();
        assert_eq!((r.errors, r.total), (1, 1));
    }

    #[test]
    fn missing_side_is_error() {
        assert!(pnd(&[q(&[0.5, 0.4], &[true, true])], Measure::Cosine).is_err());
        assert!(rank_metrics(&[q(&[0.5], &[false])]).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(query_rank_metrics(&q(&[0.9, 0.1], &[true, false])).unwrap(), (1.0, 1.0, 1.0));
        let s = q(&[0.9, 0.8, 0.7, 0.6, 0.5], &[false, false, false, true, false]);
        let (rr, ap, p1) = query_rank_metrics(&s).unwrap();
        assert_eq!(rr, 0.25);
        assert_eq!(ap, 0.25);
        assert_eq!(p1, 0.0);
    }

    #[test]
    fn tie_keeps_input_order() {
        let (rr, _, p1) = query_rank_metrics(&q(&[0.5, 0.5], &[false, true])).unwrap();
        assert_eq!((rr, p1), (0.5, 0.0));
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement(0.3, 0.3, 1.0).unwrap(), 0.0);
        assert!((improvement(0.048, 0.0438, -1.0).unwrap() - 0.0875).abs() < 1e-12);
        assert!((improvement(0.50, 0.51, 1.0).unwrap() - 0.02).abs() < 1e-12);
        assert!(improvement(0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn z_degenerate_and_symmetric() {
        let r = z_test(0, 0, 100, Z_CRITICAL, ZVariant::Paper).unwrap();
        assert_eq!(r.z, None);
        assert!(!r.significant);
        let r = z_test(7, 7, 100, Z_CRITICAL, ZVariant::Textbook).unwrap();
        assert_eq!(r.z, Some(0.0));
        assert!(z_test(101, 0, 100, Z_CRITICAL, ZVariant::Paper).is_err());
        assert!(z_test(0, 0, 0, Z_CRITICAL, ZVariant::Paper).is_err());
    }

    #[test]
    fn z_paper_example() {
        let r = z_test(60, 40, 1000, Z_CRITICAL, ZVariant::Paper).unwrap();
        assert!((r.pooled - 0.05).abs() < 1e-15);
        let expected = -0.02 / (0.5f64 * 0.05 * 0.95 * 1000.0).sqrt();
        assert!((r.z.unwrap() - expected).abs() < 1e-15);
        assert!(!r.significant);
    }
}
