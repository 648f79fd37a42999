//! Language-pair grid evaluation over a parallel NLI-style pair corpus.
//!
//! For every (query language, text language) cell, each entailment pair's
//! similarity (first sentence through the query encoder, second through the
//! text encoder) is compared with every neutral and every contradiction
//! pair's similarity. An error is a contrast pair at least as similar as
//! the entailment pair.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, similarity_unchecked, DualEncoder, Measure};
use crate::error::{Error, Result};
use crate::metrics::{z_test, ZVariant};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl FromStr for NliLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            _ => Err(Error::Grid(format!("unknown label `{s}`"))),
        }
    }
}

/// The label an entailment pair is contrasted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    Neutral,
    Contradiction,
}

impl Contrast {
    pub const BOTH: [Contrast; 2] = [Contrast::Neutral, Contrast::Contradiction];

    pub fn label(self) -> NliLabel {
        match self {
            Contrast::Neutral => NliLabel::Neutral,
            Contrast::Contradiction => NliLabel::Contradiction,
        }
    }

    /// Short column name (`ent-neutr`, `ent-contr`).
    pub fn tag(self) -> &'static str {
        match self {
            Contrast::Neutral => "ent-neutr",
            Contrast::Contradiction => "ent-contr",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub label: NliLabel,
    pub language: String,
    pub sentence1: String,
    pub sentence2: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair<S> {
    pub id: String,
    pub label: NliLabel,
    /// `(sentence1, sentence2)` per language, aligned with the corpus languages.
    pub sentences: Vec<(S, S)>,
}

/// Sentence pairs rendered in every language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairCorpus<S = String> {
    pub languages: Vec<String>,
    pub pairs: Vec<Pair<S>>,
}

impl PairCorpus<String> {
    /// Groups records by pair id. Languages and pairs keep first-appearance
    /// order. Every pair must exist in every language with a single label.
    pub fn from_records(records: &[PairRecord]) -> Result<Self> {
        let mut languages: IndexMap<String, ()> = IndexMap::new();
        for r in records {
            languages.entry(r.language.clone()).or_default();
        }
        let lang_index = |l: &str| languages.get_index_of(l).expect("collected above");
        let mut grouped: IndexMap<String, (NliLabel, Vec<Option<(String, String)>>)> = IndexMap::new();
        for r in records {
            let entry = grouped
                .entry(r.pair_id.clone())
                .or_insert_with(|| (r.label, vec![None; languages.len()]));
            if entry.0 != r.label {
                return Err(Error::Grid(format!("pair {} has conflicting labels", r.pair_id)));
            }
            let slot = &mut entry.1[lang_index(&r.language)];
            if slot.is_some() {
                return Err(Error::Grid(format!("pair {} repeated for {}", r.pair_id, r.language)));
            }
            *slot = Some((r.sentence1.clone(), r.sentence2.clone()));
        }
        let languages: Vec<String> = languages.into_keys().collect();
        let mut pairs = Vec::with_capacity(grouped.len());
        for (id, (label, slots)) in grouped {
            let mut sentences = Vec::with_capacity(slots.len());
            for (i, s) in slots.into_iter().enumerate() {
                sentences.push(s.ok_or_else(|| {
                    Error::Grid(format!("pair {id} missing translation for {}", languages[i]))
                })?);
            }
            pairs.push(Pair { id, label, sentences });
        }
        let corpus = Self { languages, pairs };
        let counts: Vec<usize> = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction]
            .iter()
            .map(|&l| corpus.count(l))
            .collect();
        if counts.iter().any(|&c| c != counts[0]) {
            log::warn!("unequal label counts (ent, neutr, contr) = {counts:?}");
        }
        Ok(corpus)
    }

    pub fn to_records(&self) -> Vec<PairRecord> {
        let mut out = Vec::with_capacity(self.pairs.len() * self.languages.len());
        for p in &self.pairs {
            for (lang, (s1, s2)) in self.languages.iter().zip(&p.sentences) {
                out.push(PairRecord {
                    pair_id: p.id.clone(),
                    label: p.label,
                    language: lang.clone(),
                    sentence1: s1.clone(),
                    sentence2: s2.clone(),
                });
            }
        }
        out
    }
}

impl<S> PairCorpus<S> {
    pub fn count(&self, label: NliLabel) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }

    /// Applies `f(language_index, (sentence1, sentence2))` to every pair rendering.
    pub fn map_pairs<T, F>(&self, mut f: F) -> PairCorpus<T>
    where
        F: FnMut(usize, &(S, S)) -> (T, T),
    {
        PairCorpus {
            languages: self.languages.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| Pair {
                    id: p.id.clone(),
                    label: p.label,
                    sentences: p.sentences.iter().enumerate().map(|(l, s)| f(l, s)).collect(),
                })
                .collect(),
        }
    }

    /// Reorders languages: new language `i` is old language `perm[i]`.
    pub fn permute_languages(&self, perm: &[usize]) -> Result<Self>
    where
        S: Clone,
    {
        let mut seen = vec![false; self.languages.len()];
        if perm.len() != seen.len() || perm.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Grid("not a permutation of the languages".into()));
        }
        Ok(Self {
            languages: perm.iter().map(|&i| self.languages[i].clone()).collect(),
            pairs: self
                .pairs
                .iter()
                .map(|p| Pair {
                    id: p.id.clone(),
                    label: p.label,
                    sentences: perm.iter().map(|&i| p.sentences[i].clone()).collect(),
                })
                .collect(),
        })
    }
}

/// Per-cell error counts for one measure. Cells are row-major with the
/// query language as row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGridReport {
    pub languages: Vec<String>,
    pub measure: Measure,
    pub n_entailment: u64,
    pub n_neutral: u64,
    pub n_contradiction: u64,
    pub neutral_errors: Vec<u64>,
    pub contradiction_errors: Vec<u64>,
}

impl PairGridReport {
    pub fn size(&self) -> usize {
        self.languages.len()
    }

    pub fn errors(&self, c: Contrast) -> &[u64] {
        match c {
            Contrast::Neutral => &self.neutral_errors,
            Contrast::Contradiction => &self.contradiction_errors,
        }
    }

    /// Comparisons per cell.
    pub fn total(&self, c: Contrast) -> u64 {
        self.n_entailment
            * match c {
                Contrast::Neutral => self.n_neutral,
                Contrast::Contradiction => self.n_contradiction,
            }
    }

    pub fn cell(&self, c: Contrast, q_lang: usize, t_lang: usize) -> u64 {
        self.errors(c)[q_lang * self.size() + t_lang]
    }

    /// Mean cell error count over the total per cell.
    pub fn average_pnd(&self, c: Contrast) -> f64 {
        let e = self.errors(c);
        let total = self.total(c);
        if e.is_empty() || total == 0 {
            return 0.0;
        }
        e.iter().sum::<u64>() as f64 / e.len() as f64 / total as f64
    }

    /// Row-major cell PNDs.
    pub fn cell_pnd(&self, c: Contrast) -> Vec<f64> {
        let total = self.total(c).max(1) as f64;
        self.errors(c).iter().map(|&e| e as f64 / total).collect()
    }

    /// CSV matrix: header row of text languages, one row per query language.
    pub fn matrix_csv(&self, c: Contrast) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["query\\text".to_string()];
        header.extend(self.languages.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Grid(e.to_string()))?;
        let n = self.size();
        for (q, lang) in self.languages.iter().enumerate() {
            let mut row = vec![lang.clone()];
            row.extend((0..n).map(|t| self.cell(c, q, t).to_string()));
            w.write_record(&row).map_err(|e| Error::Grid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Grid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Errors per entailment similarity: contrast similarities that are `>=`.
fn count_errors(entail: &[f64], contrast_sorted: &[f64]) -> u64 {
    entail
        .iter()
        .map(|&e| (contrast_sorted.len() - contrast_sorted.partition_point(|&x| x < e)) as u64)
        .sum()
}

/// Grid reports for each measure. Each sentence is encoded once per side.
pub fn grid_eval<R: Real>(
    model: &DualEncoder<R>,
    corpus: &PairCorpus<Vec<u32>>,
    measures: &[Measure],
) -> Result<Vec<PairGridReport>> {
    let n_lang = corpus.languages.len();
    if n_lang == 0 || corpus.pairs.is_empty() {
        return Err(Error::Grid("empty corpus".into()));
    }
    for p in &corpus.pairs {
        if p.sentences.len() != n_lang {
            return Err(Error::Grid(format!("pair {} missing a translation", p.id)));
        }
    }
    let n_ent = corpus.count(NliLabel::Entailment);
    if n_ent == 0 {
        return Err(Error::Grid("no entailment pairs".into()));
    }
    let mut first = Vec::with_capacity(n_lang);
    let mut second = Vec::with_capacity(n_lang);
    for l in 0..n_lang {
        let s1: Vec<&[u32]> = corpus.pairs.iter().map(|p| p.sentences[l].0.as_slice()).collect();
        let s2: Vec<&[u32]> = corpus.pairs.iter().map(|p| p.sentences[l].1.as_slice()).collect();
        first.push(encode_batch(&model.query, &s1, &model.config)?);
        second.push(encode_batch(&model.text, &s2, &model.config)?);
    }
    let mut reports = Vec::with_capacity(measures.len());
    for &measure in measures {
        let mut neutral_errors = Vec::with_capacity(n_lang * n_lang);
        let mut contradiction_errors = Vec::with_capacity(n_lang * n_lang);
        for q in 0..n_lang {
            for t in 0..n_lang {
                let mut ent = Vec::new();
                let mut neu = Vec::new();
                let mut con = Vec::new();
                for (i, p) in corpus.pairs.iter().enumerate() {
                    let s = similarity_unchecked(&first[q][i], &second[t][i], measure);
                    match p.label {
                        NliLabel::Entailment => ent.push(s),
                        NliLabel::Neutral => neu.push(s),
                        NliLabel::Contradiction => con.push(s),
                    }
                }
                neu.sort_by(f64::total_cmp);
                con.sort_by(f64::total_cmp);
                neutral_errors.push(count_errors(&ent, &neu));
                contradiction_errors.push(count_errors(&ent, &con));
            }
        }
        reports.push(PairGridReport {
            languages: corpus.languages.clone(),
            measure,
            n_entailment: n_ent as u64,
            n_neutral: corpus.count(NliLabel::Neutral) as u64,
            n_contradiction: corpus.count(NliLabel::Contradiction) as u64,
            neutral_errors,
            contradiction_errors,
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Improved,
    Worsened,
    NotSignificant,
}

/// Significance tallies for one contrast label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTally {
    pub contrast: Contrast,
    pub improved: usize,
    pub worsened: usize,
    pub not_significant: usize,
    /// Row-major per-cell verdicts.
    pub verdicts: Vec<Verdict>,
}

/// Per-cell z-tests of tuned against base error counts.
pub fn grid_compare(
    base: &PairGridReport,
    tuned: &PairGridReport,
    critical: f64,
    variant: ZVariant,
) -> Result<Vec<GridTally>> {
    if base.languages != tuned.languages
        || base.measure != tuned.measure
        || base.n_entailment != tuned.n_entailment
        || base.n_neutral != tuned.n_neutral
        || base.n_contradiction != tuned.n_contradiction
    {
        return Err(Error::Grid("grids were computed over different corpora or measures".into()));
    }
    Contrast::BOTH
        .iter()
        .map(|&c| {
            let total = base.total(c);
            let mut tally = GridTally {
                contrast: c,
                improved: 0,
                worsened: 0,
                not_significant: 0,
                verdicts: Vec::with_capacity(base.errors(c).len()),
            };
            for (&n0, &n1) in base.errors(c).iter().zip(tuned.errors(c)) {
                let verdict = if total == 0 {
                    Verdict::NotSignificant
                } else {
                    let z = z_test(n0, n1, total, critical, variant)?;
                    match (z.significant, n1.cmp(&n0)) {
                        (true, std::cmp::Ordering::Less) => Verdict::Improved,
                        (true, std::cmp::Ordering::Greater) => Verdict::Worsened,
                        _ => Verdict::NotSignificant,
                    }
                };
                match verdict {
                    Verdict::Improved => tally.improved += 1,
                    Verdict::Worsened => tally.worsened += 1,
                    Verdict::NotSignificant => tally.not_significant += 1,
                }
                tally.verdicts.push(verdict);
            }
            Ok(tally)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Z_CRITICAL;

    fn report(neutral: Vec<u64>, n: u64) -> PairGridReport {
        let langs = (neutral.len() as f64).sqrt() as usize;
        PairGridReport {
            languages: (0..langs).map(|i| format!("l{i}")).collect(),
            measure: Measure::Cosine,
            n_entailment: n,
            n_neutral: n,
            n_contradiction: n,
            contradiction_errors: neutral.clone(),
            neutral_errors: neutral,
        }
    }

    #[test]
    fn count_errors_counts_ties() {
        assert_eq!(count_errors(&[0.5, 0.9], &[0.1, 0.5, 0.7]), 2);
    }

    #[test]
    fn identical_grids_tally_nothing() {
        let r = report(vec![100, 200, 300, 400], 100);
        for t in grid_compare(&r, &r, Z_CRITICAL, ZVariant::Textbook).unwrap() {
            assert_eq!((t.improved, t.worsened, t.not_significant), (0, 0, 4));
        }
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = report(vec![1, 2, 3, 4], 10);
        let b = report(vec![1, 2, 3, 4], 11);
        assert!(grid_compare(&a, &b, Z_CRITICAL, ZVariant::Textbook).is_err());
    }

    #[test]
    fn corpus_requires_every_translation() {
        let rec = |id: &str, lang: &str| PairRecord {
            pair_id: id.into(),
            label: NliLabel::Entailment,
            language: lang.into(),
            sentence1: "a".into(),
            sentence2: "b".into(),
        };
        assert!(PairCorpus::from_records(&[rec("1", "en"), rec("1", "de"), rec("2", "en")]).is_err());
        let c = PairCorpus::from_records(&[rec("1", "en"), rec("1", "de")]).unwrap();
        assert_eq!(c.languages, vec!["en", "de"]);
        assert_eq!(PairCorpus::from_records(&c.to_records()).unwrap(), c);
    }

    #[test]
    fn matrix_csv_shape() {
        let r = report(vec![1, 2, 3, 4, 5, 6, 7, 8, 9], 10);
        let csv = r.matrix_csv(Contrast::Neutral).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "l0,1,2,3");
    }
}
