//! Hard-negative mining over arxiv metadata.
//!
//! Papers are restricted to those owning at least one small category. For
//! each paper, its categories are ordered by census size (ties by name) and
//! the candidates are the papers sharing the longest leading run of that
//! order. Candidates are ranked by the Jensen-Shannon distance between
//! abstract token histograms (ties by id) and the nearest 20 are kept,
//! padded by repeating the last. A uniformly random other paper is appended
//! as the 21st neighbor.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize};

use super::{sentence_spans, TripletSample};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const NEIGHBOR_COUNT: usize = 21;
const NEAREST: usize = NEIGHBOR_COUNT - 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArxivRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    /// Accepts either a list or the snapshot's space-separated string.
    #[serde(deserialize_with = "categories_list")]
    pub categories: Vec<String>,
}

fn categories_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Cats {
        List(Vec<String>),
        Joined(String),
    }
    Ok(match Cats::deserialize(d)? {
        Cats::List(v) => v,
        Cats::Joined(s) => s.split_whitespace().map(String::from).collect(),
    })
}

impl ArxivRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.abstract_text.trim().is_empty() || self.categories.is_empty() {
            return Err(Error::Data(format!("arxiv record `{}` lacks id, abstract or categories", self.id)));
        }
        Ok(())
    }
}

/// A paper and its 21 neighbor ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativesEntry {
    pub record: ArxivRecord,
    #[serde(rename = "neighbors")]
    pub neighbor_ids: Vec<String>,
}

/// Sparse probability distribution over interned tokens, sorted by token.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    entries: Vec<(u32, f64)>,
}

impl Histogram {
    /// Normalizes non-negative counts; an all-zero input is an error.
    pub fn from_counts(counts: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
        for (k, c) in counts {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Data(format!("invalid histogram count {c}")));
            }
            if c > 0.0 {
                *merged.entry(k).or_default() += c;
            }
        }
        let total: f64 = merged.values().sum();
        if total <= 0.0 {
            return Err(Error::Data("empty histogram".into()));
        }
        Ok(Self {
            entries: merged.into_iter().map(|(k, c)| (k, c / total)).collect(),
        })
    }

    /// Dense probabilities indexed by position.
    pub fn from_dense(p: &[f64]) -> Result<Self> {
        Self::from_counts(p.iter().enumerate().map(|(i, &v)| (i as u32, v)))
    }
}

/// `√JSD` with base-2 logarithms: 0 for identical, 1 for disjoint supports.
pub fn js_distance(a: &Histogram, b: &Histogram) -> f64 {
    let term = |p: f64, m: f64| if p > 0.0 { p * (p / m).log2() } else { 0.0 };
    let (mut i, mut j) = (0, 0);
    let mut jsd = 0.0;
    while i < a.entries.len() || j < b.entries.len() {
        let (ka, pa) = a.entries.get(i).copied().unwrap_or((u32::MAX, 0.0));
        let (kb, pb) = b.entries.get(j).copied().unwrap_or((u32::MAX, 0.0));
        let (p, q) = match ka.cmp(&kb) {
            std::cmp::Ordering::Less => {
                i += 1;
                (pa, 0.0)
            }
            std::cmp::Ordering::Greater => {
                j += 1;
                (0.0, pb)
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
                (pa, pb)
            }
        };
        let m = 0.5 * (p + q);
        jsd += 0.5 * term(p, m) + 0.5 * term(q, m);
    }
    jsd.clamp(0.0, 1.0).sqrt()
}

struct Interner(HashMap<String, u32>);

impl Interner {
    fn histogram(&mut self, text: &str) -> Result<Histogram> {
        let mut counts: HashMap<u32, f64> = HashMap::new();
        for tok in text.split_whitespace() {
            let next = self.0.len() as u32;
            let id = *self.0.entry(tok.to_lowercase()).or_insert(next);
            *counts.entry(id).or_default() += 1.0;
        }
        Histogram::from_counts(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MiningStats {
    pub input: usize,
    pub kept: usize,
    /// Entries whose candidate set was empty.
    pub no_candidates: usize,
    /// Entries whose first 20 ids are all distinct.
    pub distinct_twenty: usize,
}

/// Mines 21 neighbors for every paper owning a category of at most
/// `max_category_size` papers. Deterministic in `seed`: the random slot of
/// the `i`-th kept paper draws from stream `i`.
pub fn mine_arxiv_negatives(
    records: &[ArxivRecord],
    max_category_size: usize,
    seed: u64,
) -> Result<(Vec<NegativesEntry>, MiningStats)> {
    for r in records {
        r.validate()?;
    }
    let mut census: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for c in unique_categories(r) {
            *census.entry(c).or_default() += 1;
        }
    }
    let kept: Vec<&ArxivRecord> = records
        .iter()
        .filter(|r| r.categories.iter().any(|c| census[c.as_str()] <= max_category_size))
        .collect();
    if kept.len() < 2 {
        return Err(Error::Data(format!("only {} papers own a small category; need 2", kept.len())));
    }
    let mut interner = Interner(HashMap::new());
    let hists = kept
        .iter()
        .map(|r| interner.histogram(&r.abstract_text))
        .collect::<Result<Vec<_>>>()?;
    let mut by_cat: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in kept.iter().enumerate() {
        for c in unique_categories(r) {
            by_cat.entry(c).or_default().push(i);
        }
    }

    let mut stats = MiningStats {
        input: records.len(),
        kept: kept.len(),
        ..Default::default()
    };
    let mut entries = Vec::with_capacity(kept.len());
    for (i, rec) in kept.iter().enumerate() {
        let candidates = prefix_candidates(i, rec, &census, &by_cat, &kept);
        let random = {
            let mut rng = Rng::stream(seed, i as u64);
            let mut j = rng.below(kept.len() - 1);
            if j >= i {
                j += 1;
            }
            kept[j].id.clone()
        };
        let mut ids: Vec<String> = if candidates.is_empty() {
            stats.no_candidates += 1;
            log::debug!("paper {} has no category match; padding from the random pick", rec.id);
            vec![random.clone(); NEAREST]
        } else {
            let mut ranked: Vec<(f64, &str)> = candidates
                .iter()
                .map(|&j| (js_distance(&hists[i], &hists[j]), kept[j].id.as_str()))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let mut ids: Vec<String> = ranked.iter().take(NEAREST).map(|(_, id)| id.to_string()).collect();
            let last = ids.last().expect("non-empty").clone();
            ids.resize(NEAREST, last);
            ids
        };
        let mut distinct = ids.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() == NEAREST {
            stats.distinct_twenty += 1;
        }
        ids.push(random);
        entries.push(NegativesEntry {
            record: (*rec).clone(),
            neighbor_ids: ids,
        });
    }
    if stats.no_candidates > 0 {
        log::info!("{} papers had no category match", stats.no_candidates);
    }
    Ok((entries, stats))
}

/// Distinct categories; a category listed twice still counts the paper once.
fn unique_categories(r: &ArxivRecord) -> Vec<&str> {
    let mut cats: Vec<&str> = r.categories.iter().map(String::as_str).collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

/// Ordered categories by census, ties by name.
fn sorted_categories<'a>(rec: &'a ArxivRecord, census: &HashMap<&str, usize>) -> Vec<&'a str> {
    let mut cats: Vec<&str> = rec.categories.iter().map(String::as_str).collect();
    cats.sort_by(|a, b| census[a].cmp(&census[b]).then_with(|| a.cmp(b)));
    cats.dedup();
    cats
}

/// Other papers sharing the longest leading run of `rec`'s sorted categories.
fn prefix_candidates(
    i: usize,
    rec: &ArxivRecord,
    census: &HashMap<&str, usize>,
    by_cat: &HashMap<&str, Vec<usize>>,
    kept: &[&ArxivRecord],
) -> Vec<usize> {
    let cats = sorted_categories(rec, census);
    let mut current: Vec<usize> = match by_cat.get(cats[0]) {
        Some(v) => v.iter().copied().filter(|&j| j != i).collect(),
        None => return Vec::new(),
    };
    for c in &cats[1..] {
        let next: Vec<usize> = current
            .iter()
            .copied()
            .filter(|&j| kept[j].categories.iter().any(|x| x == c))
            .collect();
        if next.is_empty() {
            break;
        }
        current = next;
    }
    current
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArxivFlavor {
    /// (title, abstract, other abstract)
    Title,
    /// (first sentence, rest of abstract, other abstract minus first sentence)
    First,
}

impl std::str::FromStr for ArxivFlavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "title" => Ok(ArxivFlavor::Title),
            "first" => Ok(ArxivFlavor::First),
            _ => Err(Error::Data(format!("unknown arxiv flavor `{s}`"))),
        }
    }
}

/// First sentence and the verbatim remainder, if there are two or more sentences.
fn first_and_rest(text: &str) -> Option<(&str, &str)> {
    let spans = sentence_spans(text);
    if spans.len() < 2 {
        return None;
    }
    Some((&text[spans[0].clone()], &text[spans[1].start..spans[spans.len() - 1].end]))
}

/// Triplets of the given difficulty (1 = nearest, 21 = random). Returns the
/// triplets and the number of entries skipped for single-sentence abstracts.
pub fn make_arxiv_triplets(
    entries: &[NegativesEntry],
    flavor: ArxivFlavor,
    difficulty: usize,
) -> Result<(Vec<TripletSample>, usize)> {
    if !(1..=NEIGHBOR_COUNT).contains(&difficulty) {
        return Err(Error::Data(format!("difficulty must be in 1..=21, got {difficulty}")));
    }
    let by_id: HashMap<&str, &ArxivRecord> = entries.iter().map(|e| (e.record.id.as_str(), &e.record)).collect();
    let mut out = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for e in entries {
        if e.neighbor_ids.len() != NEIGHBOR_COUNT {
            return Err(Error::Data(format!("entry {} has {} neighbors", e.record.id, e.neighbor_ids.len())));
        }
        let other_id = &e.neighbor_ids[difficulty - 1];
        let other = by_id
            .get(other_id.as_str())
            .ok_or_else(|| Error::Data(format!("neighbor {other_id} of {} not in the entry set", e.record.id)))?;
        match flavor {
            ArxivFlavor::Title => out.push(TripletSample::new(
                e.record.title.clone(),
                e.record.abstract_text.clone(),
                other.abstract_text.clone(),
            )),
            ArxivFlavor::First => match (first_and_rest(&e.record.abstract_text), first_and_rest(&other.abstract_text)) {
                (Some((q, p)), Some((_, n))) => out.push(TripletSample::new(q, p, n)),
                _ => skipped += 1,
            },
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} entries with single-sentence abstracts");
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, cats: &[&str], text: &str) -> ArxivRecord {
        ArxivRecord {
            id: id.into(),
            title: format!("title {id}"),
            abstract_text: text.into(),
            categories: cats.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn js_examples() {
        let a = Histogram::from_dense(&[0.5, 0.5, 0.0]).unwrap();
        let b = Histogram::from_dense(&[0.0, 0.5, 0.5]).unwrap();
        assert_eq!(js_distance(&a, &a), 0.0);
        let c = Histogram::from_dense(&[1.0, 0.0]).unwrap();
        let d = Histogram::from_dense(&[0.0, 1.0]).unwrap();
        assert!((js_distance(&c, &d) - 1.0).abs() < 1e-15);
        // m = (1/4, 1/2, 1/4); each KL term = 1/2·log2(2) = 1/2; JSD = 1/2.
        assert!((js_distance(&a, &b) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(Histogram::from_dense(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn categories_accept_string_or_list() {
        let a: ArxivRecord = serde_json::from_str(r#"{"id":"1","title":"t","abstract":"a","categories":"cs.LG stat.ML"}"#).unwrap();
        let b: ArxivRecord = serde_json::from_str(r#"{"id":"1","title":"t","abstract":"a","categories":["cs.LG","stat.ML"]}"#).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mutual_nearest_pair() {
        let mut records = vec![rec("a", &["rare"], "x y z"), rec("b", &["rare"], "x y w")];
        for i in 0..8 {
            records.push(rec(&format!("o{i}"), &["common"], "p q r"));
        }
        let (entries, _) = mine_arxiv_negatives(&records, 2, 1).unwrap();
        let find = |id: &str| entries.iter().find(|e| e.record.id == id).unwrap();
        assert_eq!(find("a").neighbor_ids[0], "b");
        assert_eq!(find("b").neighbor_ids[0], "a");
        assert!(find("a").neighbor_ids[..20].iter().all(|x| x == "b"));
        assert_eq!(find("a").neighbor_ids.len(), 21);
    }

    #[test]
    fn repeated_category_counts_once() {
        let records = vec![
            rec("a", &["rare", "rare"], "x y z"),
            rec("b", &["rare"], "x y w"),
            rec("c", &["rare"], "p q r"),
        ];
        // Census of `rare` is 3, not 4, so the papers stay under the cap.
        let (entries, stats) = mine_arxiv_negatives(&records, 3, 1).unwrap();
        assert_eq!(stats.kept, 3);
        let b = entries.iter().find(|e| e.record.id == "b").unwrap();
        assert_eq!(b.neighbor_ids[..3], ["a", "c", "c"]);
    }

    #[test]
    fn first_flavor_split() {
        let entries = vec![
            NegativesEntry {
                record: rec("a", &["c"], "One sentence here. Second one."),
                neighbor_ids: vec!["b".into(); 21],
            },
            NegativesEntry {
                record: rec("b", &["c"], "Alpha. Beta gamma."),
                neighbor_ids: vec!["a".into(); 21],
            },
        ];
        let (t, skipped) = make_arxiv_triplets(&entries, ArxivFlavor::First, 21).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(t[0], TripletSample::new("One sentence here.", "Second one.", "Beta gamma."));
        assert!(make_arxiv_triplets(&entries, ArxivFlavor::First, 22).is_err());
    }
}
