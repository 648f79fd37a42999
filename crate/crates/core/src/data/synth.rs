//! Synthetic parallel corpus over cipher languages.
//!
//! Base sentences are bags of tokens drawn from a topic window on a ring of
//! `base_vocab` tokens (neighboring topics share tokens, opposite topics do
//! not), plus uniform noise. Language `k` renders a base token through a
//! fixed bijection of the shared vocabulary that moves it into block `k`
//! and permutes it within the block; language 0 is the identity.

use serde::{Deserialize, Serialize};

use super::TripletSample;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::grid::{NliLabel, Pair, PairCorpus};
use crate::tensor::Rng;

/// Ids below this are reserved (`[PAD]`, `[UNK]`).
const FIRST_WORD: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusSpec {
    pub seed: u64,
    pub n_languages: usize,
    /// Tokens per language.
    pub base_vocab: usize,
    pub n_topics: usize,
    /// Tokens in a topic window.
    pub topic_width: usize,
    /// Offset between consecutive topic windows.
    pub topic_stride: usize,
    /// Probability that a token is drawn from the whole base vocabulary.
    pub noise: f64,
    /// Inclusive length range of pretraining and pair sentences.
    pub sentence_len: (usize, usize),
    /// Inclusive length range of tuning queries.
    pub query_len: (usize, usize),
    /// Inclusive length range of tuning positives and negatives.
    pub passage_len: (usize, usize),
    /// Probability that a pretraining negative comes from a neighboring topic.
    pub pretrain_hard_negatives: f64,
    pub n_pretrain: usize,
    pub n_tune_train: usize,
    pub n_tune_valid: usize,
    /// Held-out triplets per language.
    pub n_heldout: usize,
    /// Pairs per NLI label.
    pub n_pairs: usize,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_languages: 4,
            base_vocab: 96,
            n_topics: 24,
            topic_width: 8,
            topic_stride: 4,
            noise: 0.2,
            sentence_len: (6, 10),
            query_len: (3, 4),
            passage_len: (10, 14),
            pretrain_hard_negatives: 0.5,
            n_pretrain: 3000,
            n_tune_train: 1000,
            n_tune_valid: 200,
            n_heldout: 300,
            n_pairs: 100,
        }
    }
}

impl SynthCorpusSpec {
    pub fn vocab_size(&self) -> usize {
        FIRST_WORD as usize + self.n_languages * self.base_vocab
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("synthetic corpus: {m}")));
        if self.n_languages == 0 || self.n_languages > 26 {
            return bad(format!("n_languages must be in 1..=26, got {}", self.n_languages));
        }
        if self.n_topics < 4 {
            return bad("need at least 4 topics".into());
        }
        if self.topic_width == 0 || self.topic_width > self.base_vocab {
            return bad("topic_width must be in 1..=base_vocab".into());
        }
        let far = (self.n_topics / 2 * self.topic_stride) % self.base_vocab;
        if self.topic_width > far.min(self.base_vocab - far) {
            return bad("opposite topics overlap; widen the ring or narrow the windows".into());
        }
        for (name, (lo, hi)) in [
            ("sentence_len", self.sentence_len),
            ("query_len", self.query_len),
            ("passage_len", self.passage_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.pretrain_hard_negatives) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.vocab_size() > u32::MAX as usize {
            return bad("vocabulary too large".into());
        }
        Ok(())
    }
}

/// Generated corpus; every text is whitespace-separated vocabulary words.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthCorpusSpec,
    pub vocab: Vocab,
    pub languages: Vec<String>,
    /// Cross-language triplets for pretraining a shared encoder.
    pub pretrain: Vec<TripletSample>,
    /// Language-0 tuning triplets.
    pub tune_train: Vec<TripletSample>,
    pub tune_valid: Vec<TripletSample>,
    /// Held-out tuning-style triplets, one list per language.
    pub heldout: Vec<Vec<TripletSample>>,
    pub pairs: PairCorpus,
    /// Within-block permutation per language.
    perms: Vec<Vec<u32>>,
}

impl SynthCorpus {
    fn block(&self, id: u32) -> Option<(usize, usize)> {
        let v = self.spec.base_vocab;
        let x = id.checked_sub(FIRST_WORD)? as usize;
        (x < v * self.spec.n_languages).then(|| (x / v, x % v))
    }

    fn id(&self, block: usize, offset: usize) -> u32 {
        FIRST_WORD + (block * self.spec.base_vocab + offset) as u32
    }

    /// Maps a shared id through language `k`'s bijection. Reserved ids map to themselves.
    pub fn cipher(&self, k: usize, id: u32) -> u32 {
        match self.block(id) {
            None => id,
            Some((b, o)) => self.id((b + k) % self.spec.n_languages, self.perms[k][o] as usize),
        }
    }

    pub fn decipher(&self, k: usize, id: u32) -> u32 {
        match self.block(id) {
            None => id,
            Some((b, o)) => {
                let k_lang = self.spec.n_languages;
                let inv = self.perms[k].iter().position(|&p| p as usize == o).expect("permutation");
                self.id((b + k_lang - k % k_lang) % k_lang, inv)
            }
        }
    }

    fn render(&self, k: usize, base: &[u32]) -> String {
        let words: Vec<&str> = base
            .iter()
            .map(|&b| self.vocab.token(self.cipher(k, b)).expect("id within vocabulary"))
            .collect();
        words.join(" ")
    }
}

fn word(block: usize, offset: usize) -> String {
    format!("{}{offset:03}", (b'a' + block as u8) as char)
}

struct Gen<'a> {
    spec: &'a SynthCorpusSpec,
    rng: Rng,
}

impl Gen<'_> {
    fn len(&mut self, (lo, hi): (usize, usize)) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }

    /// Base ids (language 0) of a sentence about `topic`.
    fn sentence(&mut self, topic: usize, len: usize) -> Vec<u32> {
        let s = self.spec;
        (0..len)
            .map(|_| {
                let offset = if self.rng.uniform() < s.noise {
                    self.rng.below(s.base_vocab)
                } else {
                    (topic * s.topic_stride + self.rng.below(s.topic_width)) % s.base_vocab
                };
                FIRST_WORD + offset as u32
            })
            .collect()
    }

    fn topic(&mut self) -> usize {
        self.rng.below(self.spec.n_topics)
    }

    fn neighbor(&mut self, t: usize) -> usize {
        let n = self.spec.n_topics;
        if self.rng.below(2) == 0 {
            (t + 1) % n
        } else {
            (t + n - 1) % n
        }
    }

    fn other_topic(&mut self, t: usize) -> usize {
        let n = self.spec.n_topics;
        (t + 1 + self.rng.below(n - 1)) % n
    }

    fn opposite(&self, t: usize) -> usize {
        (t + self.spec.n_topics / 2) % self.spec.n_topics
    }
}

/// Builds the corpus deterministically from `spec.seed`.
pub fn gen_synth_corpus(spec: &SynthCorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let k_lang = spec.n_languages;
    let mut words = Vec::with_capacity(spec.vocab_size());
    for b in 0..k_lang {
        for o in 0..spec.base_vocab {
            words.push(word(b, o));
        }
    }
    let vocab = Vocab::from_tokens(words);
    let mut rng = Rng::new(spec.seed);
    let mut perms = vec![(0..spec.base_vocab as u32).collect::<Vec<u32>>()];
    for _ in 1..k_lang {
        let mut p: Vec<u32> = (0..spec.base_vocab as u32).collect();
        rng.shuffle(&mut p);
        perms.push(p);
    }
    let mut corpus = SynthCorpus {
        spec: spec.clone(),
        vocab,
        languages: (0..k_lang).map(|k| format!("L{k}")).collect(),
        pretrain: Vec::new(),
        tune_train: Vec::new(),
        tune_valid: Vec::new(),
        heldout: Vec::new(),
        pairs: PairCorpus {
            languages: Vec::new(),
            pairs: Vec::new(),
        },
        perms,
    };
    let mut g = Gen { spec, rng };

    let mut pretrain = Vec::with_capacity(spec.n_pretrain);
    for _ in 0..spec.n_pretrain {
        let t = g.topic();
        let neg_topic = if g.rng.uniform() < spec.pretrain_hard_negatives {
            g.neighbor(t)
        } else {
            g.other_topic(t)
        };
        let lens = [g.len(spec.sentence_len), g.len(spec.sentence_len), g.len(spec.sentence_len)];
        let q = g.sentence(t, lens[0]);
        let p = g.sentence(t, lens[1]);
        let n = g.sentence(neg_topic, lens[2]);
        let langs = [g.rng.below(k_lang), g.rng.below(k_lang), g.rng.below(k_lang)];
        pretrain.push(TripletSample::new(
            corpus.render(langs[0], &q),
            corpus.render(langs[1], &p),
            corpus.render(langs[2], &n),
        ));
    }

    let tuning = |g: &mut Gen, count: usize, k: usize| -> Vec<TripletSample> {
        (0..count)
            .map(|_| {
                let t = g.topic();
                let nt = g.neighbor(t);
                let lq = g.len(spec.query_len);
                let lp = g.len(spec.passage_len);
                let ln = g.len(spec.passage_len);
                let q = g.sentence(t, lq);
                let p = g.sentence(t, lp);
                let n = g.sentence(nt, ln);
                TripletSample::new(corpus.render(k, &q), corpus.render(k, &p), corpus.render(k, &n))
            })
            .collect()
    };
    let tune_train = tuning(&mut g, spec.n_tune_train, 0);
    let tune_valid = tuning(&mut g, spec.n_tune_valid, 0);
    let heldout: Vec<Vec<TripletSample>> = (0..k_lang).map(|k| tuning(&mut g, spec.n_heldout, k)).collect();

    let mut pairs = Vec::with_capacity(3 * spec.n_pairs);
    for (label, tag) in [
        (NliLabel::Entailment, "e"),
        (NliLabel::Neutral, "n"),
        (NliLabel::Contradiction, "c"),
    ] {
        for i in 0..spec.n_pairs {
            let t = g.topic();
            let t2 = match label {
                NliLabel::Entailment => t,
                NliLabel::Neutral => g.neighbor(t),
                NliLabel::Contradiction => g.opposite(t),
            };
            let l1 = g.len(spec.sentence_len);
            let l2 = g.len(spec.sentence_len);
            let s1 = g.sentence(t, l1);
            let s2 = g.sentence(t2, l2);
            pairs.push(Pair {
                id: format!("{tag}{i:05}"),
                label,
                sentences: (0..k_lang).map(|k| (corpus.render(k, &s1), corpus.render(k, &s2))).collect(),
            });
        }
    }

    corpus.pretrain = pretrain;
    corpus.tune_train = tune_train;
    corpus.tune_valid = tune_valid;
    corpus.heldout = heldout;
    corpus.pairs = PairCorpus {
        languages: corpus.languages.clone(),
        pairs,
    };
    Ok(corpus)
}
