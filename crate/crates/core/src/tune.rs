//! Contrastive tuning of a dual encoder with validation-gated checkpoints.
//!
//! Each epoch draws a fresh seeded shuffle of the training triplets, runs a
//! fixed number of optimizer steps, then validates. An epoch is accepted
//! only if both the validation loss and the validation error count are
//! strictly below the best accepted values so far; the run stops after
//! `idle_epochs` consecutive rejections (or `max_epochs`) and returns the
//! last accepted checkpoint.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, DualEncoder, EncoderConfig, EncoderVars, TuneMode};
use crate::error::{Error, Result};
use crate::freeze::{FreezeSpec, FrozenSet};
use crate::optim::{
    batch_triplet_loss, euclidean, scheduler_value, triplet_loss_value, LossSpec, Optimizer, OptimizerSpec,
    SchedulerKind, SchedulerSpec,
};
use crate::tensor::{ParamTree, Real, Rng, Tape, Tensor, TensorError, Var};

/// A tokenized (query, positive, negative) triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTriplet {
    pub query: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochPolicy {
    /// A fixed number of batches per epoch.
    Batches(usize),
    /// A fixed number of samples per epoch (rounded down to whole batches).
    Samples(usize),
}

impl Default for EpochPolicy {
    fn default() -> Self {
        EpochPolicy::Batches(1000)
    }
}

impl EpochPolicy {
    pub fn batches_per_epoch(self, batch_size: usize) -> usize {
        match self {
            EpochPolicy::Batches(b) => b,
            EpochPolicy::Samples(s) => (s / batch_size.max(1)).max(1),
        }
    }

    pub fn samples_per_epoch(self, batch_size: usize) -> usize {
        self.batches_per_epoch(batch_size) * batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub batch_size: usize,
    pub epoch_policy: EpochPolicy,
    pub idle_epochs: usize,
    /// Hard cap on epochs; also fixes the horizon of bounded schedulers.
    pub max_epochs: usize,
    pub freeze: FreezeSpec,
    pub optimizer: OptimizerSpec,
    pub scheduler: SchedulerKind,
    pub loss: LossSpec,
    pub seed: u64,
    pub mode: TuneMode,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 14,
            epoch_policy: EpochPolicy::default(),
            idle_epochs: 10,
            max_epochs: 100,
            freeze: "emb".parse().expect("static spec"),
            optimizer: OptimizerSpec::default(),
            scheduler: SchedulerKind::None,
            loss: LossSpec::default(),
            seed: 0,
            mode: TuneMode::QueryOnly,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Tuning("batch_size must be >= 1".into()));
        }
        if self.idle_epochs == 0 {
            return Err(Error::Tuning("idle_epochs must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Tuning("max_epochs must be >= 1".into()));
        }
        if self.epoch_policy.batches_per_epoch(self.batch_size) == 0 {
            return Err(Error::Tuning("epoch policy yields zero batches".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.epoch_policy.batches_per_epoch(self.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.max_epochs * self.batches_per_epoch()) as u64
    }

    pub fn schedule(&self) -> SchedulerSpec {
        SchedulerSpec {
            kind: self.scheduler,
            lr0: self.optimizer.lr,
            total_steps: self.total_steps(),
        }
    }
}

/// Mean validation loss and error count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_errors: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    IdleEpochs,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub initial: Validation,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; 0 means the initial model.
    pub best_epoch: usize,
    pub best: Validation,
    pub total_steps: u64,
    pub stop: StopReason,
}

impl RunRecord {
    pub fn accepted_epochs(&self) -> usize {
        self.epochs.iter().filter(|e| e.accepted).count()
    }
}

/// The both-must-decrease acceptance rule against the best accepted epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementGate {
    best: Validation,
}

impl ImprovementGate {
    pub fn new(initial: Validation) -> Self {
        Self { best: initial }
    }

    pub fn best(&self) -> Validation {
        self.best
    }

    /// Accepts `v` (and makes it the new best) iff both loss and error
    /// count strictly decreased.
    pub fn offer(&mut self, v: Validation) -> bool {
        let ok = v.loss < self.best.loss && v.errors < self.best.errors;
        if ok {
            self.best = v;
        }
        ok
    }
}

/// Validation loss and errors. An error is a triplet whose positive is not
/// strictly closer to the query than its negative.
pub fn validate<R: Real>(model: &DualEncoder<R>, valid: &[TokenTriplet], loss: &LossSpec) -> Result<Validation> {
    let texts = TextCache::build(&model.text, &model.config, valid)?;
    validate_cached(&model.query, &model.config, valid, &texts, loss)
}

fn validate_cached<R: Real>(
    query: &ParamTree<R>,
    config: &EncoderConfig,
    valid: &[TokenTriplet],
    texts: &TextCache<R>,
    loss: &LossSpec,
) -> Result<Validation> {
    if valid.is_empty() {
        return Err(Error::Tuning("empty validation set".into()));
    }
    let queries: Vec<&[u32]> = valid.iter().map(|t| t.query.as_slice()).collect();
    let q = encode_batch(query, &queries, config)?;
    let mut total = 0.0;
    let mut errors = 0;
    for (i, a) in q.iter().enumerate() {
        let (p, n) = texts.get(i);
        total += triplet_loss_value(a, p, n, loss);
        if euclidean(a, p) >= euclidean(a, n) {
            errors += 1;
        }
    }
    Ok(Validation {
        loss: total / valid.len() as f64,
        errors,
    })
}

/// Text-side embeddings for a triplet list (text encoder frozen).
struct TextCache<R> {
    pos: Vec<Vec<R>>,
    neg: Vec<Vec<R>>,
}

impl<R: Real> TextCache<R> {
    fn build(text: &ParamTree<R>, config: &EncoderConfig, triplets: &[TokenTriplet]) -> Result<Self> {
        let pos: Vec<&[u32]> = triplets.iter().map(|t| t.pos.as_slice()).collect();
        let neg: Vec<&[u32]> = triplets.iter().map(|t| t.neg.as_slice()).collect();
        Ok(Self {
            pos: encode_batch(text, &pos, config)?,
            neg: encode_batch(text, &neg, config)?,
        })
    }

    fn get(&self, i: usize) -> (&[R], &[R]) {
        (&self.pos[i], &self.neg[i])
    }
}

/// Result of [`tune`].
#[derive(Debug, Clone)]
pub struct TuneOutcome<R> {
    pub model: DualEncoder<R>,
    pub record: RunRecord,
}

/// Sample order for one epoch: seeded shuffles of all indices, concatenated
/// until `count` indices are available.
pub fn epoch_order(n: usize, count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut pass = 0u64;
    while out.len() < count {
        let mut idx: Vec<usize> = (0..n).collect();
        Rng::stream(seed, ((epoch as u64) << 20) | pass).shuffle(&mut idx);
        let need = count - out.len();
        out.extend(idx.into_iter().take(need));
        pass += 1;
    }
    out
}

fn loss_error(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Tunes `model` on `train`, validating on `valid` after every epoch.
pub fn tune<R: Real>(
    model: &DualEncoder<R>,
    train: &[TokenTriplet],
    valid: &[TokenTriplet],
    cfg: &TuneConfig,
) -> Result<TuneOutcome<R>> {
    if valid.is_empty() {
        return Err(Error::Tuning("empty validation set".into()));
    }
    let mut cache = match model.mode {
        TuneMode::QueryOnly => Some(TextCache::build(&model.text, &model.config, valid)?),
        TuneMode::BothTuned => None,
    };
    tune_with_validator(model, train, cfg, |m| match &mut cache {
        Some(texts) => validate_cached(&m.query, &m.config, valid, texts, &cfg.loss),
        None => validate(m, valid, &cfg.loss),
    })
}

/// [`tune`] with a caller-supplied validation function, called once on the
/// initial model and once after every epoch.
pub fn tune_with_validator<R: Real, V>(
    model: &DualEncoder<R>,
    train: &[TokenTriplet],
    cfg: &TuneConfig,
    mut validator: V,
) -> Result<TuneOutcome<R>>
where
    V: FnMut(&DualEncoder<R>) -> Result<Validation>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Tuning("empty training set".into()));
    }
    if model.mode != cfg.mode {
        return Err(Error::Tuning(format!(
            "model is {:?} but the config asks for {:?}",
            model.mode, cfg.mode
        )));
    }
    let frozen = cfg.freeze.resolve(&model.query)?;
    let mut trainer = Trainer::new(model, train, cfg, &frozen)?;

    let initial = validator(model)?;
    let mut gate = ImprovementGate::new(initial);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut idle = 0;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let bpe = cfg.batches_per_epoch();

    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train.len(), bpe * cfg.batch_size, cfg.seed, epoch);
        let mut train_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            train_loss += trainer.step(batch).map_err(|e| loss_error(e, epoch, b))?;
        }
        let v = validator(&trainer.model)?;
        let accepted = gate.offer(v);
        log::info!(
            "epoch {epoch}: train loss {:.6}, valid loss {:.6}, errors {}{}",
            train_loss / bpe as f64,
            v.loss,
            v.errors,
            if accepted { " (accepted)" } else { "" }
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_loss / bpe as f64,
            valid_loss: v.loss,
            valid_errors: v.errors,
            accepted,
        });
        if accepted {
            best = trainer.model.clone();
            best_epoch = epoch;
            idle = 0;
        } else {
            idle += 1;
            if idle >= cfg.idle_epochs {
                stop = StopReason::IdleEpochs;
                break;
            }
        }
    }
    Ok(TuneOutcome {
        model: best,
        record: RunRecord {
            initial,
            epochs,
            best_epoch,
            best: gate.best(),
            total_steps: trainer.steps,
            stop,
        },
    })
}

struct Trainer<'a, R> {
    model: DualEncoder<R>,
    train: &'a [TokenTriplet],
    cfg: &'a TuneConfig,
    query_trainable: Vec<String>,
    text_trainable: Vec<String>,
    query_opt: Optimizer,
    text_opt: Option<Optimizer>,
    text_cache: Vec<Option<(Tensor<R>, Tensor<R>)>>,
    steps: u64,
}

impl<'a, R: Real> Trainer<'a, R> {
    fn new(model: &DualEncoder<R>, train: &'a [TokenTriplet], cfg: &'a TuneConfig, frozen: &FrozenSet) -> Result<Self> {
        let query_trainable: Vec<String> = frozen.trainable(&model.query).into_iter().map(String::from).collect();
        let refs: Vec<&str> = query_trainable.iter().map(String::as_str).collect();
        let query_opt = Optimizer::new(cfg.optimizer, &model.query, &refs)?;
        let (text_trainable, text_opt) = match model.mode {
            TuneMode::QueryOnly => (Vec::new(), None),
            TuneMode::BothTuned => {
                let names: Vec<String> = frozen.trainable(&model.text).into_iter().map(String::from).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let opt = Optimizer::new(cfg.optimizer, &model.text, &refs)?;
                (names, Some(opt))
            }
        };
        Ok(Self {
            model: model.clone(),
            train,
            cfg,
            query_trainable,
            text_trainable,
            query_opt,
            text_opt,
            text_cache: vec![None; train.len()],
            steps: 0,
        })
    }

    /// One optimizer step over the given sample indices; returns the batch loss.
    fn step(&mut self, batch: &[usize]) -> Result<f64> {
        let config = self.model.config;
        let mut tape = Tape::<R>::new();
        let q_set: std::collections::HashSet<&str> = self.query_trainable.iter().map(String::as_str).collect();
        let (q_vars, q_bind) = EncoderVars::bind(&mut tape, &self.model.query, &config, |n| q_set.contains(n))?;
        let text = match self.model.mode {
            TuneMode::BothTuned => {
                let t_set: std::collections::HashSet<&str> = self.text_trainable.iter().map(String::as_str).collect();
                Some(EncoderVars::bind(&mut tape, &self.model.text, &config, |n| t_set.contains(n))?)
            }
            TuneMode::QueryOnly => None,
        };
        let mut triplets: Vec<(Var, Var, Var)> = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &self.train[i];
            let a = q_vars.forward(&mut tape, &s.query)?;
            let (p, n) = match &text {
                Some((t_vars, _)) => (t_vars.forward(&mut tape, &s.pos)?, t_vars.forward(&mut tape, &s.neg)?),
                None => {
                    let (p, n) = self.cached_text(i)?;
                    (tape.constant(p), tape.constant(n))
                }
            };
            triplets.push((a, p, n));
        }
        let loss = batch_triplet_loss(&mut tape, &triplets, &self.cfg.loss)?;
        let value = tape.value(loss).item().expect("scalar loss").to_f64();
        if !value.is_finite() {
            return Err(Error::Tensor(TensorError::NonFinite { op: "loss" }));
        }
        let grads = tape.backward(loss)?;
        let lr = scheduler_value(&self.cfg.schedule(), self.steps)?;
        let q_grads: IndexMap<String, Tensor<R>> = q_bind.collect(&tape, &grads);
        self.query_opt.step(&mut self.model.query, &q_grads, lr)?;
        if let (Some((_, t_bind)), Some(opt)) = (&text, &mut self.text_opt) {
            let t_grads = t_bind.collect(&tape, &grads);
            opt.step(&mut self.model.text, &t_grads, lr)?;
        }
        self.steps += 1;
        Ok(value)
    }

    fn cached_text(&mut self, i: usize) -> Result<(Tensor<R>, Tensor<R>)> {
        if let Some(pair) = &self.text_cache[i] {
            return Ok(pair.clone());
        }
        let s = &self.train[i];
        let e = encode_batch(&self.model.text, &[&s.pos, &s.neg], &self.model.config)?;
        let pair = (Tensor::vector(e[0].clone()), Tensor::vector(e[1].clone()));
        self.text_cache[i] = Some(pair.clone());
        Ok(pair)
    }
}

/// Settings for [`pretrain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: OptimizerSpec {
                lr: 1e-3,
                ..OptimizerSpec::default()
            },
            loss: LossSpec { margin: 0.3 },
            seed: 0,
        }
    }
}

/// Trains a single shared-weight encoder on triplets, every parameter
/// trainable. `on_epoch(epoch, mean_loss, params)` runs after each epoch and
/// returns `false` to stop early. Returns the per-epoch mean losses.
pub fn pretrain<R: Real, F>(
    config: &EncoderConfig,
    params: &mut ParamTree<R>,
    triplets: &[TokenTriplet],
    cfg: &PretrainConfig,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &ParamTree<R>) -> Result<bool>,
{
    if triplets.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Tuning("pretraining needs triplets and a positive batch size".into()));
    }
    cfg.loss.validate()?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut opt = Optimizer::new(cfg.optimizer, params, &refs)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(triplets.len(), triplets.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::<R>::new();
            let (vars, bind) = EncoderVars::bind(&mut tape, params, config, |_| true)?;
            let mut ts = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &triplets[i];
                let a = vars.forward(&mut tape, &s.query)?;
                let p = vars.forward(&mut tape, &s.pos)?;
                let n = vars.forward(&mut tape, &s.neg)?;
                ts.push((a, p, n));
            }
            let loss = batch_triplet_loss(&mut tape, &ts, &cfg.loss).map_err(|e| loss_error(e, epoch, b))?;
            total += tape.value(loss).item().expect("scalar loss").to_f64();
            batches += 1;
            let grads = tape.backward(loss)?;
            opt.step(params, &bind.collect(&tape, &grads), cfg.optimizer.lr)?;
        }
        let mean = total / batches as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
        if !on_epoch(epoch, mean, params)? {
            break;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn epoch_accounting() {
        assert_eq!(EpochPolicy::Samples(14000).batches_per_epoch(56), 250);
        assert_eq!(EpochPolicy::Batches(1000).samples_per_epoch(56), 56000);
        assert_eq!(EpochPolicy::Samples(14000).batches_per_epoch(14), 1000);
    }

    #[test]
    fn gate_needs_both() {
        let mut g = ImprovementGate::new(Validation { loss: 1.0, errors: 10 });
        assert!(!g.offer(Validation { loss: 0.9, errors: 10 }));
        assert!(!g.offer(Validation { loss: 1.0, errors: 9 }));
        assert!(g.offer(Validation { loss: 0.9, errors: 9 }));
        assert!(!g.offer(Validation { loss: 0.95, errors: 8 }));
        assert_eq!(g.best().errors, 9);
    }

    #[test]
    fn epoch_order_covers_and_is_seeded() {
        let a = epoch_order(10, 25, 3, 1);
        assert_eq!(a.len(), 25);
        let mut first: Vec<usize> = a[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 25, 3, 1));
        assert_ne!(a, epoch_order(10, 25, 3, 2));
    }

    #[test]
    fn validate_trivial_cases() {
        let cfg = EncoderConfig {
            vocab_size: 20,
            hidden: 8,
            n_blocks: 1,
            n_heads: 2,
            intermediate: 16,
            max_positions: 6,
            n_token_types: 2,
        };
        let p: ParamTree<f32> = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let m = DualEncoder::twin(cfg, p, TuneMode::QueryOnly).unwrap();
        let same: Vec<TokenTriplet> = (2..8)
            .map(|i| TokenTriplet {
                query: vec![i, i + 1],
                pos: vec![i, i + 1],
                neg: vec![i + 5, 3],
            })
            .collect();
        assert_eq!(validate(&m, &same, &LossSpec::default()).unwrap().errors, 0);
        let inverted: Vec<TokenTriplet> = same
            .iter()
            .map(|t| TokenTriplet {
                query: t.query.clone(),
                pos: t.neg.clone(),
                neg: t.query.clone(),
            })
            .collect();
        assert_eq!(validate(&m, &inverted, &LossSpec::default()).unwrap().errors, inverted.len());
    }
}
