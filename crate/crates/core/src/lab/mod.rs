//! Experiment orchestration: configs, sweeps, layer diagnostics, report
//! emission and reproducible run manifests.

mod diagnose;
mod manifest;
mod pretrain;
mod report;
mod sweep;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Tokenization, TripletSample};
use crate::encoder::{load_checkpoint, DualEncoder, Measure, Vocab};
use crate::error::{Error, Result};
use crate::grid::{PairCorpus, PairRecord};
use crate::io::read_jsonl;
use crate::metrics::{TokenSample, ZVariant, Z_CRITICAL};
use crate::tune::{TokenTriplet, TuneConfig};

pub use diagnose::{diagnose_layers, short_name, LayerChange, LayerChangeReport};
pub use manifest::{replay_lab, Manifest, ReplayReport, MANIFEST_FILE};
pub use pretrain::{run_pretrain, PretrainEpoch, PretrainJob, PretrainOutcome};
pub use report::{
    emit_layers, emit_report, emit_scores, EVAL_HEADER, GRID_HEADER, LAYER_HEADER, PLOT_HEADER, SCORE_HEADER,
};
pub use sweep::{
    run_lab, run_sweep, EvalRow, GridComparison, PointResult, SweepAxis, SweepReport, SweepSpec, SweepValue,
    SUMMARY_FILE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    /// Starting checkpoint shared by both encoder sides.
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDataset {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub eval: Vec<EvalDataset>,
    /// Translated NLI pair corpus for the language grid.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub measures: Vec<Measure>,
    /// Also compute MRR, MAP and P@1.
    pub rank: bool,
    pub critical: f64,
    pub ztest_variant: ZVariant,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            measures: Measure::BOTH.to_vec(),
            rank: false,
            critical: Z_CRITICAL,
            ztest_variant: ZVariant::default(),
        }
    }
}

/// Everything a tune or sweep run reads. Loaded from TOML; relative paths
/// resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub model: ModelPaths,
    pub data: DataPaths,
    #[serde(default)]
    pub tokenization: Tokenization,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl LabConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: LabConfig = toml::from_str(text).map_err(|e| Error::Settings(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.model.checkpoint);
        resolve(base, &mut self.model.vocab);
        resolve(base, &mut self.data.train);
        resolve(base, &mut self.data.valid);
        for e in &mut self.data.eval {
            resolve(base, &mut e.path);
        }
        if let Some(p) = &mut self.data.pairs {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tune.validate()?;
        if self.eval.measures.is_empty() {
            return Err(Error::Settings("no evaluation measure selected".into()));
        }
        if !(self.eval.critical > 0.0) {
            return Err(Error::Settings(format!("critical value {} must be positive", self.eval.critical)));
        }
        let mut names: Vec<&str> = self.data.eval.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Settings("evaluation dataset names must be unique".into()));
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    /// Every file the run reads, in a fixed order.
    pub fn input_paths(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.model.checkpoint, &self.model.vocab, &self.data.train, &self.data.valid];
        v.extend(self.data.eval.iter().map(|e| e.path.as_path()));
        v.extend(self.data.pairs.as_deref());
        v
    }
}

/// Tokenized inputs and the starting model of a lab run.
#[derive(Debug, Clone)]
pub struct LabData {
    pub base: DualEncoder<f32>,
    pub train: Vec<TokenTriplet>,
    pub valid: Vec<TokenTriplet>,
    pub evals: Vec<(String, Vec<TokenSample>)>,
    pub pairs: Option<PairCorpus<Vec<u32>>>,
}

impl LabData {
    pub fn load(cfg: &LabConfig) -> Result<Self> {
        let (config, params) = load_checkpoint::<f32>(&cfg.model.checkpoint)?;
        let vocab = Vocab::load(&cfg.model.vocab)?;
        if vocab.len() > config.vocab_size {
            return Err(Error::Settings(format!(
                "vocabulary of {} tokens exceeds the model's {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let tok = &cfg.tokenization;
        let train = tok.triplets(&vocab, &read_jsonl::<TripletSample>(&cfg.data.train)?)?;
        let valid = tok.triplets(&vocab, &read_jsonl::<TripletSample>(&cfg.data.valid)?)?;
        let evals = cfg
            .data
            .eval
            .iter()
            .map(|e| Ok((e.name.clone(), tok.samples(&vocab, &read_jsonl::<TripletSample>(&e.path)?))))
            .collect::<Result<Vec<_>>>()?;
        let pairs = match &cfg.data.pairs {
            Some(p) => Some(tok.pairs(&vocab, &PairCorpus::from_records(&read_jsonl::<PairRecord>(p)?)?)),
            None => None,
        };
        Ok(Self {
            base: DualEncoder::twin(config, params, cfg.tune.mode)?,
            train,
            valid,
            evals,
            pairs,
        })
    }
}
