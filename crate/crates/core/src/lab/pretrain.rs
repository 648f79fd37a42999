//! Pretraining a starting encoder, optionally until held-out PND falls
//! below a target in every evaluation set.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_params, DualEncoder, EncoderConfig, Measure, TuneMode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, TokenSample};
use crate::tensor::{ParamTree, Rng};
use crate::tune::{pretrain, PretrainConfig, TokenTriplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainJob {
    pub encoder: EncoderConfig,
    /// Seed of the initial weights.
    pub init_seed: u64,
    pub train: PretrainConfig,
    /// Epochs always run before the target is checked.
    pub min_epochs: usize,
    /// Stop once every held-out set has PND below this.
    pub target_pnd: Option<f64>,
    pub measure: Measure,
}

impl Default for PretrainJob {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            init_seed: 0,
            train: PretrainConfig::default(),
            min_epochs: 1,
            target_pnd: None,
            measure: Measure::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Held-out PND per set, when any were given.
    pub heldout_pnd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamTree<f32>,
    pub epochs: Vec<PretrainEpoch>,
    /// Whether the PND target was met (true when no target was set).
    pub reached: bool,
}

pub fn run_pretrain(job: &PretrainJob, triplets: &[TokenTriplet], heldout: &[Vec<TokenSample>]) -> Result<PretrainOutcome> {
    if job.target_pnd.is_some() && heldout.is_empty() {
        return Err(Error::Settings("a PND target needs held-out sets".into()));
    }
    let mut params: ParamTree<f32> = init_params(&job.encoder, &mut Rng::new(job.init_seed))?;
    let mut epochs = Vec::new();
    let mut reached = job.target_pnd.is_none();
    pretrain(&job.encoder, &mut params, triplets, &job.train, |epoch, loss, p| {
        let heldout_pnd = if heldout.is_empty() {
            Vec::new()
        } else {
            let model = DualEncoder::twin(job.encoder, p.clone(), TuneMode::QueryOnly)?;
            heldout
                .iter()
                .map(|h| Ok(evaluate(&model, h, &[job.measure], false)?[0].pnd))
                .collect::<Result<Vec<_>>>()?
        };
        log::info!("pretrain epoch {epoch}: loss {loss:.5}, held-out PND {heldout_pnd:.4?}");
        if let Some(t) = job.target_pnd {
            reached = heldout_pnd.iter().all(|&x| x < t);
        }
        epochs.push(PretrainEpoch { epoch, loss, heldout_pnd });
        Ok(!(reached && epoch >= job.min_epochs))
    })?;
    Ok(PretrainOutcome { params, epochs, reached })
}
