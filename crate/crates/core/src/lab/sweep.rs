//! One-axis sweeps over tuning settings, each point tuned and evaluated
//! against the shared starting model.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::diagnose::{diagnose_layers, LayerChangeReport};
use super::manifest::Manifest;
use super::report::emit_report;
use super::{LabConfig, LabData};
use crate::encoder::{save_checkpoint, DualEncoder, Measure, TuneMode};
use crate::error::{Error, Result};
use crate::freeze::FreezeSpec;
use crate::grid::{grid_compare, grid_eval, GridTally, PairGridReport};
use crate::io::write_file;
use crate::metrics::{evaluate, improvement, z_test, EvalReport};
use crate::optim::{scale_lr, OptimizerKind, ScalingRule, SchedulerKind};
use crate::tune::{tune, RunRecord, TuneConfig};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LearningRate,
    BatchSize,
    Margin,
    Freeze,
    Scheduler,
    Optimizer,
    WeightDecay,
    /// Idle epochs before stopping.
    Stopping,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Margin => "margin",
            SweepAxis::Freeze => "freeze",
            SweepAxis::Scheduler => "scheduler",
            SweepAxis::Optimizer => "optimizer",
            SweepAxis::WeightDecay => "weight_decay",
            SweepAxis::Stopping => "stopping",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "learning_rate" | "lr" => SweepAxis::LearningRate,
            "batch_size" => SweepAxis::BatchSize,
            "margin" => SweepAxis::Margin,
            "freeze" => SweepAxis::Freeze,
            "scheduler" => SweepAxis::Scheduler,
            "optimizer" => SweepAxis::Optimizer,
            "weight_decay" => SweepAxis::WeightDecay,
            "stopping" | "idle_epochs" => SweepAxis::Stopping,
            _ => return Err(Error::Settings(format!("unknown sweep axis `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Int(v) => write!(f, "{v}"),
            SweepValue::Float(v) => write!(f, "{v:e}"),
            SweepValue::Text(s) => f.write_str(s),
        }
    }
}

impl SweepValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            SweepValue::Int(v) => Some(*v as f64),
            SweepValue::Float(v) => Some(*v),
            SweepValue::Text(_) => None,
        }
    }

    fn float(&self, axis: SweepAxis) -> Result<f64> {
        self.as_f64()
            .ok_or_else(|| Error::Settings(format!("{} expects numbers, got `{self}`", axis.as_str())))
    }

    fn count(&self, axis: SweepAxis) -> Result<usize> {
        match self {
            SweepValue::Int(v) if *v >= 0 => Ok(*v as usize),
            _ => Err(Error::Settings(format!(
                "{} expects non-negative integers, got `{self}`",
                axis.as_str()
            ))),
        }
    }

    fn text(&self, axis: SweepAxis) -> Result<&str> {
        match self {
            SweepValue::Text(s) => Ok(s),
            _ => Err(Error::Settings(format!("{} expects strings, got `{self}`", axis.as_str()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    /// When sweeping batch size, rescale the base learning rate with this rule.
    #[serde(default)]
    pub scaling: Option<ScalingRule>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Settings("sweep has no values".into()));
        }
        self.values.iter().try_for_each(|v| self.apply(&TuneConfig::default(), v).map(drop))
    }

    /// The base config with this axis set to `value`.
    pub fn apply(&self, base: &TuneConfig, value: &SweepValue) -> Result<TuneConfig> {
        let mut cfg = base.clone();
        let axis = self.axis;
        match axis {
            SweepAxis::LearningRate => cfg.optimizer.lr = value.float(axis)?,
            SweepAxis::BatchSize => {
                cfg.batch_size = value.count(axis)?;
                if let Some(rule) = self.scaling {
                    cfg.optimizer.lr = scale_lr(base.batch_size, base.optimizer.lr, cfg.batch_size, rule)?;
                }
            }
            SweepAxis::Margin => cfg.loss.margin = value.float(axis)?,
            SweepAxis::Freeze => cfg.freeze = value.text(axis)?.parse::<FreezeSpec>()?,
            SweepAxis::Scheduler => cfg.scheduler = value.text(axis)?.parse::<SchedulerKind>()?,
            SweepAxis::Optimizer => cfg.optimizer.kind = value.text(axis)?.parse::<OptimizerKind>()?,
            SweepAxis::WeightDecay => cfg.optimizer.weight_decay = value.float(axis)?,
            SweepAxis::Stopping => cfg.idle_epochs = value.count(axis)?,
        }
        Ok(cfg)
    }
}

/// One dataset under one measure, base against tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub measure: Measure,
    pub base: EvalReport,
    pub tuned: EvalReport,
    /// PND improvement in percent; absent when the base PND is zero.
    pub improvement_pct: Option<f64>,
    pub z: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridComparison {
    pub measure: Measure,
    pub base: PairGridReport,
    pub tuned: PairGridReport,
    pub tallies: Vec<GridTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub label: String,
    /// Numeric axis value, if any.
    pub x: Option<f64>,
    pub tune: TuneConfig,
    pub record: RunRecord,
    pub eval: Vec<EvalRow>,
    pub grids: Vec<GridComparison>,
    pub layers: LayerChangeReport,
    /// Text-side diagnostics when both encoders were tuned.
    pub text_layers: Option<LayerChangeReport>,
}

impl PointResult {
    /// Subdirectory holding this point's checkpoints and tables.
    pub fn dir_name(&self, index: usize) -> String {
        let clean: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+') { c } else { '_' })
            .collect();
        format!("{index:02}-{clean}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Absent for a single run.
    pub axis: Option<SweepAxis>,
    pub points: Vec<PointResult>,
}

impl SweepReport {
    pub fn axis_name(&self) -> &'static str {
        self.axis.map_or("run", SweepAxis::as_str)
    }
}

struct Baseline {
    eval: Vec<Vec<EvalReport>>,
    grids: Vec<PairGridReport>,
}

fn compare_eval(cfg: &LabConfig, name: &str, base: &[EvalReport], tuned: Vec<EvalReport>) -> Result<Vec<EvalRow>> {
    base.iter()
        .zip(tuned)
        .map(|(b, t)| {
            let improvement_pct = if b.pnd == 0.0 {
                None
            } else {
                Some(100.0 * improvement(b.pnd, t.pnd, -1.0)?)
            };
            let (z, significant) = if b.total == 0 {
                (None, false)
            } else {
                let r = z_test(b.errors, t.errors, b.total, cfg.eval.critical, cfg.eval.ztest_variant)?;
                (r.z, r.significant)
            };
            Ok(EvalRow {
                dataset: name.to_string(),
                measure: b.measure,
                base: b.clone(),
                tuned: t,
                improvement_pct,
                z,
                significant,
            })
        })
        .collect::<Result<Vec<_>>>()
}

fn run_point(
    cfg: &LabConfig,
    data: &LabData,
    baseline: &Baseline,
    label: String,
    x: Option<f64>,
    tune_cfg: TuneConfig,
) -> Result<(PointResult, DualEncoder<f32>)> {
    log::info!("point {label}: tuning");
    let out = tune(&data.base, &data.train, &data.valid, &tune_cfg)?;
    let mut eval = Vec::new();
    for ((name, samples), base) in data.evals.iter().zip(&baseline.eval) {
        let tuned = evaluate(&out.model, samples, &cfg.eval.measures, cfg.eval.rank)?;
        eval.extend(compare_eval(cfg, name, base, tuned)?);
    }
    let mut grids = Vec::new();
    if let Some(pairs) = &data.pairs {
        let tuned = grid_eval(&out.model, pairs, &cfg.eval.measures)?;
        for (b, t) in baseline.grids.iter().zip(tuned) {
            let tallies = grid_compare(b, &t, cfg.eval.critical, cfg.eval.ztest_variant)?;
            grids.push(GridComparison {
                measure: b.measure,
                base: b.clone(),
                tuned: t,
                tallies,
            });
        }
    }
    let layers = diagnose_layers(&data.base.query, &out.model.query)?;
    let text_layers = match tune_cfg.mode {
        TuneMode::BothTuned => Some(diagnose_layers(&data.base.text, &out.model.text)?),
        TuneMode::QueryOnly => None,
    };
    let point = PointResult {
        label,
        x,
        tune: tune_cfg,
        record: out.record,
        eval,
        grids,
        layers,
        text_layers,
    };
    Ok((point, out.model))
}

fn write_point(out: &Path, index: usize, point: &PointResult, model: &DualEncoder<f32>) -> Result<()> {
    let dir = out.join("points").join(point.dir_name(index));
    save_checkpoint(&dir.join("query.ckpt"), &model.config, &model.query)?;
    if point.tune.mode == TuneMode::BothTuned {
        save_checkpoint(&dir.join("text.ckpt"), &model.config, &model.text)?;
    }
    let record = serde_json::to_vec_pretty(&point.record).map_err(|e| Error::Lab(e.to_string()))?;
    write_file(&dir.join("run.json"), record)
}

fn persist(report: &SweepReport, out: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Lab(e.to_string()))?;
    write_file(&out.join(SUMMARY_FILE), json)?;
    emit_report(report, out)
}

/// Tunes and evaluates every sweep point (or the single configured run),
/// writing checkpoints, the summary and all report files under `out`.
/// Completed points are persisted before a failing point's error returns.
/// `parallel` points run concurrently; results do not depend on it.
pub fn run_sweep(cfg: &LabConfig, data: &LabData, out: &Path, parallel: usize) -> Result<SweepReport> {
    cfg.validate()?;
    let baseline = Baseline {
        eval: data
            .evals
            .iter()
            .map(|(_, s)| evaluate(&data.base, s, &cfg.eval.measures, cfg.eval.rank))
            .collect::<Result<_>>()?,
        grids: match &data.pairs {
            Some(p) => grid_eval(&data.base, p, &cfg.eval.measures)?,
            None => Vec::new(),
        },
    };
    let plan: Vec<(String, Option<f64>, TuneConfig)> = match &cfg.sweep {
        Some(s) => s
            .values
            .iter()
            .map(|v| Ok((v.to_string(), v.as_f64(), s.apply(&cfg.tune, v)?)))
            .collect::<Result<_>>()?,
        None => vec![("base".to_string(), None, cfg.tune.clone())],
    };
    let mut report = SweepReport {
        axis: cfg.sweep.as_ref().map(|s| s.axis),
        points: Vec::with_capacity(plan.len()),
    };
    let width = parallel.max(1);
    for chunk in plan.chunks(width) {
        let results: Vec<Result<(PointResult, DualEncoder<f32>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(label, x, tc)| {
                    let baseline = &baseline;
                    scope.spawn(move || run_point(cfg, data, baseline, label.clone(), *x, tc.clone()))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Lab("sweep worker panicked".into()))))
                .collect()
        });
        for ((label, _, _), r) in chunk.iter().zip(results) {
            match r {
                Ok((point, model)) => {
                    write_point(out, report.points.len(), &point, &model)?;
                    report.points.push(point);
                }
                Err(e) => {
                    log::error!("point {label} failed: {e}; persisting {} completed points", report.points.len());
                    persist(&report, out)?;
                    return Err(e);
                }
            }
        }
        persist(&report, out)?;
    }
    Ok(report)
}

/// Loads the configured inputs, runs the sweep and writes a manifest that
/// [`super::replay_lab`] can reproduce.
pub fn run_lab(cfg: &LabConfig, out: &Path, parallel: usize) -> Result<SweepReport> {
    cfg.validate()?;
    let data = LabData::load(cfg)?;
    let report = run_sweep(cfg, &data, out, parallel)?;
    let mut manifest = Manifest::new("lab", cfg, Some(cfg.tune.seed))?;
    for p in cfg.input_paths() {
        manifest.add_input(p)?;
    }
    manifest.record_outputs(out)?;
    manifest.write(out)?;
    Ok(report)
}
