//! Command-line front end. Every command resolves its arguments into a
//! serializable job, runs it into an output directory and writes a
//! manifest from which `replay` can rerun it.

mod jobs;
mod templates;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use adiabat::encoder::Measure;
use adiabat::lab::{LabConfig, SweepAxis, SweepSpec, SweepValue};
use adiabat::metrics::ZVariant;
use adiabat::optim::{scale_lr, OptimizerKind, ScalingRule, SchedulerKind};
use adiabat::tune::EpochPolicy;

pub use jobs::{replay, Job};

#[derive(Debug, Parser)]
#[command(name = "adiabat", version, about = "Query-encoder tuning laboratory for dual-encoder retrieval")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cipher-language corpus and starter configs.
    GenSynth(GenSynthArgs),
    /// Split a triplet file into train / valid / eval slices.
    Split(SplitArgs),
    /// Mine graded arXiv negatives by category and JS distance.
    MineArxiv(MineArxivArgs),
    /// Build triplet files from arXiv negatives, SQuAD or HotpotQA records.
    MakeTriplets(MakeTripletsArgs),
    /// Pretrain a starting encoder checkpoint.
    Pretrain(PretrainArgs),
    /// Tune the query encoder once and evaluate it.
    Tune(TuneArgs),
    /// Tune and evaluate once per value of one setting.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on the configured retrieval sets.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on the cross-language pair grid.
    GridEval(EvalArgs),
    /// Compare two checkpoints tensor by tensor.
    Diagnose(DiagnoseArgs),
    /// Re-emit report tables from a finished tune or sweep directory.
    Report(ReportArgs),
    /// Rerun a manifest and check its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// TOML file with corpus settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Triplet file (one JSON sample per line).
    #[arg(long)]
    pub input: PathBuf,
    /// Also write every (query, positive, negative) combination of the eval slice.
    #[arg(long)]
    pub expand: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArxivArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Papers qualify through a category with at most this many papers.
    #[arg(long, default_value_t = 1000)]
    pub max_category_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletSource {
    Arxiv,
    Squad,
    Hotpotqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Title,
    First,
}

#[derive(Debug, Args)]
pub struct MakeTripletsArgs {
    #[arg(long, value_enum)]
    pub source: TripletSource,
    #[arg(long)]
    pub input: PathBuf,
    /// arXiv: query is the title, or the first abstract sentence.
    #[arg(long, value_enum, default_value_t = Flavor::Title)]
    pub flavor: Flavor,
    /// arXiv: which neighbor (1 = closest, 21 = random) is the negative.
    #[arg(long, default_value_t = 1)]
    pub difficulty: usize,
    /// SQuAD: minimum sentences per paragraph.
    #[arg(long, default_value_t = 0)]
    pub min_candidates: usize,
    /// HotpotQA: minimum passages per question.
    #[arg(long, default_value_t = 10)]
    pub min_passages: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML pretraining settings (as written by gen-synth).
    #[arg(long)]
    pub config: PathBuf,
    /// Seeds both the initial weights and the sample order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasureChoice {
    Cosine,
    Euclidean,
    Both,
}

impl MeasureChoice {
    fn measures(self) -> Vec<Measure> {
        match self {
            MeasureChoice::Cosine => vec![Measure::Cosine],
            MeasureChoice::Euclidean => vec![Measure::Euclidean],
            MeasureChoice::Both => Measure::BOTH.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    Batches,
    Samples,
}

/// Settings shared by commands that tune or evaluate. Each flag overrides
/// the corresponding config value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Freeze spec, e.g. "emb" or "emb, B0-5".
    #[arg(long)]
    pub freeze: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// none, L, Q or E<gamma> (e.g. E0.95).
    #[arg(long)]
    pub scheduler: Option<SchedulerKind>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// With --batch-size, rescale the learning rate from the configured batch size.
    #[arg(long, value_parser = parse_scaling)]
    pub scaling_rule: Option<ScalingRule>,
    #[arg(long, value_enum)]
    pub epoch_policy: Option<PolicyChoice>,
    /// Batches or samples per epoch, depending on the policy.
    #[arg(long)]
    pub epoch_size: Option<usize>,
    #[arg(long)]
    pub idle_epochs: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub measure: Option<MeasureChoice>,
    #[arg(long, value_parser = parse_variant)]
    pub ztest_variant: Option<ZVariant>,
}

fn parse_scaling(s: &str) -> std::result::Result<ScalingRule, String> {
    match s {
        "linear" => Ok(ScalingRule::Linear),
        "sqrt" => Ok(ScalingRule::Sqrt),
        _ => Err(format!("expected linear or sqrt, got `{s}`")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<ZVariant, String> {
    s.parse().map_err(|e: adiabat::Error| e.to_string())
}

impl Overrides {
    pub fn apply(&self, cfg: &mut LabConfig) -> Result<()> {
        let t = &mut cfg.tune;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(f) = &self.freeze {
            t.freeze = f.parse()?;
        }
        if let Some(lr) = self.lr {
            t.optimizer.lr = lr;
        }
        if let Some(b) = self.batch_size {
            if let Some(rule) = self.scaling_rule {
                t.optimizer.lr = scale_lr(t.batch_size, t.optimizer.lr, b, rule)?;
            }
            t.batch_size = b;
        }
        if let Some(m) = self.margin {
            t.loss.margin = m;
        }
        if let Some(k) = self.optimizer {
            t.optimizer.kind = k;
        }
        if let Some(s) = self.scheduler {
            t.scheduler = s;
        }
        if let Some(w) = self.weight_decay {
            t.optimizer.weight_decay = w;
        }
        let size = self.epoch_size;
        t.epoch_policy = match (self.epoch_policy, t.epoch_policy) {
            (Some(PolicyChoice::Batches), _) => EpochPolicy::Batches(size.unwrap_or(1000)),
            (Some(PolicyChoice::Samples), _) => EpochPolicy::Samples(size.unwrap_or(14000)),
            (None, EpochPolicy::Batches(b)) => EpochPolicy::Batches(size.unwrap_or(b)),
            (None, EpochPolicy::Samples(s)) => EpochPolicy::Samples(size.unwrap_or(s)),
        };
        if let Some(i) = self.idle_epochs {
            t.idle_epochs = i;
        }
        if let Some(m) = self.max_epochs {
            t.max_epochs = m;
        }
        if let Some(m) = self.measure {
            cfg.eval.measures = m.measures();
        }
        if let Some(v) = self.ztest_variant {
            cfg.eval.ztest_variant = v;
        }
        if let (Some(rule), Some(sweep)) = (self.scaling_rule, cfg.sweep.as_mut()) {
            sweep.scaling = Some(rule);
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// TOML lab config (as written by gen-synth).
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Swept setting; defaults to the config's [sweep] section.
    #[arg(long)]
    pub axis: Option<SweepAxis>,
    /// One value per flag, e.g. --value 1e-5 --value 1e-3.
    #[arg(long = "value")]
    pub values: Vec<String>,
    /// Points run concurrently; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Query-side checkpoint; defaults to the config's model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Text-side checkpoint; defaults to the config's model.
    #[arg(long)]
    pub text_checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub measure: Option<MeasureChoice>,
    /// Also compute MRR, MAP and P@1.
    #[arg(long)]
    pub rank: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a tune or sweep run.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `<run>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest file or the directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Numbers stay numbers: integers, then floats, then text.
pub fn parse_sweep_value(s: &str) -> SweepValue {
    if let Ok(i) = s.parse::<i64>() {
        SweepValue::Int(i)
    } else if let Ok(f) = s.parse::<f64>() {
        SweepValue::Float(f)
    } else {
        SweepValue::Text(s.to_string())
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn lab_config(path: &Path, overrides: &Overrides) -> Result<LabConfig> {
    let mut cfg = LabConfig::load(&absolute(path)?)?;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Turns parsed arguments into a job and its output directory.
pub fn resolve(command: Command) -> Result<(Job, PathBuf)> {
    Ok(match command {
        Command::GenSynth(a) => {
            let mut spec = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => adiabat::data::SynthCorpusSpec::default(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            (Job::GenSynth(spec), a.out)
        }
        Command::Split(a) => (
            Job::Split {
                input: absolute(&a.input)?,
                expand: a.expand,
            },
            a.out,
        ),
        Command::MineArxiv(a) => (
            Job::MineArxiv {
                input: absolute(&a.input)?,
                max_category_size: a.max_category_size,
                seed: a.seed,
            },
            a.out,
        ),
        Command::MakeTriplets(a) => (
            Job::MakeTriplets {
                source: a.source,
                input: absolute(&a.input)?,
                flavor: a.flavor,
                difficulty: a.difficulty,
                min_candidates: a.min_candidates,
                min_passages: a.min_passages,
            },
            a.out,
        ),
        Command::Pretrain(a) => {
            let mut settings = jobs::PretrainSettings::load(&absolute(&a.config)?)?;
            if let Some(s) = a.seed {
                settings.job.init_seed = s;
                settings.job.train.seed = s;
            }
            (Job::Pretrain(settings), a.out)
        }
        Command::Tune(a) => {
            let mut cfg = lab_config(&a.config, &a.overrides)?;
            cfg.sweep = None;
            (Job::Lab { config: cfg, parallel: 1 }, a.out)
        }
        Command::Sweep(a) => {
            let mut cfg = lab_config(&a.config, &Overrides::default())?;
            if let Some(axis) = a.axis {
                if a.values.is_empty() {
                    bail!("--axis needs at least one --value");
                }
                cfg.sweep = Some(SweepSpec {
                    axis,
                    values: a.values.iter().map(|v| parse_sweep_value(v)).collect(),
                    scaling: None,
                });
            } else if !a.values.is_empty() {
                bail!("--value needs --axis");
            }
            if cfg.sweep.is_none() {
                bail!("no sweep: give --axis and --value or a [sweep] config section");
            }
            a.overrides.apply(&mut cfg)?;
            cfg.validate()?;
            (
                Job::Lab {
                    config: cfg,
                    parallel: a.parallel,
                },
                a.out,
            )
        }
        Command::Eval(a) => eval_job(a, false)?,
        Command::GridEval(a) => eval_job(a, true)?,
        Command::Diagnose(a) => (
            Job::Diagnose {
                before: absolute(&a.before)?,
                after: absolute(&a.after)?,
            },
            a.out,
        ),
        Command::Report(a) => {
            let run = absolute(&a.run)?;
            let out = a.out.unwrap_or_else(|| run.join("report"));
            (Job::Report { run }, out)
        }
        Command::Replay(_) => bail!("replay is not a job"),
    })
}

fn eval_job(a: EvalArgs, grid: bool) -> Result<(Job, PathBuf)> {
    let cfg = LabConfig::load(&absolute(&a.config)?)?;
    let measures = a.measure.map_or(cfg.eval.measures.clone(), MeasureChoice::measures);
    let query = match &a.checkpoint {
        Some(p) => absolute(p)?,
        None => cfg.model.checkpoint.clone(),
    };
    let text = match &a.text_checkpoint {
        Some(p) => absolute(p)?,
        None => cfg.model.checkpoint.clone(),
    };
    let job = jobs::EvalJob {
        query,
        text,
        vocab: cfg.model.vocab.clone(),
        tokenization: cfg.tokenization.clone(),
        datasets: cfg.data.eval.clone(),
        pairs: cfg.data.pairs.clone(),
        measures,
        rank: a.rank,
    };
    if grid && job.pairs.is_none() {
        bail!("config has no [data] pairs file");
    }
    Ok((if grid { Job::GridEval(job) } else { Job::Eval(job) }, a.out))
}

pub fn run(cli: Cli) -> Result<()> {
    let command = cli.command;
    let (job, out) = match command {
        Command::Replay(a) => {
            let report = replay(&a.manifest, &a.out)?;
            println!(
                "replay: {} outputs identical, {} differ, {} missing, {} extra",
                report.matched,
                report.mismatched.len(),
                report.missing.len(),
                report.extra.len()
            );
            for f in report.mismatched.iter().chain(&report.missing).chain(&report.extra) {
                println!("  {f}");
            }
            if !report.identical() {
                bail!("replay did not reproduce the original outputs");
            }
            return Ok(());
        }
        other => resolve(other)?,
    };
    job.run(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
