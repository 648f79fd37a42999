use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use adiabat::data::{
    expand_eval, gen_synth_corpus, make_arxiv_triplets, mine_arxiv_negatives, partition_hotpotqa, split_msmarco,
    transform_squad, ArxivFlavor, ArxivRecord, HotpotRecord, NegativesEntry, SquadRecord, SynthCorpusSpec,
    Tokenization, TripletSample,
};
use adiabat::encoder::{load_checkpoint, save_checkpoint, DualEncoder, Measure, TuneMode, Vocab};
use adiabat::grid::{grid_eval, Contrast, PairCorpus, PairRecord};
use adiabat::io::{read_jsonl, write_file, write_jsonl};
use adiabat::lab::{
    diagnose_layers, emit_layers, emit_report, emit_scores, replay_lab, run_pretrain, run_sweep, EvalDataset,
    LabConfig, LabData, Manifest, PretrainJob, ReplayReport, SweepReport, SUMMARY_FILE,
};
use adiabat::metrics::evaluate;

use crate::templates::{lab_toml, pretrain_toml};
use crate::{Flavor, TripletSource};

/// Pretraining inputs and settings, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub vocab: PathBuf,
    pub train: PathBuf,
    #[serde(default)]
    pub heldout: Vec<PathBuf>,
    #[serde(default)]
    pub tokenization: Tokenization,
    #[serde(default)]
    pub job: PretrainJob,
}

impl PretrainSettings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut s: PretrainSettings = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in std::iter::once(&mut s.vocab).chain([&mut s.train]).chain(s.heldout.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub query: PathBuf,
    pub text: PathBuf,
    pub vocab: PathBuf,
    pub tokenization: Tokenization,
    pub datasets: Vec<EvalDataset>,
    pub pairs: Option<PathBuf>,
    pub measures: Vec<Measure>,
    pub rank: bool,
}

impl EvalJob {
    fn model(&self) -> Result<(DualEncoder<f32>, Vocab)> {
        let (qc, q) = load_checkpoint::<f32>(&self.query)?;
        let (tc, t) = load_checkpoint::<f32>(&self.text)?;
        if qc != tc {
            bail!("query and text checkpoints have different architectures");
        }
        Ok((DualEncoder::new(qc, q, t, TuneMode::QueryOnly)?, Vocab::load(&self.vocab)?))
    }

    fn inputs(&self, grid: bool) -> Vec<PathBuf> {
        let mut v = vec![self.query.clone(), self.text.clone(), self.vocab.clone()];
        if grid {
            v.extend(self.pairs.clone());
        } else {
            v.extend(self.datasets.iter().map(|d| d.path.clone()));
        }
        v
    }
}

/// A fully resolved command, serialized into its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Job {
    GenSynth(SynthCorpusSpec),
    Split {
        input: PathBuf,
        expand: bool,
    },
    MineArxiv {
        input: PathBuf,
        max_category_size: usize,
        seed: u64,
    },
    MakeTriplets {
        source: TripletSource,
        input: PathBuf,
        flavor: Flavor,
        difficulty: usize,
        min_candidates: usize,
        min_passages: usize,
    },
    Pretrain(PretrainSettings),
    Lab {
        config: LabConfig,
        parallel: usize,
    },
    Eval(EvalJob),
    GridEval(EvalJob),
    Diagnose {
        before: PathBuf,
        after: PathBuf,
    },
    Report {
        run: PathBuf,
    },
}

fn json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, bytes)?;
    Ok(())
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::GenSynth(_) => "gen-synth",
            Job::Split { .. } => "split",
            Job::MineArxiv { .. } => "mine-arxiv",
            Job::MakeTriplets { .. } => "make-triplets",
            Job::Pretrain(_) => "pretrain",
            Job::Lab { .. } => "lab-run",
            Job::Eval(_) => "eval",
            Job::GridEval(_) => "grid-eval",
            Job::Diagnose { .. } => "diagnose",
            Job::Report { .. } => "report",
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Job::GenSynth(s) => Some(s.seed),
            Job::MineArxiv { seed, .. } => Some(*seed),
            Job::Pretrain(s) => Some(s.job.train.seed),
            Job::Lab { config, .. } => Some(config.tune.seed),
            _ => None,
        }
    }

    /// Runs the job into `out` and writes its manifest.
    pub fn run(&self, out: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let inputs = self.execute(out)?;
        let mut manifest = Manifest::new(self.name(), self, self.seed())?;
        for p in &inputs {
            manifest.add_input(p)?;
        }
        manifest.record_outputs(out)?;
        manifest.write(out)?;
        Ok(manifest)
    }

    /// Writes the outputs and returns the files read.
    fn execute(&self, out: &Path) -> Result<Vec<PathBuf>> {
        match self {
            Job::GenSynth(spec) => {
                let c = gen_synth_corpus(spec)?;
                c.vocab.save(&out.join("vocab.txt"))?;
                write_jsonl(&out.join("pretrain.jsonl"), &c.pretrain)?;
                write_jsonl(&out.join("tune_train.jsonl"), &c.tune_train)?;
                write_jsonl(&out.join("tune_valid.jsonl"), &c.tune_valid)?;
                for (lang, h) in c.languages.iter().zip(&c.heldout) {
                    write_jsonl(&out.join("heldout").join(format!("{lang}.jsonl")), h)?;
                }
                write_jsonl(&out.join("pairs.jsonl"), &c.pairs.to_records())?;
                json(&out.join("spec.json"), spec)?;
                write_file(&out.join("pretrain.toml"), pretrain_toml(spec, &c.languages))?;
                write_file(&out.join("lab.toml"), lab_toml(&c.languages))?;
                Ok(vec![])
            }
            Job::Split { input, expand } => {
                let samples: Vec<TripletSample> = read_jsonl(input)?;
                let (train, valid, eval) = split_msmarco(&samples)?;
                write_jsonl(&out.join("train.jsonl"), train)?;
                write_jsonl(&out.join("valid.jsonl"), valid)?;
                write_jsonl(&out.join("eval.jsonl"), eval)?;
                let mut counts = serde_json::json!({
                    "input": samples.len(),
                    "train": train.len(),
                    "valid": valid.len(),
                    "eval": eval.len(),
                });
                if *expand {
                    let (triplets, dropped) = expand_eval(eval);
                    write_jsonl(&out.join("eval_expanded.jsonl"), &triplets)?;
                    counts["expanded"] = triplets.len().into();
                    counts["dropped"] = dropped.into();
                }
                json(&out.join("split.json"), &counts)?;
                Ok(vec![input.clone()])
            }
            Job::MineArxiv {
                input,
                max_category_size,
                seed,
            } => {
                let records: Vec<ArxivRecord> = read_jsonl(input)?;
                let (entries, stats) = mine_arxiv_negatives(&records, *max_category_size, *seed)?;
                write_jsonl(&out.join("negatives.jsonl"), &entries)?;
                json(&out.join("stats.json"), &stats)?;
                log::info!(
                    "kept {} of {} papers; {} with 20 distinct neighbors",
                    stats.kept,
                    stats.input,
                    stats.distinct_twenty
                );
                Ok(vec![input.clone()])
            }
            Job::MakeTriplets {
                source,
                input,
                flavor,
                difficulty,
                min_candidates,
                min_passages,
            } => {
                let stats = match source {
                    TripletSource::Arxiv => {
                        let entries: Vec<NegativesEntry> = read_jsonl(input)?;
                        let flavor = match flavor {
                            Flavor::Title => ArxivFlavor::Title,
                            Flavor::First => ArxivFlavor::First,
                        };
                        let (t, skipped) = make_arxiv_triplets(&entries, flavor, *difficulty)?;
                        write_jsonl(&out.join("triplets.jsonl"), &t)?;
                        serde_json::json!({"input": entries.len(), "written": t.len(), "skipped": skipped})
                    }
                    TripletSource::Squad => {
                        let records: Vec<SquadRecord> = read_jsonl(input)?;
                        let mut t = Vec::new();
                        for r in &records {
                            t.extend(transform_squad(&r.context, &r.question, &r.answers, *min_candidates)?);
                        }
                        write_jsonl(&out.join("triplets.jsonl"), &t)?;
                        serde_json::json!({"input": records.len(), "written": t.len(), "skipped": records.len() - t.len()})
                    }
                    TripletSource::Hotpotqa => {
                        let records: Vec<HotpotRecord> = read_jsonl(input)?;
                        let split = partition_hotpotqa(&records, *min_passages)?;
                        write_jsonl(&out.join("easy.jsonl"), &split.easy)?;
                        write_jsonl(&out.join("medium.jsonl"), &split.medium)?;
                        write_jsonl(&out.join("hard.jsonl"), &split.hard)?;
                        serde_json::json!({
                            "input": records.len(),
                            "easy": split.easy.len(),
                            "medium": split.medium.len(),
                            "hard": split.hard.len(),
                            "skipped": split.dropped,
                        })
                    }
                };
                json(&out.join("stats.json"), &stats)?;
                Ok(vec![input.clone()])
            }
            Job::Pretrain(s) => {
                let vocab = Vocab::load(&s.vocab)?;
                if vocab.len() > s.job.encoder.vocab_size {
                    bail!("vocabulary of {} tokens exceeds encoder vocab_size {}", vocab.len(), s.job.encoder.vocab_size);
                }
                let triplets = s.tokenization.triplets(&vocab, &read_jsonl::<TripletSample>(&s.train)?)?;
                let heldout = s
                    .heldout
                    .iter()
                    .map(|p| Ok(s.tokenization.samples(&vocab, &read_jsonl::<TripletSample>(p)?)))
                    .collect::<Result<Vec<_>>>()?;
                let outcome = run_pretrain(&s.job, &triplets, &heldout)?;
                if !outcome.reached {
                    log::warn!("held-out PND target not reached after {} epochs", outcome.epochs.len());
                }
                save_checkpoint(&out.join("base.ckpt"), &s.job.encoder, &outcome.params)?;
                json(
                    &out.join("pretrain.json"),
                    &serde_json::json!({"reached": outcome.reached, "epochs": outcome.epochs}),
                )?;
                let mut inputs = vec![s.vocab.clone(), s.train.clone()];
                inputs.extend(s.heldout.iter().cloned());
                Ok(inputs)
            }
            Job::Lab { config, parallel } => {
                let data = LabData::load(config)?;
                run_sweep(config, &data, out, *parallel)?;
                Ok(config.input_paths().into_iter().map(Path::to_path_buf).collect())
            }
            Job::Eval(job) => {
                let (model, vocab) = job.model()?;
                let mut rows = Vec::new();
                for d in &job.datasets {
                    let samples = job.tokenization.samples(&vocab, &read_jsonl::<TripletSample>(&d.path)?);
                    for r in evaluate(&model, &samples, &job.measures, job.rank)? {
                        rows.push((d.name.clone(), r));
                    }
                }
                emit_scores(&rows, &out.join("eval.csv"))?;
                json(&out.join("eval.json"), &rows)?;
                Ok(job.inputs(false))
            }
            Job::GridEval(job) => {
                let (model, vocab) = job.model()?;
                let Some(pairs) = &job.pairs else {
                    bail!("no pair corpus configured");
                };
                let corpus = PairCorpus::from_records(&read_jsonl::<PairRecord>(pairs)?)?;
                let reports = grid_eval(&model, &job.tokenization.pairs(&vocab, &corpus), &job.measures)?;
                for r in &reports {
                    for c in Contrast::BOTH {
                        write_file(&out.join(format!("grid-{}-{}.csv", c.tag(), r.measure.as_str())), r.matrix_csv(c)?)?;
                    }
                }
                json(&out.join("grid.json"), &reports)?;
                Ok(job.inputs(true))
            }
            Job::Diagnose { before, after } => {
                let (bc, b) = load_checkpoint::<f32>(before)?;
                let (ac, a) = load_checkpoint::<f32>(after)?;
                if bc != ac {
                    bail!("checkpoints have different architectures");
                }
                let report = diagnose_layers(&b, &a)?;
                emit_layers(&report, out, "layers")?;
                json(&out.join("layers.json"), &report)?;
                Ok(vec![before.clone(), after.clone()])
            }
            Job::Report { run } => {
                let path = run.join(SUMMARY_FILE);
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let report: SweepReport = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
                emit_report(&report, out)?;
                Ok(vec![path])
            }
        }
    }
}

/// Reruns the job recorded in a manifest into `out` and compares outputs.
pub fn replay(manifest: &Path, out: &Path) -> Result<ReplayReport> {
    let original = Manifest::load(manifest)?;
    if original.command == "lab" {
        return Ok(replay_lab(manifest, out)?);
    }
    let job: Job = original.params()?;
    if job.name() != original.command {
        bail!("manifest command `{}` does not match its parameters", original.command);
    }
    original.check_inputs()?;
    let fresh = job.run(out)?;
    Ok(original.compare_outputs(&fresh))
}
