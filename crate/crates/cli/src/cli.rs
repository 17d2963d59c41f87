//! Command-line definitions and subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use msa_core::concepts::ConceptVocab;
use msa_core::synthetic::{generate_synthetic, SyntheticSpec};
use msa_core::text::{tokenize, Vocab};

use crate::bench::{self, BenchOptions};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, CONCEPT_STOPWORDS};
use crate::error::{CliError, Result};
use crate::evaluate;
use crate::features::{self, FeatureRecord};
use crate::jsonl::{self, GeneratedRecord, ReportRecord};
use crate::train::{self, Trainer};

#[derive(Debug, Parser)]
#[command(name = "msa", version, about = "Sparse bilinear attention report generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing a checkpoint and a loss log line every epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint file if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Beam-search reports for every record of a feature file.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated reports against references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Skip ids present on only one side instead of failing.
        #[arg(long)]
        allow_missing: bool,
    },
    /// Time training steps in sparse and softmax attention modes.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Per-run CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Build the token vocabulary (and optionally a concept list) from reports.
    BuildVocab {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
        /// Number of frequency-ranked concepts to extract.
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long, requires = "concepts")]
        concept_out: Option<PathBuf>,
    },
    /// Write a seeded synthetic train/test dataset.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        concepts: usize,
        #[arg(long, default_value_t = 8)]
        regions: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0.25)]
        activation_prob: f64,
        #[arg(long, default_value_t = 1, env = "MSA_SEED")]
        seed: u64,
    },
}

/// Configuration sources shared by the model-bound subcommands. Precedence:
/// preset, config file, `MSA_SEED`, `--set`, then the explicit flags.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub concept_vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::preset(&self.preset)?;
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        c.apply_env()?;
        c.apply_overrides(&self.sets)?;
        let paths = [
            (&self.features, &mut c.features),
            (&self.reports, &mut c.reports),
            (&self.vocab, &mut c.vocab),
            (&self.concept_vocab, &mut c.concept_vocab),
            (&self.checkpoint, &mut c.checkpoint),
            (&self.log, &mut c.log),
        ];
        for (flag, slot) in paths {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{key}` is required (flag --{} or config key)", key.replace('_', "-"))))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => cmd_train(&run.resolve()?, resume),
        Command::Generate { run, out } => cmd_generate(&run.resolve()?, &out),
        Command::Eval {
            generated,
            references,
            allow_missing,
        } => {
            let json = cmd_eval(&generated, &references, allow_missing)?;
            println!("{json}");
            Ok(())
        }
        Command::Bench {
            run,
            steps,
            runs,
            warmup,
            csv,
        } => cmd_bench(
            &run.resolve()?,
            &BenchOptions {
                steps,
                runs,
                warmup,
                ..BenchOptions::default()
            },
            csv.as_deref(),
        ),
        Command::BuildVocab {
            reports,
            min_freq,
            out,
            concepts,
            concept_out,
        } => cmd_build_vocab(&reports, min_freq, &out, concepts.zip(concept_out.as_deref())),
        Command::Synth {
            out_dir,
            train,
            test,
            concepts,
            regions,
            dim,
            noise,
            activation_prob,
            seed,
        } => cmd_synth(
            &out_dir,
            train,
            &SyntheticSpec {
                samples: train + test,
                concepts,
                regions,
                dim,
                noise,
                activation_prob,
                seed,
            },
        ),
    }
}

pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<()> {
    let features = required(&config.features, "features")?;
    let reports = required(&config.reports, "reports")?;
    let vocab = dataset::load_vocab(required(&config.vocab, "vocab")?)?;
    let concepts = match &config.concept_vocab {
        Some(p) => dataset::load_concepts(p)?,
        None if !config.use_concepts => ConceptVocab::from_list::<&str>(&[])?,
        None => return Err(CliError::Usage("`concept_vocab` is required when use_concepts = true".into())),
    };
    if config.use_concepts && concepts.len() != config.concepts {
        return Err(CliError::Data(format!(
            "concept list has {} entries but config.concepts = {}",
            concepts.len(),
            config.concepts
        )));
    }
    let data = dataset::load(features, reports, &vocab, &concepts)?;
    if data.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    let mut trainer = Trainer::new(config, vocab.len())?;
    if let Some(ck) = config.checkpoint.as_deref().filter(|p| resume && p.exists()) {
        trainer.resume(&Checkpoint::load(ck)?)?;
        log::info!("resumed at epoch {}", trainer.epoch);
    }
    let hist = train::train(&mut trainer, config, &data.samples, config.checkpoint.as_deref(), config.log.as_deref())?;
    if let Some(last) = hist.last() {
        println!(
            "epoch {} l_ce {:.6} l_mlc {:.6} l_all {:.6}",
            trainer.epoch, last.ce, last.mlc, last.total
        );
    }
    Ok(())
}

/// Loads the model described by `config` with weights from its checkpoint.
pub fn load_model(config: &RunConfig, vocab: &Vocab) -> Result<msa_core::model::Model> {
    let ck = Checkpoint::load(required(&config.checkpoint, "checkpoint")?)?;
    let mut model = msa_core::model::Model::new(config.model_config(vocab.len())?, config.seed)?;
    ck.restore_params(&mut model.params)?;
    Ok(model)
}

pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<()> {
    let vocab = dataset::load_vocab(required(&config.vocab, "vocab")?)?;
    let records = features::load(required(&config.features, "features")?)?;
    let model = load_model(config, &vocab)?;
    let gen = evaluate::generate(
        &model,
        &vocab,
        records.iter().map(|r| (r.id.as_str(), &r.features)),
        config.beam_width,
        config.max_len,
    )?;
    jsonl::write(out, &gen)
}

pub fn cmd_eval(generated: &Path, references: &Path, allow_missing: bool) -> Result<String> {
    let g: Vec<GeneratedRecord> = jsonl::read(generated)?;
    let r: Vec<ReportRecord> = jsonl::read(references)?;
    Ok(evaluate::to_json(&evaluate::score(&g, &r, allow_missing)?))
}

pub fn cmd_bench(config: &RunConfig, opts: &BenchOptions, csv: Option<&Path>) -> Result<()> {
    let rep = bench::run(config, opts)?;
    if let Some(p) = csv {
        std::fs::write(p, rep.csv()).map_err(|e| CliError::io(p, e))?;
    }
    println!(
        "sparse  mean {:.6} s/step  std {:.6}",
        rep.sparse.mean, rep.sparse.std
    );
    println!(
        "softmax mean {:.6} s/step  std {:.6}",
        rep.softmax.mean, rep.softmax.std
    );
    println!("ratio sparse/softmax {:.4}", rep.ratio());
    println!("sparsity fraction {:.4}", rep.sparsity);
    println!("all losses finite {}", rep.all_finite());
    Ok(())
}

pub fn cmd_build_vocab(
    reports: &Path,
    min_freq: usize,
    out: &Path,
    concepts: Option<(usize, &Path)>,
) -> Result<()> {
    let recs: Vec<ReportRecord> = jsonl::read(reports)?;
    let toks: Vec<Vec<String>> = recs.iter().map(|r| tokenize(&r.report)).collect();
    let vocab = Vocab::build(&toks, min_freq)?;
    dataset::save_vocab(out, &vocab)?;
    println!("{} tokens ({} with specials)", vocab.corpus_tokens().len(), vocab.len());
    if let Some((k, path)) = concepts {
        let cv = ConceptVocab::from_corpus(&toks, k, CONCEPT_STOPWORDS)?;
        dataset::save_concepts(path, &cv)?;
        println!("{} concepts", cv.len());
    }
    Ok(())
}

/// Writes `train.features`, `train.jsonl`, `test.features`, `test.jsonl` and
/// `concepts.txt`; the first `train` samples form the training split.
pub fn cmd_synth(dir: &Path, train: usize, spec: &SyntheticSpec) -> Result<()> {
    if train > spec.samples {
        return Err(CliError::Usage("train split larger than the sample count".into()));
    }
    let data = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut feats: Vec<FeatureRecord> = Vec::new();
    let mut reps: Vec<ReportRecord> = Vec::new();
    for (i, (f, r)) in data.features.into_iter().zip(data.reports).enumerate() {
        let id = format!("s{i:05}");
        feats.push(FeatureRecord {
            id: id.clone(),
            features: f,
        });
        reps.push(ReportRecord { id, report: r });
    }
    let (tf, ef) = feats.split_at(train);
    let (tr, er) = reps.split_at(train);
    features::save(&dir.join("train.features"), tf)?;
    features::save(&dir.join("test.features"), ef)?;
    jsonl::write(&dir.join("train.jsonl"), tr)?;
    jsonl::write(&dir.join("test.jsonl"), er)?;
    dataset::save_concepts(&dir.join("concepts.txt"), &data.concept_vocab)?;
    println!("{} train / {} test samples in {}", tf.len(), ef.len(), dir.display());
    Ok(())
}
