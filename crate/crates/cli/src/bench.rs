//! Step-time comparison of the sparse and softmax attention modes.

use std::fmt::Write as _;
use std::time::Instant;

use msa_core::attention::AttentionMode;
use msa_core::model::{train_step, Model, Sample};
use msa_core::optim::Adam;
use msa_core::synthetic::{generate_synthetic, SyntheticSpec, CONCEPT_WORDS};
use msa_core::text::{tokenize, Vocab};
use msa_core::GradBuffer;

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub steps: usize,
    pub runs: usize,
    /// Untimed steps before each timed run.
    pub warmup: usize,
    pub regions: usize,
    pub samples: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            steps: 500,
            runs: 3,
            warmup: 20,
            regions: 8,
            samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub mode: AttentionMode,
    pub run: usize,
    pub mean_step: f64,
    pub std_step: f64,
    pub final_loss: f64,
    pub all_finite: bool,
    /// Mean encoder zero-weight fraction at initialisation.
    pub init_sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub runs: Vec<BenchRun>,
    pub sparse: ModeSummary,
    pub softmax: ModeSummary,
    pub sparsity: f64,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.sparse.mean / self.softmax.mean
    }

    pub fn all_finite(&self) -> bool {
        self.runs.iter().all(|r| r.all_finite)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("mode,run,mean_step_s,std_step_s,final_loss,all_finite,init_sparsity\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{:.6},{},{:.6}",
                mode_name(r.mode),
                r.run,
                r.mean_step,
                r.std_step,
                r.final_loss,
                r.all_finite,
                r.init_sparsity
            );
        }
        s
    }
}

pub fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::SparseRelu => "sparse",
        AttentionMode::SoftmaxBaseline => "softmax",
    }
}

fn mean_std(xs: &[f64]) -> ModeSummary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    ModeSummary { mean, std: var.sqrt() }
}

fn bench_data(config: &RunConfig, opts: &BenchOptions) -> Result<(Vec<Sample>, usize)> {
    let spec = SyntheticSpec {
        samples: opts.samples,
        concepts: config.concepts.clamp(1, CONCEPT_WORDS.len()),
        regions: opts.regions,
        dim: config.d_model,
        noise: 0.05,
        activation_prob: 0.25,
        seed: config.seed,
    };
    let data = generate_synthetic(&spec)?;
    let toks: Vec<Vec<String>> = data.reports.iter().map(|r| tokenize(r)).collect();
    let vocab = Vocab::build(&toks, 1)?;
    let targets = data.targets();
    let samples = data
        .features
        .into_iter()
        .zip(&toks)
        .zip(targets)
        .map(|((features, t), concepts)| Sample {
            features,
            tokens: vocab.encode(t),
            concepts,
        })
        .collect();
    Ok((samples, vocab.len()))
}

fn one_run(config: &RunConfig, mode: AttentionMode, run: usize, samples: &[Sample], vocab: usize, opts: &BenchOptions) -> Result<BenchRun> {
    let mut cfg = config.model_config(vocab)?;
    cfg.concepts = config.concepts.clamp(1, CONCEPT_WORDS.len());
    cfg.mode = mode;
    let mut model = Model::new(cfg, config.seed.wrapping_add(run as u64))?;
    let init_sparsity = {
        let s: Vec<f64> = samples
            .iter()
            .take(8)
            .map(|s| model.encoder_sparsity(&s.features).map(|v| v.iter().sum::<f64>() / v.len() as f64))
            .collect::<msa_core::Result<_>>()?;
        s.iter().sum::<f64>() / s.len() as f64
    };
    let mut adam = Adam::new(&model.params, config.adam());
    let settings = config.train_settings();
    let mut grads = GradBuffer::new(&model.params);
    let batches: Vec<Vec<&Sample>> = samples.chunks(settings.batch_size).map(|c| c.iter().collect()).collect();
    let mut times = Vec::with_capacity(opts.steps);
    let mut all_finite = true;
    let mut final_loss = f64::NAN;
    for step in 0..opts.warmup + opts.steps {
        let batch = &batches[step % batches.len()];
        let t0 = Instant::now();
        let l = train_step(&mut model, &mut adam, batch, &settings, &mut grads)?;
        let dt = t0.elapsed().as_secs_f64();
        if step >= opts.warmup {
            times.push(dt);
            all_finite &= l.total.is_finite();
            final_loss = l.total;
        }
    }
    let s = mean_std(&times);
    Ok(BenchRun {
        mode,
        run,
        mean_step: s.mean,
        std_step: s.std,
        final_loss,
        all_finite,
        init_sparsity,
    })
}

/// Runs both modes `opts.runs` times, interleaved so slow drift in machine
/// load affects both equally.
pub fn run(config: &RunConfig, opts: &BenchOptions) -> Result<BenchReport> {
    let (samples, vocab) = bench_data(config, opts)?;
    let mut runs = Vec::new();
    for r in 0..opts.runs {
        for mode in [AttentionMode::SparseRelu, AttentionMode::SoftmaxBaseline] {
            let res = one_run(config, mode, r, &samples, vocab, opts)?;
            log::info!("{} run {r}: {:.6} s/step", mode_name(mode), res.mean_step);
            runs.push(res);
        }
    }
    let per_mode = |m: AttentionMode| -> Vec<f64> { runs.iter().filter(|r| r.mode == m).map(|r| r.mean_step).collect() };
    let sparse = mean_std(&per_mode(AttentionMode::SparseRelu));
    let softmax = mean_std(&per_mode(AttentionMode::SoftmaxBaseline));
    let sp: Vec<f64> = runs
        .iter()
        .filter(|r| r.mode == AttentionMode::SparseRelu)
        .map(|r| r.init_sparsity)
        .collect();
    let sparsity = sp.iter().sum::<f64>() / sp.len() as f64;
    Ok(BenchReport {
        runs,
        sparse,
        softmax,
        sparsity,
    })
}
