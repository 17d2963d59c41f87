//! Epoch loop with per-epoch checkpoints and a CSV loss log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use msa_core::model::{train_epoch, Losses, Model, Sample};
use msa_core::optim::Adam;
use msa_core::GradBuffer;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const LOG_HEADER: &str = "epoch,l_ce,l_mlc,l_all";

/// A model with its optimiser and the number of completed epochs.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, vocab: usize) -> Result<Self> {
        let model = Model::new(config.model_config(vocab)?, config.seed)?;
        let adam = Adam::new(&model.params, config.adam());
        Ok(Trainer { model, adam, epoch: 0 })
    }

    /// Restores parameters, optimiser state and the epoch counter.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_params(&mut self.model.params)?;
        if let Some(a) = &ck.adam {
            self.adam.restore(a.step, a.first.clone(), a.second.clone())?;
        }
        self.epoch = ck.epoch as usize;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.epoch as u32, &self.model.params, Some(&self.adam))
    }

    /// Mean losses over `samples` without updating anything.
    pub fn evaluate(&self, config: &RunConfig, samples: &[Sample]) -> Result<Losses> {
        let w = config.train_settings().weights;
        let mut sum = Losses::default();
        for s in samples {
            let l = self.model.losses(s, w)?;
            sum.ce += l.ce;
            sum.mlc += l.mlc;
            sum.total += l.total;
        }
        let n = samples.len().max(1) as f64;
        Ok(Losses {
            ce: sum.ce / n,
            mlc: sum.mlc / n,
            total: sum.total / n,
        })
    }

    pub fn run_epoch(&mut self, config: &RunConfig, samples: &[Sample]) -> Result<Losses> {
        let l = train_epoch(
            &mut self.model,
            &mut self.adam,
            samples,
            &config.train_settings(),
            config.seed,
            self.epoch,
        )?;
        self.epoch += 1;
        if !l.total.is_finite() {
            return Err(CliError::Data(format!("loss diverged in epoch {}", self.epoch)));
        }
        Ok(l)
    }

    /// Loss of the first optimiser step of the next epoch, with no update.
    pub fn next_step_loss(&self, config: &RunConfig, samples: &[Sample]) -> Result<f64> {
        let order = msa_core::model::epoch_order(samples.len(), config.seed, self.epoch);
        let settings = config.train_settings();
        let batch = &order[..settings.batch_size.min(order.len())];
        let mut grads = GradBuffer::new(&self.model.params);
        let mut total = 0.0;
        for &i in batch {
            total += self
                .model
                .accumulate_gradients(&samples[i], settings.weights, &mut grads, 1.0)?
                .total;
        }
        Ok(total / batch.len() as f64)
    }
}

pub fn log_line(epoch: usize, l: &Losses) -> String {
    format!("{epoch},{:.10},{:.10},{:.10}", l.ce, l.mlc, l.total)
}

/// Appends one line, writing the header first if the file is new or empty.
pub fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let empty = f.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut text = String::new();
    if empty {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    text.push_str(line);
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// Trains up to `config.epochs` completed epochs. Epoch 0 of the log holds
/// the losses before any update when starting fresh.
pub fn train(
    trainer: &mut Trainer,
    config: &RunConfig,
    samples: &[Sample],
    checkpoint: Option<&Path>,
    log: Option<&Path>,
) -> Result<Vec<Losses>> {
    let mut history = Vec::new();
    if trainer.epoch == 0 {
        let l = trainer.evaluate(config, samples)?;
        if let Some(p) = log {
            append_log(p, &log_line(0, &l))?;
        }
        history.push(l);
    }
    while trainer.epoch < config.epochs {
        let l = trainer.run_epoch(config, samples)?;
        log::info!(
            "epoch {} l_ce {:.4} l_mlc {:.4} l_all {:.4}",
            trainer.epoch,
            l.ce,
            l.mlc,
            l.total
        );
        if let Some(p) = checkpoint {
            trainer.checkpoint().save(p)?;
        }
        if let Some(p) = log {
            append_log(p, &log_line(trainer.epoch, &l))?;
        }
        history.push(l);
    }
    Ok(history)
}
