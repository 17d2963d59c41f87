//! The full encoder / concept-head / decoder model and its training step.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMode, MsaDims};
use crate::beam::{beam_search, greedy_search, BeamConfig, Hypothesis};
use crate::concepts::{concept_forward, mlc_loss, ConceptHeadParams, ConceptTarget};
use crate::decoder::{ce_loss, decoder_forward, fuse, total_loss, DecoderParams, FusedContext};
use crate::encoder::{encode, EncoderLayerParams};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{GradBuffer, ParamSet};
use crate::tape::{log_softmax, sigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Shared width of features, queries, keys, values and the bilinear axis.
    pub width: usize,
    /// Intermediate channel width `D_c` of the attention scorer.
    pub channel: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Memory rows per attention block.
    pub memory: usize,
    pub concepts: usize,
    pub vocab: usize,
    /// Encoder layer tapped by the concept head, `1..=encoder_layers`.
    pub tap_layer: usize,
    pub mode: AttentionMode,
    /// Whether the concept head exists and feeds the fused context.
    pub use_concepts: bool,
}

impl ModelConfig {
    pub fn msa_dims(&self) -> MsaDims {
        MsaDims::uniform(self.width, self.channel, self.heads, self.memory)
    }

    pub fn validate(&self) -> Result<()> {
        self.msa_dims().validate()?;
        if self.use_concepts && (self.tap_layer == 0 || self.tap_layer > self.encoder_layers) {
            return Err(Error::contract(format!(
                "concept tap layer {} outside 1..={}",
                self.tap_layer, self.encoder_layers
            )));
        }
        if self.vocab <= EOS {
            return Err(Error::contract("vocabulary must contain the special tokens"));
        }
        Ok(())
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `N x D` region features.
    pub features: Tensor,
    /// Report token ids, without BOS/EOS.
    pub tokens: Vec<usize>,
    pub concepts: ConceptTarget,
}

impl Sample {
    /// Teacher-forcing `(inputs, targets)`: `[BOS, w..]` and `[w.., EOS]`.
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(self.tokens.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&self.tokens);
        let mut target = self.tokens.clone();
        target.push(EOS);
        (input, target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub mlc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, mlc: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub ce: f64,
    /// Zero when the model has no concept head.
    pub mlc: f64,
    pub total: f64,
}

/// Tape handles of one teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub concept_logits: Option<Var>,
    pub ce: Var,
    pub mlc: Option<Var>,
    pub total: Var,
}

/// Encoder-side outputs detached from any tape, for decoding.
#[derive(Debug, Clone)]
pub struct Context {
    pub fused: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    pub concept_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: Vec<EncoderLayerParams>,
    pub concept_head: Option<ConceptHeadParams>,
    pub decoder: DecoderParams,
}

impl Model {
    /// Builds a model with seeded random initialisation. Parameter names and
    /// order depend only on the config.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let dims = config.msa_dims();
        let encoder = (0..config.encoder_layers)
            .map(|m| EncoderLayerParams::init(&mut ps, &format!("encoder.layer{m}"), dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let concept_head = if config.use_concepts {
            Some(ConceptHeadParams::init(
                &mut ps,
                "concepts",
                dims,
                config.concepts,
                config.tap_layer,
                &mut rng,
            )?)
        } else {
            None
        };
        let decoder = DecoderParams::init(
            &mut ps,
            "decoder",
            dims,
            config.encoder_layers,
            config.decoder_layers,
            config.vocab,
            &mut rng,
        )?;
        Ok(Model {
            config,
            params: ps,
            encoder,
            concept_head,
            decoder,
        })
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let (n, d) = features.matrix_dims();
        if features.shape().len() != 2 || d != self.config.width || n == 0 {
            return Err(Error::dim("features", features.shape(), &[0, self.config.width]));
        }
        Ok(())
    }

    /// Encoder, concept head and fusion on `tape`.
    pub fn encode_on<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        features: Var,
    ) -> Result<(FusedContext, Option<Var>)> {
        let ps = &self.params;
        let mode = self.config.mode;
        let state = encode(tape, ps, &self.encoder, features, mode)?;
        let (vc, concept_logits) = match &self.concept_head {
            Some(head) => {
                let (vc, logits) = concept_forward(tape, ps, head, &state, mode)?;
                (Some(vc), Some(logits))
            }
            None => (None, None),
        };
        let fused = fuse(tape, ps, self.decoder.w_fuse, &state.queries, vc)?;
        Ok((
            FusedContext {
                fused,
                keys: state.final_keys(),
                values: state.final_values(),
            },
            concept_logits,
        ))
    }

    /// Teacher-forced pass building every loss term on `tape`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        features: Var,
        sample: &Sample,
        weights: LossWeights,
    ) -> Result<ForwardVars> {
        let (ctx, concept_logits) = self.encode_on(tape, features)?;
        let (input, target) = sample.teacher_forcing();
        let logits = decoder_forward(tape, &self.params, &self.decoder, &ctx, &input, self.config.mode)?;
        let ce = ce_loss(tape, logits, &target)?;
        let mlc = match concept_logits {
            Some(cl) => Some(mlc_loss(tape, cl, &sample.concepts)?),
            None => None,
        };
        let total = total_loss(tape, ce, mlc, weights.ce, weights.mlc)?;
        Ok(ForwardVars {
            logits,
            concept_logits,
            ce,
            mlc,
            total,
        })
    }

    /// Loss values only.
    pub fn losses(&self, sample: &Sample, weights: LossWeights) -> Result<Losses> {
        self.check_features(&sample.features)?;
        let mut tape = Tape::new();
        let f = tape.constant(sample.features.clone());
        let v = self.forward(&mut tape, f, sample, weights)?;
        Ok(Losses {
            ce: tape.item(v.ce),
            mlc: v.mlc.map_or(0.0, |m| tape.item(m)),
            total: tape.item(v.total),
        })
    }

    /// Adds `scale * dL/dtheta` of one sample into `grads`.
    pub fn accumulate_gradients(
        &self,
        sample: &Sample,
        weights: LossWeights,
        grads: &mut GradBuffer,
        scale: f64,
    ) -> Result<Losses> {
        self.check_features(&sample.features)?;
        let mut tape = Tape::new();
        let f = tape.constant(sample.features.clone());
        let v = self.forward(&mut tape, f, sample, weights)?;
        tape.backward(v.total)?;
        tape.accumulate_param_grads(grads, scale);
        Ok(Losses {
            ce: tape.item(v.ce),
            mlc: v.mlc.map_or(0.0, |m| tape.item(m)),
            total: tape.item(v.total),
        })
    }

    pub fn context(&self, features: &Tensor) -> Result<Context> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let (ctx, cl) = self.encode_on(&mut tape, f)?;
        Ok(Context {
            fused: tape.tensor(ctx.fused),
            keys: tape.tensor(ctx.keys),
            values: tape.tensor(ctx.values),
            concept_logits: cl.map(|c| tape.value(c).to_vec()),
        })
    }

    /// Fraction of exactly-zero spatial weights per encoder layer.
    pub fn encoder_sparsity(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let state = encode(&mut tape, &self.params, &self.encoder, f, self.config.mode)?;
        Ok(state.sparsity)
    }

    /// Sigmoid concept probabilities, if the model has a concept head.
    pub fn concept_probabilities(&self, features: &Tensor) -> Result<Option<Vec<f64>>> {
        Ok(self
            .context(features)?
            .concept_logits
            .map(|l| l.iter().map(|&x| sigmoid(x)).collect()))
    }

    /// Next-token log-probabilities after `prefix` (which starts with BOS).
    pub fn next_log_probs(&self, ctx: &Context, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.decode_logits(ctx, prefix)?;
        let v = self.config.vocab;
        let last = &logits.data()[(prefix.len() - 1) * v..];
        Ok(log_softmax(last))
    }

    /// All-position logits for `tokens` under a detached context.
    pub fn decode_logits(&self, ctx: &Context, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fc = FusedContext {
            fused: tape.constant(ctx.fused.clone()),
            keys: tape.constant(ctx.keys.clone()),
            values: tape.constant(ctx.values.clone()),
        };
        let logits = decoder_forward(&mut tape, &self.params, &self.decoder, &fc, tokens, self.config.mode)?;
        Ok(tape.tensor(logits))
    }

    pub fn generate(&self, features: &Tensor, width: usize, max_len: usize) -> Result<Hypothesis> {
        let ctx = self.context(features)?;
        let mut scorer = |p: &[usize]| self.next_log_probs(&ctx, p);
        let cfg = BeamConfig {
            width,
            max_len,
            eos: EOS,
        };
        beam_search(&mut scorer, &[BOS], cfg)
    }

    pub fn generate_greedy(&self, features: &Tensor, max_len: usize) -> Result<Hypothesis> {
        let ctx = self.context(features)?;
        let mut scorer = |p: &[usize]| self.next_log_probs(&ctx, p);
        greedy_search(&mut scorer, &[BOS], max_len, EOS)
    }
}

/// Optimiser settings of the training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

/// Deterministic sample order for `epoch` (0-based).
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
    order.shuffle(&mut rng);
    order
}

/// One optimiser step on the mean loss of `batch`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Sample],
    settings: &TrainSettings,
    grads: &mut GradBuffer,
) -> Result<Losses> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut mean = Losses::default();
    for s in batch {
        let l = model.accumulate_gradients(s, settings.weights, grads, scale)?;
        mean.ce += l.ce * scale;
        mean.mlc += l.mlc * scale;
        mean.total += l.total * scale;
    }
    if let Some(c) = settings.clip_norm {
        grads.clip_global_norm(c);
    }
    adam.step(&mut model.params, grads)?;
    Ok(mean)
}

/// One pass over `samples` in the epoch's shuffled order. Returns the mean of
/// the per-step losses.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut Adam,
    samples: &[Sample],
    settings: &TrainSettings,
    seed: u64,
    epoch: usize,
) -> Result<Losses> {
    let order = epoch_order(samples.len(), seed, epoch);
    let mut grads = GradBuffer::new(&model.params);
    let mut sum = Losses::default();
    let mut steps = 0;
    for chunk in order.chunks(settings.batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let l = train_step(model, adam, &batch, settings, &mut grads)?;
        sum.ce += l.ce;
        sum.mlc += l.mlc;
        sum.total += l.total;
        steps += 1;
    }
    let n = steps.max(1) as f64;
    Ok(Losses {
        ce: sum.ce / n,
        mlc: sum.mlc / n,
        total: sum.total / n,
    })
}
