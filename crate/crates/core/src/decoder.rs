//! Report decoder.
//!
//! The encoder's attended queries are fused into one context vector
//! `v_f = W_f [q_0; ..; q_M] + V_c`. Every decoder layer then runs two
//! attention sub-layers per position `t`:
//!
//! 1. query `v_f + h_t` over the layer inputs `h_0..=h_t` (causal), residual + LN;
//! 2. that output as query over the final encoder keys/values, residual + LN.
//!
//! Layer-0 inputs are token embeddings plus sinusoidal positions. There is no
//! feed-forward sub-layer.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{msa_forward, AttentionMode, MsaDims, MsaParams, LN_EPS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attention: MsaParams,
    pub ln_self_gain: ParamId,
    pub ln_self_bias: ParamId,
    pub cross_attention: MsaParams,
    pub ln_cross_gain: ParamId,
    pub ln_cross_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub width: usize,
    pub vocab: usize,
    /// `D x ((M + 1) D)`, no bias.
    pub w_fuse: ParamId,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl DecoderParams {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        dims: MsaDims,
        encoder_layers: usize,
        decoder_layers: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = dims.bilinear;
        if dims.query != d || dims.key != d || dims.value != d {
            return Err(Error::contract("decoder needs a single model width"));
        }
        let w_fuse = ps.insert_xavier(format!("{prefix}.w_fuse"), d, (encoder_layers + 1) * d, rng)?;
        let embed = ps.insert_uniform(format!("{prefix}.embed"), &[vocab, d], 1.0, rng)?;
        let mut layers = Vec::with_capacity(decoder_layers);
        for l in 0..decoder_layers {
            let p = format!("{prefix}.layer{l}");
            let self_attention = MsaParams::init(ps, &format!("{p}.self"), dims, rng)?;
            let ln_self_gain = ps.insert(format!("{p}.ln_self_gain"), Tensor::full(&[d], 1.0))?;
            let ln_self_bias = ps.insert(format!("{p}.ln_self_bias"), Tensor::zeros(&[d]))?;
            let cross_attention = MsaParams::init(ps, &format!("{p}.cross"), dims, rng)?;
            let ln_cross_gain = ps.insert(format!("{p}.ln_cross_gain"), Tensor::full(&[d], 1.0))?;
            let ln_cross_bias = ps.insert(format!("{p}.ln_cross_bias"), Tensor::zeros(&[d]))?;
            layers.push(DecoderLayerParams {
                self_attention,
                ln_self_gain,
                ln_self_bias,
                cross_attention,
                ln_cross_gain,
                ln_cross_bias,
            });
        }
        let w_out = ps.insert_xavier(format!("{prefix}.w_out"), vocab, d, rng)?;
        let b_out = ps.insert(format!("{prefix}.b_out"), Tensor::zeros(&[vocab]))?;
        Ok(DecoderParams {
            width: d,
            vocab,
            w_fuse,
            embed,
            layers,
            w_out,
            b_out,
        })
    }
}

/// Everything the decoder reads from the encoder side.
#[derive(Debug, Clone, Copy)]
pub struct FusedContext {
    /// `1 x D`.
    pub fused: Var,
    /// `N x D` final encoder keys.
    pub keys: Var,
    /// `N x D` final encoder values.
    pub values: Var,
}

/// `W_f [q_0; ..; q_M] + V_c` (the concept term is optional).
pub fn fuse<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    w_fuse: ParamId,
    queries: &[Var],
    concept_feature: Option<Var>,
) -> Result<Var> {
    let w = tape.param(ps, w_fuse);
    let (_, cols) = tape.dims(w);
    let joined = tape.concat(queries, Axis::Cols)?;
    if tape.dims(joined) != (1, cols) {
        return Err(Error::dim("fuse", tape.shape(joined), tape.shape(w)));
    }
    let v = tape.linear(joined, w)?;
    match concept_feature {
        Some(c) => tape.add(v, c),
        None => Ok(v),
    }
}

/// Sinusoidal position table, `len x width`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, width]);
    let data = t.data_mut();
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / width as f64);
            data[pos * width + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    t
}

/// Logits `T x |V|` for a teacher-forced token sequence.
pub fn decoder_forward<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    params: &DecoderParams,
    ctx: &FusedContext,
    tokens: &[usize],
    mode: AttentionMode,
) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::contract("decoder needs at least one input token"));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= params.vocab) {
        return Err(Error::Range {
            op: "decoder_forward",
            index: bad,
            bound: params.vocab,
        });
    }
    let embed = tape.param(ps, params.embed);
    let emb = tape.gather_rows(embed, Rc::from(tokens))?;
    let pos = tape.constant(positional_encoding(t, params.width));
    let mut h = tape.add(emb, pos)?;
    let fused_rows = tape.gather_rows(ctx.fused, Rc::from(vec![0; t]))?;

    for layer in &params.layers {
        let q = tape.add(h, fused_rows)?;
        // the fused context only steers the query; the residual carries the words
        let s = msa_forward(tape, ps, &layer.self_attention, q, h, h, true, mode)?;
        let a = tape.add(h, s.attended)?;
        let g = tape.param(ps, layer.ln_self_gain);
        let b = tape.param(ps, layer.ln_self_bias);
        let a = tape.layer_norm(a, g, b, LN_EPS)?;
        let c = msa_forward(tape, ps, &layer.cross_attention, a, ctx.keys, ctx.values, false, mode)?;
        let o = tape.add(a, c.attended)?;
        let g = tape.param(ps, layer.ln_cross_gain);
        let b = tape.param(ps, layer.ln_cross_bias);
        h = tape.layer_norm(o, g, b, LN_EPS)?;
    }
    let w = tape.param(ps, params.w_out);
    let b = tape.param(ps, params.b_out);
    let logits = tape.linear(h, w)?;
    tape.add_row(logits, b)
}

/// Mean token negative log-likelihood, PAD targets excluded.
pub fn ce_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets, Some(crate::text::PAD))
}

/// `lambda_ce * ce + lambda_mlc * mlc`.
pub fn total_loss(tape: &mut Tape<'_>, ce: Var, mlc: Option<Var>, lambda_ce: f64, lambda_mlc: f64) -> Result<Var> {
    if lambda_ce < 0.0 || lambda_mlc < 0.0 {
        return Err(Error::contract("loss weights must be nonnegative"));
    }
    let a = tape.scale(ce, lambda_ce);
    match mlc {
        Some(m) => {
            let b = tape.scale(m, lambda_mlc);
            tape.add(a, b)
        }
        None => Ok(a),
    }
}

/// Plain-value form of [`total_loss`].
pub fn total_loss_value(ce: f64, mlc: f64, lambda_ce: f64, lambda_mlc: f64) -> f64 {
    lambda_ce * ce + lambda_mlc * mlc
}
