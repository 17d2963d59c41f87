//! Image encoder: a stack of attention layers threading a global query.
//!
//! Layer `m` attends from the running query over the current keys/values,
//! then rewrites every key and value row as
//! `LN(relu(W [q_m ; k_i] + b) + k_i)`. Memory rows live inside each layer's
//! attention block and are never carried to the next layer.

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
pub struct EncoderLayerParams {
    pub attention: MsaParams,
    pub w_key: ParamId,
    pub b_key: ParamId,
    pub w_value: ParamId,
    pub b_value: ParamId,
    pub ln_key_gain: ParamId,
    pub ln_key_bias: ParamId,
    pub ln_value_gain: ParamId,
    pub ln_value_bias: ParamId,
}

impl EncoderLayerParams {
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, dims: MsaDims, rng: &mut R) -> Result<Self> {
        let d = dims.key;
        if dims.query != d || dims.value != d || dims.bilinear != d {
            return Err(Error::contract(
                "encoder layers need D_q = D_k = D_v = D_B for the residual updates",
            ));
        }
        let attention = MsaParams::init(ps, &format!("{prefix}.msa"), dims, rng)?;
        let w_key = ps.insert_xavier(format!("{prefix}.w_key"), d, 2 * d, rng)?;
        let b_key = ps.insert(format!("{prefix}.b_key"), Tensor::zeros(&[d]))?;
        let w_value = ps.insert_xavier(format!("{prefix}.w_value"), d, 2 * d, rng)?;
        let b_value = ps.insert(format!("{prefix}.b_value"), Tensor::zeros(&[d]))?;
        let ln_key_gain = ps.insert(format!("{prefix}.ln_key_gain"), Tensor::full(&[d], 1.0))?;
        let ln_key_bias = ps.insert(format!("{prefix}.ln_key_bias"), Tensor::zeros(&[d]))?;
        let ln_value_gain = ps.insert(format!("{prefix}.ln_value_gain"), Tensor::full(&[d], 1.0))?;
        let ln_value_bias = ps.insert(format!("{prefix}.ln_value_bias"), Tensor::zeros(&[d]))?;
        Ok(EncoderLayerParams {
            attention,
            w_key,
            b_key,
            w_value,
            b_value,
            ln_key_gain,
            ln_key_bias,
            ln_value_gain,
            ln_value_bias,
        })
    }
}

/// Keys, values and attended queries of every layer.
///
/// `keys[m]`, `values[m]` are `N x D`; `queries[m]` is `1 x D`. Index 0 is
/// the input state (`queries[0]` is the mean feature row).
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub queries: Vec<Var>,
    /// Spatial-weight sparsity of each layer's attention.
    pub sparsity: Vec<f64>,
}

impl EncoderState {
    pub fn layers(&self) -> usize {
        self.queries.len() - 1
    }

    pub fn final_keys(&self) -> Var {
        *self.keys.last().expect("nonempty")
    }

    pub fn final_values(&self) -> Var {
        *self.values.last().expect("nonempty")
    }
}

/// `K = V = features`, `q_0 = mean of feature rows`.
pub fn init_state(tape: &mut Tape<'_>, features: Var) -> Result<EncoderState> {
    let (n, _) = tape.dims(features);
    if n == 0 {
        return Err(Error::contract("encoder needs at least one feature row"));
    }
    let q0 = tape.mean_axis(features, Axis::Rows)?;
    Ok(EncoderState {
        keys: vec![features],
        values: vec![features],
        queries: vec![q0],
        sparsity: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn update_rows<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    query: Var,
    rows: Var,
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let (n, _) = tape.dims(rows);
    let broadcast = tape.gather_rows(query, Rc::from(vec![0; n]))?;
    let joined = tape.concat(&[broadcast, rows], Axis::Cols)?;
    let w = tape.param(ps, w);
    let b = tape.param(ps, b);
    let z = tape.linear(joined, w)?;
    let z = tape.add_row(z, b)?;
    let z = tape.relu(z);
    let z = tape.add(z, rows)?;
    let g = tape.param(ps, gain);
    let bb = tape.param(ps, bias);
    tape.layer_norm(z, g, bb, LN_EPS)
}

/// Appends one layer's outputs to `state`.
pub fn encoder_layer<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    layer: &EncoderLayerParams,
    state: &mut EncoderState,
    mode: AttentionMode,
) -> Result<()> {
    let k = state.final_keys();
    let v = state.final_values();
    let q = *state.queries.last().expect("nonempty");
    let trace = msa_forward(tape, ps, &layer.attention, q, k, v, false, mode)?;
    let q_new = trace.attended;
    let k_new = update_rows(
        tape,
        ps,
        q_new,
        k,
        layer.w_key,
        layer.b_key,
        layer.ln_key_gain,
        layer.ln_key_bias,
    )?;
    let v_new = update_rows(
        tape,
        ps,
        q_new,
        v,
        layer.w_value,
        layer.b_value,
        layer.ln_value_gain,
        layer.ln_value_bias,
    )?;
    state.sparsity.push(trace.sparsity_fraction(tape));
    state.keys.push(k_new);
    state.values.push(v_new);
    state.queries.push(q_new);
    Ok(())
}

/// Runs the whole stack on an `N x D` feature matrix.
pub fn encode<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    layers: &[EncoderLayerParams],
    features: Var,
    mode: AttentionMode,
) -> Result<EncoderState> {
    let mut state = init_state(tape, features)?;
    for layer in layers {
        encoder_layer(tape, ps, layer, &mut state, mode)?;
    }
    Ok(state)
}
