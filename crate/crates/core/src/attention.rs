//! Memory-augmented sparse bilinear attention.
//!
//! A block attends from one or more query vectors over a key/value set that
//! is extended with learned memory rows:
//!
//! ```text
//! B_k[t,i] = relu(W_k k_i) * relu(W_qk q_t)          low-rank bilinear pooling
//! B'_k     = relu(W_Bk B_k)                          D_B -> D_c
//! a_h      = w_s[h] . B'_k[head h slice]             per-head spatial score
//! beta_s   = relu(a)  (or softmax over keys, baseline)
//! beta_c   = sigmoid(W_c mean_i B'_k)                squeeze-excitation gate
//! out_t    = beta_c * LN( sum_i beta_s[t,i,h(d)] relu(W_v v_i) * relu(W_qv q_t) )
//! ```
//!
//! Heads split the `D_B` and `D_c` axes into contiguous equal groups; the
//! per-head weighted sums are concatenated before the shared layer norm.
//! The channel-gate average divides by the number of *input* positions, so
//! memory rows that are exactly zero leave the output bit-for-bit unchanged.
//!
//! Query/key pairs are materialised only where visible (all keys, or keys
//! `<= t` for causal self-attention), with memory rows visible to every query.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// ReLU-pruned, unnormalised spatial weights.
    #[default]
    SparseRelu,
    /// Softmax over the visible keys (ablation / timing baseline).
    SoftmaxBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsaDims {
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub bilinear: usize,
    pub channel: usize,
    pub heads: usize,
    pub memory: usize,
}

impl MsaDims {
    /// Single model width for query/key/value/bilinear axes.
    pub fn uniform(width: usize, channel: usize, heads: usize, memory: usize) -> Self {
        MsaDims {
            query: width,
            key: width,
            value: width,
            bilinear: width,
            channel,
            heads,
            memory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.bilinear % self.heads != 0 || self.channel % self.heads != 0 {
            return Err(Error::contract(format!(
                "heads ({}) must divide D_B ({}) and D_c ({})",
                self.heads, self.bilinear, self.channel
            )));
        }
        if self.query == 0 || self.key == 0 || self.value == 0 {
            return Err(Error::contract("attention widths must be positive"));
        }
        Ok(())
    }
}

/// Parameter handles of one attention block.
#[derive(Debug, Clone)]
pub struct MsaParams {
    pub dims: MsaDims,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_qk: ParamId,
    pub w_qv: ParamId,
    pub w_bk: ParamId,
    /// Concatenated per-head scorers, length `D_c`.
    pub w_s: ParamId,
    pub w_c: ParamId,
    pub mem_k: Option<ParamId>,
    pub mem_v: Option<ParamId>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl MsaParams {
    /// Registers a freshly initialised block under `prefix.*`.
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, dims: MsaDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let d = dims;
        let w_k = ps.insert_xavier(format!("{prefix}.w_k"), d.bilinear, d.key, rng)?;
        let w_v = ps.insert_xavier(format!("{prefix}.w_v"), d.bilinear, d.value, rng)?;
        let w_qk = ps.insert_xavier(format!("{prefix}.w_qk"), d.bilinear, d.query, rng)?;
        let w_qv = ps.insert_xavier(format!("{prefix}.w_qv"), d.bilinear, d.query, rng)?;
        let w_bk = ps.insert_xavier(format!("{prefix}.w_bk"), d.channel, d.bilinear, rng)?;
        let per_head = d.channel / d.heads;
        let w_s = ps.insert_uniform(
            format!("{prefix}.w_s"),
            &[d.channel],
            libm::sqrt(6.0 / (per_head + 1) as f64),
            rng,
        )?;
        let w_c = ps.insert_xavier(format!("{prefix}.w_c"), d.bilinear, d.channel, rng)?;
        let (mem_k, mem_v) = if d.memory > 0 {
            (
                Some(ps.insert_uniform(format!("{prefix}.mem_k"), &[d.memory, d.key], 1.0, rng)?),
                Some(ps.insert_uniform(format!("{prefix}.mem_v"), &[d.memory, d.value], 1.0, rng)?),
            )
        } else {
            (None, None)
        };
        let ln_gain = ps.insert(format!("{prefix}.ln_gain"), Tensor::full(&[d.bilinear], 1.0))?;
        let ln_bias = ps.insert(format!("{prefix}.ln_bias"), Tensor::zeros(&[d.bilinear]))?;
        Ok(MsaParams {
            dims,
            w_k,
            w_v,
            w_qk,
            w_qv,
            w_bk,
            w_s,
            w_c,
            mem_k,
            mem_v,
            ln_gain,
            ln_bias,
        })
    }

    /// Every parameter handle of the block.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = alloc::vec![
            self.w_k, self.w_v, self.w_qk, self.w_qv, self.w_bk, self.w_s, self.w_c
        ];
        v.extend(self.mem_k);
        v.extend(self.mem_v);
        v.push(self.ln_gain);
        v.push(self.ln_bias);
        v
    }
}

/// Which (query, key) pairs are visible, laid out query-major.
///
/// Extended key indices `0..keys` are input rows and `keys..keys + memory`
/// are memory rows. Each query's segment lists its visible input rows in
/// ascending order followed by all memory rows.
#[derive(Debug, Clone)]
pub struct Pattern {
    pub queries: usize,
    pub keys: usize,
    pub memory: usize,
    pub causal: bool,
    pub pair_query: Rc<[usize]>,
    pub pair_key: Rc<[usize]>,
    pub offsets: Rc<[usize]>,
    /// `1 / max(visible input rows, 1)` per query, the channel-gate normaliser.
    pub inv_counts: Rc<[f64]>,
}

impl Pattern {
    pub fn new(queries: usize, keys: usize, memory: usize, causal: bool) -> Result<Self> {
        if keys + memory == 0 {
            return Err(Error::contract("attention over an empty key set"));
        }
        if queries == 0 {
            return Err(Error::contract("attention needs at least one query"));
        }
        let mut pair_query = Vec::new();
        let mut pair_key = Vec::new();
        let mut offsets = alloc::vec![0];
        let mut inv_counts = Vec::with_capacity(queries);
        for t in 0..queries {
            let visible = if causal { (t + 1).min(keys) } else { keys };
            for i in (0..visible).chain(keys..keys + memory) {
                pair_query.push(t);
                pair_key.push(i);
            }
            offsets.push(pair_key.len());
            inv_counts.push(1.0 / visible.max(1) as f64);
        }
        Ok(Pattern {
            queries,
            keys,
            memory,
            causal,
            pair_query: pair_query.into(),
            pair_key: pair_key.into(),
            offsets: offsets.into(),
            inv_counts: inv_counts.into(),
        })
    }

    pub fn pairs(&self) -> usize {
        self.pair_key.len()
    }
}

/// Tape handles produced by one block evaluation.
#[derive(Debug, Clone)]
pub struct MsaTrace {
    /// `T x D_B` attended features.
    pub attended: Var,
    /// `P x H` spatial weights, one row per visible pair.
    pub spatial: Var,
    /// `T x D_B` channel gate.
    pub gate: Var,
    pub pattern: Pattern,
}

impl MsaTrace {
    /// Fraction of spatial weights that are exactly zero.
    pub fn sparsity_fraction(&self, tape: &Tape<'_>) -> f64 {
        let w = tape.value(self.spatial);
        w.iter().filter(|&&x| x == 0.0).count() as f64 / w.len() as f64
    }

    /// Spatial weights of query `t`, as `[head][visible key]`.
    pub fn weights_for_query(&self, tape: &Tape<'_>, t: usize) -> Vec<Vec<f64>> {
        let w = tape.value(self.spatial);
        let h = self.pattern_heads(tape);
        let (lo, hi) = (self.pattern.offsets[t], self.pattern.offsets[t + 1]);
        (0..h).map(|head| (lo..hi).map(|p| w[p * h + head]).collect()).collect()
    }

    fn pattern_heads(&self, tape: &Tape<'_>) -> usize {
        tape.dims(self.spatial).1
    }
}

/// `[K; M_k]` and `[V; M_v]`.
pub fn extend_with_memory<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    params: &MsaParams,
    keys: Var,
    values: Var,
) -> Result<(Var, Var)> {
    let (Some(mk), Some(mv)) = (params.mem_k, params.mem_v) else {
        return Ok((keys, values));
    };
    let mk = tape.param(ps, mk);
    let mv = tape.param(ps, mv);
    let k = tape.concat(&[keys, mk], Axis::Rows)?;
    let v = tape.concat(&[values, mv], Axis::Rows)?;
    Ok((k, v))
}

/// Bilinear pooling of each visible pair: `relu(W_x x_i) * relu(W_q q_t)`,
/// one output row per pair of `pattern`.
pub fn bilinear_pool(
    tape: &mut Tape<'_>,
    query: Var,
    rows: Var,
    w_x: Var,
    w_q: Var,
    pattern: &Pattern,
) -> Result<Var> {
    let row_factor = tape.linear(rows, w_x)?;
    let row_factor = tape.relu(row_factor);
    let query_factor = tape.linear(query, w_q)?;
    let query_factor = tape.relu(query_factor);
    let r = tape.gather_rows(row_factor, pattern.pair_key.clone())?;
    let q = tape.gather_rows(query_factor, pattern.pair_query.clone())?;
    tape.mul(r, q)
}

fn head_matrix(rows: usize, cols: usize, heads: usize, transpose: bool) -> Tensor {
    // rows x cols 0/1 matrix assigning each channel to its head
    let mut t = Tensor::zeros(&[rows, cols]);
    let (channels, per) = if transpose { (cols, cols / heads) } else { (rows, rows / heads) };
    let data = t.data_mut();
    for c in 0..channels {
        let h = c / per;
        if transpose {
            data[h * cols + c] = 1.0;
        } else {
            data[c * cols + h] = 1.0;
        }
    }
    t
}

/// Spatial weights from pooled keys. Returns `(beta_s: P x H, B'_k: P x D_c)`.
pub fn spatial_attention<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    params: &MsaParams,
    pooled_keys: Var,
    pattern: &Pattern,
    mode: AttentionMode,
) -> Result<(Var, Var)> {
    let d = params.dims;
    let w_bk = tape.param(ps, params.w_bk);
    let inter = tape.linear(pooled_keys, w_bk)?;
    let inter = tape.relu(inter);
    let w_s = tape.param(ps, params.w_s);
    let weighted = tape.mul_row(inter, w_s)?;
    let head_sum = tape.constant(head_matrix(d.channel, d.heads, d.heads, false));
    let scores = tape.matmul(weighted, head_sum)?;
    let beta = match mode {
        AttentionMode::SparseRelu => tape.relu(scores),
        AttentionMode::SoftmaxBaseline => tape.segment_softmax(scores, pattern.offsets.clone())?,
    };
    Ok((beta, inter))
}

/// Squeeze-excitation gate `sigmoid(W_c mean_i B'_k[t, i])`, `T x D_B`.
pub fn channel_gate<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    params: &MsaParams,
    intermediate: Var,
    pattern: &Pattern,
) -> Result<Var> {
    let summed = tape.segment_sum(intermediate, pattern.offsets.clone())?;
    let pooled = tape.scale_rows(summed, pattern.inv_counts.clone())?;
    let w_c = tape.param(ps, params.w_c);
    let z = tape.linear(pooled, w_c)?;
    Ok(tape.sigmoid(z))
}

/// Full block. `queries` is `T x D_q`; `keys`/`values` are `N x D_k` / `N x D_v`.
#[allow(clippy::too_many_arguments)]
pub fn msa_forward<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    params: &MsaParams,
    queries: Var,
    keys: Var,
    values: Var,
    causal: bool,
    mode: AttentionMode,
) -> Result<MsaTrace> {
    let d = params.dims;
    let (t, dq) = tape.dims(queries);
    let (n, dk) = tape.dims(keys);
    let (nv, dv) = tape.dims(values);
    if dq != d.query || dk != d.key || dv != d.value || n != nv {
        return Err(Error::dim("msa_forward", tape.shape(keys), tape.shape(values)));
    }
    let (kx, vx) = extend_with_memory(tape, ps, params, keys, values)?;
    let pattern = Pattern::new(t, n, tape.dims(kx).0 - n, causal)?;

    let w_k = tape.param(ps, params.w_k);
    let w_qk = tape.param(ps, params.w_qk);
    let pooled_keys = bilinear_pool(tape, queries, kx, w_k, w_qk, &pattern)?;
    let (beta_s, inter) = spatial_attention(tape, ps, params, pooled_keys, &pattern, mode)?;
    let beta_c = channel_gate(tape, ps, params, inter, &pattern)?;

    // sum_i beta * (relu(W_v v_i) * g_t) == g_t * sum_i beta * relu(W_v v_i)
    let w_v = tape.param(ps, params.w_v);
    let w_qv = tape.param(ps, params.w_qv);
    let value_factor = tape.linear(vx, w_v)?;
    let value_factor = tape.relu(value_factor);
    let query_factor = tape.linear(queries, w_qv)?;
    let query_factor = tape.relu(query_factor);
    let expander = tape.constant(head_matrix(d.heads, d.bilinear, d.heads, true));
    let beta_wide = tape.matmul(beta_s, expander)?;
    let per_pair = tape.gather_rows(value_factor, pattern.pair_key.clone())?;
    let weighted = tape.mul(beta_wide, per_pair)?;
    let summed = tape.segment_sum(weighted, pattern.offsets.clone())?;
    let pre = tape.mul(summed, query_factor)?;

    let gain = tape.param(ps, params.ln_gain);
    let bias = tape.param(ps, params.ln_bias);
    let normed = tape.layer_norm(pre, gain, bias, LN_EPS)?;
    let attended = tape.mul(beta_c, normed)?;
    Ok(MsaTrace {
        attended,
        spatial: beta_s,
        gate: beta_c,
        pattern,
    })
}
