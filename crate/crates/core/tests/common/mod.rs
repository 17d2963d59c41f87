//! Scalar reference implementation of the whole model.
//!
//! Written from the definitions with plain nested loops and no shared code
//! with the crate beyond parameter lookup. Generic over [`Scalar`] so the same
//! code yields forward-mode directional derivatives through [`Dual`].

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use msa_core::attention::{AttentionMode, MsaParams};
use msa_core::model::{LossWeights, Model, Sample};
use msa_core::{ParamId, ParamSet};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn c(x: f64) -> Self;
    /// A value carrying tangent `d`; plain floats drop it.
    fn seeded(x: f64, d: f64) -> Self;
    fn v(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn relu(self) -> Self {
        if self.v() > 0.0 {
            self
        } else {
            Self::c(0.0)
        }
    }
    fn sigmoid(self) -> Self {
        Self::c(1.0) / (Self::c(1.0) + (-self).exp())
    }
}

impl Scalar for f64 {
    fn c(x: f64) -> Self {
        x
    }
    fn seeded(x: f64, _d: f64) -> Self {
        x
    }
    fn v(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// `v + d * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

impl Scalar for Dual {
    fn c(x: f64) -> Self {
        Dual { v: x, d: 0.0 }
    }
    fn seeded(x: f64, d: f64) -> Self {
        Dual { v: x, d }
    }
    fn v(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }
    fn ln(self) -> Self {
        Dual { v: self.v.ln(), d: self.d / self.v }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }
}

pub type Mat<S> = Vec<Vec<S>>;

/// Parameter values, optionally seeded with a tangent per scalar.
pub struct Weights<'a> {
    pub ps: &'a ParamSet,
    pub tangent: Option<&'a dyn Fn(ParamId, usize) -> f64>,
}

impl<'a> Weights<'a> {
    pub fn plain(ps: &'a ParamSet) -> Self {
        Weights { ps, tangent: None }
    }

    pub fn flat<S: Scalar>(&self, id: ParamId) -> Vec<S> {
        self.ps
            .get(id)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| S::seeded(x, self.tangent.map_or(0.0, |t| t(id, i))))
            .collect()
    }

    /// Row-major view of a 2-D parameter.
    pub fn mat<S: Scalar>(&self, id: ParamId) -> Mat<S> {
        let cols = *self.ps.get(id).shape().last().unwrap();
        self.flat::<S>(id).chunks(cols).map(|c| c.to_vec()).collect()
    }
}

pub fn consts<S: Scalar>(rows: &[Vec<f64>]) -> Mat<S> {
    rows.iter().map(|r| r.iter().map(|&x| S::c(x)).collect()).collect()
}

pub fn values<S: Scalar>(m: &Mat<S>) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.iter().map(|x| x.v()).collect()).collect()
}

/// `W x` with `W` stored `out x in`.
pub fn matvec<S: Scalar>(w: &Mat<S>, x: &[S]) -> Vec<S> {
    w.iter()
        .map(|row| {
            assert_eq!(row.len(), x.len());
            let mut s = S::c(0.0);
            for j in 0..x.len() {
                s = s + row[j] * x[j];
            }
            s
        })
        .collect()
}

pub fn relu_vec<S: Scalar>(x: Vec<S>) -> Vec<S> {
    x.into_iter().map(|v| v.relu()).collect()
}

pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S]) -> Vec<S> {
    let n = S::c(x.len() as f64);
    let mut mean = S::c(0.0);
    for &v in x {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = S::c(0.0);
    for &v in x {
        var = var + (v - mean) * (v - mean);
    }
    var = var / n;
    let sd = (var + S::c(1e-5)).sqrt();
    (0..x.len()).map(|j| gain[j] * ((x[j] - mean) / sd) + bias[j]).collect()
}

/// One attention block, query by query and pair by pair.
pub fn msa<S: Scalar>(
    w: &Weights,
    p: &MsaParams,
    queries: &Mat<S>,
    keys: &Mat<S>,
    vals: &Mat<S>,
    causal: bool,
    mode: AttentionMode,
) -> Mat<S> {
    let heads = p.dims.heads;
    let db = p.dims.bilinear;
    let dc = p.dims.channel;
    let w_k = w.mat::<S>(p.w_k);
    let w_v = w.mat::<S>(p.w_v);
    let w_qk = w.mat::<S>(p.w_qk);
    let w_qv = w.mat::<S>(p.w_qv);
    let w_bk = w.mat::<S>(p.w_bk);
    let w_s = w.flat::<S>(p.w_s);
    let w_c = w.mat::<S>(p.w_c);
    let gain = w.flat::<S>(p.ln_gain);
    let bias = w.flat::<S>(p.ln_bias);
    let mut all_k = keys.clone();
    let mut all_v = vals.clone();
    if let (Some(mk), Some(mv)) = (p.mem_k, p.mem_v) {
        all_k.extend(w.mat::<S>(mk));
        all_v.extend(w.mat::<S>(mv));
    }
    let n = keys.len();
    let mut out = Vec::new();
    for (t, q) in queries.iter().enumerate() {
        let visible_inputs = if causal { (t + 1).min(n) } else { n };
        let visible: Vec<usize> = (0..visible_inputs).chain(n..all_k.len()).collect();
        let qk = relu_vec(matvec(&w_qk, q));
        let qv = relu_vec(matvec(&w_qv, q));
        let mut inter = Vec::new();
        let mut bv = Vec::new();
        for &i in &visible {
            let k = relu_vec(matvec(&w_k, &all_k[i]));
            let bk: Vec<S> = (0..db).map(|d| k[d] * qk[d]).collect();
            inter.push(relu_vec(matvec(&w_bk, &bk)));
            let v = relu_vec(matvec(&w_v, &all_v[i]));
            bv.push((0..db).map(|d| v[d] * qv[d]).collect::<Vec<S>>());
        }
        let per_head = dc / heads;
        let mut beta = vec![vec![S::c(0.0); heads]; visible.len()];
        for h in 0..heads {
            let scores: Vec<S> = inter
                .iter()
                .map(|b| {
                    let mut s = S::c(0.0);
                    for c in h * per_head..(h + 1) * per_head {
                        s = s + b[c] * w_s[c];
                    }
                    s
                })
                .collect();
            match mode {
                AttentionMode::SparseRelu => {
                    for (i, s) in scores.iter().enumerate() {
                        beta[i][h] = s.relu();
                    }
                }
                AttentionMode::SoftmaxBaseline => {
                    let mx = scores.iter().map(|s| s.v()).fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<S> = scores.iter().map(|&s| (s - S::c(mx)).exp()).collect();
                    let mut z = S::c(0.0);
                    for &x in &e {
                        z = z + x;
                    }
                    for i in 0..e.len() {
                        beta[i][h] = e[i] / z;
                    }
                }
            }
        }
        let mut pooled = vec![S::c(0.0); dc];
        for b in &inter {
            for c in 0..dc {
                pooled[c] = pooled[c] + b[c];
            }
        }
        let count = S::c(visible_inputs.max(1) as f64);
        let pooled: Vec<S> = pooled.into_iter().map(|x| x / count).collect();
        let gate: Vec<S> = matvec(&w_c, &pooled).into_iter().map(|x| x.sigmoid()).collect();
        let value_head = db / heads;
        let mut pre = vec![S::c(0.0); db];
        for i in 0..visible.len() {
            for d in 0..db {
                pre[d] = pre[d] + beta[i][d / value_head] * bv[i][d];
            }
        }
        let normed = layer_norm(&pre, &gain, &bias);
        out.push((0..db).map(|d| gate[d] * normed[d]).collect());
    }
    out
}

/// Encoder outputs: `(queries[0..=M], keys[0..=M], values[0..=M])`.
pub struct EncoderOut<S> {
    pub queries: Vec<Vec<S>>,
    pub keys: Vec<Mat<S>>,
    pub values: Vec<Mat<S>>,
}

fn row_update<S: Scalar>(w: &Weights, q: &[S], rows: &Mat<S>, wid: ParamId, bid: ParamId, g: ParamId, b: ParamId) -> Mat<S> {
    let wm = w.mat::<S>(wid);
    let bb = w.flat::<S>(bid);
    let gain = w.flat::<S>(g);
    let bias = w.flat::<S>(b);
    rows.iter()
        .map(|r| {
            let joined: Vec<S> = q.iter().chain(r.iter()).copied().collect();
            let z = matvec(&wm, &joined);
            let z: Vec<S> = (0..z.len()).map(|j| (z[j] + bb[j]).relu() + r[j]).collect();
            layer_norm(&z, &gain, &bias)
        })
        .collect()
}

pub fn encoder<S: Scalar>(w: &Weights, model: &Model, features: &Mat<S>) -> EncoderOut<S> {
    let d = features[0].len();
    let mut q0 = vec![S::c(0.0); d];
    for r in features {
        for j in 0..d {
            q0[j] = q0[j] + r[j];
        }
    }
    let q0 = q0.into_iter().map(|x| x / S::c(features.len() as f64)).collect();
    let mut out = EncoderOut {
        queries: vec![q0],
        keys: vec![features.clone()],
        values: vec![features.clone()],
    };
    for layer in &model.encoder {
        let k = out.keys.last().unwrap().clone();
        let v = out.values.last().unwrap().clone();
        let q = out.queries.last().unwrap().clone();
        let q_new = msa(w, &layer.attention, &vec![q], &k, &v, false, model.config.mode).remove(0);
        let k_new = row_update(w, &q_new, &k, layer.w_key, layer.b_key, layer.ln_key_gain, layer.ln_key_bias);
        let v_new = row_update(w, &q_new, &v, layer.w_value, layer.b_value, layer.ln_value_gain, layer.ln_value_bias);
        out.queries.push(q_new);
        out.keys.push(k_new);
        out.values.push(v_new);
    }
    out
}

/// `(V_c, logits)` of the concept head.
pub fn concept_head<S: Scalar>(w: &Weights, model: &Model, enc: &EncoderOut<S>) -> Option<(Vec<S>, Vec<S>)> {
    let head = model.concept_head.as_ref()?;
    let m = head.tap_layer - 1;
    let vc = msa(
        w,
        &head.attention,
        &vec![enc.queries[m].clone()],
        &enc.keys[m],
        &enc.values[m],
        false,
        model.config.mode,
    )
    .remove(0);
    let b = w.flat::<S>(head.b_out);
    let logits = matvec(&w.mat::<S>(head.w_out), &vc).into_iter().zip(b).map(|(x, b)| x + b).collect();
    Some((vc, logits))
}

pub fn sinusoid(pos: usize, i: usize, width: usize) -> f64 {
    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Decoder logits for `tokens` given the encoder side.
pub fn decoder<S: Scalar>(w: &Weights, model: &Model, enc: &EncoderOut<S>, vc: Option<&[S]>, tokens: &[usize]) -> Mat<S> {
    let dec = &model.decoder;
    let d = dec.width;
    let joined: Vec<S> = enc.queries.iter().flatten().copied().collect();
    let mut fused = matvec(&w.mat::<S>(dec.w_fuse), &joined);
    if let Some(vc) = vc {
        for j in 0..d {
            fused[j] = fused[j] + vc[j];
        }
    }
    let embed = w.mat::<S>(dec.embed);
    let mut h: Mat<S> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| (0..d).map(|i| embed[tok][i] + S::c(sinusoid(pos, i, d))).collect())
        .collect();
    let keys = enc.keys.last().unwrap();
    let vals = enc.values.last().unwrap();
    let mode = model.config.mode;
    for layer in &dec.layers {
        let q: Mat<S> = h.iter().map(|r| (0..d).map(|j| r[j] + fused[j]).collect()).collect();
        let s = msa(w, &layer.self_attention, &q, &h, &h, true, mode);
        let g = w.flat::<S>(layer.ln_self_gain);
        let b = w.flat::<S>(layer.ln_self_bias);
        let a: Mat<S> = (0..h.len())
            .map(|t| {
                let x: Vec<S> = (0..d).map(|j| h[t][j] + s[t][j]).collect();
                layer_norm(&x, &g, &b)
            })
            .collect();
        let c = msa(w, &layer.cross_attention, &a, keys, vals, false, mode);
        let g = w.flat::<S>(layer.ln_cross_gain);
        let b = w.flat::<S>(layer.ln_cross_bias);
        h = (0..a.len())
            .map(|t| {
                let x: Vec<S> = (0..d).map(|j| a[t][j] + c[t][j]).collect();
                layer_norm(&x, &g, &b)
            })
            .collect();
    }
    let w_out = w.mat::<S>(dec.w_out);
    let b_out = w.flat::<S>(dec.b_out);
    h.iter()
        .map(|r| matvec(&w_out, r).into_iter().zip(&b_out).map(|(x, &b)| x + b).collect())
        .collect()
}

/// Mean negative log-likelihood over targets other than `pad`.
pub fn cross_entropy<S: Scalar>(logits: &Mat<S>, targets: &[usize], pad: usize) -> S {
    let mut total = S::c(0.0);
    let mut count = 0.0;
    for (row, &y) in logits.iter().zip(targets) {
        if y == pad {
            continue;
        }
        let mut z = S::c(0.0);
        for &x in row {
            z = z + x.exp();
        }
        total = total + z.ln() - row[y];
        count += 1.0;
    }
    total / S::c(count)
}

/// Mean binary cross-entropy written with the sigmoid directly.
pub fn bce<S: Scalar>(logits: &[S], targets: &[f64]) -> S {
    let mut total = S::c(0.0);
    for (&x, &y) in logits.iter().zip(targets) {
        let p = x.sigmoid();
        total = total - S::c(y) * p.ln() - S::c(1.0 - y) * (S::c(1.0) - p).ln();
    }
    total / S::c(logits.len() as f64)
}

pub struct OracleLosses<S> {
    pub ce: S,
    pub mlc: Option<S>,
    pub total: S,
    pub logits: Mat<S>,
    pub concept_logits: Option<Vec<S>>,
}

pub fn losses<S: Scalar>(w: &Weights, model: &Model, sample: &Sample, lw: LossWeights) -> OracleLosses<S> {
    let feats: Vec<Vec<f64>> = (0..sample.features.matrix_dims().0).map(|i| sample.features.row(i).to_vec()).collect();
    let enc = encoder(w, model, &consts::<S>(&feats));
    let head = concept_head(w, model, &enc);
    let (input, target) = sample.teacher_forcing();
    let logits = decoder(w, model, &enc, head.as_ref().map(|h| h.0.as_slice()), &input);
    let ce = cross_entropy(&logits, &target, msa_core::text::PAD);
    let mlc = head.as_ref().map(|h| bce(&h.1, &sample.concepts.0));
    let mut total = S::c(lw.ce) * ce;
    if let Some(m) = mlc {
        total = total + S::c(lw.mlc) * m;
    }
    OracleLosses {
        ce,
        mlc,
        total,
        logits,
        concept_logits: head.map(|h| h.1),
    }
}

pub mod checks;
pub mod fixtures;
pub mod gradsuite;
