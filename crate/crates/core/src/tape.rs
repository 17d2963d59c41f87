//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; node indices are
//! therefore a topological order and `backward` is a single reverse sweep.
//! Parameters are borrowed from a [`ParamSet`] rather than copied, so a tape
//! lives no longer than the parameters it reads.
//!
//! Broadcasting is limited to "scalar against anything" and "equal shapes".
//! Row-vector broadcasting (bias add, per-column scaling) has explicit ops.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamId, ParamSet};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Rc<[f64]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var, Axis),
    Sum(Var),
    Concat(Vec<Var>, Axis),
    GatherRows(Var, Rc<[usize]>),
    SoftmaxRows(Var),
    SegmentSum(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// An input that receives gradients (readable through [`Tape::grad`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Loads a parameter by reference. Repeated loads return the same node.
    pub fn param(&mut self, params: &'p ParamSet, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let t = params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Borrowed(t.data()),
            op: Op::Param(id),
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// `(rows, cols)` of the matrix view of `v`.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf or parameter node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds `scale` times every parameter gradient on this tape into `out`.
    pub fn accumulate_param_grads(&self, out: &mut GradBuffer, scale: f64) {
        for (node, grad) in self.nodes.iter().zip(&self.leaf_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                out.accumulate(*id, g, scale);
            }
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a (m x k) . b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for t in 0..k {
                    axpy(row, av[i * k + t], &bv[t * n..(t + 1) * n]);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x (m x k) . w^T` with `w` stored as `n x k`, i.e. the usual `W x`
    /// projection applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (n, k2) = self.dims(w);
        if k != k2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..m {
                let xr = &xv[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(xr, &wv[j * k..(j + 1) * k]);
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![m, n], out, Op::Linear(x, w), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let la = self.value(a).len();
        let lb = self.value(b).len();
        let shape = if self.shape(a) == self.shape(b) || lb == 1 {
            self.shape(a).to_vec()
        } else if la == 1 {
            self.shape(b).to_vec()
        } else {
            let name = match op {
                Elementwise::Add => "add",
                Elementwise::Sub => "sub",
                Elementwise::Mul => "mul",
            };
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        };
        let n = la.max(lb);
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: f64, y: f64| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let out: Vec<f64> = (0..n)
            .map(|i| f(av[if la == 1 { 0 } else { i }], bv[if lb == 1 { 0 } else { i }]))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    fn row_broadcast(&mut self, x: Var, b: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return Err(Error::dim(
                if mul { "mul_row" } else { "add_row" },
                self.shape(x),
                self.shape(b),
            ));
        }
        let xv = self.value(x);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let r = &xv[i * n..(i + 1) * n];
            if mul {
                out.extend(r.iter().zip(bv).map(|(p, q)| p * q));
            } else {
                out.extend(r.iter().zip(bv).map(|(p, q)| p + q));
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        let op = if mul { Op::MulRow(x, b) } else { Op::AddRow(x, b) };
        Ok(self.push(shape, out, op, rg))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix (bias add).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, false)
    }

    /// Multiplies every row of an `m x n` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, true)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Rc<[f64]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if factors.len() != m {
            return Err(Error::dim("scale_rows", self.shape(x), &[factors.len()]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(xv[i * n..(i + 1) * n].iter().map(|v| v * factors[i]));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::ScaleRows(x, factors), rg))
    }

    // ---- normalisation and reductions --------------------------------------

    /// Layer normalisation over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x);
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let r = &xv[i * d..(i + 1) * d];
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..d {
                let h = (r[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows (`1 x n` result) or over columns (`m x 1` result).
    pub fn mean_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let (shape, out) = match axis {
            Axis::Rows => {
                if m == 0 {
                    return Err(Error::contract("mean over zero rows"));
                }
                let mut o = vec![0.0; n];
                for i in 0..m {
                    o.iter_mut().zip(&xv[i * n..(i + 1) * n]).for_each(|(a, b)| *a += b);
                }
                o.iter_mut().for_each(|a| *a /= m as f64);
                (vec![1, n], o)
            }
            Axis::Cols => {
                if n == 0 {
                    return Err(Error::contract("mean over zero columns"));
                }
                let o = (0..m)
                    .map(|i| xv[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                (vec![m, 1], o)
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Mean(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (m0, n0) = self.dims(first);
        let mut out = Vec::new();
        let shape = match axis {
            Axis::Rows => {
                let mut m = 0;
                for &p in parts {
                    let (pm, pn) = self.dims(p);
                    if pn != n0 {
                        return Err(Error::dim("concat", self.shape(first), self.shape(p)));
                    }
                    m += pm;
                    out.extend_from_slice(self.value(p));
                }
                vec![m, n0]
            }
            Axis::Cols => {
                let mut n = 0;
                for &p in parts {
                    let (pm, pn) = self.dims(p);
                    if pm != m0 {
                        return Err(Error::dim("concat", self.shape(first), self.shape(p)));
                    }
                    n += pn;
                }
                out.reserve(m0 * n);
                for i in 0..m0 {
                    for &p in parts {
                        let (_, pn) = self.dims(p);
                        out.extend_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
                    }
                }
                vec![m0, n]
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Row `r` of the result is row `indices[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices.iter() {
            if i >= m {
                return Err(Error::Range {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![indices.len(), n], out, Op::GatherRows(x, indices), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > n {
            return Err(Error::Range {
                op: "slice_cols",
                index: end,
                bound: n,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, end - start], out, Op::SliceCols(x, start, end), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&xv[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::SoftmaxRows(x), rg)
    }

    /// Sums contiguous row groups: output row `s` is the sum of rows
    /// `offsets[s]..offsets[s + 1]`.
    pub fn segment_sum(&mut self, x: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        check_offsets("segment_sum", &offsets, m)?;
        let xv = self.value(x);
        let s = offsets.len() - 1;
        let mut out = vec![0.0; s * n];
        for seg in 0..s {
            let o = &mut out[seg * n..(seg + 1) * n];
            for r in offsets[seg]..offsets[seg + 1] {
                o.iter_mut().zip(&xv[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s, n], out, Op::SegmentSum(x, offsets), rg))
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        check_offsets("segment_softmax", &offsets, m)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            for c in 0..n {
                let mx = (lo..hi).map(|r| xv[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in lo..hi {
                    let e = libm::exp(xv[r * n + c] - mx);
                    out[r * n + c] = e;
                    z += e;
                }
                for r in lo..hi {
                    out[r * n + c] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::SegmentSoftmax(x, offsets), rg))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean negative log-softmax of `targets` under `logits (T x V)`,
    /// skipping positions whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= v {
                return Err(Error::Range {
                    op: "cross_entropy",
                    index: y,
                    bound: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            softmax_into(row, &mut probs[i * v..(i + 1) * v]);
            if Some(y) == ignore {
                continue;
            }
            total -= log_softmax_at(row, y);
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("cross_entropy: every target is ignored"));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`,
    /// in the overflow-free form `max(x,0) - x*y + log(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(logits);
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(Error::dim("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::contract("bce_with_logits: targets must be 0 or 1"));
        }
        let total: f64 = xv
            .iter()
            .zip(targets)
            .map(|(&x, &y)| stable_bce(x, y))
            .sum();
        let loss = total / xv.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a one-element `loss`. Leaf and parameter
    /// gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    match &mut self.leaf_grads[idx] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                _ => {}
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_slice();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let da = slot(adj, self, *a);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            da[i * k + t] += dot(gr, &bv[t * n..(t + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let db = slot(adj, self, *b);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            axpy(&mut db[t * n..(t + 1) * n], av[i * k + t], gr);
                        }
                    }
                }
            }
            Op::Linear(x, w) => {
                let (m, k) = self.dims(*x);
                let (n, _) = self.dims(*w);
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.requires_grad(*x) {
                    let dx = slot(adj, self, *x);
                    for i in 0..m {
                        let dr = &mut dx[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(dr, g[i * n + j], &wv[j * k..(j + 1) * k]);
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let dw = slot(adj, self, *w);
                    for i in 0..m {
                        let xr = &xv[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(&mut dw[j * k..(j + 1) * k], g[i * n + j], xr);
                        }
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let la = self.value(*a).len();
                let lb = self.value(*b).len();
                let av = self.value(*a);
                let bv = self.value(*b);
                let pick = |v: &[f64], len: usize, i: usize| v[if len == 1 { 0 } else { i }];
                for (side, this, this_len) in [(0, *a, la), (1, *b, lb)] {
                    if !self.requires_grad(this) {
                        continue;
                    }
                    let d = slot(adj, self, this);
                    for (i, gi) in g.iter().enumerate() {
                        let local = match (op, side) {
                            (Elementwise::Add, _) => 1.0,
                            (Elementwise::Sub, 0) => 1.0,
                            (Elementwise::Sub, _) => -1.0,
                            (Elementwise::Mul, 0) => pick(bv, lb, i),
                            (Elementwise::Mul, _) => pick(av, la, i),
                        };
                        d[if this_len == 1 { 0 } else { i }] += gi * local;
                    }
                }
            }
            Op::Scale(x, s) => {
                let d = slot(adj, self, *x);
                d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = slot(adj, self, *x);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let d = slot(adj, self, *x);
                for i in 0..g.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::AddRow(x, b) | Op::MulRow(x, b) => {
                let mul = matches!(node.op, Op::MulRow(..));
                let (m, n) = self.dims(*x);
                let xv = self.value(*x);
                let bv = self.value(*b);
                if self.requires_grad(*x) {
                    let d = slot(adj, self, *x);
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += if mul { g[i * n + j] * bv[j] } else { g[i * n + j] };
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let d = slot(adj, self, *b);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += if mul { g[i * n + j] * xv[i * n + j] } else { g[i * n + j] };
                        }
                    }
                }
            }
            Op::ScaleRows(x, f) => {
                let (_, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                for (i, fi) in f.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g[i * n + j] * fi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, dcols) = self.dims(*x);
                let gv = self.value(*gain);
                if self.requires_grad(*gain) {
                    let d = slot(adj, self, *gain);
                    for i in 0..m {
                        for j in 0..dcols {
                            d[j] += g[i * dcols + j] * xhat[i * dcols + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let d = slot(adj, self, *bias);
                    for i in 0..m {
                        for j in 0..dcols {
                            d[j] += g[i * dcols + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let d = slot(adj, self, *x);
                    let inv_d = 1.0 / dcols as f64;
                    for i in 0..m {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..dcols {
                            let gh = g[i * dcols + j] * gv[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[i * dcols + j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for j in 0..dcols {
                            let gh = g[i * dcols + j] * gv[j];
                            d[i * dcols + j] +=
                                inv_std[i] * (gh - mean_g - xhat[i * dcols + j] * mean_gx);
                        }
                    }
                }
            }
            Op::Mean(x, axis) => {
                let (m, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                match axis {
                    Axis::Rows => {
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g[j] / m as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g[i] / n as f64;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let d = slot(adj, self, *x);
                d.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.requires_grad(p) {
                            let d = slot(adj, self, p);
                            d.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                        }
                        off += len;
                    }
                }
                Axis::Cols => {
                    let (m, total) = matrix_dims(&node.shape);
                    let mut col = 0;
                    for &p in parts {
                        let (_, pn) = self.dims(p);
                        if self.requires_grad(p) {
                            let d = slot(adj, self, p);
                            for i in 0..m {
                                for j in 0..pn {
                                    d[i * pn + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += pn;
                    }
                }
            },
            Op::GatherRows(x, idxs) => {
                let (_, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                for (r, &i) in idxs.iter().enumerate() {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = self.dims(*x);
                let w = end - start;
                let d = slot(adj, self, *x);
                for i in 0..m {
                    for j in 0..w {
                        d[i * n + start + j] += g[i * w + j];
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Reshape(x) => {
                let d = slot(adj, self, *x);
                d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                for i in 0..m {
                    let y = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] += y[j] * (gr[j] - s);
                    }
                }
            }
            Op::SegmentSum(x, offsets) => {
                let (_, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                for (seg, w) in offsets.windows(2).enumerate() {
                    let gs = &g[seg * n..(seg + 1) * n];
                    for r in w[0]..w[1] {
                        d[r * n..(r + 1) * n].iter_mut().zip(gs).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SegmentSoftmax(x, offsets) => {
                let (_, n) = self.dims(*x);
                let d = slot(adj, self, *x);
                for w in offsets.windows(2) {
                    for c in 0..n {
                        let s: f64 = (w[0]..w[1]).map(|r| out[r * n + c] * g[r * n + c]).sum();
                        for r in w[0]..w[1] {
                            d[r * n + c] += out[r * n + c] * (g[r * n + c] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let (_, v) = self.dims(*logits);
                let scale = g[0] / *count as f64;
                let d = slot(adj, self, *logits);
                for (i, &y) in targets.iter().enumerate() {
                    if Some(y) == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        d[i * v + j] += scale * probs[i * v + j];
                    }
                    d[i * v + y] -= scale;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = self.value(*logits);
                let scale = g[0] / xv.len() as f64;
                let d = slot(adj, self, *logits);
                for i in 0..xv.len() {
                    d[i] += scale * (sigmoid(xv[i]) - targets[i]);
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], tape: &Tape<'_>, v: Var) -> &'a mut Vec<f64> {
    let len = tape.value(v).len();
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn check_offsets(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != rows {
        return Err(Error::contract(alloc::format!(
            "{op}: offsets must start at 0 and end at {rows}"
        )));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract(alloc::format!("{op}: offsets must be non-decreasing")));
    }
    Ok(())
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn stable_bce(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - mx);
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// `log softmax(x)[k]` via log-sum-exp.
pub(crate) fn log_softmax_at(x: &[f64], k: usize) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|&v| libm::exp(v - mx)).sum();
    x[k] - mx - libm::log(z)
}

/// Full log-softmax of a row.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = libm::log(x.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
    x.iter().map(|&v| v - mx - lz).collect()
}
