//! Finite-difference gradient cases shared by the test suite and the
//! acceptance run. Each case records the worst relative error.

use std::rc::Rc;

use msa_core::attention::{msa_forward, AttentionMode, MsaDims, MsaParams};
use msa_core::concepts::{concept_forward, mlc_loss, ConceptTarget};
use msa_core::decoder::{ce_loss, decoder_forward, fuse, total_loss, FusedContext};
use msa_core::encoder::encode;
use msa_core::gradcheck::{check, DEFAULT_STEP};
use msa_core::model::{Model, ModelConfig, Sample};
use msa_core::tape::{Axis, Tape, Var};
use msa_core::{ParamId, ParamSet, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

/// `(case name, max relative error)` in run order.
#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    pub fn check<F>(&mut self, name: String, ps: &ParamSet, f: F)
    where
        F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var>,
    {
        let r = check(ps, DEFAULT_STEP, f).unwrap();
        assert!(r.checked > 0, "{name}: nothing checked");
        self.results.push((name, r.max_rel_error));
    }

    pub fn worst(&self) -> (String, f64) {
        self.results
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

pub fn run_all() -> Suite {
    let mut s = Suite::default();
    for group in GROUPS {
        group(&mut s);
    }
    s
}

pub const GROUPS: [fn(&mut Suite); 8] = [
    linear_algebra_ops,
    elementwise_ops,
    broadcast_ops,
    reductions_and_layout_ops,
    softmax_and_segment_ops,
    loss_ops,
    attention_block_gradients,
    composed_model_gradients,
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any node to a scalar with fixed, distinct weights per entry so
/// every output element gets its own upstream gradient.
fn weighted_sum(t: &mut Tape<'_>, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let n = t.value(x).len();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.5).sin()).collect())?;
    let w = t.constant(w);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

struct Two {
    ps: ParamSet,
    a: ParamId,
    b: ParamId,
}

fn two(seed: u64, a: &[usize], b: &[usize]) -> Two {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let a = ps.insert("a", random(&mut rng, a)).unwrap();
    let b = ps.insert("b", random(&mut rng, b)).unwrap();
    Two { ps, a, b }
}

pub fn linear_algebra_ops(out: &mut Suite) {
    let p = two(1, &[3, 4], &[4, 2]);
    out.check(String::from("matmul"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.matmul(a, b)?;
        weighted_sum(t, y)
    });
    let p = two(2, &[3, 4], &[5, 4]);
    out.check(String::from("linear"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.linear(a, b)?;
        weighted_sum(t, y)
    });
    out.check(String::from("transpose"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.transpose(a)?;
        weighted_sum(t, y)
    });
    out.check(String::from("reshape"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.reshape(a, &[2, 6])?;
        let y = t.sigmoid(y);
        weighted_sum(t, y)
    });
}

pub fn elementwise_ops(out: &mut Suite) {
    let p = two(3, &[2, 3], &[2, 3]);
    out.check(String::from("add"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.add(a, b)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y)
    });
    out.check(String::from("sub"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.sub(a, b)?;
        let y = t.mul(y, a)?;
        weighted_sum(t, y)
    });
    out.check(String::from("mul+scale"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.mul(a, b)?;
        let y = t.scale(y, -2.5);
        weighted_sum(t, y)
    });
    out.check(String::from("relu"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.relu(a);
        let y = t.mul(y, b)?;
        weighted_sum(t, y)
    });
    out.check(String::from("sigmoid"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.sigmoid(a);
        weighted_sum(t, y)
    });
}

pub fn broadcast_ops(out: &mut Suite) {
    let p = two(4, &[3, 4], &[4]);
    out.check(String::from("add_row"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.add_row(a, b)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y)
    });
    out.check(String::from("mul_row"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.mul_row(a, b)?;
        weighted_sum(t, y)
    });
    out.check(String::from("scale_rows"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.scale_rows(a, Rc::from(vec![0.5, -1.0, 2.0]))?;
        weighted_sum(t, y)
    });
    out.check(String::from("layer_norm"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.layer_norm(a, b, b, 1e-5)?;
        weighted_sum(t, y)
    });
}

pub fn reductions_and_layout_ops(out: &mut Suite) {
    let p = two(5, &[4, 3], &[2, 3]);
    for axis in [Axis::Rows, Axis::Cols] {
        out.check(String::from("mean_axis"), &p.ps, move |t, ps| {
            let a = t.param(ps, p.a);
            let y = t.mean_axis(a, axis)?;
            weighted_sum(t, y)
        });
    }
    out.check(String::from("sum"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.mul(a, a)?;
        Ok(t.sum(y))
    });
    out.check(String::from("concat rows"), &p.ps, |t, ps| {
        let (a, b) = (t.param(ps, p.a), t.param(ps, p.b));
        let y = t.concat(&[a, b, a], Axis::Rows)?;
        weighted_sum(t, y)
    });
    let q = two(6, &[3, 2], &[3, 4]);
    out.check(String::from("concat cols"), &q.ps, |t, ps| {
        let (a, b) = (t.param(ps, q.a), t.param(ps, q.b));
        let y = t.concat(&[b, a], Axis::Cols)?;
        weighted_sum(t, y)
    });
    out.check(String::from("gather_rows"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.gather_rows(a, Rc::from(vec![3, 0, 3, 1]))?;
        weighted_sum(t, y)
    });
    out.check(String::from("slice_cols"), &q.ps, |t, ps| {
        let b = t.param(ps, q.b);
        let y = t.slice_cols(b, 1, 3)?;
        weighted_sum(t, y)
    });
}

pub fn softmax_and_segment_ops(out: &mut Suite) {
    let p = two(7, &[5, 3], &[3]);
    out.check(String::from("softmax_rows"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.softmax_rows(a);
        weighted_sum(t, y)
    });
    let offsets: Rc<[usize]> = Rc::from(vec![0, 2, 2, 5]);
    let o = offsets.clone();
    out.check(String::from("segment_sum"), &p.ps, move |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.segment_sum(a, o.clone())?;
        weighted_sum(t, y)
    });
    out.check(String::from("segment_softmax"), &p.ps, move |t, ps| {
        let a = t.param(ps, p.a);
        let y = t.segment_softmax(a, offsets.clone())?;
        weighted_sum(t, y)
    });
}

pub fn loss_ops(out: &mut Suite) {
    let p = two(8, &[4, 6], &[5]);
    out.check(String::from("cross_entropy"), &p.ps, |t, ps| {
        let a = t.param(ps, p.a);
        t.cross_entropy(a, &[2, 0, 5, 1], Some(0))
    });
    out.check(String::from("bce_with_logits"), &p.ps, |t, ps| {
        let b = t.param(ps, p.b);
        let b = t.scale(b, 4.0);
        t.bce_with_logits(b, &[1.0, 0.0, 0.0, 1.0, 1.0])
    });
}

pub fn attention_block_gradients(out: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for mode in [AttentionMode::SparseRelu, AttentionMode::SoftmaxBaseline] {
        for (causal, memory) in [(false, 0), (true, 3), (false, 3)] {
            let dims = MsaDims {
                query: 5,
                key: 4,
                value: 3,
                bilinear: 6,
                channel: 4,
                heads: 2,
                memory,
            };
            let mut ps = ParamSet::new();
            let p = MsaParams::init(&mut ps, "b", dims, &mut rng).unwrap();
            let q = ps.insert("q", random(&mut rng, &[3, 5])).unwrap();
            let k = ps.insert("k", random(&mut rng, &[3, 4])).unwrap();
            let v = ps.insert("v", random(&mut rng, &[3, 3])).unwrap();
            out.check(format!("msa {mode:?} causal={causal}"), &ps, |t, ps| {
                let (qv, kv, vv) = (t.param(ps, q), t.param(ps, k), t.param(ps, v));
                let tr = msa_forward(t, ps, &p, qv, kv, vv, causal, mode)?;
                weighted_sum(t, tr.attended)
            });
        }
    }
}

/// D = 8, N = 3 regions, T = 4 decoder steps, every loss term.
pub fn composed_model_gradients(out: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for mode in [AttentionMode::SparseRelu, AttentionMode::SoftmaxBaseline] {
        let cfg = ModelConfig {
            width: 8,
            channel: 8,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            memory: 2,
            concepts: 4,
            vocab: 7,
            tap_layer: 2,
            mode,
            use_concepts: true,
        };
        let model = Model::new(cfg, 12).unwrap();
        let sample = Sample {
            features: random(&mut rng, &[3, 8]),
            tokens: vec![4, 6, 5],
            concepts: ConceptTarget::new(vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        };
        let (input, target) = sample.teacher_forcing();
        let mut ps = model.params.clone();
        let feats = ps.insert("features", sample.features.clone()).unwrap();
        out.check(format!("model {mode:?}"), &ps, |t, ps| {
            let f = t.param(ps, feats);
            let state = encode(t, ps, &model.encoder, f, mode)?;
            let head = model.concept_head.as_ref().unwrap();
            let (vc, logits_c) = concept_forward(t, ps, head, &state, mode)?;
            let fused = fuse(t, ps, model.decoder.w_fuse, &state.queries, Some(vc))?;
            let ctx = FusedContext {
                fused,
                keys: state.final_keys(),
                values: state.final_values(),
            };
            let logits = decoder_forward(t, ps, &model.decoder, &ctx, &input, mode)?;
            let ce = ce_loss(t, logits, &target)?;
            let mlc = mlc_loss(t, logits_c, &sample.concepts)?;
            total_loss(t, ce, Some(mlc), 1.0, 5.0)
        });
    }
}
