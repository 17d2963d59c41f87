//! Attention-block sweeps shared by the test suite and the acceptance run.

use msa_core::attention::{msa_forward, AttentionMode, MsaDims, MsaParams};
use msa_core::tape::Tape;
use msa_core::{ParamId, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Weights;

pub const MODES: [AttentionMode; 2] = [AttentionMode::SparseRelu, AttentionMode::SoftmaxBaseline];

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// Moves every parameter, layer-norm gains and biases included, off its
/// initial value so that all of them matter.
pub fn jitter(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        for x in ps.get_mut(id).data_mut() {
            *x += rng.random_range(-0.25..0.25);
        }
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct Eval {
    pub out: Vec<f64>,
    pub spatial: Vec<f64>,
    /// `[query][head][visible key]`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

pub fn eval(ps: &ParamSet, p: &MsaParams, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool, mode: AttentionMode) -> Eval {
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let tr = msa_forward(&mut t, ps, p, qv, kv, vv, causal, mode).unwrap();
    let weights = (0..q.matrix_dims().0).map(|i| tr.weights_for_query(&t, i)).collect();
    Eval {
        out: t.value(tr.attended).to_vec(),
        spatial: t.value(tr.spatial).to_vec(),
        weights,
    }
}

/// Every configuration with `N <= 5`, widths `<= 8`, `H` in {1, 2}, memory
/// in {0, 3}, both modes, causal and not. Returns `(cases, max abs diff)`.
pub fn attention_sweep() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        for (dq, dk, dv, db, dc) in [(8, 8, 8, 8, 8), (3, 5, 4, 4, 6), (6, 2, 7, 8, 4)] {
            for heads in [1, 2] {
                for memory in [0, 3] {
                    for mode in MODES {
                        for causal in [false, true] {
                            let dims = MsaDims {
                                query: dq,
                                key: dk,
                                value: dv,
                                bilinear: db,
                                channel: dc,
                                heads,
                                memory,
                            };
                            let mut ps = ParamSet::new();
                            let p = MsaParams::init(&mut ps, "b", dims, &mut rng).unwrap();
                            jitter(&mut ps, &mut rng);
                            let t = if causal { n } else { 1 + n % 3 };
                            let q = random_rows(&mut rng, t, dq);
                            let k = random_rows(&mut rng, n, dk);
                            let v = random_rows(&mut rng, n, dv);
                            let got = eval(&ps, &p, &tensor(&q), &tensor(&k), &tensor(&v), causal, mode);
                            let want = super::msa::<f64>(
                                &Weights::plain(&ps),
                                &p,
                                &super::consts(&q),
                                &super::consts(&k),
                                &super::consts(&v),
                                causal,
                                mode,
                            );
                            worst = worst.max(max_abs(&want.concat(), &got.out));
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    (cases, worst)
}

fn block(seed: u64, heads: usize, memory: usize) -> (ParamSet, MsaParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let p = MsaParams::init(&mut ps, "b", MsaDims::uniform(8, 8, heads, memory), &mut rng).unwrap();
    (ps, p)
}

pub struct Census {
    pub seeds: usize,
    pub mean_zero_fraction: f64,
    /// Seeds whose zero fraction lies strictly inside (0, 1).
    pub strictly_between: usize,
    pub all_nonnegative: bool,
}

/// Sparse-mode spatial weights over seeds `0..seeds`, N = 5, three memory rows.
pub fn sparsity_census(seeds: u64) -> Census {
    let mut total = 0.0;
    let mut between = 0;
    let mut nonneg = true;
    for seed in 0..seeds {
        let (ps, p) = block(seed, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let q = tensor(&random_rows(&mut rng, 1, 8));
        let k = tensor(&random_rows(&mut rng, 5, 8));
        let e = eval(&ps, &p, &q, &k, &k, false, AttentionMode::SparseRelu);
        nonneg &= e.spatial.iter().all(|&w| w >= 0.0);
        let f = e.spatial.iter().filter(|&&w| w == 0.0).count() as f64 / e.spatial.len() as f64;
        total += f;
        if f > 0.0 && f < 1.0 {
            between += 1;
        }
    }
    Census {
        seeds: seeds as usize,
        mean_zero_fraction: total / seeds as f64,
        strictly_between: between,
        all_nonnegative: nonneg,
    }
}

/// Largest `|sum - 1|` of softmax-mode weights per query and head, and the
/// smallest weight seen.
pub fn softmax_normalisation(seeds: u64) -> (f64, f64) {
    let mut dev: f64 = 0.0;
    let mut min = f64::INFINITY;
    for seed in 0..seeds {
        for (heads, memory, causal) in [(1, 0, false), (2, 3, true), (2, 3, false)] {
            let (ps, p) = block(seed, heads, memory);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let n = 1 + (seed as usize % 5);
            let q = tensor(&random_rows(&mut rng, if causal { n } else { 2 }, 8));
            let k = tensor(&random_rows(&mut rng, n, 8));
            let e = eval(&ps, &p, &q, &k, &k, causal, AttentionMode::SoftmaxBaseline);
            for head in e.weights.iter().flatten() {
                dev = dev.max((head.iter().sum::<f64>() - 1.0).abs());
                min = head.iter().copied().fold(min, f64::min);
            }
        }
    }
    (dev, min)
}

/// Largest output difference between zeroed memory rows and no memory, in
/// sparse mode.
pub fn zero_memory_gap(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        for heads in [1, 2] {
            for causal in [false, true] {
                let (mut ps, p) = block(seed, heads, 3);
                for id in [p.mem_k.unwrap(), p.mem_v.unwrap()] {
                    ps.get_mut(id).data_mut().fill(0.0);
                }
                let mut none = p.clone();
                none.mem_k = None;
                none.mem_v = None;
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
                let n = 1 + (seed as usize % 5);
                let q = tensor(&random_rows(&mut rng, if causal { n } else { 1 }, 8));
                let k = tensor(&random_rows(&mut rng, n, 8));
                let v = tensor(&random_rows(&mut rng, n, 8));
                let a = eval(&ps, &p, &q, &k, &v, causal, AttentionMode::SparseRelu);
                let b = eval(&ps, &none, &q, &k, &v, causal, AttentionMode::SparseRelu);
                worst = worst.max(max_abs(&a.out, &b.out));
            }
        }
    }
    worst
}
