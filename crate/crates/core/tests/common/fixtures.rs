//! Small hand-built cases shared by the unit-style tests and the acceptance
//! runner.

use msa_core::metrics::EvalPair;
use msa_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Never emitted, so every hypothesis runs to `max_len`.
pub const NO_EOS: usize = 99;

/// Three tokens, three steps. Greedy follows token 0 first; the best path
/// starts with the less likely token 1.
pub fn trap(prefix: &[usize]) -> Result<Vec<f64>> {
    let p: [f64; 3] = match prefix {
        [] => [0.5, 0.3, 0.2],
        [0] => [0.35, 0.35, 0.3],
        [1] => [0.9, 0.05, 0.05],
        [0, _] => [0.4, 0.3, 0.3],
        [1, 0] => [0.95, 0.03, 0.02],
        _ => [1.0 / 3.0; 3],
    };
    Ok(p.iter().map(|x| x.ln()).collect())
}

/// Best of all 27 three-token sequences: `(tokens, log_prob, count)`.
pub fn enumerate<F: FnMut(&[usize]) -> Result<Vec<f64>>>(f: &mut F) -> (Vec<usize>, f64, usize) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut count = 0;
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let s = [a, b, c];
                let lp = f(&[]).unwrap()[a] + f(&s[..1]).unwrap()[b] + f(&s[..2]).unwrap()[c];
                count += 1;
                if lp > best.1 {
                    best = (s.to_vec(), lp);
                }
            }
        }
    }
    (best.0, best.1, count)
}

/// Seeded next-token distributions over three tokens keyed on the prefix.
pub fn random_table(seed: u64) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
    move |prefix: &[usize]| {
        let key = prefix.iter().fold(seed, |acc, &t| acc.wrapping_mul(31).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        Ok(w.iter().map(|x| (x / z).ln()).collect())
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn corpus(pairs: &[(&str, &[&str])]) -> Vec<EvalPair> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (c, rs))| EvalPair::new(format!("p{i}"), words(c), rs.iter().map(|r| words(r)).collect()))
        .collect()
}

pub fn brevity() -> Vec<EvalPair> {
    corpus(&[("the cat sat", &["the cat sat down"])])
}

pub fn transposed() -> Vec<EvalPair> {
    corpus(&[("a b c d", &["a c b d"])])
}

pub fn mini() -> Vec<EvalPair> {
    corpus(&[
        ("the heart size is normal .", &["heart size is normal .", "the heart is normal in size ."]),
        ("no pleural effusion is seen .", &["there is no pleural effusion ."]),
        ("mild edema is seen in the lungs .", &["mild pulmonary edema is seen .", "edema is mild ."]),
    ])
}

pub fn repeats() -> Vec<EvalPair> {
    corpus(&[
        ("the the the the", &["the cat is on the mat"]),
        ("a cat is on the mat", &["the cat is on the mat", "there is a cat on the mat"]),
    ])
}

pub fn self_match() -> Vec<EvalPair> {
    corpus(&[("alpha beta gamma delta", &["alpha beta gamma delta"]), ("one two three four", &["one two three four"])])
}

pub fn disjoint() -> Vec<EvalPair> {
    corpus(&[("x y", &["alpha beta"]), ("z w", &["one two"])])
}

/// Values frozen from `fixtures/metrics_oracle.py`.
pub mod expected {
    pub const BREVITY_BLEU: [f64; 4] = [0.7165313106, 0.7165313106, 0.7165313106, 0.0];
    pub const BREVITY_ROUGE: f64 = 0.8356164384;
    pub const TRANSPOSED_BLEU: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
    pub const TRANSPOSED_ROUGE: f64 = 0.75;
    pub const MINI_BLEU: [f64; 4] = [0.8, 0.6507913735, 0.5328134523, 0.4072308901];
    pub const MINI_ROUGE: f64 = 0.7746940559;
    pub const MINI_CIDER_PER: [f64; 3] = [5.8781876777, 3.5, 2.4376580528];
    pub const MINI_CIDER: f64 = 3.9386152435;
    pub const REPEATS_BLEU: [f64; 4] = [0.6549846025, 0.5789300675, 0.515768055, 0.4868202184];
    pub const REPEATS_ROUGE: f64 = 0.6097046414;
    pub const REPEATS_CIDER_PER: [f64; 2] = [0.0, 1.5088834765];
}
