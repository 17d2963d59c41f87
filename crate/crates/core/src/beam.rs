//! Beam search over any next-token log-probability source.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// Produces `log P(next | prefix)` over the whole vocabulary.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub eos: usize,
}

/// A generated continuation (the start prefix is not included).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Exact sum of the per-step log-probabilities of `tokens`.
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first; equal scores ordered by the lexicographically smaller
/// token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    start: &[usize],
    config: BeamConfig,
) -> Result<Hypothesis> {
    if config.width == 0 || config.max_len == 0 {
        return Err(Error::contract("beam width and max length must be at least 1"));
    }
    let mut beams = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut prefix = start.to_vec();
    while beams.iter().any(|h| !h.finished) {
        let mut candidates = Vec::new();
        for h in &beams {
            if h.finished {
                candidates.push(h.clone());
                continue;
            }
            prefix.truncate(start.len());
            prefix.extend_from_slice(&h.tokens);
            let lp = scorer.next_log_probs(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let finished = tok == config.eos || tokens.len() >= config.max_len;
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(config.width);
        beams = candidates;
    }
    Ok(beams.into_iter().min_by(rank).expect("at least one beam"))
}

/// Repeated argmax (lowest id on ties) until EOS or `max_len`.
pub fn greedy_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    start: &[usize],
    max_len: usize,
    eos: usize,
) -> Result<Hypothesis> {
    let mut prefix = start.to_vec();
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while !h.finished {
        let lp = scorer.next_log_probs(&prefix)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f64)>, (i, l)| match best {
                Some((_, b)) if b.total_cmp(l) != Ordering::Less => best,
                _ => Some((i, l)),
            })
            .ok_or_else(|| Error::contract("empty vocabulary"))?;
        h.tokens.push(tok);
        h.log_prob += l;
        prefix.push(tok);
        h.finished = tok == eos || h.tokens.len() >= max_len;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ln(x: f64) -> f64 {
        libm::log(x)
    }

    /// Next-token distribution depends only on the previous token.
    fn chain(prefix: &[usize]) -> Result<Vec<f64>> {
        let last = *prefix.last().unwrap();
        let mut p = vec![f64::NEG_INFINITY; 4];
        p[(last + 1) % 4] = 0.0;
        Ok(p)
    }

    #[test]
    fn deterministic_chain_any_width() {
        for w in 1..=4 {
            let cfg = BeamConfig { width: w, max_len: 5, eos: 3 };
            let h = beam_search(&mut chain, &[0], cfg).unwrap();
            assert_eq!(h.tokens, vec![1, 2, 3]);
            assert_eq!(h.log_prob, 0.0);
            assert!(h.finished);
        }
    }

    #[test]
    fn ties_break_towards_smaller_sequences() {
        let mut flat = |_: &[usize]| Ok(vec![ln(0.5), ln(0.5)]);
        let cfg = BeamConfig { width: 3, max_len: 2, eos: 9 };
        let h = beam_search(&mut flat, &[], cfg).unwrap();
        assert_eq!(h.tokens, vec![0, 0]);
        let g = greedy_search(&mut flat, &[], 2, 9).unwrap();
        assert_eq!(g.tokens, vec![0, 0]);
    }

    #[test]
    fn width_one_matches_greedy() {
        // a deterministic but irregular table keyed on prefix length and last token
        let mut table = |p: &[usize]| {
            let s = (p.len() * 7 + p.last().copied().unwrap_or(0) * 3) % 5;
            let raw: Vec<f64> = (0..5).map(|i| 1.0 + ((i + s) % 5) as f64 + 0.1 * i as f64).collect();
            let z: f64 = raw.iter().sum();
            Ok(raw.iter().map(|r| ln(r / z)).collect())
        };
        for max_len in 1..8 {
            let cfg = BeamConfig { width: 1, max_len, eos: 4 };
            let b = beam_search(&mut table, &[0], cfg).unwrap();
            let g = greedy_search(&mut table, &[0], max_len, 4).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert_eq!(b.log_prob, g.log_prob);
        }
    }

    #[test]
    fn rejects_degenerate_config() {
        let cfg = BeamConfig { width: 0, max_len: 3, eos: 0 };
        assert!(beam_search(&mut chain, &[0], cfg).is_err());
    }
}
