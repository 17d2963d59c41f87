//! Concept head: an attention block over an encoder layer, a linear map to
//! `K` concept logits, and the multi-label BCE loss.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{msa_forward, AttentionMode, MsaDims, MsaParams};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text;

/// Ordered concept list; index order is rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocab {
    concepts: Vec<String>,
    /// Token sequence of each concept, for contiguous matching.
    tokens: Vec<Vec<String>>,
    index: BTreeMap<String, usize>,
}

impl ConceptVocab {
    /// Uses `concepts` in the given order. Entries are normalised; empty
    /// entries and duplicates are rejected.
    pub fn from_list<S: AsRef<str>>(concepts: &[S]) -> Result<Self> {
        let mut out = ConceptVocab {
            concepts: Vec::new(),
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for c in concepts {
            let toks = text::tokenize(c.as_ref());
            if toks.is_empty() {
                return Err(Error::contract(format!("empty concept `{}`", c.as_ref())));
            }
            let name = toks.join(" ");
            if out.index.insert(name.clone(), out.concepts.len()).is_some() {
                return Err(Error::contract(format!("duplicate concept `{name}`")));
            }
            out.concepts.push(name);
            out.tokens.push(toks);
        }
        Ok(out)
    }

    /// Top-`k` tokens by corpus occurrence count (descending, ties broken
    /// lexicographically), skipping `exclude`.
    pub fn from_corpus<S: AsRef<str>>(reports: &[Vec<String>], k: usize, exclude: &[S]) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in reports {
            for tok in r {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        for e in exclude {
            counts.remove(e.as_ref());
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let chosen: Vec<&str> = ranked.into_iter().take(k).map(|(t, _)| t).collect();
        Self::from_list(&chosen)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.index.get(concept).copied()
    }

    /// `y[i] = 1` iff concept `i` occurs as a contiguous token run in `report`.
    pub fn extract(&self, report: &[String]) -> ConceptTarget {
        let y = self
            .tokens
            .iter()
            .map(|c| {
                let hit = report.windows(c.len()).any(|w| w == c.as_slice());
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        ConceptTarget(y)
    }
}

/// Binary multi-label target.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTarget(pub Vec<f64>);

impl ConceptTarget {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("concept targets must be 0 or 1"));
        }
        Ok(ConceptTarget(values))
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone)]
pub struct ConceptHeadParams {
    pub attention: MsaParams,
    /// `K x D_B`.
    pub w_out: ParamId,
    pub b_out: ParamId,
    /// Encoder layer `m` in `1..=M`; the block reads layer `m - 1`.
    pub tap_layer: usize,
}

impl ConceptHeadParams {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        dims: MsaDims,
        concepts: usize,
        tap_layer: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = MsaParams::init(ps, &format!("{prefix}.msa"), dims, rng)?;
        let w_out = ps.insert_xavier(format!("{prefix}.w_out"), concepts, dims.bilinear, rng)?;
        let b_out = ps.insert(format!("{prefix}.b_out"), Tensor::zeros(&[concepts]))?;
        Ok(ConceptHeadParams {
            attention,
            w_out,
            b_out,
            tap_layer,
        })
    }
}

/// `(V_c: 1 x D_B, logits: 1 x K)`.
pub fn concept_forward<'p>(
    tape: &mut Tape<'p>,
    ps: &'p ParamSet,
    head: &ConceptHeadParams,
    state: &EncoderState,
    mode: AttentionMode,
) -> Result<(Var, Var)> {
    let m = head.tap_layer;
    if m == 0 || m > state.layers() {
        return Err(Error::contract(format!(
            "concept tap layer {m} outside 1..={}",
            state.layers()
        )));
    }
    let q = state.queries[m - 1];
    let k = state.keys[m - 1];
    let v = state.values[m - 1];
    let trace = msa_forward(tape, ps, &head.attention, q, k, v, false, mode)?;
    let w = tape.param(ps, head.w_out);
    let b = tape.param(ps, head.b_out);
    let logits = tape.linear(trace.attended, w)?;
    let logits = tape.add_row(logits, b)?;
    Ok((trace.attended, logits))
}

/// Multi-label loss on the tape (mean over concepts).
pub fn mlc_loss(tape: &mut Tape<'_>, logits: Var, target: &ConceptTarget) -> Result<Var> {
    tape.bce_with_logits(logits, &target.0)
}

/// Plain-value multi-label loss, same stable form as [`mlc_loss`].
pub fn mlc_loss_value(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::dim("mlc_loss", &[logits.len()], &[target.len()]));
    }
    if target.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract("concept targets must be 0 or 1"));
    }
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(&x, &y)| crate::tape::stable_bce(x, y))
        .sum();
    Ok(s / logits.len() as f64)
}
