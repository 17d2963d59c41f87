//! Seeded synthetic region-feature / report dataset with a known concept
//! structure.

use alloc::format;
use alloc::vec;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::concepts::{ConceptTarget, ConceptVocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-token concept words, used in this order.
pub const CONCEPT_WORDS: [&str; 40] = [
    "effusion", "pneumothorax", "edema", "consolidation", "atelectasis", "cardiomegaly",
    "opacity", "nodule", "fracture", "pneumonia", "emphysema", "fibrosis", "granuloma",
    "calcification", "hernia", "mass", "scoliosis", "lesion", "infiltrate", "thickening",
    "kyphosis", "pacemaker", "catheter", "tube", "hyperinflation", "congestion", "osteopenia",
    "adenopathy", "bronchiectasis", "cavitation", "collapse", "elevation", "tortuosity",
    "cyst", "clips", "wires", "sternotomy", "spondylosis", "scarring", "deformity",
];

pub const NO_FINDINGS: &str = "no acute findings.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    /// Number of latent concepts `C`.
    pub concepts: usize,
    /// Regions `N` per sample.
    pub regions: usize,
    /// Feature width `D`.
    pub dim: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Independent per-concept activation probability.
    pub activation_prob: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concepts == 0 || self.concepts > CONCEPT_WORDS.len() {
            return Err(Error::contract(format!(
                "concept count {} outside 1..={}",
                self.concepts,
                CONCEPT_WORDS.len()
            )));
        }
        if self.regions * self.dim < self.concepts {
            return Err(Error::contract("feature matrix too small for one block per concept"));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.activation_prob) {
            return Err(Error::contract("noise must be >= 0 and activation probability in [0, 1]"));
        }
        Ok(())
    }

    /// Width of each concept's block in the flattened feature matrix.
    pub fn block(&self) -> usize {
        self.regions * self.dim / self.concepts
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// One `N x D` matrix per sample.
    pub features: Vec<Tensor>,
    pub reports: Vec<String>,
    /// Active concept indices per sample, ascending.
    pub active: Vec<Vec<usize>>,
    pub concept_vocab: ConceptVocab,
    /// Per-concept direction written into its block.
    pub directions: Vec<Vec<f64>>,
}

impl SyntheticData {
    pub fn targets(&self) -> Vec<ConceptTarget> {
        let c = self.concept_vocab.len();
        self.active
            .iter()
            .map(|a| {
                let mut y = alloc::vec![0.0; c];
                for &i in a {
                    y[i] = 1.0;
                }
                ConceptTarget(y)
            })
            .collect()
    }
}

/// One sentence per active concept in index order, or [`NO_FINDINGS`].
pub fn report_for(active: &[usize]) -> String {
    if active.is_empty() {
        return String::from(NO_FINDINGS);
    }
    let parts: Vec<String> = active.iter().map(|&i| format!("{} is seen.", CONCEPT_WORDS[i])).collect();
    parts.join(" ")
}

/// Unit-RMS random directions, one per concept. Concepts whose blocks cover
/// the same feature columns get mutually orthogonal directions (while the
/// block width allows), so mean-pooling over regions stays decodable.
fn concept_directions<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Vec<f64>> {
    let block = spec.block();
    let aligned = spec.dim % block == 0;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.concepts);
    for c in 0..spec.concepts {
        let mut v: Vec<f64> = (0..block).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let col = (c * block) % spec.dim;
        let peers: Vec<usize> = (0..c).filter(|&p| aligned && (p * block) % spec.dim == col).collect();
        if peers.len() < block {
            for &p in &peers {
                let u = &out[p];
                let k = dot(&v, u) / dot(u, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= k * b);
            }
        }
        let rms = libm::sqrt(dot(&v, &v) / block as f64);
        out.push(v.into_iter().map(|x| x / rms).collect());
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let block = spec.block();
    let directions = concept_directions(spec, &mut rng);
    let size = spec.regions * spec.dim;
    let mut features = Vec::with_capacity(spec.samples);
    let mut reports = Vec::with_capacity(spec.samples);
    let mut active_sets = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let active: Vec<usize> = (0..spec.concepts)
            .filter(|_| rng.random::<f64>() < spec.activation_prob)
            .collect();
        let mut x = alloc::vec![0.0; size];
        for &c in &active {
            x[c * block..(c + 1) * block].copy_from_slice(&directions[c]);
        }
        if spec.noise > 0.0 {
            for v in &mut x {
                *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        features.push(Tensor::new(vec![spec.regions, spec.dim], x)?);
        reports.push(report_for(&active));
        active_sets.push(active);
    }
    Ok(SyntheticData {
        features,
        reports,
        active: active_sets,
        concept_vocab: ConceptVocab::from_list(&CONCEPT_WORDS[..spec.concepts])?,
        directions,
    })
}
