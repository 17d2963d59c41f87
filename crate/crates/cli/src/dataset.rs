//! Joining feature files with reports, vocabulary files and sample assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use msa_core::concepts::ConceptVocab;
use msa_core::model::Sample;
use msa_core::text::{tokenize, Vocab};

use crate::error::{CliError, Result};
use crate::features::FeatureRecord;
use crate::jsonl::{self, ReportRecord};

/// Function words and report boilerplate never used as concepts.
pub const CONCEPT_STOPWORDS: &[&str] = &[
    "a", "acute", "an", "and", "are", "as", "at", "be", "by", "findings", "for", "from", "has", "in", "is",
    "it", "no", "not", "of", "on", "or", "seen", "the", "there", "this", "to", "was", "were", "with",
];

/// A training or evaluation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
    /// Normalised report tokens, aligned with `samples`.
    pub reports: Vec<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Pairs every feature record with its report; both sides must cover the
/// same ids.
pub fn join(features: Vec<FeatureRecord>, reports: Vec<ReportRecord>) -> Result<Vec<(FeatureRecord, String)>> {
    let mut by_id: BTreeMap<String, String> = BTreeMap::new();
    for r in reports {
        if by_id.insert(r.id.clone(), r.report).is_some() {
            return Err(CliError::Data(format!("duplicate report id `{}`", r.id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        if !seen.insert(f.id.clone()) {
            return Err(CliError::Data(format!("duplicate feature id `{}`", f.id)));
        }
        match by_id.remove(&f.id) {
            Some(r) => out.push((f, r)),
            None => missing.push(f.id),
        }
    }
    if !missing.is_empty() || !by_id.is_empty() {
        let extra: Vec<_> = by_id.into_keys().collect();
        return Err(CliError::Data(format!(
            "ids without report: {missing:?}; reports without features: {extra:?}"
        )));
    }
    Ok(out)
}

pub fn build(pairs: Vec<(FeatureRecord, String)>, vocab: &Vocab, concepts: &ConceptVocab) -> Dataset {
    let mut ds = Dataset {
        ids: Vec::with_capacity(pairs.len()),
        samples: Vec::with_capacity(pairs.len()),
        reports: Vec::with_capacity(pairs.len()),
    };
    for (f, report) in pairs {
        let toks = tokenize(&report);
        ds.samples.push(Sample {
            features: f.features,
            tokens: vocab.encode(&toks),
            concepts: concepts.extract(&toks),
        });
        ds.ids.push(f.id);
        ds.reports.push(toks);
    }
    ds
}

pub fn load(features: &Path, reports: &Path, vocab: &Vocab, concepts: &ConceptVocab) -> Result<Dataset> {
    let f = crate::features::load(features)?;
    let r: Vec<ReportRecord> = jsonl::read(reports)?;
    Ok(build(join(f, r)?, vocab, concepts))
}

/// Corpus tokens one per line, in id order; the special tokens are implicit.
pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    jsonl::write_lines(path, vocab.corpus_tokens())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let lines = jsonl::read_lines(path)?;
    Vocab::from_tokens(lines.iter().map(String::as_str)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn save_concepts(path: &Path, concepts: &ConceptVocab) -> Result<()> {
    jsonl::write_lines(path, concepts.concepts())
}

pub fn load_concepts(path: &Path) -> Result<ConceptVocab> {
    let lines = jsonl::read_lines(path)?;
    ConceptVocab::from_list(&lines).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
