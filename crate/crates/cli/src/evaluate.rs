//! Generation over a dataset and metric evaluation of generated reports.

use std::collections::BTreeMap;

use msa_core::metrics::{evaluate, EvalPair, MetricReport};
use msa_core::model::Model;
use msa_core::text::{tokenize, Vocab};
use msa_core::Tensor;

use crate::error::{CliError, Result};
use crate::jsonl::{GeneratedRecord, ReportRecord};

/// Beam-search generation for each `(id, features)` pair, in input order.
pub fn generate<'a>(
    model: &Model,
    vocab: &Vocab,
    inputs: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<GeneratedRecord>> {
    inputs
        .into_iter()
        .map(|(id, f)| {
            let h = model.generate(f, beam_width, max_len)?;
            Ok(GeneratedRecord {
                id: id.to_string(),
                generated: vocab.decode(&h.tokens),
                logprob: h.log_prob,
            })
        })
        .collect()
}

/// Joins generated reports with references on id. Unmatched ids on either
/// side are an error unless `allow_missing`, in which case they are skipped.
pub fn pairs(
    generated: &[GeneratedRecord],
    references: &[ReportRecord],
    allow_missing: bool,
) -> Result<Vec<EvalPair>> {
    let mut refs: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in references {
        refs.entry(r.id.as_str()).or_default().push(tokenize(&r.report));
    }
    let mut out = Vec::new();
    let mut missing = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    for g in generated {
        match refs.get(g.id.as_str()) {
            Some(r) => {
                if !used.insert(g.id.as_str()) {
                    return Err(CliError::Data(format!("duplicate generated id `{}`", g.id)));
                }
                out.push(EvalPair::new(g.id.clone(), tokenize(&g.generated), r.clone()));
            }
            None => missing.push(g.id.clone()),
        }
    }
    let unused: Vec<&str> = refs.keys().filter(|k| !used.contains(*k)).copied().collect();
    if !allow_missing && (!missing.is_empty() || !unused.is_empty()) {
        return Err(CliError::Data(format!(
            "unmatched ids: generated without reference {missing:?}; references without generation {unused:?}"
        )));
    }
    if out.is_empty() {
        return Err(CliError::Data("no generated report matches a reference".into()));
    }
    Ok(out)
}

/// Metric names and values in output order.
pub fn named(report: &MetricReport) -> [(&'static str, f64); 6] {
    [
        ("BLEU-1", report.bleu[0]),
        ("BLEU-2", report.bleu[1]),
        ("BLEU-3", report.bleu[2]),
        ("BLEU-4", report.bleu[3]),
        ("ROUGE-L", report.rouge_l),
        ("CIDEr", report.cider),
    ]
}

/// One JSON object with every score printed to four decimals.
pub fn to_json(report: &MetricReport) -> String {
    let body: Vec<String> = named(report)
        .iter()
        .map(|(k, v)| format!("\"{k}\": {v:.4}"))
        .collect();
    format!("{{{}}}", body.join(", "))
}

pub fn score(generated: &[GeneratedRecord], references: &[ReportRecord], allow_missing: bool) -> Result<MetricReport> {
    Ok(evaluate(&pairs(generated, references, allow_missing)?)?)
}
