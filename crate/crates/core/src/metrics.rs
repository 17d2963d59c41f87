//! Corpus-level text generation metrics: BLEU-1..4, ROUGE-L and CIDEr.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One candidate with its references. Tokens are expected to be normalised
/// the same way as the training vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, candidate: Vec<String>, references: Vec<Vec<String>>) -> Self {
        EvalPair {
            id: id.into(),
            candidate,
            references,
        }
    }
}

/// Scores for a whole corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

pub const ROUGE_BETA: f64 = 1.2;

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

fn check_corpus(corpus: &[EvalPair]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract("empty evaluation corpus"));
    }
    if let Some(p) = corpus.iter().find(|p| p.references.is_empty()) {
        return Err(Error::contract(alloc::format!("sample `{}` has no reference", p.id)));
    }
    Ok(())
}

/// Corpus BLEU-`n` without smoothing.
pub fn bleu(corpus: &[EvalPair], n: usize) -> Result<f64> {
    Ok(bleu_all(corpus, n)?[n - 1])
}

/// Corpus BLEU-1..`n`; entry `k - 1` is BLEU-`k`.
pub fn bleu_all(corpus: &[EvalPair], n: usize) -> Result<Vec<f64>> {
    if !(1..=4).contains(&n) {
        return Err(Error::contract(alloc::format!("BLEU order {n} outside 1..=4")));
    }
    check_corpus(corpus)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in corpus {
        let c = p.candidate.len();
        cand_len += c;
        // closest reference length, shorter on ties
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngrams(&p.candidate, k);
            let mut max_ref = Counts::new();
            for r in &p.references {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in &cand {
                matched[k - 1] += (*cnt).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        libm::exp(1.0 - ref_len as f64 / cand_len as f64)
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 0..n {
        if matched[k] == 0 {
            zero = true;
        } else {
            log_sum += libm::log(matched[k] as f64 / total[k] as f64);
        }
        out.push(if zero { 0.0 } else { bp * libm::exp(log_sum / (k + 1) as f64) });
    }
    Ok(out)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure, best over references.
pub fn rouge_l_sentence(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rc = l / r.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let s: f64 = corpus
        .iter()
        .map(|p| rouge_l_sentence(&p.candidate, &p.references))
        .sum();
    Ok(s / corpus.len() as f64)
}

/// TF-IDF vector of one sentence for order `n`, with its L2 norm.
fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    df: &Counts<'_>,
    log_docs: f64,
) -> (BTreeMap<&'a [String], f64>, f64) {
    let mut vec = BTreeMap::new();
    let mut norm = 0.0;
    for (g, tf) in ngrams(tokens, n) {
        // n-grams unseen in any reference set count as document frequency 1
        let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
        let w = tf as f64 * (log_docs - libm::log(d));
        norm += w * w;
        vec.insert(g, w);
    }
    (vec, libm::sqrt(norm))
}

/// Per-sample CIDEr scores (original variant, no length penalty or clipping).
pub fn cider_per_sample(corpus: &[EvalPair]) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::contract("CIDEr needs at least two samples to define IDF"));
    }
    let log_docs = libm::log(corpus.len() as f64);
    let mut scores = alloc::vec![0.0; corpus.len()];
    for n in 1..=4 {
        let mut df = Counts::new();
        for p in corpus {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in &p.references {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_default() += 1;
            }
        }
        for (p, score) in corpus.iter().zip(scores.iter_mut()) {
            let (cv, cn) = tfidf(&p.candidate, n, &df, log_docs);
            let mut sum = 0.0;
            for r in &p.references {
                let (rv, rn) = tfidf(r, n, &df, log_docs);
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                let dot: f64 = cv.iter().filter_map(|(g, w)| rv.get(g).map(|v| v * w)).sum();
                sum += dot / (cn * rn);
            }
            *score += 10.0 * sum / p.references.len() as f64 / 4.0;
        }
    }
    Ok(scores)
}

pub fn cider(corpus: &[EvalPair]) -> Result<f64> {
    let s = cider_per_sample(corpus)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub fn evaluate(corpus: &[EvalPair]) -> Result<MetricReport> {
    let b = bleu_all(corpus, 4)?;
    Ok(MetricReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus)?,
    })
}

/// Micro-averaged F1 of thresholded predictions against binary targets.
pub fn micro_f1(predictions: &[Vec<f64>], targets: &[Vec<f64>], threshold: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::dim("micro_f1", &[predictions.len()], &[targets.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::dim("micro_f1", &[p.len()], &[t.len()]));
        }
        for (&pi, &ti) in p.iter().zip(t) {
            match (pi >= threshold, ti == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}
