use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::text;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with one reference per candidate.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus. Orders 2..4 use add-one smoothing, `(m + 1) / (t + 1)`; unigram
/// precision is unsmoothed, so a corpus with no unigram overlap scores 0.
/// The brevity penalty is `exp(1 - r / c)` when `c < r`.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let c = text::tokenize(c.as_ref());
        let r = text::tokenize(r.as_ref());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            for (g, &k) in &cc {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = libm::log(matches[0] as f64 / totals[0] as f64);
    for n in 1..MAX_ORDER {
        log_sum += libm::log((matches[n] as f64 + 1.0) / (totals[n] as f64 + 1.0));
    }
    let bp = if cand_len < ref_len { libm::exp(1.0 - ref_len as f64 / cand_len as f64) } else { 1.0 };
    Ok(bp * libm::exp(log_sum / MAX_ORDER as f64))
}
