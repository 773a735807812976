//! Corpus BLEU with one reference per candidate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

fn ngrams(tokens: &[String], k: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped `k`-gram matches and candidate `k`-gram total over the corpus.
pub fn modified_precision(candidates: &[Vec<String>], references: &[Vec<String>], k: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (c, r) in candidates.iter().zip(references) {
        let rc = ngrams(r, k);
        for (g, n) in ngrams(c, k) {
            matched += n.min(rc.get(g).copied().unwrap_or(0));
            total += n;
        }
    }
    (matched, total)
}

/// Corpus-level BLEU-`n` with uniform weights and brevity penalty.
/// Precisions of order ≥ 2 with zero matches use add-one smoothing; zero
/// unigram matches or an empty candidate corpus give 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = modified_precision(candidates, references, k);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if k == 1 {
            return Ok(0.0);
        } else {
            1.0 / (t + 1) as f64
        };
        log_sum += libm::log(p);
    }
    let bp = if c > r { 1.0 } else { libm::exp(1.0 - r as f64 / c as f64) };
    Ok(bp * libm::exp(log_sum / n as f64))
}

/// BLEU-1 through BLEU-4.
pub fn bleu_1_to_4(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<[f64; 4]> {
    Ok([
        bleu(candidates, references, 1)?,
        bleu(candidates, references, 2)?,
        bleu(candidates, references, 3)?,
        bleu(candidates, references, 4)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tokenize;
    use alloc::vec;

    fn corpus(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn identical_is_one() {
        let c = corpus(&["a person opens the door", "a person lifts the cup"]);
        for n in 1..=4 {
            assert!((bleu(&c, &c, n).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn clipped_unigrams() {
        let c = corpus(&["the the the the"]);
        let r = corpus(&["the cat sat down"]);
        assert_eq!(modified_precision(&c, &r, 1), (1, 4));
        assert!((bleu(&c, &r, 1).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_candidate_is_zero() {
        let c = vec![Vec::new()];
        let r = corpus(&["a person opens the door"]);
        assert_eq!(bleu(&c, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn order_out_of_range() {
        let c = corpus(&["x"]);
        assert!(bleu(&c, &c, 0).is_err());
        assert!(bleu(&c, &c, 5).is_err());
    }

    #[test]
    fn brevity_and_smoothing() {
        // 3 of 5 reference words, bigram "person opens" matches, no trigram
        let c = corpus(&["person opens door"]);
        let r = corpus(&["a person opens the door"]);
        let p1: f64 = 3.0 / 3.0;
        let p2: f64 = 1.0 / 2.0;
        let p3: f64 = 1.0 / 2.0; // smoothed: 0 of 1 trigram
        let p4: f64 = 1.0 / 1.0; // smoothed: 0 of 0 four-grams
        let bp = libm::exp(1.0 - 5.0 / 3.0);
        let logs = libm::log(p1) + libm::log(p2) + libm::log(p3) + libm::log(p4);
        let want = bp * libm::exp(logs / 4.0);
        assert!((bleu(&c, &r, 4).unwrap() - want).abs() < 1e-14);
    }
}
