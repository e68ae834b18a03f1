use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    None,
    /// `(matches + 1) / (total + 1)` for orders two and up; unigrams stay unsmoothed.
    #[default]
    AddOne,
}

/// Lowercase, split on Unicode whitespace, strip leading and trailing
/// punctuation; tokens that were pure punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c)).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00AB}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
            | '\u{3001}'..='\u{3003}' | '\u{300C}'..='\u{300F}'
    )
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU of `hypothesis` against a single `reference`.
///
/// Geometric mean of clipped n-gram precisions for orders `1..=max_ngram`,
/// times the brevity penalty `exp(1 - r/c)` when the hypothesis is shorter.
pub fn bleu(reference: &str, hypothesis: &str, max_ngram: usize, smoothing: Smoothing) -> Result<f64> {
    if !(1..=4).contains(&max_ngram) {
        return Err(Error::invalid("max_ngram", format!("{max_ngram} outside [1, 4]")));
    }
    let reference = tokenize(reference);
    let hypothesis = tokenize(hypothesis);
    if reference.is_empty() || hypothesis.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(bleu_tokens(&reference, &hypothesis, max_ngram, smoothing))
}

pub(crate) fn bleu_tokens(reference: &[String], hypothesis: &[String], max_ngram: usize, smoothing: Smoothing) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=max_ngram {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
        let (num, den) = match smoothing {
            Smoothing::AddOne if n > 1 => (matched as f64 + 1.0, total as f64 + 1.0),
            _ => (matched as f64, total as f64),
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let r = reference.len() as f64;
    let c = hypothesis.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    (bp * (log_sum / max_ngram as f64).exp()).clamp(0.0, 1.0)
}
