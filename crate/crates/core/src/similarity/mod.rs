//! Text similarity between the fused mention description and candidate text.

mod bleu;
mod embed;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Candidate, Entity};

pub use bleu::{bleu, tokenize, Smoothing};
pub use embed::{EmbedConfig, EmbedScorer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequestBatch {
    pub reference: String,
    pub candidates: Vec<String>,
}

impl ScoreRequestBatch {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("candidates", "score batch is empty"));
        }
        Ok(())
    }
}

/// Scores one reference against many candidate texts, order-preserving,
/// each score in `[0, 1]`.
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;

    fn score_batch(&self, batch: &ScoreRequestBatch) -> Result<Vec<f64>>;
}

/// Which side of BLEU the mention description takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuDirection {
    #[default]
    MentionIsReference,
    MentionIsHypothesis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScorer {
    pub max_ngram: usize,
    pub smoothing: Smoothing,
    pub direction: BleuDirection,
}

impl Default for BleuScorer {
    fn default() -> Self {
        BleuScorer { max_ngram: 4, smoothing: Smoothing::AddOne, direction: BleuDirection::MentionIsReference }
    }
}

impl Scorer for BleuScorer {
    fn id(&self) -> &str {
        "bleu"
    }

    fn score_batch(&self, batch: &ScoreRequestBatch) -> Result<Vec<f64>> {
        batch.validate()?;
        let mention = tokenize(&batch.reference);
        if mention.is_empty() {
            return Err(Error::EmptyText);
        }
        if !(1..=4).contains(&self.max_ngram) {
            return Err(Error::invalid("max_ngram", format!("{} outside [1, 4]", self.max_ngram)));
        }
        Ok(batch
            .candidates
            .iter()
            .map(|c| {
                let cand = tokenize(c);
                if cand.is_empty() {
                    return 0.0;
                }
                match self.direction {
                    BleuDirection::MentionIsReference => bleu::bleu_tokens(&mention, &cand, self.max_ngram, self.smoothing),
                    BleuDirection::MentionIsHypothesis => bleu::bleu_tokens(&cand, &mention, self.max_ngram, self.smoothing),
                }
            })
            .collect())
    }
}

pub(crate) fn clamp_unit(s: f64) -> f64 {
    if s.is_nan() {
        0.0
    } else {
        s.clamp(0.0, 1.0)
    }
}

/// Candidate text: description, then attributes as `key: value; key: value`.
pub fn candidate_text(entity: &Entity) -> String {
    let attrs = entity.attributes.iter().map(|a| format!("{}: {}", a.key, a.value)).collect::<Vec<_>>().join("; ");
    match (entity.description.trim(), attrs.is_empty()) {
        ("", true) => String::new(),
        ("", false) => attrs,
        (d, true) => d.to_string(),
        (d, false) => format!("{d} {attrs}"),
    }
}

/// Scores every entity against `mention_desc`. Output follows input order.
pub fn score_candidates(mention_desc: &str, entities: &[Entity], scorer: &dyn Scorer) -> Result<Vec<Candidate>> {
    if mention_desc.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let texts: Vec<String> = entities.iter().map(candidate_text).collect();
    let scored_idx: Vec<usize> = (0..texts.len()).filter(|&i| !texts[i].trim().is_empty()).collect();
    let mut scores = vec![0.0; entities.len()];
    if !scored_idx.is_empty() {
        let batch =
            ScoreRequestBatch { reference: mention_desc.to_string(), candidates: scored_idx.iter().map(|&i| texts[i].clone()).collect() };
        let got = scorer.score_batch(&batch)?;
        if got.len() != scored_idx.len() {
            return Err(Error::ScorerProtocolError(format!("{} scores for {} candidates", got.len(), scored_idx.len())));
        }
        for (&i, s) in scored_idx.iter().zip(got) {
            scores[i] = clamp_unit(s);
        }
    }
    entities.iter().zip(scores).map(|(e, s)| Candidate::new(e.clone(), s, scorer.id())).collect()
}
