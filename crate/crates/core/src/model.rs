//! Domain types shared by every pipeline stage.
//!
//! Everything here is a plain value: construction, validation and serde,
//! nothing else. Entity identity is the Wikidata qid.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuser::FeedbackBundle;

/// Filesystem path or URL of an image.
pub type ImageRef = String;

/// A Wikidata item identifier such as `Q89`.
///
/// Ordering is numeric, so `Q9 < Q10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Qid(String);

impl Qid {
    pub fn parse(s: &str) -> Option<Qid> {
        let digits = s.strip_prefix('Q')?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        Some(Qid(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn digits(&self) -> &str {
        let d = &self.0[1..];
        let trimmed = d.trim_start_matches('0');
        if trimmed.is_empty() {
            "0"
        } else {
            trimmed
        }
    }
}

pub fn is_qid(s: &str) -> bool {
    Qid::parse(s).is_some()
}

impl Ord for Qid {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.digits(), other.digits());
        a.len().cmp(&b.len()).then_with(|| a.cmp(b)).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Qid {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Qid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Qid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Qid::parse(s).ok_or_else(|| Error::MalformedQid { field: "qid", value: s.to_string() })
    }
}

impl TryFrom<String> for Qid {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Qid> for String {
    fn from(q: Qid) -> String {
        q.0
    }
}

/// The thing to link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub id: String,
    pub words: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_description: Option<String>,
}

impl Mention {
    pub fn new(id: impl Into<String>, words: impl Into<String>, context: impl Into<String>) -> Result<Self> {
        let words = words.into();
        if words.trim().is_empty() {
            return Err(Error::EmptyMention { field: "words" });
        }
        Ok(Mention {
            id: id.into(),
            words,
            context: context.into(),
            summary: None,
            image: None,
            image_description: None,
            fused_description: None,
        })
    }

    pub fn with_image(mut self, image: impl Into<ImageRef>) -> Self {
        self.image = Some(image.into());
        self
    }

    pub fn with_image_description(mut self, description: impl Into<String>) -> Self {
        self.image_description = Some(description.into());
        self
    }

    pub fn from_record(record: &DatasetRecord) -> Result<Self> {
        let mut m = Mention::new(&record.id, &record.mention_words, &record.context)?;
        m.image = record.image.clone();
        m.image_description = record.image_description.clone();
        Ok(m)
    }

    pub fn has_visual_input(&self) -> bool {
        self.image.is_some() || self.image_description.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: String,
    pub value: String,
}

/// A knowledge-graph record. Two entities are equal iff their qids are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub qid: Qid,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
    #[serde(default)]
    pub images: Vec<ImageRef>,
}

impl Entity {
    pub fn new(qid: Qid, name: impl Into<String>, description: impl Into<String>) -> Self {
        Entity { qid, name: name.into(), description: description.into(), attributes: Vec::new(), images: Vec::new() }
    }

    /// Adds or replaces an attribute, keeping keys unique.
    pub fn set_attribute(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.attributes.iter_mut().find(|a| a.key == key) {
            Some(a) => a.value = value,
            None => self.attributes.push(Attribute { key, value }),
        }
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set_attribute(key, value);
        self
    }

    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.attributes.iter().find(|a| a.key == key).map(|a| a.value.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].iter().any(|b| b.key == a.key) {
                return Err(Error::invalid("attributes", format!("duplicate key {:?} on {}", a.key, self.qid)));
            }
        }
        Ok(())
    }
}

impl PartialEq for Entity {
    fn eq(&self, other: &Self) -> bool {
        self.qid == other.qid
    }
}

impl Eq for Entity {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: Entity,
    pub score: f64,
    pub scorer_id: String,
}

impl Candidate {
    pub fn new(entity: Entity, score: f64, scorer_id: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("score", format!("{score} outside [0,1]")));
        }
        Ok(Candidate { entity, score, scorer_id: scorer_id.into() })
    }

    pub fn qid(&self) -> &Qid {
        &self.entity.qid
    }
}

/// Score descending, then qid ascending. Total over finite scores.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.entity.qid.cmp(&b.entity.qid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_id: String,
    pub candidates: Vec<Candidate>,
    pub round: u32,
}

impl CandidateSet {
    /// Sorts `candidates` into canonical order and keeps the first `top_k`.
    pub fn ranked(mention_id: impl Into<String>, mut candidates: Vec<Candidate>, round: u32, top_k: usize) -> Self {
        candidates.sort_by(candidate_order);
        candidates.truncate(top_k);
        CandidateSet { mention_id: mention_id.into(), candidates, round: round.max(1) }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, qid: &Qid) -> bool {
        self.candidates.iter().any(|c| &c.entity.qid == qid)
    }

    pub fn qids(&self) -> Vec<Qid> {
        self.candidates.iter().map(|c| c.entity.qid.clone()).collect()
    }

    pub fn is_canonically_ordered(&self) -> bool {
        self.candidates.windows(2).all(|w| candidate_order(&w[0], &w[1]) != Ordering::Greater)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Present,
    Absent,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub candidate_set: CandidateSet,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackBundle>,
    /// Set when the judge reply could not be parsed and the round defaulted to absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LinkOutcome {
    Linked { qid: Qid },
    MatchingFailed,
}

impl LinkOutcome {
    pub fn linked_qid(&self) -> Option<&Qid> {
        match self {
            LinkOutcome::Linked { qid } => Some(qid),
            LinkOutcome::MatchingFailed => None,
        }
    }
}

/// Pipeline stages in their fixed execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summary,
    Vision,
    Fuse,
    Loop,
    Cloze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub mention_id: String,
    pub outcome: LinkOutcome,
    /// Adaptive-loop rounds executed. Zero only when a stage failed before the loop.
    pub rounds_used: u32,
    pub trace: Vec<RoundTrace>,
    pub stages: Vec<Stage>,
    /// True when the clozer reply was unparseable twice and option 1 was taken.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LinkResult {
    pub fn final_candidates(&self) -> Option<&CandidateSet> {
        self.trace.last().map(|r| &r.candidate_set)
    }

    pub fn is_correct(&self, gold: &Qid) -> bool {
        self.outcome.linked_qid() == Some(gold)
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub mention_words: String,
    #[serde(default)]
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_description: Option<String>,
    pub gold_qid: String,
}

impl DatasetRecord {
    pub const FIELDS: &'static [&'static str] = &["id", "mention_words", "context", "image", "image_description", "gold_qid"];

    pub fn gold(&self) -> Result<Qid> {
        Qid::parse(&self.gold_qid).ok_or_else(|| Error::MalformedQid { field: "gold_qid", value: self.gold_qid.clone() })
    }
}

pub fn validate_record(record: DatasetRecord) -> Result<DatasetRecord> {
    if record.mention_words.trim().is_empty() {
        return Err(Error::EmptyMention { field: "mention_words" });
    }
    record.gold()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(words: &str, gold: &str) -> DatasetRecord {
        DatasetRecord {
            id: "m1".into(),
            mention_words: words.into(),
            context: "ctx".into(),
            image: None,
            image_description: None,
            gold_qid: gold.into(),
        }
    }

    fn cand(qid: &str, score: f64) -> Candidate {
        Candidate::new(Entity::new(qid.parse().unwrap(), qid, ""), score, "bleu").unwrap()
    }

    #[test]
    fn validate_accepts_well_formed() {
        let r = record("Apple", "Q89");
        assert_eq!(validate_record(r.clone()).unwrap(), r);
    }

    #[test]
    fn validate_rejects_empty_mention() {
        let err = validate_record(record("", "Q89")).unwrap_err();
        assert!(matches!(err, Error::EmptyMention { field: "mention_words" }));
        let err = validate_record(record("   ", "Q89")).unwrap_err();
        assert!(matches!(err, Error::EmptyMention { .. }));
    }

    #[test]
    fn validate_rejects_malformed_qid() {
        for bad in ["89", "Q", "q89", "Q8a", " Q89"] {
            let err = validate_record(record("Apple", bad)).unwrap_err();
            assert!(matches!(err, Error::MalformedQid { field: "gold_qid", .. }), "{bad}");
        }
    }

    #[test]
    fn qid_orders_numerically() {
        let mut q: Vec<Qid> = ["Q42", "Q10", "Q9", "Q100"].iter().map(|s| s.parse().unwrap()).collect();
        q.sort();
        let s: Vec<&str> = q.iter().map(Qid::as_str).collect();
        assert_eq!(s, ["Q9", "Q10", "Q42", "Q100"]);
    }

    #[test]
    fn qid_deserialize_validates() {
        assert!(serde_json::from_str::<Qid>("\"Q5\"").is_ok());
        assert!(serde_json::from_str::<Qid>("\"5\"").is_err());
    }

    #[test]
    fn entity_equality_is_qid_equality() {
        let a = Entity::new("Q89".parse().unwrap(), "apple", "fruit");
        let b = Entity::new("Q89".parse().unwrap(), "Apple", "something else");
        assert_eq!(a, b);
    }

    #[test]
    fn attribute_keys_stay_unique() {
        let mut e = Entity::new("Q1".parse().unwrap(), "x", "");
        e.set_attribute("aliases", "a");
        e.set_attribute("aliases", "b");
        assert_eq!(e.attributes.len(), 1);
        assert_eq!(e.attribute("aliases"), Some("b"));
        e.attributes.push(Attribute { key: "aliases".into(), value: "c".into() });
        assert!(e.validate().is_err());
    }

    #[test]
    fn candidate_score_out_of_range() {
        let e = Entity::new("Q1".parse().unwrap(), "x", "");
        assert!(Candidate::new(e.clone(), 1.5, "bleu").is_err());
        assert!(Candidate::new(e, -0.1, "bleu").is_err());
    }

    #[test]
    fn ranked_ties_break_on_qid() {
        let cs = CandidateSet::ranked("m", vec![cand("Q42", 0.5), cand("Q10", 0.5), cand("Q7", 0.9)], 1, 5);
        let q: Vec<String> = cs.qids().into_iter().map(String::from).collect();
        assert_eq!(q, ["Q7", "Q10", "Q42"]);
        assert!(cs.is_canonically_ordered());
    }

    #[test]
    fn ranked_truncates() {
        let cs = CandidateSet::ranked("m", (1..=8).map(|i| cand(&format!("Q{i}"), i as f64 / 10.0)).collect(), 1, 5);
        assert_eq!(cs.len(), 5);
        assert_eq!(cs.candidates[0].entity.qid.as_str(), "Q8");
    }

    #[test]
    fn link_outcome_serializes_tagged() {
        let o = LinkOutcome::Linked { qid: "Q89".parse().unwrap() };
        assert_eq!(serde_json::to_string(&o).unwrap(), r#"{"status":"linked","qid":"Q89"}"#);
        let f = serde_json::to_string(&LinkOutcome::MatchingFailed).unwrap();
        assert_eq!(f, r#"{"status":"matching_failed"}"#);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_candidate() -> impl Strategy<Value = Candidate> {
            (1u32..60, 0u8..=10).prop_map(|(q, s)| cand(&format!("Q{q}"), s as f64 / 10.0))
        }

        proptest! {
            #[test]
            fn ranking_is_permutation_invariant(mut cands in proptest::collection::vec(arb_candidate(), 0..30), seed in any::<u64>()) {
                // dedupe qids so the order is total on distinct entities
                cands.sort_by(|a, b| a.entity.qid.cmp(&b.entity.qid));
                cands.dedup_by(|a, b| a.entity.qid == b.entity.qid);
                let a = CandidateSet::ranked("m", cands.clone(), 1, 100);
                let mut shuffled = cands;
                let n = shuffled.len();
                if n > 1 {
                    let mut s = seed;
                    for i in (1..n).rev() {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        shuffled.swap(i, (s >> 33) as usize % (i + 1));
                    }
                }
                let b = CandidateSet::ranked("m", shuffled, 1, 100);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn link_result_round_trips(words in "[a-z]{1,8}", score in 0.0f64..=1.0, n in 0u32..4) {
                let e = Entity::new("Q89".parse().unwrap(), words.clone(), "fruit").with_attribute("aliases", words);
                let cs = CandidateSet::ranked("m", vec![Candidate::new(e, score, "bleu").unwrap()], 1, 5);
                let r = LinkResult {
                    mention_id: "m".into(),
                    outcome: if n % 2 == 0 { LinkOutcome::MatchingFailed } else { LinkOutcome::Linked { qid: "Q89".parse().unwrap() } },
                    rounds_used: n,
                    trace: (0..n).map(|i| RoundTrace { round: i + 1, candidate_set: cs.clone(), verdict: Verdict::Absent, feedback: None, judge_note: None }).collect(),
                    stages: vec![Stage::Summary, Stage::Fuse],
                    fallback: false,
                    error: None,
                };
                let enc = serde_json::to_string(&r).unwrap();
                let dec: LinkResult = serde_json::from_str(&enc).unwrap();
                prop_assert_eq!(&dec, &r);
                prop_assert_eq!(serde_json::to_string(&dec).unwrap(), enc);
            }
        }
    }
}
