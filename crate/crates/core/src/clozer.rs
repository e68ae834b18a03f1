//! Disambiguation as a cloze task over the candidate set.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Role};
use crate::error::{Error, Result};
use crate::model::{CandidateSet, LinkOutcome, LinkResult, Mention, Stage};

pub const DEFAULT_CLOZE_SHOTS: usize = 2;

const DEFAULT_SHOTS: &str = include_str!("../assets/cloze_shots.jsonl");

pub const DEFAULT_INSTRUCTION: &str = "Fill in the blank: in the sentence above, the target mention refers to option ___. \
Reason about which candidate fits the sentence best, then reply with the option number.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeOption {
    pub index: usize,
    pub name: String,
    pub description: String,
}

/// A worked example; one line of the shots file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeShot {
    pub sentence: String,
    pub mention: String,
    pub options: Vec<ShotOption>,
    pub answer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotOption {
    pub name: String,
    pub description: String,
}

pub fn builtin_shots() -> Vec<ClozeShot> {
    parse_shots(DEFAULT_SHOTS).expect("bundled cloze shots parse")
}

pub fn load_shots(path: &Path) -> Result<Vec<ClozeShot>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_shots(&text)
}

fn parse_shots(text: &str) -> Result<Vec<ClozeShot>> {
    let shots: Vec<ClozeShot> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    for s in &shots {
        if s.answer_index == 0 || s.answer_index > s.options.len() {
            return Err(Error::invalid("answer_index", format!("{} outside 1..={}", s.answer_index, s.options.len())));
        }
    }
    Ok(shots)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozePrompt {
    pub sentence: String,
    pub target_mention: String,
    pub options: Vec<ClozeOption>,
    pub instruction: String,
    pub shots: Vec<ClozeShot>,
}

fn write_block(p: &mut String, sentence: &str, mention: &str, options: impl Iterator<Item = (usize, String, String)>, instruction: &str) {
    let _ = write!(p, "[SENTENCE]\n{}\n\n[TARGET MENTION]\n{}\n\n[OPTIONS]\n", sentence.trim(), mention.trim());
    for (i, name, desc) in options {
        let _ = writeln!(p, "{i}) {name} — {desc}");
    }
    let _ = write!(p, "\n[SELECT BEST OPTION]\n{instruction}\n");
}

impl ClozePrompt {
    pub fn k(&self) -> usize {
        self.options.len()
    }

    pub fn render(&self) -> String {
        let mut p = String::new();
        for (n, shot) in self.shots.iter().enumerate() {
            let _ = writeln!(p, "Worked example {}:", n + 1);
            let opts = shot.options.iter().enumerate().map(|(i, o)| (i + 1, o.name.clone(), o.description.clone()));
            write_block(&mut p, &shot.sentence, &shot.mention, opts, &self.instruction);
            let _ = write!(p, "Answer: {}\n\n", shot.answer_index);
        }
        if !self.shots.is_empty() {
            p.push_str("Now solve this one:\n");
        }
        let opts = self.options.iter().map(|o| (o.index, o.name.clone(), o.description.clone()));
        write_block(&mut p, &self.sentence, &self.target_mention, opts, &self.instruction);
        p.push_str("Answer:");
        p
    }
}

/// Options follow the candidate set order, numbered from 1.
pub fn build_cloze(mention: &Mention, cs: &CandidateSet, shots: &[ClozeShot]) -> Result<ClozePrompt> {
    let sentence = mention.fused_description.as_deref().ok_or(Error::MissingFusedDescription)?;
    if cs.is_empty() {
        return Err(Error::EmptyCandidates(mention.words.clone()));
    }
    let options = cs
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| ClozeOption {
            index: i + 1,
            name: c.entity.name.clone(),
            description: if c.entity.description.is_empty() { "(no description)".into() } else { c.entity.description.clone() },
        })
        .collect();
    Ok(ClozePrompt {
        sentence: sentence.to_string(),
        target_mention: mention.words.clone(),
        options,
        instruction: DEFAULT_INSTRUCTION.to_string(),
        shots: shots.to_vec(),
    })
}

/// First integer in `1..=k` that appears as a standalone token.
pub fn parse_selection(reply: &str, k: usize) -> Result<usize> {
    let mut out_of_range = None;
    for token in reply.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let value: i64 = token.parse().unwrap_or(i64::MAX);
        if value >= 1 && (value as u64) <= k as u64 {
            return Ok(value as usize);
        }
        out_of_range.get_or_insert(value);
    }
    match out_of_range {
        Some(index) => Err(Error::OutOfRange { index, k }),
        None => Err(Error::ParseFailure(reply.to_string())),
    }
}

pub fn select_entity(prompt: &ClozePrompt, agent: &Agent) -> Result<usize> {
    select_with(prompt.render(), prompt.k(), agent)
}

fn select_with(text: String, k: usize, agent: &Agent) -> Result<usize> {
    let reply = agent.ask(Role::Clozer, text)?;
    parse_selection(&reply.text, k)
}

/// Never fails: after two unusable replies the top-scored option is taken
/// and the result is flagged as a fallback.
pub fn link(mention: &Mention, cs: &CandidateSet, agent: &Agent, shots: &[ClozeShot]) -> LinkResult {
    let mut result = LinkResult {
        mention_id: mention.id.clone(),
        outcome: LinkOutcome::MatchingFailed,
        rounds_used: cs.round,
        trace: Vec::new(),
        stages: vec![Stage::Cloze],
        fallback: false,
        error: None,
    };
    let Some(top) = cs.candidates.first() else {
        result.error = Some("empty candidate set".into());
        return result;
    };
    let prompt = match build_cloze(mention, cs, shots) {
        Ok(p) => p,
        Err(e) => {
            result.outcome = LinkOutcome::Linked { qid: top.entity.qid.clone() };
            result.fallback = true;
            result.error = Some(e.to_string());
            return result;
        }
    };
    let k = prompt.k();
    let first = select_entity(&prompt, agent);
    let picked = first.or_else(|e| {
        log::warn!("mention {}: cloze reply unusable ({e}); retrying", mention.id);
        let stricter = format!(
            "{}\nIMPORTANT: your previous answer could not be read. Reply with a single number from 1 to {k} and nothing else.",
            prompt.render()
        );
        select_with(stricter, k, agent)
    });
    match picked {
        Ok(i) => result.outcome = LinkOutcome::Linked { qid: cs.candidates[i - 1].entity.qid.clone() },
        Err(e) => {
            log::warn!("mention {}: second cloze reply unusable ({e}); taking option 1", mention.id);
            result.outcome = LinkOutcome::Linked { qid: top.entity.qid.clone() };
            result.fallback = true;
            result.error = Some(e.to_string());
        }
    }
    result
}
