//! Candidate generation and the judge → feedback → re-summarize loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Role};
use crate::error::{Error, Result};
use crate::fuser::{fuse, summarize_context, FeedbackBundle, SummaryPromptSpec, MAX_NEGATIVE_EXAMPLES};
use crate::kg::{KgStore, SearchQuery, DEFAULT_SEARCH_LIMIT};
use crate::model::{CandidateSet, Mention, RoundTrace, Verdict};
use crate::similarity::{score_candidates, Scorer};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_MAX_ITERATIONS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub search_limit: usize,
    pub top_k: usize,
    pub max_iterations: u32,
    pub language: String,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            search_limit: DEFAULT_SEARCH_LIMIT,
            top_k: DEFAULT_TOP_K,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            language: "en".into(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.search_limit {
            return Err(Error::invalid("top_k", format!("{} not in [1, search_limit={}]", self.top_k, self.search_limit)));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// Live state of the adaptive loop for one mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub round: u32,
    pub candidate_set: CandidateSet,
    pub verdict: Verdict,
    pub feedback: Option<FeedbackBundle>,
    /// Candidate sets of earlier rounds, oldest first.
    pub history: Vec<CandidateSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LinkReadyOutcome {
    Ready { mention: Mention, candidate_set: CandidateSet, rounds_used: u32, trace: Vec<RoundTrace>, state: IterationState },
    MatchingFailed { mention: Mention, trace: Vec<RoundTrace>, state: IterationState },
}

impl LinkReadyOutcome {
    pub fn trace(&self) -> &[RoundTrace] {
        match self {
            LinkReadyOutcome::Ready { trace, .. } | LinkReadyOutcome::MatchingFailed { trace, .. } => trace,
        }
    }

    pub fn state(&self) -> &IterationState {
        match self {
            LinkReadyOutcome::Ready { state, .. } | LinkReadyOutcome::MatchingFailed { state, .. } => state,
        }
    }

    pub fn mention(&self) -> &Mention {
        match self {
            LinkReadyOutcome::Ready { mention, .. } | LinkReadyOutcome::MatchingFailed { mention, .. } => mention,
        }
    }
}

/// Search by surface form, score against the fused description, keep the top k.
pub fn generate_candidates(
    mention: &Mention,
    store: &KgStore,
    scorer: &dyn Scorer,
    config: &AdapterConfig,
    round: u32,
) -> Result<CandidateSet> {
    let fused = mention.fused_description.as_deref().ok_or(Error::MissingFusedDescription)?;
    let query = SearchQuery { text: mention.words.clone(), limit: config.search_limit, language: config.language.clone() };
    let entities = store.search(&query)?;
    if entities.is_empty() {
        return Err(Error::EmptyCandidates(mention.words.clone()));
    }
    let scored = score_candidates(fused, &entities, scorer)?;
    Ok(CandidateSet::ranked(&mention.id, scored, round, config.top_k))
}

fn write_candidates(p: &mut String, cs: &CandidateSet, numbered: bool) {
    for (i, c) in cs.candidates.iter().enumerate() {
        let e = &c.entity;
        let desc = if e.description.is_empty() { "(no description)" } else { e.description.as_str() };
        if numbered {
            let _ = writeln!(p, "{}. {} ({}): {}", i + 1, e.name, e.qid, desc);
        } else {
            let _ = writeln!(p, "- {} ({}): {}", e.name, e.qid, desc);
        }
    }
}

pub fn judge_prompt(mention: &Mention, cs: &CandidateSet) -> Result<String> {
    let fused = mention.fused_description.as_deref().ok_or(Error::MissingFusedDescription)?;
    if cs.is_empty() {
        return Err(Error::EmptyCandidates(mention.words.clone()));
    }
    let mut p = format!(
        "[JUDGMENT]\nDecide whether the entity that the mention refers to is among the candidates, \
         using both the meaning of the mention and how well each candidate fits its context.\n\
         Mention: {}\nDescription: {}\nCandidates:\n",
        mention.words.trim(),
        fused
    );
    write_candidates(&mut p, cs, true);
    p.push_str("Answer yes if one of the candidates is the correct entity, otherwise answer no.");
    Ok(p)
}

/// First standalone, case-insensitive `yes` or `no` in the reply.
pub fn parse_verdict(reply: &str) -> Result<Verdict> {
    for token in reply.split(|c: char| !c.is_alphanumeric()) {
        if token.eq_ignore_ascii_case("yes") {
            return Ok(Verdict::Present);
        }
        if token.eq_ignore_ascii_case("no") {
            return Ok(Verdict::Absent);
        }
    }
    Err(Error::FormatViolation(format!("judge reply has no yes/no: {reply:?}")))
}

pub fn judge(mention: &Mention, cs: &CandidateSet, agent: &Agent) -> Result<Verdict> {
    let reply = agent.ask(Role::Judge, judge_prompt(mention, cs)?)?;
    parse_verdict(&reply.text)
}

pub fn conflict_prompt(mention: &Mention, cs: &CandidateSet) -> String {
    let mut p = format!(
        "[CONFLICT ANALYSIS]\nNone of the candidates below is the entity the mention refers to. \
         In one or two sentences, explain the semantic conflict between the mention and these candidates.\n\
         Mention: {}\nDescription: {}\nCandidates:\n",
        mention.words.trim(),
        mention.fused_description.as_deref().or(mention.summary.as_deref()).unwrap_or("")
    );
    write_candidates(&mut p, cs, false);
    p
}

/// Summary, agent-written conflict analysis, and the lowest-scored candidates.
pub fn build_feedback(mention: &Mention, cs: &CandidateSet, agent: &Agent) -> Result<FeedbackBundle> {
    let reply = agent.ask(Role::Judge, conflict_prompt(mention, cs))?;
    let negatives = cs.candidates.iter().rev().take(MAX_NEGATIVE_EXAMPLES).map(|c| c.entity.clone()).collect();
    Ok(FeedbackBundle::new(mention.summary.clone().unwrap_or_default(), reply.text.trim(), negatives))
}

/// Everything the loop needs besides the mention.
pub struct LoopContext<'a> {
    pub store: &'a KgStore,
    pub scorer: &'a dyn Scorer,
    pub config: &'a AdapterConfig,
    pub summary_spec: &'a SummaryPromptSpec,
    pub summarizer: &'a Agent,
    pub judge: &'a Agent,
}

/// Runs at most `max_iterations` rounds and stops at the first present verdict.
///
/// An unparseable judge reply counts as absent for that round.
pub fn adapt_loop(mut mention: Mention, ctx: &LoopContext<'_>) -> Result<LinkReadyOutcome> {
    ctx.config.validate()?;
    if mention.fused_description.is_none() {
        return Err(Error::MissingFusedDescription);
    }
    let max = ctx.config.max_iterations;
    let mut trace: Vec<RoundTrace> = Vec::new();
    let mut history: Vec<CandidateSet> = Vec::new();
    let mut round = 1;
    let mut cs = generate_candidates(&mention, ctx.store, ctx.scorer, ctx.config, round)?;
    loop {
        let (verdict, judge_note) = match judge(&mention, &cs, ctx.judge) {
            Ok(v) => (v, None),
            Err(Error::FormatViolation(msg)) => {
                log::warn!("mention {} round {round}: {msg}; treating as absent", mention.id);
                (Verdict::Absent, Some(msg))
            }
            Err(e) => return Err(e),
        };

        if verdict == Verdict::Present || round >= max {
            trace.push(RoundTrace { round, candidate_set: cs.clone(), verdict, feedback: None, judge_note });
            let state = IterationState { round, candidate_set: cs.clone(), verdict, feedback: None, history };
            return Ok(if verdict == Verdict::Present {
                LinkReadyOutcome::Ready { mention, candidate_set: cs, rounds_used: round, trace, state }
            } else {
                LinkReadyOutcome::MatchingFailed { mention, trace, state }
            });
        }

        let feedback = build_feedback(&mention, &cs, ctx.judge)?;
        trace.push(RoundTrace { round, candidate_set: cs.clone(), verdict, feedback: Some(feedback.clone()), judge_note });
        history.push(cs);

        round += 1;
        summarize_context(&mut mention, ctx.summary_spec, Some(&feedback), ctx.summarizer)?;
        mention = fuse(mention)?;
        cs = generate_candidates(&mention, ctx.store, ctx.scorer, ctx.config, round)?;
    }
}
