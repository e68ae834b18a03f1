//! Context summary and visual QA prompting, and fusion of both outputs into
//! the mention description used for candidate similarity.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Role};
use crate::error::{Error, Result};
use crate::model::{Entity, Mention};

pub const SUMMARY_LABEL: &str = "SUMMARY:";
pub const MAX_NEGATIVE_EXAMPLES: usize = 3;
pub const DEFAULT_SUMMARY_SHOTS: usize = 32;

const DEFAULT_EXAMPLES: &str = include_str!("../assets/summary_examples.jsonl");

const DEFAULT_TASK: &str = "You are linking an ambiguous mention to a Wikidata entity. \
Think step by step: (1) find the sentences of the context that talk about the mention; \
(2) decide what kind of thing the mention refers to (person, organization, place, work, product, species, event, concept); \
(3) collect the identifying facts the context gives about it (roles, dates, locations, related names); \
(4) write one concise sentence that states what the mention refers to using those facts.";

const DEFAULT_FORMAT: &str = "Reply with exactly one line that starts with the label SUMMARY: followed by a single sentence. \
Do not add explanations, lists, blank lines or additional fields.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryExample {
    pub context: String,
    pub summary: String,
}

/// Task framing, demonstrations and output format of the context summary prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryPromptSpec {
    pub task_instructions: String,
    pub examples: Vec<SummaryExample>,
    pub format_rules: String,
}

impl SummaryPromptSpec {
    pub fn new(task_instructions: impl Into<String>, examples: Vec<SummaryExample>, format_rules: impl Into<String>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("examples", "summary prompt needs at least one example"));
        }
        Ok(SummaryPromptSpec { task_instructions: task_instructions.into(), examples, format_rules: format_rules.into() })
    }

    /// The bundled 32-example bank.
    pub fn builtin() -> Self {
        let examples = parse_examples(DEFAULT_EXAMPLES).expect("bundled example bank parses");
        SummaryPromptSpec::new(DEFAULT_TASK, examples, DEFAULT_FORMAT).expect("bundled bank is non-empty")
    }

    /// Default instructions with examples loaded from a JSON-Lines bank file.
    pub fn from_examples_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        SummaryPromptSpec::new(DEFAULT_TASK, parse_examples(&text)?, DEFAULT_FORMAT)
    }

    /// Keeps only the first `n` demonstrations (at least one).
    pub fn with_shots(mut self, n: usize) -> Self {
        self.examples.truncate(n.max(1));
        self
    }
}

fn parse_examples(text: &str) -> Result<Vec<SummaryExample>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Identity and category only.
    High,
    /// Identity, category and visible attributes.
    #[default]
    Fine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualQaSpec {
    pub entity_hint: String,
    pub granularity: Granularity,
    /// `{entity}` is replaced by the hint.
    pub question_template: String,
}

impl VisualQaSpec {
    pub const DEFAULT_TEMPLATE: &'static str =
        "What is {entity} in this image? Describe it as a statement such as \"{entity} is a type of ...\".";

    pub fn for_mention(mention: &Mention, granularity: Granularity) -> Self {
        VisualQaSpec { entity_hint: mention.words.trim().to_string(), granularity, question_template: Self::DEFAULT_TEMPLATE.to_string() }
    }

    pub fn render(&self) -> String {
        let hint = &self.entity_hint;
        let detail = match self.granularity {
            Granularity::High => "Describe only its identity and its category.",
            Granularity::Fine => {
                "Describe its identity and category, then its fine-grained visible attributes \
                 such as colors, clothing, facial expression and relative position."
            }
        };
        format!(
            "[ENTITY SPECIFICATION]\nThink step by step: locate \"{hint}\" in the image, focus on the region that shows it, and decide what it is.\n\n\
             [GRANULARITY]\n{detail}\n\n\
             [DESCRIPTION]\n{}\nAnswer in one to three sentences.",
            self.question_template.replace("{entity}", hint)
        )
    }
}

/// Structured feedback from a failed judgment round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub context_summary: String,
    pub conflict_analysis: String,
    pub negative_examples: Vec<Entity>,
}

impl FeedbackBundle {
    pub fn new(context_summary: impl Into<String>, conflict_analysis: impl Into<String>, mut negatives: Vec<Entity>) -> Self {
        negatives.truncate(MAX_NEGATIVE_EXAMPLES);
        FeedbackBundle {
            context_summary: context_summary.into(),
            conflict_analysis: conflict_analysis.into(),
            negative_examples: negatives,
        }
    }
}

/// Assembles `[TASK]`, `[EXAMPLES]`, optional `[FEEDBACK]` and `[FORMAT]`.
///
/// The mention itself goes into the task section so that tail-first
/// truncation drops demonstrations before it drops the input.
pub fn build_summary_prompt(mention: &Mention, spec: &SummaryPromptSpec, feedback: Option<&FeedbackBundle>) -> Result<String> {
    if mention.context.trim().is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut p = String::new();
    let _ = write!(
        p,
        "[TASK]\n{}\nMention: {}\nContext: {}\n\n[EXAMPLES]\n",
        spec.task_instructions.trim(),
        mention.words.trim(),
        mention.context.trim()
    );
    for (i, ex) in spec.examples.iter().enumerate() {
        let _ = write!(p, "Example {}\nContext: {}\n{SUMMARY_LABEL} {}\n\n", i + 1, ex.context, ex.summary);
    }
    if let Some(fb) = feedback {
        let _ = write!(
            p,
            "[FEEDBACK]\nThe previous description matched the wrong entities. Revise it.\n\
             Context summary: {}\nConflict analysis: {}\nNegative examples (the mention is NOT any of these):\n",
            fb.context_summary.trim(),
            fb.conflict_analysis.trim()
        );
        for e in &fb.negative_examples {
            let _ = writeln!(p, "- {} {}: {}", e.qid, e.name, e.description);
        }
        p.push('\n');
    }
    let _ = write!(p, "[FORMAT]\n{}", spec.format_rules.trim());
    Ok(p)
}

/// Pulls the summary sentence out of a reply: the text after the first
/// `SUMMARY:` label, else the first non-empty line.
pub fn extract_summary(reply: &str) -> Result<String> {
    let label_len = SUMMARY_LABEL.len();
    for line in reply.lines() {
        let t = line.trim();
        if t.get(..label_len).is_some_and(|h| h.eq_ignore_ascii_case(SUMMARY_LABEL)) {
            let rest = t[label_len..].trim();
            if !rest.is_empty() {
                return Ok(rest.to_string());
            }
        }
    }
    reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.eq_ignore_ascii_case(SUMMARY_LABEL))
        .map(str::to_string)
        .ok_or_else(|| Error::FormatViolation(format!("no summary line in reply {reply:?}")))
}

pub fn summarize_context(
    mention: &mut Mention,
    spec: &SummaryPromptSpec,
    feedback: Option<&FeedbackBundle>,
    agent: &Agent,
) -> Result<String> {
    let prompt = build_summary_prompt(mention, spec, feedback)?;
    let reply = agent.ask(Role::Summarizer, prompt)?;
    let summary = extract_summary(&reply.text)?;
    mention.summary = Some(summary.clone());
    Ok(summary)
}

/// Returns the mention's image description, asking the vision agent only
/// when none is stored yet.
pub fn describe_image(mention: &mut Mention, spec: &VisualQaSpec, agent: &Agent) -> Result<String> {
    if let Some(d) = mention.image_description.as_deref().map(str::trim).filter(|d| !d.is_empty()) {
        return Ok(d.to_string());
    }
    let Some(image) = mention.image.clone() else {
        return Err(Error::NoVisualInput);
    };
    let reply = agent.ask_vision(spec.render(), Some(image))?;
    let description = first_sentences(&reply.text, 3);
    if description.is_empty() {
        return Err(Error::FormatViolation("empty image description".into()));
    }
    mention.image_description = Some(description.clone());
    Ok(description)
}

fn first_sentences(text: &str, n: usize) -> String {
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut count = 0;
    let mut end = text.len();
    let bytes = text.as_bytes();
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?') && bytes.get(i + 1).is_none_or(|b| *b == b' ') {
            count += 1;
            if count == n {
                end = i + 1;
                break;
            }
        }
    }
    text[..end].to_string()
}

/// Joins summary and image description into the fused description.
pub fn fuse(mut mention: Mention) -> Result<Mention> {
    let summary = mention.summary.as_deref().map(str::trim).filter(|s| !s.is_empty()).ok_or(Error::MissingSummary)?;
    let fused = match mention.image_description.as_deref().map(str::trim).filter(|d| !d.is_empty()) {
        Some(visual) => format!("{summary} {visual}"),
        None => summary.to_string(),
    };
    mention.fused_description = Some(fused);
    Ok(mention)
}
