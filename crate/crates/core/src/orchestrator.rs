//! End-to-end coordination of the stage agents and performance-gated
//! model replacement.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::adapter::{adapt_loop, AdapterConfig, LinkReadyOutcome, LoopContext};
use crate::agent::{Agent, Backend, GenerationParams, Role, DEFAULT_MAX_INPUT_TOKENS, DEFAULT_TEMPERATURE};
use crate::clozer::{self, ClozeShot};
use crate::error::{Error, Result};
use crate::fuser::{describe_image, fuse, summarize_context, Granularity, SummaryPromptSpec, VisualQaSpec};
use crate::kg::KgStore;
use crate::model::{LinkOutcome, LinkResult, Mention, Stage};
use crate::similarity::Scorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    pub window_size: usize,
    pub degradation_threshold: f64,
    pub eval_interval: usize,
    /// Pre-validated replacement models per role, in order of preference.
    #[serde(default)]
    pub replacement_ladder: BTreeMap<Role, Vec<String>>,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        UpdatePolicy { window_size: 50, degradation_threshold: 0.05, eval_interval: 50, replacement_ladder: BTreeMap::new() }
    }
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::invalid("window_size", "must be at least 1"));
        }
        if !(self.degradation_threshold > 0.0 && self.degradation_threshold < 1.0) {
            return Err(Error::invalid("degradation_threshold", format!("{} outside (0, 1)", self.degradation_threshold)));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval_interval", "must be at least 1"));
        }
        for (role, ladder) in &self.replacement_ladder {
            for (i, m) in ladder.iter().enumerate() {
                if ladder[..i].contains(m) {
                    return Err(Error::invalid("replacement_ladder", format!("{m:?} listed twice for {role}")));
                }
            }
        }
        Ok(())
    }

    /// The ladder entry after `current`, or the first entry when `current`
    /// is not on the ladder.
    pub fn next_model(&self, role: Role, current: &str) -> Option<&str> {
        let ladder = self.replacement_ladder.get(&role)?;
        match ladder.iter().position(|m| m == current) {
            Some(i) => ladder.get(i + 1),
            None => ladder.first(),
        }
        .map(String::as_str)
    }
}

/// Two adjacent, disjoint windows of correctness bits. Bits age from
/// `current` into `previous` and fall off the end of `previous`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTracker {
    window_size: usize,
    current: VecDeque<bool>,
    previous: VecDeque<bool>,
}

/// Mean of a window, or "insufficient data" when it holds nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowMean(pub Option<f64>);

impl fmt::Display for WindowMean {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(m) => write!(f, "{m:.4}"),
            None => f.write_str("insufficient data"),
        }
    }
}

impl PerformanceTracker {
    pub fn new(window_size: usize) -> Self {
        let window_size = window_size.max(1);
        PerformanceTracker { window_size, current: VecDeque::with_capacity(window_size), previous: VecDeque::with_capacity(window_size) }
    }

    pub fn record(&mut self, correct: bool) {
        if self.current.len() == self.window_size {
            if let Some(old) = self.current.pop_front() {
                if self.previous.len() == self.window_size {
                    self.previous.pop_front();
                }
                self.previous.push_back(old);
            }
        }
        self.current.push_back(correct);
    }

    pub fn current_window(&self) -> impl Iterator<Item = bool> + '_ {
        self.current.iter().copied()
    }

    pub fn current_mean(&self) -> WindowMean {
        WindowMean(mean(&self.current))
    }

    pub fn previous_mean(&self) -> WindowMean {
        WindowMean(mean(&self.previous))
    }

    pub fn windows_full(&self) -> bool {
        self.current.len() == self.window_size && self.previous.len() == self.window_size
    }

    pub fn reset(&mut self) {
        self.current.clear();
        self.previous.clear();
    }
}

fn mean(bits: &VecDeque<bool>) -> Option<f64> {
    (!bits.is_empty()).then(|| bits.iter().filter(|b| **b).count() as f64 / bits.len() as f64)
}

/// One tracker per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleTrackers {
    pub trackers: BTreeMap<Role, PerformanceTracker>,
}

impl RoleTrackers {
    pub fn new(window_size: usize) -> Self {
        RoleTrackers { trackers: Role::ALL.iter().map(|r| (*r, PerformanceTracker::new(window_size))).collect() }
    }

    pub fn get(&self, role: Role) -> &PerformanceTracker {
        &self.trackers[&role]
    }

    pub fn record_outcome(&mut self, role: Role, correct: bool) {
        if let Some(t) = self.trackers.get_mut(&role) {
            t.record(correct);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum UpdateDecision {
    Keep,
    Replace { role: Role, new_model_id: String },
}

/// Replace only at an interval boundary, with both windows full, an absolute
/// drop above the threshold, and a next model on the ladder.
pub fn maybe_update(
    tracker: &PerformanceTracker,
    policy: &UpdatePolicy,
    role: Role,
    current_model: &str,
    processed_count: usize,
) -> UpdateDecision {
    if processed_count == 0 || !processed_count.is_multiple_of(policy.eval_interval) || !tracker.windows_full() {
        return UpdateDecision::Keep;
    }
    let (Some(prev), Some(curr)) = (tracker.previous_mean().0, tracker.current_mean().0) else {
        return UpdateDecision::Keep;
    };
    if prev - curr <= policy.degradation_threshold {
        return UpdateDecision::Keep;
    }
    match policy.next_model(role, current_model) {
        Some(next) => UpdateDecision::Replace { role, new_model_id: next.to_string() },
        None => UpdateDecision::Keep,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub adapter: AdapterConfig,
    pub summary: SummaryPromptSpec,
    pub granularity: Granularity,
    pub cloze_shots: Vec<ClozeShot>,
    pub models: BTreeMap<Role, String>,
    pub temperature: f64,
    pub max_input_tokens: usize,
    pub seed: Option<u64>,
    pub update_policy: UpdatePolicy,
}

impl PipelineConfig {
    /// Bundled prompts and published defaults, every role on `model`.
    pub fn with_model(model: &str) -> Self {
        PipelineConfig {
            adapter: AdapterConfig::default(),
            summary: SummaryPromptSpec::builtin(),
            granularity: Granularity::default(),
            cloze_shots: clozer::builtin_shots(),
            models: Role::ALL.iter().map(|r| (*r, model.to_string())).collect(),
            temperature: DEFAULT_TEMPERATURE,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
            seed: None,
            update_policy: UpdatePolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.update_policy.validate()?;
        for role in Role::ALL {
            if self.models.get(&role).is_none_or(|m| m.trim().is_empty()) {
                return Err(Error::invalid("models", format!("no model assigned to {role}")));
            }
        }
        GenerationParams { temperature: self.temperature, max_input_tokens: self.max_input_tokens, model_id: String::new(), seed: None }
            .validate()
    }
}

/// Stage handles shared by every pipeline run.
pub struct Pipeline {
    config: PipelineConfig,
    store: Arc<KgStore>,
    scorer: Arc<dyn Scorer>,
    text_backend: Arc<dyn Backend>,
    vision_backend: Arc<dyn Backend>,
    models: RwLock<BTreeMap<Role, String>>,
}

/// Per-run agent set, taken from the model assignments at admission.
struct Agents {
    summarizer: Agent,
    vision: Agent,
    judge: Agent,
    clozer: Agent,
}

/// What the stages before the loop produced.
struct Prepared {
    mention: Mention,
    stages: Vec<Stage>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        store: Arc<KgStore>,
        scorer: Arc<dyn Scorer>,
        text_backend: Arc<dyn Backend>,
        vision_backend: Arc<dyn Backend>,
    ) -> Result<Self> {
        config.validate()?;
        let models = RwLock::new(config.models.clone());
        Ok(Pipeline { config, store, scorer, text_backend, vision_backend, models })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn models(&self) -> BTreeMap<Role, String> {
        self.models.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn model_for(&self, role: Role) -> String {
        self.models.read().unwrap_or_else(|e| e.into_inner())[&role].clone()
    }

    /// Swaps a model assignment. Blocks new admissions while held.
    pub fn apply(&self, decision: &UpdateDecision) -> Option<String> {
        match decision {
            UpdateDecision::Keep => None,
            UpdateDecision::Replace { role, new_model_id } => {
                let mut models = self.models.write().unwrap_or_else(|e| e.into_inner());
                models.insert(*role, new_model_id.clone())
            }
        }
    }

    fn agents(&self) -> Agents {
        let models = self.models.read().unwrap_or_else(|e| e.into_inner());
        let params = |role: Role| GenerationParams {
            temperature: self.config.temperature,
            max_input_tokens: self.config.max_input_tokens,
            model_id: models[&role].clone(),
            seed: self.config.seed,
        };
        Agents {
            summarizer: Agent::new(self.text_backend.clone(), params(Role::Summarizer)),
            vision: Agent::new(self.vision_backend.clone(), params(Role::VisionQa)),
            judge: Agent::new(self.text_backend.clone(), params(Role::Judge)),
            clozer: Agent::new(self.text_backend.clone(), params(Role::Clozer)),
        }
    }

    fn prepare(&self, mut mention: Mention, agents: &Agents, stages: &mut Vec<Stage>) -> Result<Mention> {
        stages.push(Stage::Summary);
        summarize_context(&mut mention, &self.config.summary, None, &agents.summarizer)?;
        if mention.has_visual_input() {
            stages.push(Stage::Vision);
            let spec = VisualQaSpec::for_mention(&mention, self.config.granularity);
            describe_image(&mut mention, &spec, &agents.vision)?;
        }
        stages.push(Stage::Fuse);
        fuse(mention)
    }

    fn run_loop(&self, mention: Mention, agents: &Agents) -> Result<LinkReadyOutcome> {
        let ctx = LoopContext {
            store: &self.store,
            scorer: self.scorer.as_ref(),
            config: &self.config.adapter,
            summary_spec: &self.config.summary,
            summarizer: &agents.summarizer,
            judge: &agents.judge,
        };
        adapt_loop(mention, &ctx)
    }

    /// Runs fusion and the adaptive loop, stopping before the clozer.
    pub fn candidates(&self, mention: Mention) -> Result<LinkReadyOutcome> {
        let agents = self.agents();
        let mut stages = Vec::new();
        let prepared = self.prepare(mention, &agents, &mut stages)?;
        self.run_loop(prepared, &agents)
    }

    /// summary → vision (when there is visual input) → fuse → loop → cloze.
    ///
    /// Stage errors end the run as matching-failed with the error recorded;
    /// they never propagate.
    pub fn run_pipeline(&self, mention: Mention) -> LinkResult {
        let agents = self.agents();
        let id = mention.id.clone();
        let mut stages = Vec::new();
        let failed = |stages: Vec<Stage>, trace, rounds_used, e: Error| {
            log::warn!("mention {id}: {e}");
            LinkResult {
                mention_id: id.clone(),
                outcome: LinkOutcome::MatchingFailed,
                rounds_used,
                trace,
                stages,
                fallback: false,
                error: Some(e.to_string()),
            }
        };
        let prepared = match self.prepare(mention, &agents, &mut stages) {
            Ok(m) => Prepared { mention: m, stages },
            Err(e) => return failed(stages, Vec::new(), 0, e),
        };
        let Prepared { mention, mut stages } = prepared;
        stages.push(Stage::Loop);
        match self.run_loop(mention, &agents) {
            Err(e) => failed(stages, Vec::new(), 0, e),
            Ok(LinkReadyOutcome::MatchingFailed { trace, .. }) => LinkResult {
                mention_id: id.clone(),
                outcome: LinkOutcome::MatchingFailed,
                rounds_used: trace.len() as u32,
                trace,
                stages,
                fallback: false,
                error: None,
            },
            Ok(LinkReadyOutcome::Ready { mention, candidate_set, rounds_used, trace, .. }) => {
                stages.push(Stage::Cloze);
                let mut result = clozer::link(&mention, &candidate_set, &agents.clozer, &self.config.cloze_shots);
                result.rounds_used = rounds_used;
                result.trace = trace;
                result.stages = stages;
                result
            }
        }
    }
}
