//! Dataset ingestion, batch linking and Acc@1 reporting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::Role;
use crate::error::{Error, LineError, Result};
use crate::model::{validate_record, DatasetRecord, LinkOutcome, LinkResult, Mention, Qid, Verdict};
use crate::orchestrator::{maybe_update, Pipeline, RoleTrackers, UpdateDecision};

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub records: Vec<DatasetRecord>,
    /// Lines dropped under `skip_bad`.
    pub skipped: Vec<LineError>,
}

/// Reads a JSON-Lines dataset. Blank lines are ignored; unknown fields are
/// logged and ignored. Any bad line aborts unless `skip_bad` is set.
pub fn ingest(path: &Path, skip_bad: bool) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, line_no) {
            Ok(r) => records.push(r),
            Err(message) => errors.push(LineError { line: line_no, message }),
        }
    }
    if !errors.is_empty() && !skip_bad {
        return Err(Error::Ingestion { path: path.to_path_buf(), errors });
    }
    for e in &errors {
        log::warn!("{}: skipping line {}: {}", path.display(), e.line, e.message);
    }
    Ok(Ingested { records, skipped: errors })
}

fn parse_line(line: &str, line_no: usize) -> std::result::Result<DatasetRecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    for key in obj.keys().filter(|k| !DatasetRecord::FIELDS.contains(&k.as_str())) {
        log::warn!("line {line_no}: ignoring unknown field `{key}`");
    }
    let record: DatasetRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    validate_record(record).map_err(|e| e.to_string())
}

/// Acc@1: the fraction of results linked to their gold entity.
pub fn accuracy<'a, I>(results: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a LinkResult, &'a Qid)>,
{
    let (mut n, mut correct) = (0usize, 0usize);
    for (r, gold) in results {
        n += 1;
        correct += usize::from(r.is_correct(gold));
    }
    if n == 0 {
        return Err(Error::EmptyResults);
    }
    Ok(correct as f64 / n as f64)
}

/// Correctness bits credited to each role for one result.
///
/// Clozer and Summarizer follow final correctness, VisionQA too when it
/// actually ran. The Judge earns one bit per round: right when its verdict
/// agrees with whether the gold entity sat in the judged set.
pub fn role_signals(result: &LinkResult, gold: &Qid, vision_ran: bool) -> Vec<(Role, bool)> {
    let correct = result.is_correct(gold);
    let mut out = vec![(Role::Summarizer, correct)];
    if vision_ran {
        out.push((Role::VisionQa, correct));
    }
    for round in &result.trace {
        let gold_in = round.candidate_set.contains(gold);
        match round.verdict {
            Verdict::Present => out.push((Role::Judge, gold_in)),
            Verdict::Absent => out.push((Role::Judge, !gold_in)),
            Verdict::Pending => {}
        }
    }
    out.push((Role::Clozer, correct));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub gold_qid: String,
    pub predicted: Option<Qid>,
    pub correct: bool,
    pub rounds_used: u32,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    /// Mentions aggregated when the swap happened.
    pub after: usize,
    pub role: Role,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub n_total: usize,
    pub n_linked: usize,
    pub n_matching_failed: usize,
    pub n_correct: usize,
    pub n_fallback: usize,
    pub n_errors: usize,
    /// `n_correct / n_total`, unrounded.
    pub accuracy: f64,
    /// Keyed by rounds used.
    pub per_round: BTreeMap<u32, usize>,
    pub wall_time_ms: u64,
    pub config_hash: String,
    pub model_updates: Vec<ModelUpdate>,
    pub final_models: BTreeMap<Role, String>,
    pub records: Vec<RecordOutcome>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset            {}", self.dataset_name);
        let _ = writeln!(s, "mentions           {}", self.n_total);
        let _ = writeln!(s, "linked             {}", self.n_linked);
        let _ = writeln!(s, "matching failed    {}", self.n_matching_failed);
        let _ = writeln!(s, "correct            {}", self.n_correct);
        let _ = writeln!(s, "cloze fallbacks    {}", self.n_fallback);
        let _ = writeln!(s, "stage errors       {}", self.n_errors);
        let _ = writeln!(s, "Acc@1              {:.4} ({}/{})", self.accuracy, self.n_correct, self.n_total);
        for (rounds, n) in &self.per_round {
            let share = *n as f64 / self.n_total.max(1) as f64;
            let _ = writeln!(s, "  {rounds} round(s)       {n:>4}  {share:.4}");
        }
        for u in &self.model_updates {
            let _ = writeln!(s, "update after {:>5}  {}: {} -> {}", u.after, u.role, u.from, u.to);
        }
        let _ = writeln!(s, "wall time          {} ms", self.wall_time_ms);
        let _ = write!(s, "config             {}", &self.config_hash[..self.config_hash.len().min(12)]);
        s
    }
}

pub struct EvalRun {
    pub report: EvalReport,
    /// In dataset order.
    pub results: Vec<LinkResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub gold_qid: String,
    pub result: LinkResult,
}

impl EvalRun {
    /// One JSON object per record: gold plus the full link result.
    pub fn write_traces(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        for (rec, result) in self.report.records.iter().zip(&self.results) {
            let line = TraceLine { gold_qid: rec.gold_qid.clone(), result: result.clone() };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn run_one(pipeline: &Pipeline, record: &DatasetRecord) -> LinkResult {
    match Mention::from_record(record) {
        Ok(m) => pipeline.run_pipeline(m),
        Err(e) => LinkResult {
            mention_id: record.id.clone(),
            outcome: LinkOutcome::MatchingFailed,
            rounds_used: 0,
            trace: Vec::new(),
            stages: Vec::new(),
            fallback: false,
            error: Some(e.to_string()),
        },
    }
}

/// Links every record on a pool of `workers` threads.
///
/// Results are aggregated in dataset order by this thread alone, so tracker
/// updates and replacement decisions do not depend on scheduling. A swap takes
/// the pipeline's write lock, holding back admissions until it completes.
pub fn run_eval(dataset_name: &str, records: &[DatasetRecord], pipeline: &Pipeline, workers: usize, config_hash: &str) -> Result<EvalRun> {
    if records.is_empty() {
        return Err(Error::EmptyResults);
    }
    let golds = records.iter().map(DatasetRecord::gold).collect::<Result<Vec<_>>>()?;
    let started = Instant::now();
    let policy = &pipeline.config().update_policy;
    let mut trackers = RoleTrackers::new(policy.window_size);
    let mut updates = Vec::new();
    let mut results: Vec<Option<LinkResult>> = vec![None; records.len()];

    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, LinkResult)>();
        for _ in 0..workers.clamp(1, records.len()) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = records.get(i) else { break };
                if tx.send((i, run_one(pipeline, record))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = HashMap::new();
        let mut cursor = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&cursor) {
                let rec = &records[cursor];
                let vision_ran = rec.image.is_some() && rec.image_description.is_none();
                for (role, bit) in role_signals(&r, &golds[cursor], vision_ran) {
                    trackers.record_outcome(role, bit);
                }
                results[cursor] = Some(r);
                cursor += 1;
                for role in Role::ALL {
                    let current = pipeline.model_for(role);
                    let decision = maybe_update(trackers.get(role), policy, role, &current, cursor);
                    if let UpdateDecision::Replace { new_model_id, .. } = &decision {
                        log::info!("after {cursor} mentions: replacing {role} model {current} with {new_model_id}");
                        updates.push(ModelUpdate { after: cursor, role, from: current, to: new_model_id.clone() });
                        pipeline.apply(&decision);
                        if let Some(t) = trackers.trackers.get_mut(&role) {
                            t.reset();
                        }
                    }
                }
            }
        }
    });

    let results: Vec<LinkResult> = results.into_iter().map(|r| r.expect("every record aggregated")).collect();
    let report = build_report(dataset_name, records, &golds, &results, updates, pipeline, config_hash, started);
    Ok(EvalRun { report, results })
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    dataset_name: &str,
    records: &[DatasetRecord],
    golds: &[Qid],
    results: &[LinkResult],
    model_updates: Vec<ModelUpdate>,
    pipeline: &Pipeline,
    config_hash: &str,
    started: Instant,
) -> EvalReport {
    let mut per_round = BTreeMap::new();
    let outcomes: Vec<RecordOutcome> = records
        .iter()
        .zip(golds)
        .zip(results)
        .map(|((rec, gold), r)| {
            *per_round.entry(r.rounds_used).or_insert(0) += 1;
            RecordOutcome {
                id: rec.id.clone(),
                gold_qid: rec.gold_qid.clone(),
                predicted: r.outcome.linked_qid().cloned(),
                correct: r.is_correct(gold),
                rounds_used: r.rounds_used,
                fallback: r.fallback,
                error: r.error.clone(),
            }
        })
        .collect();
    let n_total = results.len();
    let n_linked = results.iter().filter(|r| r.outcome.linked_qid().is_some()).count();
    let n_correct = outcomes.iter().filter(|o| o.correct).count();
    EvalReport {
        dataset_name: dataset_name.to_string(),
        n_total,
        n_linked,
        n_matching_failed: n_total - n_linked,
        n_correct,
        n_fallback: outcomes.iter().filter(|o| o.fallback).count(),
        n_errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
        accuracy: n_correct as f64 / n_total as f64,
        per_round,
        wall_time_ms: started.elapsed().as_millis() as u64,
        config_hash: config_hash.to_string(),
        model_updates,
        final_models: pipeline.models(),
        records: outcomes,
    }
}
