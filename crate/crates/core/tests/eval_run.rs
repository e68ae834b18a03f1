mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use melo_core::agent::Role;
use melo_core::eval::{ingest, run_eval, EvalReport};
use melo_core::{Error, UpdatePolicy};
use serde_json::Value;

#[test]
fn fixture_run_is_perfect() {
    let pipeline = common::pipeline(Arc::new(common::script()), |_| {});
    let report = run_eval("fixtures", &common::records(), &pipeline, 3, "h").unwrap().report;
    assert_eq!((report.n_total, report.n_correct, report.n_linked), (20, 20, 20));
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.per_round, BTreeMap::from([(1, 19), (2, 1)]));
    assert_eq!(report.n_fallback, 0);
    assert!(report.model_updates.is_empty());
    let ids: Vec<&str> = report.records.iter().map(|r| r.id.as_str()).collect();
    let expected: Vec<String> = (1..=20).map(|i| format!("m{i:02}")).collect();
    assert_eq!(ids, expected);
}

#[test]
fn always_absent_scores_zero_with_every_mention_at_the_bound() {
    let pipeline = common::pipeline(Arc::new(common::absent_script()), |_| {});
    let report = run_eval("fixtures", &common::records(), &pipeline, 4, "h").unwrap().report;
    assert_eq!(report.accuracy, 0.0);
    assert_eq!(report.n_matching_failed, 20);
    assert_eq!(report.per_round, BTreeMap::from([(5, 20)]));
    assert!(report.records.iter().all(|r| r.predicted.is_none() && !r.correct));
}

#[test]
fn empty_dataset_is_an_error() {
    let pipeline = common::pipeline(Arc::new(common::script()), |_| {});
    assert!(matches!(run_eval("empty", &[], &pipeline, 2, "h"), Err(Error::EmptyResults)));
}

#[test]
fn report_round_trips_and_counts_agree_with_traces() {
    let pipeline = common::pipeline(Arc::new(common::script()), |_| {});
    let run = run_eval("fixtures", &common::records(), &pipeline, 2, "h").unwrap();
    let back: EvalReport = serde_json::from_str(&run.report.to_json()).unwrap();
    assert_eq!(back, run.report);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    run.write_traces(&path).unwrap();
    let lines: Vec<Value> = std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 20);
    let correct = lines.iter().filter(|l| l["result"]["outcome"]["qid"] == l["gold_qid"]).count();
    assert_eq!(correct, run.report.n_correct);
    let two_rounds = lines.iter().filter(|l| l["result"]["trace"].as_array().unwrap().len() == 2).count();
    assert_eq!(two_rounds, run.report.per_round[&2]);
}

#[test]
fn degrading_clozer_is_replaced_at_the_interval() {
    // Records 3 and 4 (both "Jordan") get a wrong cloze answer.
    let backend = Arc::new(common::script().with_responder(|req| {
        let target = req.prompt.rsplit("Now solve this one:").next().unwrap_or_default();
        (req.role == Role::Clozer && target.contains("[TARGET MENTION]\nJordan\n")).then(|| "2".into())
    }));
    let policy = UpdatePolicy {
        window_size: 2,
        degradation_threshold: 0.05,
        eval_interval: 4,
        replacement_ladder: BTreeMap::from([(Role::Clozer, vec!["clozer-b".to_string()])]),
    };
    let pipeline = common::pipeline(backend, |pc| pc.update_policy = policy);
    let before = pipeline.model_for(Role::Clozer);
    let report = run_eval("fixtures", &common::records(), &pipeline, 4, "h").unwrap().report;

    assert_eq!(report.model_updates.len(), 1, "{:?}", report.model_updates);
    let update = &report.model_updates[0];
    assert_eq!((update.after, update.role), (4, Role::Clozer));
    assert_eq!((update.from.as_str(), update.to.as_str()), (before.as_str(), "clozer-b"));
    assert_eq!(report.final_models[&Role::Clozer], "clozer-b");
    assert_eq!(report.final_models[&Role::Judge], before);
    assert_eq!(report.n_correct, 18);
}

#[test]
fn ingestion_reports_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let good = std::fs::read_to_string(common::fixtures().join("dataset.jsonl")).unwrap();
    let mut lines: Vec<&str> = good.lines().take(3).collect();
    lines.insert(1, "{\"id\": \"broken\"");
    lines.insert(2, "");
    std::fs::write(&path, lines.join("\n")).unwrap();

    match ingest(&path, false) {
        Err(Error::Ingestion { errors, .. }) => {
            assert_eq!(errors.len(), 1);
            assert_eq!(errors[0].line, 2);
        }
        other => panic!("expected ingestion error, got {other:?}"),
    }
    let data = ingest(&path, true).unwrap();
    assert_eq!(data.records.len(), 3);
    assert_eq!(data.skipped.len(), 1);
}
