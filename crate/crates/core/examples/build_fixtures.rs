//! Regenerates the offline fixture set from `fixtures/source.json`.
//!
//! Writes `dataset.jsonl`, `script.json`, `kg_cache/` and `manifest.json`
//! next to the source file, then replays the whole set offline and checks
//! that the gold-following script links every mention.
//!
//!     cargo run -p melo-core --example build_fixtures [-- fixtures/]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use melo_core::agent::{Role, Script, ScriptRule};
use melo_core::eval::{ingest, run_eval};
use melo_core::http::{HttpResponse, HttpTransport, TransportError};
use melo_core::kg::{KgMode, KgStore, SearchQuery, DEFAULT_ENDPOINT};
use melo_core::model::{DatasetRecord, LinkOutcome, Mention};
use melo_core::MeloConfig;
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Deserialize)]
struct Source {
    mentions: Vec<SourceMention>,
    search: BTreeMap<String, Vec<Value>>,
    entities: BTreeMap<String, SourceEntity>,
    labels: BTreeMap<String, String>,
    conflict_reply: String,
}

#[derive(Deserialize)]
struct SourceMention {
    id: String,
    words: String,
    gold: String,
    context: String,
    summary: String,
    feedback_summary: Option<String>,
    image: Option<String>,
    vision_reply: Option<String>,
    image_description: Option<String>,
}

#[derive(Deserialize)]
struct SourceEntity {
    labels: BTreeMap<String, String>,
    descriptions: BTreeMap<String, String>,
    aliases: BTreeMap<String, Vec<String>>,
    instance_of: Vec<String>,
    images: Vec<String>,
}

/// Answers `wbsearchentities` / `wbgetentities` from the source file.
struct SourceApi(Arc<Source>);

fn param<'a>(params: &'a [(String, String)], key: &str) -> Option<&'a str> {
    params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

impl SourceApi {
    fn search(&self, params: &[(String, String)]) -> Value {
        let q = param(params, "search").unwrap_or("");
        let start: usize = param(params, "continue").and_then(|c| c.parse().ok()).unwrap_or(0);
        let size: usize = param(params, "limit").and_then(|c| c.parse().ok()).unwrap_or(7);
        let all = self.0.search.get(q).cloned().unwrap_or_default();
        let hits: Vec<Value> = all
            .iter()
            .skip(start)
            .take(size)
            .map(|h| {
                let mut h = h.clone();
                let id = h["id"].as_str().unwrap_or_default().to_string();
                h["concepturi"] = json!(format!("http://www.wikidata.org/entity/{id}"));
                h["match"] = json!({"type": "label", "language": "en", "text": h["label"].clone()});
                h
            })
            .collect();
        let mut v = json!({"searchinfo": {"search": q}, "search": hits, "success": 1});
        if start + size < all.len() {
            v["search-continue"] = json!(start + size);
        }
        v
    }

    fn entities(&self, params: &[(String, String)]) -> Value {
        let ids = param(params, "ids").unwrap_or("");
        let mut out = serde_json::Map::new();
        if param(params, "props") == Some("labels") {
            for id in ids.split('|') {
                if let Some(label) = self.0.labels.get(id) {
                    out.insert(id.into(), json!({"id": id, "labels": {"en": {"language": "en", "value": label}}}));
                }
            }
            return json!({"entities": out, "success": 1});
        }
        let record = match self.0.entities.get(ids) {
            None => json!({"id": ids, "missing": ""}),
            Some(e) => {
                let text = |m: &BTreeMap<String, String>| {
                    m.iter().map(|(l, v)| (l.clone(), json!({"language": l, "value": v}))).collect::<serde_json::Map<_, _>>()
                };
                let aliases: serde_json::Map<_, _> = e
                    .aliases
                    .iter()
                    .map(|(l, vs)| (l.clone(), json!(vs.iter().map(|v| json!({"language": l, "value": v})).collect::<Vec<_>>())))
                    .collect();
                let p31: Vec<Value> = e
                    .instance_of
                    .iter()
                    .map(|c| json!({"mainsnak": {"snaktype": "value", "property": "P31", "datavalue": {"value": {"entity-type": "item", "id": c}, "type": "wikibase-entityid"}}, "type": "statement", "rank": "normal"}))
                    .collect();
                let p18: Vec<Value> = e
                    .images
                    .iter()
                    .map(|f| json!({"mainsnak": {"snaktype": "value", "property": "P18", "datavalue": {"value": f, "type": "string"}}, "type": "statement", "rank": "normal"}))
                    .collect();
                let mut claims = serde_json::Map::new();
                if !p31.is_empty() {
                    claims.insert("P31".into(), json!(p31));
                }
                if !p18.is_empty() {
                    claims.insert("P18".into(), json!(p18));
                }
                json!({"type": "item", "id": ids, "labels": text(&e.labels), "descriptions": text(&e.descriptions), "aliases": aliases, "claims": claims})
            }
        };
        out.insert(ids.into(), record);
        json!({"entities": out, "success": 1})
    }
}

impl HttpTransport for SourceApi {
    fn get(&self, _url: &str, params: &[(String, String)], _t: Duration) -> Result<HttpResponse, TransportError> {
        let body = match param(params, "action") {
            Some("wbsearchentities") => self.search(params),
            Some("wbgetentities") => self.entities(params),
            other => return Err(TransportError(format!("unsupported action {other:?}"))),
        };
        Ok(HttpResponse::ok(body.to_string()))
    }

    fn post_json(&self, _: &str, _: &[(String, String)], _: &str, _: Duration) -> Result<HttpResponse, TransportError> {
        Err(TransportError("not an API call".into()))
    }
}

const CONFIG: &str = r#"# Offline fixture run: scripted agents, cached Wikidata responses.
backend = "scripted"
script_path = "script.json"
seed = 7
kg_cache_dir = "kg_cache"
kg_mode = "offline"
# few demonstrations so that feedback survives the 512-token cap
summary_shots = 2
cloze_shots = 2
scorer = "bleu"
workers = 4
"#;

fn base_rules(src: &Source) -> Vec<ScriptRule> {
    let mut rules = Vec::new();
    for m in &src.mentions {
        let ctx = format!("Context: {}\n", m.context);
        if let Some(fb) = &m.feedback_summary {
            rules.push(ScriptRule::new(Role::Summarizer).containing(&ctx).containing("[FEEDBACK]").reply(format!("SUMMARY: {fb}")));
        }
        rules.push(ScriptRule::new(Role::Summarizer).containing(&ctx).reply(format!("SUMMARY: {}", m.summary)));
        if let (Some(img), Some(reply)) = (&m.image, &m.vision_reply) {
            rules.push(ScriptRule::new(Role::VisionQa).for_image(img).reply(reply));
        }
        // the judge follows the gold: yes exactly when it is listed
        for s in std::iter::once(&m.summary).chain(&m.feedback_summary) {
            rules.push(
                ScriptRule::new(Role::Judge)
                    .containing("[JUDGMENT]")
                    .containing(format!("Description: {s}"))
                    .containing(format!("({}):", m.gold))
                    .reply("Yes, the correct entity is listed."),
            );
        }
    }
    rules.push(ScriptRule::new(Role::Judge).containing("[JUDGMENT]").reply("No, none of these fit."));
    rules.push(ScriptRule::new(Role::Judge).containing("[CONFLICT ANALYSIS]").reply(&src.conflict_reply));
    rules
}

fn write_json(path: &Path, v: &impl serde::Serialize) {
    let mut text = serde_json::to_string_pretty(v).expect("serializes");
    text.push('\n');
    std::fs::write(path, text).unwrap_or_else(|e| panic!("writing {}: {e}", path.display()));
}

fn main() {
    let dir =
        std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    let src: Arc<Source> = Arc::new(
        serde_json::from_str(&std::fs::read_to_string(dir.join("source.json")).expect("source.json")).expect("source.json parses"),
    );

    let records: Vec<DatasetRecord> = src
        .mentions
        .iter()
        .map(|m| DatasetRecord {
            id: m.id.clone(),
            mention_words: m.words.clone(),
            context: m.context.clone(),
            image: m.image.clone(),
            image_description: m.image_description.clone(),
            gold_qid: m.gold.clone(),
        })
        .collect();
    let dataset: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(dir.join("dataset.jsonl"), dataset).expect("dataset.jsonl");

    // cache every request the pipeline will make
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, CONFIG).expect("config.toml");
    let cfg = MeloConfig::load(&cfg_path).expect("fixture config loads");
    std::fs::create_dir_all(&cfg.kg_cache_dir).expect("cache dir");
    let api = Arc::new(SourceApi(src.clone()));
    let warm =
        KgStore::with_transport(DEFAULT_ENDPOINT, &cfg.kg_cache_dir, KgMode::ReadThrough, api).with_pacing(Duration::ZERO, Duration::ZERO);
    for q in src.search.keys() {
        let hits = warm.search(&SearchQuery::new(q.as_str()).with_limit(cfg.search_limit)).expect("search");
        println!("cached search {q:?}: {} hits", hits.len());
    }
    for qid in src.entities.keys() {
        let e = warm.fetch_entity(qid).expect("entity");
        println!("cached entity {qid}: {} ({} attributes)", e.name, e.attributes.len());
    }

    // first pass without clozer rules to learn where each gold lands
    let mut rules = base_rules(&src);
    write_json(&dir.join("script.json"), &Script { rules: rules.clone(), default_replies: Default::default() });
    let pipeline = cfg.build_pipeline(None).expect("pipeline");
    let mut manifest = BTreeMap::new();
    for (m, r) in src.mentions.iter().zip(&records) {
        let gold = r.gold().unwrap();
        let ready = pipeline.candidates(Mention::from_record(r).unwrap()).expect("loop runs");
        let (cs, rounds) = match &ready {
            melo_core::adapter::LinkReadyOutcome::Ready { candidate_set, rounds_used, .. } => (candidate_set, *rounds_used),
            _ => panic!("{}: gold never entered the candidate set", m.id),
        };
        let rank = cs.candidates.iter().position(|c| c.entity.qid == gold).expect("gold in final set") + 1;
        assert!(cs.len() >= 2, "{}: only {} candidates", m.id, cs.len());
        let round1_rank = ready.trace()[0].candidate_set.candidates.iter().position(|c| c.entity.qid == gold).map(|i| i + 1);
        println!("{}: gold {} rank {rank} of {} after {rounds} round(s); round-1 rank {round1_rank:?}", m.id, m.gold, cs.len());
        let fused = ready.mention().fused_description.clone().unwrap();
        rules.push(ScriptRule::new(Role::Clozer).containing(format!("[SENTENCE]\n{fused}\n")).reply(format!("{rank}")));
        manifest.insert(m.id.clone(), json!({"gold_qid": m.gold, "gold_rank": rank, "rounds_used": rounds, "candidates": cs.len()}));
    }
    write_json(&dir.join("script.json"), &Script { rules, default_replies: Default::default() });
    write_json(&dir.join("manifest.json"), &manifest);

    // replay end to end
    let pipeline = cfg.build_pipeline(None).expect("pipeline");
    let data = ingest(&dir.join("dataset.jsonl"), false).expect("dataset ingests");
    let run = run_eval("fixtures", &data.records, &pipeline, cfg.workers, &cfg.hash()).expect("eval");
    for r in &run.results {
        assert!(matches!(r.outcome, LinkOutcome::Linked { .. }) && !r.fallback, "{r:?}");
    }
    assert_eq!(run.report.n_correct, run.report.n_total, "{}", run.report.render_table());
    let at2 = manifest.values().filter(|v| v["gold_rank"] == 2).count();
    let hard = manifest.values().filter(|v| v["rounds_used"] != 1).count();
    assert!(at2 >= 2, "want at least two golds at rank 2, got {at2}");
    assert!(hard >= 1, "want a mention that needs feedback");
    println!("{}", run.report.render_table());
}
