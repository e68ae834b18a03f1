#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use melo_core::agent::{Backend, Role, ScriptRule, ScriptedBackend};
use melo_core::eval::ingest;
use melo_core::http::{HttpResponse, HttpTransport, TransportError};
use melo_core::kg::{CacheEntry, CachedRequest, KgMode, KgStore, ResponseCache};
use melo_core::registry::default_scorers;
use melo_core::{DatasetRecord, MeloConfig, Pipeline, PipelineConfig};
use serde_json::{json, Value};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn config() -> MeloConfig {
    MeloConfig::load(&fixtures().join("config.toml")).expect("fixture config")
}

pub fn records() -> Vec<DatasetRecord> {
    ingest(&fixtures().join("dataset.jsonl"), false).expect("fixture dataset").records
}

pub fn record(id: &str) -> DatasetRecord {
    records().into_iter().find(|r| r.id == id).expect("fixture record")
}

pub fn script() -> ScriptedBackend {
    ScriptedBackend::load(&fixtures().join("script.json")).expect("fixture script")
}

pub fn offline_store() -> Arc<KgStore> {
    Arc::new(config().kg_store(Some(KgMode::Offline)).expect("offline store"))
}

/// Fixture pipeline over `backend`, offline, with optional config tweaks.
pub fn pipeline(backend: Arc<dyn Backend>, tweak: impl FnOnce(&mut PipelineConfig)) -> Pipeline {
    let cfg = config();
    let mut pc = cfg.pipeline_config().expect("pipeline config");
    tweak(&mut pc);
    let scorer = default_scorers().build(&cfg.scorer, &cfg).expect("scorer");
    Pipeline::new(pc, offline_store(), scorer, backend.clone(), backend).expect("pipeline")
}

/// Summaries pass through, the judge never finds the entity.
pub fn absent_script() -> ScriptedBackend {
    ScriptedBackend::new(vec![
        ScriptRule::new(Role::Summarizer).reply("SUMMARY: a thing mentioned in passing."),
        ScriptRule::new(Role::VisionQa).reply("It is an object."),
        ScriptRule::new(Role::Judge).containing("[JUDGMENT]").reply("no"),
        ScriptRule::new(Role::Judge).containing("[CONFLICT ANALYSIS]").reply("Nothing fits."),
        ScriptRule::new(Role::Clozer).reply("1"),
    ])
}

/// Serves `wbsearchentities` pages from a fixed hit list, counting calls.
pub struct CountingApi {
    pub hits: Vec<Value>,
    pub calls: AtomicUsize,
}

impl CountingApi {
    pub fn new(hits: Vec<Value>) -> Self {
        CountingApi { hits, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl HttpTransport for CountingApi {
    fn get(&self, _url: &str, params: &[(String, String)], _t: Duration) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let get = |k: &str| params.iter().find(|(p, _)| p == k).map(|(_, v)| v.clone());
        let start: usize = get("continue").map_or(0, |c| c.parse().unwrap());
        let size: usize = get("limit").map_or(50, |c| c.parse().unwrap());
        Ok(HttpResponse::ok(search_page(&self.hits, start, size).to_string()))
    }

    fn post_json(&self, _: &str, _: &[(String, String)], _: &str, _: Duration) -> Result<HttpResponse, TransportError> {
        Err(TransportError("unexpected POST".into()))
    }
}

pub fn search_page(hits: &[Value], start: usize, size: usize) -> Value {
    let page: Vec<Value> = hits.iter().skip(start).take(size).cloned().collect();
    let mut v = json!({"search": page, "success": 1});
    if start + size < hits.len() {
        v["search-continue"] = json!(start + size);
    }
    v
}

/// Writes a search response for `query` straight into the cache, split
/// into pages of 50 the way the live API returns it.
pub fn seed_search(cache: &ResponseCache, query: &str, limit: usize, hits: &[Value]) {
    let mut pages = Vec::new();
    let mut start = 0;
    loop {
        pages.push(search_page(hits, start, 50).to_string());
        start += 50;
        if start >= hits.len().min(limit) {
            break;
        }
    }
    let request = CachedRequest { operation: "search".into(), query: query.into(), language: "en".into(), limit };
    cache.put(&CacheEntry { request, response_body_verbatim: pages, fetched_at: "2026-01-01T00:00:00Z".into() }).expect("cache write");
}
