//! Wikidata search and entity lookup with a replayable response cache.
//!
//! Search goes through the `wbsearchentities` action API, entity lookup
//! through `wbgetentities`. Every response body is cached verbatim, one
//! file per request, so an [`KgMode::Offline`] store replays earlier runs
//! exactly and never touches the network.

mod cache;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::http::{HttpResponse, HttpTransport, ReqwestTransport};
use crate::model::{Entity, Qid};

pub use cache::{CacheEntry, CachedRequest, ResponseCache};

pub const DEFAULT_ENDPOINT: &str = "https://www.wikidata.org/w/api.php";
pub const DEFAULT_SEARCH_LIMIT: usize = 200;
pub const MAX_SEARCH_LIMIT: usize = 500;
/// Per-request page size accepted by `wbsearchentities` for anonymous clients.
const PAGE_SIZE: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub limit: usize,
    pub language: String,
}

impl SearchQuery {
    pub fn new(text: impl Into<String>) -> Self {
        SearchQuery { text: text.into(), limit: DEFAULT_SEARCH_LIMIT, language: "en".to_string() }
    }

    pub fn with_limit(mut self, limit: usize) -> Self {
        self.limit = limit;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::invalid("text", "search text is empty"));
        }
        if !(1..=MAX_SEARCH_LIMIT).contains(&self.limit) {
            return Err(Error::invalid("limit", format!("{} outside [1, {MAX_SEARCH_LIMIT}]", self.limit)));
        }
        Ok(())
    }
}

/// Trim and collapse internal whitespace; case is preserved.
pub fn normalize_query(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgMode {
    /// Always query the API; refresh the cache.
    Online,
    /// Cache only. Never performs network IO.
    Offline,
    /// Cache first, API on miss.
    #[default]
    ReadThrough,
}

pub struct KgStore {
    endpoint: String,
    cache: ResponseCache,
    mode: KgMode,
    transport: Option<Arc<dyn HttpTransport>>,
    min_spacing: Duration,
    retry_backoff: Duration,
    timeout: Duration,
    last_request: Mutex<Option<Instant>>,
}

impl std::fmt::Debug for KgStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KgStore").field("endpoint", &self.endpoint).field("cache_dir", &self.cache.dir()).field("mode", &self.mode).finish()
    }
}

impl KgStore {
    /// Offline stores get no transport at all.
    pub fn new(endpoint: impl Into<String>, cache_dir: impl Into<PathBuf>, mode: KgMode) -> Result<Self> {
        let transport: Option<Arc<dyn HttpTransport>> = match mode {
            KgMode::Offline => None,
            _ => Some(Arc::new(ReqwestTransport::new().map_err(|e| Error::KgUnreachable(e.0))?)),
        };
        Ok(Self::build(endpoint.into(), cache_dir.into(), mode, transport))
    }

    pub fn with_transport(
        endpoint: impl Into<String>,
        cache_dir: impl Into<PathBuf>,
        mode: KgMode,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        let transport = (mode != KgMode::Offline).then_some(transport);
        Self::build(endpoint.into(), cache_dir.into(), mode, transport)
    }

    fn build(endpoint: String, cache_dir: PathBuf, mode: KgMode, transport: Option<Arc<dyn HttpTransport>>) -> Self {
        KgStore {
            endpoint,
            cache: ResponseCache::new(cache_dir),
            mode,
            transport,
            min_spacing: Duration::from_millis(100),
            retry_backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(30),
            last_request: Mutex::new(None),
        }
    }

    pub fn with_pacing(mut self, min_spacing: Duration, retry_backoff: Duration) -> Self {
        self.min_spacing = min_spacing;
        self.retry_backoff = retry_backoff;
        self
    }

    pub fn mode(&self) -> KgMode {
        self.mode
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Entities in API order, deduplicated by qid, at most `query.limit`.
    pub fn search(&self, query: &SearchQuery) -> Result<Vec<Entity>> {
        query.validate()?;
        let request = CachedRequest {
            operation: "search".into(),
            query: normalize_query(&query.text),
            language: query.language.clone(),
            limit: query.limit,
        };
        let pages = self.load(&request, |store| store.fetch_search_pages(&request))?;
        parse_search_pages(&pages, query.limit)
    }

    pub fn fetch_entity(&self, qid: &str) -> Result<Entity> {
        let qid = Qid::parse(qid).ok_or_else(|| Error::MalformedQid { field: "qid", value: qid.to_string() })?;
        self.fetch_entity_in(&qid, "en")
    }

    pub fn fetch_entity_in(&self, qid: &Qid, language: &str) -> Result<Entity> {
        let request = CachedRequest { operation: "entity".into(), query: qid.to_string(), language: language.to_string(), limit: 1 };
        let pages = self.load(&request, |store| {
            let params = vec![
                ("action".to_string(), "wbgetentities".to_string()),
                ("ids".to_string(), qid.to_string()),
                ("props".to_string(), "labels|descriptions|aliases|claims".to_string()),
                ("languages".to_string(), language.to_string()),
                ("format".to_string(), "json".to_string()),
            ];
            Ok(vec![store.get(&params)?])
        })?;
        let mut entity = parse_entity(pages.first().map(String::as_str).unwrap_or(""), qid, language)?;
        let classes = instance_of_ids(pages.first().map(String::as_str).unwrap_or(""), qid);
        if !classes.is_empty() {
            if let Some(labels) = self.labels_for(&classes, language)? {
                entity.set_attribute("instance of", labels);
            }
        }
        Ok(entity)
    }

    fn labels_for(&self, ids: &[String], language: &str) -> Result<Option<String>> {
        let joined = ids.join("|");
        let request = CachedRequest { operation: "labels".into(), query: joined.clone(), language: language.to_string(), limit: ids.len() };
        let pages = match self.load(&request, |store| {
            let params = vec![
                ("action".to_string(), "wbgetentities".to_string()),
                ("ids".to_string(), joined.clone()),
                ("props".to_string(), "labels".to_string()),
                ("languages".to_string(), language.to_string()),
                ("format".to_string(), "json".to_string()),
            ];
            Ok(vec![store.get(&params)?])
        }) {
            Ok(p) => p,
            // class labels are decoration; an offline fixture may omit them
            Err(Error::CacheMiss { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let v: Value =
            serde_json::from_str(pages.first().map(String::as_str).unwrap_or("")).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        let labels: Vec<String> =
            ids.iter().filter_map(|id| v["entities"][id]["labels"][language]["value"].as_str().map(str::to_string)).collect();
        Ok((!labels.is_empty()).then(|| labels.join(", ")))
    }

    fn load(&self, request: &CachedRequest, fetch: impl FnOnce(&Self) -> Result<Vec<String>>) -> Result<Vec<String>> {
        if self.mode != KgMode::Online {
            if let Some(entry) = self.cache.get(request)? {
                return Ok(entry.response_body_verbatim);
            }
            if self.mode == KgMode::Offline {
                return Err(Error::CacheMiss { operation: request.operation.clone(), key: request.query.clone() });
            }
        }
        let pages = fetch(self)?;
        self.cache.put(&CacheEntry {
            request: request.clone(),
            response_body_verbatim: pages.clone(),
            fetched_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })?;
        Ok(pages)
    }

    fn fetch_search_pages(&self, request: &CachedRequest) -> Result<Vec<String>> {
        let mut pages = Vec::new();
        let mut offset = 0usize;
        while offset < request.limit {
            let size = PAGE_SIZE.min(request.limit - offset);
            let mut params = vec![
                ("action".to_string(), "wbsearchentities".to_string()),
                ("search".to_string(), request.query.clone()),
                ("language".to_string(), request.language.clone()),
                ("uselang".to_string(), request.language.clone()),
                ("type".to_string(), "item".to_string()),
                ("limit".to_string(), size.to_string()),
                ("format".to_string(), "json".to_string()),
            ];
            if offset > 0 {
                params.push(("continue".to_string(), offset.to_string()));
            }
            let body = self.get(&params)?;
            let v: Value = serde_json::from_str(&body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
            let next = v.get("search-continue").and_then(Value::as_u64).map(|n| n as usize);
            pages.push(body);
            match next {
                Some(n) if n > offset => offset = n,
                _ => break,
            }
        }
        Ok(pages)
    }

    fn get(&self, params: &[(String, String)]) -> Result<String> {
        let transport = self.transport.as_ref().ok_or_else(|| Error::KgUnreachable("store has no transport".into()))?;
        let mut resp = self.paced_get(transport.as_ref(), params)?;
        if resp.status == 429 {
            log::warn!("wikidata returned 429; retrying once");
            std::thread::sleep(self.retry_backoff);
            resp = self.paced_get(transport.as_ref(), params)?;
        }
        if !resp.is_success() {
            return Err(Error::KgUnreachable(format!("HTTP {}: {}", resp.status, resp.body)));
        }
        Ok(resp.body)
    }

    fn paced_get(&self, transport: &dyn HttpTransport, params: &[(String, String)]) -> Result<HttpResponse> {
        {
            let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(t) = *last {
                let elapsed = t.elapsed();
                if elapsed < self.min_spacing {
                    std::thread::sleep(self.min_spacing - elapsed);
                }
            }
            *last = Some(Instant::now());
        }
        transport.get(&self.endpoint, params, self.timeout).map_err(|e| Error::KgUnreachable(e.0))
    }
}

fn parse_search_pages(pages: &[String], limit: usize) -> Result<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::new();
    for body in pages {
        let v: Value = serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        if let Some(err) = v.get("error") {
            return Err(Error::MalformedResponse(format!("API error: {err}")));
        }
        let hits = v.get("search").and_then(Value::as_array).ok_or_else(|| Error::MalformedResponse("missing `search` array".into()))?;
        for hit in hits {
            let Some(qid) = hit.get("id").and_then(Value::as_str).and_then(Qid::parse) else {
                continue;
            };
            if out.iter().any(|e| e.qid == qid) {
                continue;
            }
            let name = hit
                .get("label")
                .or_else(|| hit.pointer("/display/label/value"))
                .or_else(|| hit.pointer("/match/text"))
                .and_then(Value::as_str)
                .unwrap_or(qid.as_str())
                .to_string();
            let description = hit
                .get("description")
                .or_else(|| hit.pointer("/display/description/value"))
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            let mut entity = Entity::new(qid, name, description);
            if let Some(aliases) = hit.get("aliases").and_then(Value::as_array) {
                let aliases: Vec<&str> = aliases.iter().filter_map(Value::as_str).collect();
                if !aliases.is_empty() {
                    entity.set_attribute("aliases", aliases.join(", "));
                }
            }
            out.push(entity);
        }
    }
    out.truncate(limit);
    Ok(out)
}

fn parse_entity(body: &str, qid: &Qid, language: &str) -> Result<Entity> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    let record = v
        .get("entities")
        .and_then(|e| e.get(qid.as_str()))
        .ok_or_else(|| Error::MalformedResponse(format!("no entities.{qid} in response")))?;
    if record.get("missing").is_some() {
        return Err(Error::NotFound(qid.to_string()));
    }
    let text = |field: &str| record[field][language]["value"].as_str().map(str::to_string);
    let mut entity = Entity::new(qid.clone(), text("labels").unwrap_or_else(|| qid.to_string()), text("descriptions").unwrap_or_default());
    if let Some(aliases) = record["aliases"][language].as_array() {
        let aliases: Vec<&str> = aliases.iter().filter_map(|a| a["value"].as_str()).collect();
        if !aliases.is_empty() {
            entity.set_attribute("aliases", aliases.join(", "));
        }
    }
    if let Some(images) = record["claims"]["P18"].as_array() {
        entity.images = images
            .iter()
            .filter_map(|c| c.pointer("/mainsnak/datavalue/value").and_then(Value::as_str))
            .map(|f| format!("https://commons.wikimedia.org/wiki/Special:FilePath/{}", f.replace(' ', "_")))
            .collect();
    }
    Ok(entity)
}

fn instance_of_ids(body: &str, qid: &Qid) -> Vec<String> {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return Vec::new();
    };
    v["entities"][qid.as_str()]["claims"]["P31"]
        .as_array()
        .map(|claims| {
            claims.iter().filter_map(|c| c.pointer("/mainsnak/datavalue/value/id").and_then(Value::as_str)).map(str::to_string).collect()
        })
        .unwrap_or_default()
}
