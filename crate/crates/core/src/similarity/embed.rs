use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ScoreRequestBatch, Scorer};
use crate::error::{Error, Result};
use crate::http::{HttpTransport, ReqwestTransport, Semaphore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub service_url: String,
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    2
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { service_url: "http://127.0.0.1:8077".into(), timeout_ms: 10_000, max_in_flight: 2 }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    reference: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Client for the embedding similarity service.
pub struct EmbedScorer {
    config: EmbedConfig,
    transport: Arc<dyn HttpTransport>,
    in_flight: Semaphore,
}

impl EmbedScorer {
    pub fn new(config: EmbedConfig) -> Result<Self> {
        let transport = ReqwestTransport::new().map_err(|e| Error::ScorerUnreachable(e.0))?;
        Ok(Self::with_transport(config, Arc::new(transport)))
    }

    pub fn with_transport(config: EmbedConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let in_flight = Semaphore::new(config.max_in_flight);
        EmbedScorer { config, transport, in_flight }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.service_url.trim_end_matches('/'))
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.config.timeout_ms)
    }

    /// True when `GET /health` answers 200.
    pub fn health(&self) -> Result<bool> {
        let resp = self.transport.get(&self.url("/health"), &[], self.timeout()).map_err(|e| Error::ScorerUnreachable(e.0))?;
        Ok(resp.status == 200)
    }
}

impl Scorer for EmbedScorer {
    fn id(&self) -> &str {
        "embed"
    }

    fn score_batch(&self, batch: &ScoreRequestBatch) -> Result<Vec<f64>> {
        batch.validate()?;
        let body = serde_json::to_string(&ScoreRequest { reference: &batch.reference, candidates: &batch.candidates })?;
        let resp = {
            let _permit = self.in_flight.acquire();
            self.transport.post_json(&self.url("/v1/score"), &[], &body, self.timeout()).map_err(|e| Error::ScorerUnreachable(e.0))?
        };
        match resp.status {
            200..=299 => {}
            503 => return Err(Error::ScorerUnreachable(format!("service not ready: {}", resp.body))),
            s => return Err(Error::ScorerProtocolError(format!("HTTP {s}: {}", resp.body))),
        }
        let parsed: ScoreResponse =
            serde_json::from_str(&resp.body).map_err(|e| Error::ScorerProtocolError(format!("bad reply body: {e}")))?;
        if parsed.scores.len() != batch.candidates.len() {
            return Err(Error::ScorerProtocolError(format!("{} scores for {} candidates", parsed.scores.len(), batch.candidates.len())));
        }
        Ok(parsed.scores.into_iter().map(super::clamp_unit).collect())
    }
}
