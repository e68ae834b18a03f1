//! Minimal blocking HTTP seam shared by the Wikidata client, the live agent
//! backend and the embedding scorer client. Tests swap in counting fakes.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        HttpResponse { status: 200, body: body.into() }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// Connection-level failure: DNS, refused, reset, timeout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str, query: &[(String, String)], timeout: Duration) -> Result<HttpResponse, TransportError>;

    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(concat!("melo/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(ReqwestTransport { client })
    }

    fn finish(resp: reqwest::Result<reqwest::blocking::Response>) -> Result<HttpResponse, TransportError> {
        let resp = resp.map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

impl HttpTransport for ReqwestTransport {
    fn get(&self, url: &str, query: &[(String, String)], timeout: Duration) -> Result<HttpResponse, TransportError> {
        Self::finish(self.client.get(url).query(query).timeout(timeout).send())
    }

    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<HttpResponse, TransportError> {
        let mut req =
            self.client.post(url).header(reqwest::header::CONTENT_TYPE, "application/json").body(body.to_string()).timeout(timeout);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        Self::finish(req.send())
    }
}

/// Counting semaphore bounding in-flight requests.
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cv.notify_one();
    }
}
