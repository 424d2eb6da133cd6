//! JSON-over-HTTP client for the scorer sidecar protocol.
//!
//! `POST /generate {"prompt","seed"} -> {"image_id"}`,
//! `POST /score {"image_id","text"} -> {"score"}`,
//! `POST /embed {"text"} -> {"vector"}`, `GET /meta`.
//! Errors come back as non-2xx responses with an `{"error"}` body.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Embedding};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Clone)]
pub(crate) struct JsonClient {
    base: String,
    agent: ureq::Agent,
}

impl JsonClient {
    pub(crate) fn new(base: &str, timeout: Duration) -> Self {
        JsonClient {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let resp = self.agent.post(&self.url(path)).send_json(body);
        decode(path, resp)
    }

    pub(crate) fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        decode(path, self.agent.get(&self.url(path)).call())
    }
}

fn decode<R: DeserializeOwned>(path: &str, resp: std::result::Result<ureq::Response, ureq::Error>) -> Result<R> {
    match resp {
        Ok(r) => r
            .into_json()
            .map_err(|e| Error::Backend(format!("{path}: bad response body: {e}"))),
        Err(ureq::Error::Status(code, r)) => {
            let detail = r
                .into_string()
                .ok()
                .and_then(|s| serde_json::from_str::<ErrorBody>(&s).ok().map(|b| b.error).or(Some(s)))
                .unwrap_or_default();
            Err(Error::Backend(format!("{path}: HTTP {code}: {detail}")))
        }
        Err(e) => Err(Error::Backend(format!("{path}: {e}"))),
    }
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Embedder backed by a sidecar's `/embed` endpoint.
pub struct HttpEmbedder {
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(base_url: &str) -> Self {
        HttpEmbedder {
            client: JsonClient::new(base_url, DEFAULT_TIMEOUT),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        let resp: EmbedResponse = self.client.post("/embed", &EmbedRequest { text })?;
        Embedding::new(resp.vector).map_err(|e| Error::Backend(format!("/embed: {e}")))
    }
}
