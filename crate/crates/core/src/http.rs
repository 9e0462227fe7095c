//! Blocking JSON-over-HTTP plumbing shared by the remote scorer and the
//! remote anchor classifier.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HttpError {
    #[error("transport error calling {url}: {message}")]
    Transport { url: String, message: String },
    #[error("{url} returned HTTP {status}: {body}")]
    Status {
        url: String,
        status: u16,
        body: String,
    },
    #[error("could not decode response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl HttpError {
    /// Transport failures and 5xx responses may succeed on retry.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Transport { .. } => true,
            HttpError::Status { status, .. } => *status >= 500,
            HttpError::Decode { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct HttpSettings {
    pub endpoint: String,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpSettings {
            endpoint: endpoint.into(),
            timeout_secs: 30.0,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    settings: HttpSettings,
}

impl JsonClient {
    pub fn new(settings: HttpSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(settings.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient { agent, settings }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.settings.endpoint.trim_end_matches('/'), path)
    }

    /// POST `body` to `path`, retrying retryable failures up to the
    /// configured count. Requests are idempotent.
    pub fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, HttpError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt < self.settings.retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, HttpError> {
        let url = self.url(path);
        let transport = |e: ureq::Error| HttpError::Transport {
            url: url.clone(),
            message: e.to_string(),
        };
        let mut resp = self.agent.post(&url).send_json(body).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(HttpError::Status {
                url,
                status,
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| HttpError::Decode {
            url,
            message: e.to_string(),
        })
    }
}
