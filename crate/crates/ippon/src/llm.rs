//! Minimal chat-completion client used at episode setup to fetch proximity
//! levels, with an offline cache path so runs never require network.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "IPPON_LLM_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("credential missing: set {API_KEY_ENV}")]
    MissingCredential,
    #[error("authentication failed (HTTP {0})")]
    Auth(u16),
    #[error("endpoint error after {attempts} attempts: {msg}; use --offline with a cached table")]
    Exhausted { attempts: usize, msg: String },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("offline mode but cache {0} is missing")]
    NoCache(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    /// Bypass networking and require the cache.
    pub offline: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "gpt-4".to_string(),
            offline: true,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

/// Send one chat-completion request and return the assistant text.
/// Retries transient failures three times with backoff.
pub fn query_llm(cfg: &LlmConfig, prompt: &str) -> Result<String, LlmError> {
    if cfg.offline {
        return Err(LlmError::Exhausted {
            attempts: 0,
            msg: "offline mode".into(),
        });
    }
    let key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::MissingCredential)?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| LlmError::Exhausted {
            attempts: 0,
            msg: e.to_string(),
        })?;
    let attempts = 3;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_secs(1 << attempt));
        }
        let res = client
            .post(&cfg.endpoint)
            .bearer_auth(&key)
            .json(&ChatRequest {
                model: &cfg.model,
                messages: [ChatMessage {
                    role: "user",
                    content: prompt,
                }],
            })
            .send();
        match res {
            Ok(resp) => {
                let status = resp.status();
                if status.as_u16() == 401 || status.as_u16() == 403 {
                    return Err(LlmError::Auth(status.as_u16()));
                }
                if !status.is_success() {
                    last = format!("HTTP {status}");
                    continue;
                }
                let body: serde_json::Value = resp
                    .json()
                    .map_err(|e| LlmError::BadResponse(e.to_string()))?;
                return body["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()));
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(LlmError::Exhausted {
        attempts,
        msg: last,
    })
}

/// Fetch the raw response, preferring the cache. The raw assistant text is
/// persisted beside the parsed table cache.
pub fn query_with_cache(cfg: &LlmConfig, prompt: &str, raw_cache: &Path) -> Result<String, LlmError> {
    if raw_cache.exists() {
        return Ok(std::fs::read_to_string(raw_cache)?);
    }
    if cfg.offline {
        return Err(LlmError::NoCache(raw_cache.to_path_buf()));
    }
    let text = query_llm(cfg, prompt)?;
    if let Some(dir) = raw_cache.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(raw_cache, &text)?;
    Ok(text)
}
