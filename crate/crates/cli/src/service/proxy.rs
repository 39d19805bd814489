//! Forwarding chat requests to an external endpoint.
//!
//! Request body (JSON):
//!
//! ```text
//! { "question": str, "level": "view"|"object"|"scene",
//!   "token_count": int, "token_dim": int,
//!   "tokens": base64 of a CSTF container with records
//!             tokens [T, D] f32, tokens.grid [2], tokens.level }
//! ```
//!
//! Expected reply: `{ "answer": str }`. Anything else, a non-2xx status or
//! a timeout is reported as an error string.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use convsplat_core::chat::tokens_to_container;
use convsplat_core::encoder::TokenGrid;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Serialize, Deserialize)]
pub struct ProxyRequest {
    pub question: String,
    pub level: String,
    pub token_count: usize,
    pub token_dim: usize,
    pub tokens: String,
}

#[derive(Debug, Deserialize)]
struct ProxyReply {
    answer: String,
}

pub fn encode_tokens(grid: &TokenGrid) -> String {
    base64::engine::general_purpose::STANDARD.encode(tokens_to_container(grid).to_bytes())
}

pub async fn proxy_chat(
    client: &reqwest::Client,
    url: &str,
    timeout: Duration,
    grid: &TokenGrid,
    question: &str,
) -> Result<String, String> {
    let body = ProxyRequest {
        question: question.to_string(),
        level: grid.level.name().to_string(),
        token_count: grid.count,
        token_dim: grid.dim,
        tokens: encode_tokens(grid),
    };
    let resp = client
        .post(url)
        .timeout(timeout)
        .json(&body)
        .send()
        .await
        .map_err(|e| {
            if e.is_timeout() {
                format!("chat endpoint timed out after {:.1}s", timeout.as_secs_f64())
            } else {
                format!("chat endpoint unreachable: {e}")
            }
        })?;
    let status = resp.status();
    if !status.is_success() {
        return Err(format!("chat endpoint returned {status}"));
    }
    let bytes = resp.bytes().await.map_err(|e| format!("reading chat endpoint reply: {e}"))?;
    let reply: ProxyReply =
        serde_json::from_slice(&bytes).map_err(|e| format!("malformed chat endpoint reply: {e}"))?;
    Ok(reply.answer)
}
