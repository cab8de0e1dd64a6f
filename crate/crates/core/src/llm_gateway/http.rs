//! Chat-completions over HTTP (`POST <endpoint>/chat/completions`).

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatTransport, GatewayError, LlmRequest, TransportError, TransportReply, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    /// Name of the environment variable holding the API key. Empty for
    /// endpoints without authentication.
    pub auth_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    300
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: usize,
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpTransport {
    pub fn new(config: &HttpConfig) -> Result<HttpTransport, GatewayError> {
        let api_key = if config.auth_env.is_empty() {
            None
        } else {
            let key = std::env::var(&config.auth_env)
                .map_err(|_| GatewayError::Auth(format!("environment variable {} is not set", config.auth_env)))?;
            Some(key)
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Cassette(format!("http client: {e}")))?;
        Ok(HttpTransport {
            client,
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            api_key,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &LlmRequest) -> Result<TransportReply, TransportError> {
        let body = WireRequest {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.params.temperature,
            top_p: request.params.top_p,
            n: request.params.n_completions,
            max_tokens: request.params.max_tokens,
            seed: request.params.seed,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        let mut parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
        parsed.choices.sort_by_key(|c| c.index);
        let completions = parsed
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect();
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(TransportReply { completions, usage })
    }
}
