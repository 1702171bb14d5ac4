use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{LlmBackend, LlmConfig, LlmError, LlmRequest, LlmResponse};

const TOP_LOGPROBS: u32 = 5;

/// Generic chat-completions client (messages array, temperature, logprobs).
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Config(format!("http client: {e}")))?;
        Ok(Self { client, endpoint_url: endpoint_url.into(), model_name: model_name.into(), api_key })
    }

    pub fn from_config(cfg: &LlmConfig) -> Result<Self, LlmError> {
        if cfg.endpoint_url.is_empty() {
            return Err(LlmError::Config("http backend needs endpoint_url".into()));
        }
        let api_key = std::env::var(&cfg.api_key_env_var).ok().filter(|k| !k.is_empty());
        Self::new(cfg.endpoint_url.clone(), cfg.model_name.clone(), api_key)
    }

    fn body(&self, req: &LlmRequest) -> Value {
        let mut body = json!({
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(TOP_LOGPROBS);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn parse_choice(v: &Value, want_logprobs: bool) -> Result<(String, Option<Vec<BTreeMap<String, f64>>>), LlmError> {
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| LlmError::Transport("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::Transport("response has no message content".into()))?
        .to_string();
    if !want_logprobs {
        return Ok((text, None));
    }
    let positions = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or(LlmError::LogprobsUnavailable)?;
    let mut out = Vec::with_capacity(positions.len());
    for pos in positions {
        let mut m = BTreeMap::new();
        for cand in pos.get("top_logprobs").and_then(Value::as_array).into_iter().flatten() {
            if let (Some(tok), Some(lp)) = (cand.get("token").and_then(Value::as_str), cand.get("logprob").and_then(Value::as_f64)) {
                m.insert(tok.to_string(), lp);
            }
        }
        // fall back to the sampled token when no alternatives were returned
        if m.is_empty() {
            if let (Some(tok), Some(lp)) = (pos.get("token").and_then(Value::as_str), pos.get("logprob").and_then(Value::as_f64)) {
                m.insert(tok.to_string(), lp);
            }
        }
        out.push(m);
    }
    Ok((text, Some(out)))
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &LlmRequest, timeout: Duration) -> Result<LlmResponse, LlmError> {
        let start = Instant::now();
        let mut call = self.client.post(&self.endpoint_url).timeout(timeout).json(&self.body(req));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited);
        }
        if status.is_client_error() {
            let body = resp.text().unwrap_or_default();
            return Err(LlmError::BackendRejected(format!("{status}: {}", body.chars().take(200).collect::<String>())));
        }
        if !status.is_success() {
            return Err(LlmError::Transport(format!("status {status}")));
        }
        let v: Value = resp.json().map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
        let (text, top_token_logprobs) = parse_choice(&v, req.want_logprobs)?;
        Ok(LlmResponse {
            text,
            top_token_logprobs,
            backend: format!("http:{}", self.model_name),
            latency_seconds: start.elapsed().as_secs_f64(),
        })
    }
}
