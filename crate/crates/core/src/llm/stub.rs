use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::LazyLock;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse};

static ECHO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Output exactly: ([^\n]*)").unwrap());

/// One line of a stub rule file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    /// Regex searched in `system_prompt + "\n" + user_prompt`.
    pub pattern: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_logprobs: Option<BTreeMap<String, f64>>,
}

/// Deterministic backend driven by a regex rule table. The first matching
/// rule answers; a built-in rule echoes `Output exactly: X` as `X`.
pub struct StubBackend {
    rules: Vec<(Regex, StubRule)>,
    pub jitter: f64,
    pub latency_seconds: f64,
}

impl StubBackend {
    pub fn new(rules: Vec<StubRule>) -> Result<Self, LlmError> {
        let rules = rules
            .into_iter()
            .map(|r| {
                let re = Regex::new(&r.pattern)
                    .map_err(|e| LlmError::Config(format!("bad stub pattern {:?}: {e}", r.pattern)))?;
                Ok((re, r))
            })
            .collect::<Result<_, LlmError>>()?;
        Ok(Self { rules, jitter: 0.0, latency_seconds: 0.0 })
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, LlmError> {
        let file = File::open(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        let mut rules = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: StubRule = serde_json::from_str(&line)
                .map_err(|e| LlmError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rules.push(rule);
        }
        Self::new(rules)
    }

    fn jittered(&self, lps: &BTreeMap<String, f64>, req: &LlmRequest) -> BTreeMap<String, f64> {
        let Some(seed) = req.seed.filter(|_| self.jitter > 0.0) else {
            return lps.clone();
        };
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(req.system_prompt.as_bytes());
        h.update([0]);
        h.update(req.user_prompt.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        lps.iter().map(|(k, v)| (k.clone(), v + rng.random_range(-self.jitter..=self.jitter))).collect()
    }
}

impl LlmBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn complete(&self, req: &LlmRequest, _timeout: Duration) -> Result<LlmResponse, LlmError> {
        let haystack = format!("{}\n{}", req.system_prompt, req.user_prompt);
        let (text, lps) = match self.rules.iter().find(|(re, _)| re.is_match(&haystack)) {
            Some((_, rule)) => (rule.response_text.clone(), rule.first_token_logprobs.as_ref()),
            None => match ECHO.captures(&req.user_prompt) {
                Some(c) => (c[1].to_string(), None),
                None => {
                    let head: String = req.user_prompt.chars().take(80).collect();
                    return Err(LlmError::BackendRejected(format!("no stub rule matches prompt starting {head:?}")));
                }
            },
        };
        let top_token_logprobs = if req.want_logprobs {
            let lps = lps.ok_or(LlmError::LogprobsUnavailable)?;
            Some(vec![self.jittered(lps, req)])
        } else {
            None
        };
        Ok(LlmResponse { text, top_token_logprobs, backend: "stub".into(), latency_seconds: self.latency_seconds })
    }
}
