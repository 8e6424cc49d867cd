use std::time::Duration;

use qshape_core::qlearn::{GuidanceSet, GuidanceSource, GuidanceTriple};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{LlmError, Result};

pub const ENV_API_KEY: &str = "QSHAPE_LLM_API_KEY";
pub const ENV_BASE_URL: &str = "QSHAPE_LLM_BASE_URL";

const SYSTEM_MESSAGE: &str = "You provide Q-value estimates for reinforcement learning agents. \
Reply with a JSON array only.";

const CORRECTION: &str = "Your previous reply could not be used. Reply again with only a JSON array of \
objects of the form {\"state\": <integer>, \"action\": <integer>, \"q\": <number>}.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for LlmEndpoint {
    fn default() -> Self {
        LlmEndpoint {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: ENV_API_KEY.into(),
            timeout_secs: 60.0,
            max_retries: 2,
            temperature: 0.0,
        }
    }
}

impl LlmEndpoint {
    /// Defaults with the base URL taken from `QSHAPE_LLM_BASE_URL` if set.
    pub fn from_env() -> Self {
        let mut e = LlmEndpoint::default();
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            e.base_url = url;
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(LlmError::Config("base_url is empty".into()));
        }
        if self.model.trim().is_empty() {
            return Err(LlmError::Config("model is empty".into()));
        }
        Ok(())
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Blocking chat-completions client. Cheap to clone and safe to share.
#[derive(Clone)]
pub struct LlmClient {
    endpoint: LlmEndpoint,
    agent: ureq::Agent,
}

enum Attempt {
    /// Worth retrying: transport trouble, a transient status, or bad content.
    Retry(String, Option<String>),
    Fatal(LlmError),
}

impl LlmClient {
    pub fn new(endpoint: LlmEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(LlmClient { endpoint, agent })
    }

    pub fn endpoint(&self) -> &LlmEndpoint {
        &self.endpoint
    }

    /// Sends `prompt`, retrying up to `max_retries` times. Each retry after
    /// unusable content repeats the reply and asks for the format again.
    pub fn request_guidance(&self, prompt: &str) -> Result<GuidanceSet> {
        let mut messages = vec![
            json!({"role": "system", "content": SYSTEM_MESSAGE}),
            json!({"role": "user", "content": prompt}),
        ];
        let attempts = self.endpoint.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&messages) {
                Ok(triples) => return Ok(GuidanceSet::new(GuidanceSource::Llm, triples)),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason, reply)) => {
                    tracing::warn!(attempt, %reason, "guidance request failed");
                    if let Some(reply) = reply {
                        messages.push(json!({"role": "assistant", "content": reply}));
                        messages.push(json!({"role": "user", "content": CORRECTION}));
                    }
                    last_error = reason;
                }
            }
        }
        Err(LlmError::Unavailable { attempts, last_error })
    }

    fn attempt(&self, messages: &[Value]) -> Result<Vec<GuidanceTriple>, Attempt> {
        let body = json!({
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": self.endpoint.temperature,
        });
        let mut req = self.agent.post(self.endpoint.url());
        if let Ok(key) = std::env::var(&self.endpoint.api_key_env) {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Attempt::Retry(format!("transport: {e}"), None))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}"), None))?;
        if !(200..300).contains(&status) {
            if status == 408 || status == 429 || status >= 500 {
                return Err(Attempt::Retry(format!("HTTP {status}"), None));
            }
            return Err(Attempt::Fatal(LlmError::Http { status, body: text }));
        }
        let content = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v.pointer("/choices/0/message/content").and_then(Value::as_str).map(str::to_owned))
            .ok_or_else(|| Attempt::Retry("response has no choices[0].message.content".into(), None))?;
        extract_triples(&content).ok_or_else(|| Attempt::Retry("no JSON array of triples in reply".into(), Some(content)))
    }
}

#[derive(Deserialize)]
struct RawTriple {
    state: f64,
    action: f64,
    q: f64,
}

fn index(x: f64) -> usize {
    // Negative or fractional ids map to an id no environment has, so the
    // sanitizer drops and counts them.
    if x >= 0.0 && x.fract() == 0.0 && x < usize::MAX as f64 {
        x as usize
    } else {
        usize::MAX
    }
}

/// Triples from the first well-formed JSON array of `{state, action, q}`
/// objects in `content`. Surrounding prose is ignored.
pub fn extract_triples(content: &str) -> Option<Vec<GuidanceTriple>> {
    for (i, _) in content.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&content[i..]).into_iter::<Vec<RawTriple>>();
        if let Some(Ok(raw)) = stream.next() {
            return Some(
                raw.into_iter()
                    .map(|r| GuidanceTriple::new(index(r.state), index(r.action), r.q))
                    .collect(),
            );
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_after_prose() {
        let t = extract_triples("Sure! Here you go [see below]:\n[{\"state\":3,\"action\":1,\"q\":95.0}] hope it helps").unwrap();
        assert_eq!(t, vec![GuidanceTriple::new(3, 1, 95.0)]);
    }

    #[test]
    fn no_array() {
        assert!(extract_triples("I cannot help with that").is_none());
        assert!(extract_triples("[1, 2, 3]").is_none());
    }

    #[test]
    fn negative_ids_become_out_of_range() {
        let t = extract_triples("[{\"state\":-1,\"action\":0.5,\"q\":1}]").unwrap();
        assert_eq!(t[0].state, usize::MAX);
        assert_eq!(t[0].action, usize::MAX);
    }

    #[test]
    fn zero_timeout_rejected() {
        let e = LlmEndpoint { timeout_secs: 0.0, ..LlmEndpoint::default() };
        assert!(LlmClient::new(e).is_err());
    }
}
