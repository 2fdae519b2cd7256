//! HTTP transport for an OpenAI-style chat completion endpoint.

use std::env;

use serde_json::{json, Value};

use atomotion::llm::{LlmError, LlmTransport};

pub const ENV_ENDPOINT: &str = "ATOMOTION_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "ATOMOTION_LLM_API_KEY";
pub const ENV_MODEL: &str = "ATOMOTION_LLM_MODEL";

pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    retries: usize,
}

impl HttpTransport {
    pub fn from_env(retries: usize) -> Result<Self, LlmError> {
        let endpoint = env::var(ENV_ENDPOINT)
            .map_err(|_| LlmError::Transport(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(HttpTransport {
            endpoint,
            api_key: env::var(ENV_API_KEY).ok(),
            model: env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
            retries,
        })
    }

    fn call(&self, body: &Value) -> Result<String, String> {
        let mut req = ureq::post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let v: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("unexpected response shape: {v}"))
    }
}

impl LlmTransport for HttpTransport {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.call(&body) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(LlmError::Transport(last))
    }
}
