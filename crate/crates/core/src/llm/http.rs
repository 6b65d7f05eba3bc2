use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Completion, DecodingParams, LlmBackend, LlmError, LlmRequest};

const SYSTEM_MESSAGE: &str = "You are a helpful assistant.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Requests in flight at once.
    pub parallelism: usize,
    /// Requests started per minute; 0 disables the limit.
    pub rpm_limit: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 4,
            backoff_ms: 500,
            parallelism: 4,
            rpm_limit: 0,
        }
    }
}

/// Request body in the common chat-completions shape.
pub fn chat_body(model: &str, prompt: &str, params: &DecodingParams) -> Value {
    let mut body = json!({
        "model": model,
        "messages": [
            {"role": "system", "content": SYSTEM_MESSAGE},
            {"role": "user", "content": prompt},
        ],
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    if !params.stop.is_empty() {
        body["stop"] = json!(params.stop);
    }
    body
}

struct Throttle {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
    rpm: u32,
    starts: Mutex<VecDeque<Instant>>,
}

impl Throttle {
    fn new(limit: usize, rpm: u32) -> Self {
        Throttle {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
            rpm,
            starts: Mutex::new(VecDeque::new()),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("throttle lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("throttle lock");
        }
        *n += 1;
        drop(n);
        if self.rpm > 0 {
            let window = Duration::from_secs(60);
            loop {
                let mut starts = self.starts.lock().expect("rpm lock");
                let now = Instant::now();
                while starts.front().is_some_and(|t| now.duration_since(*t) >= window) {
                    starts.pop_front();
                }
                if starts.len() < self.rpm as usize {
                    starts.push_back(now);
                    break;
                }
                let wait = window - now.duration_since(starts[0]);
                drop(starts);
                std::thread::sleep(wait);
            }
        }
        Permit(self)
    }
}

struct Permit<'a>(&'a Throttle);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("throttle lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
    throttle: Throttle,
}

impl HttpBackend {
    pub fn new(config: HttpConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let throttle = Throttle::new(config.parallelism, config.rpm_limit);
        HttpBackend {
            config,
            api_key,
            agent,
            throttle,
        }
    }

    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: HttpConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::new(config, key))
    }

    fn attempt(&self, body: &Value) -> Result<(u16, String), LlmError> {
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(body);
        match resp {
            Ok(mut r) => {
                let status = r.status().as_u16();
                let text = r
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| LlmError::Transport(e.to_string()))?;
                Ok((status, text))
            }
            Err(ureq::Error::Timeout(t)) => Err(LlmError::Timeout(t.to_string())),
            Err(e) => Err(LlmError::Transport(e.to_string())),
        }
    }
}

fn parse_response(text: &str) -> Result<Completion, LlmError> {
    let v: Value = serde_json::from_str(text).map_err(|e| LlmError::Response(e.to_string()))?;
    let content = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| LlmError::Response("missing choices[0].message.content".into()))?;
    Ok(Completion {
        text: content.to_string(),
        latency_ms: None,
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64(),
        completion_tokens: v["usage"]["completion_tokens"].as_u64(),
    })
}

fn transient(status: u16) -> bool {
    status == 429 || status >= 500
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let body = chat_body(&self.config.model, &req.prompt, &req.params);
        let _permit = self.throttle.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = self.attempt(&body);
            let retry = match &outcome {
                Ok((status, _)) => transient(*status),
                Err(LlmError::Timeout(_) | LlmError::Transport(_)) => true,
                Err(_) => false,
            };
            if retry && attempts <= self.config.max_retries {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                tracing::warn!(attempts, wait_ms = wait, "retrying chat request");
                std::thread::sleep(Duration::from_millis(wait));
                continue;
            }
            let (status, text) = outcome?;
            if status != 200 {
                return Err(LlmError::Http {
                    status,
                    attempts,
                    body: text.chars().take(500).collect(),
                });
            }
            let mut c = parse_response(&text)?;
            c.latency_ms = Some(started.elapsed().as_millis() as u64);
            return Ok(c);
        }
    }
}
