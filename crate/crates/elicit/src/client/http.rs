//! Blocking chat-completions client with bounded parallelism, retries
//! with exponential backoff, and logprob extraction.

use crate::client::{Backend, ClientConfig, ClientError, RequestContext};
use crate::model::{ModelResponse, TokenAlternative, TokenLogprob};
use crate::prompt::PromptBundle;
use serde::Deserialize;
use serde_json::{json, Value};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

/// Observes how many requests are in flight; tests hook this to verify
/// the parallelism bound.
#[derive(Debug, Default)]
pub struct InflightGauge {
    current: AtomicUsize,
    max_seen: AtomicUsize,
}

impl InflightGauge {
    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_seen.fetch_max(now, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn max_observed(&self) -> usize {
        self.max_seen.load(Ordering::SeqCst)
    }
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
    }

    fn release(&self) {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.available.notify_one();
    }
}

pub struct HttpClient {
    cfg: ClientConfig,
    agent: reqwest::blocking::Client,
    api_key: Option<String>,
    semaphore: Semaphore,
    gauge: Arc<InflightGauge>,
    transcript: Option<Mutex<File>>,
    request_counter: AtomicU64,
}

impl HttpClient {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let agent = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok();
        let permits = cfg.max_parallel;
        Ok(Self {
            cfg,
            agent,
            api_key,
            semaphore: Semaphore::new(permits),
            gauge: Arc::new(InflightGauge::default()),
            transcript: None,
            request_counter: AtomicU64::new(0),
        })
    }

    /// Appends every request/response pair to a JSONL transcript.
    pub fn with_transcript(mut self, path: &Path) -> Result<Self, ClientError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ClientError::Config(format!("cannot open transcript: {e}")))?;
        self.transcript = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn gauge(&self) -> Arc<InflightGauge> {
        Arc::clone(&self.gauge)
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/{}",
            self.cfg.base_url.trim_end_matches('/'),
            self.cfg.endpoint_path.trim_start_matches('/')
        )
    }

    fn request_body(&self, bundle: &PromptBundle) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &bundle.system {
            messages.push(json!({ "role": "system", "content": system }));
        }
        messages.push(json!({ "role": "user", "content": bundle.user }));
        let mut body = json!({
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        });
        if bundle.expects_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.cfg.top_logprobs);
        }
        if let Some(Value::Object(extra)) = &self.cfg.extra_body {
            let obj = body.as_object_mut().expect("body is an object");
            for (key, value) in extra {
                if value.is_null() {
                    obj.remove(key);
                } else {
                    obj.insert(key.clone(), value.clone());
                }
            }
        }
        body
    }

    fn send_once(&self, body: &Value) -> Result<(u16, String), ClientError> {
        let mut request = self
            .agent
            .post(self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let response = request.json(body).send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout
            } else {
                ClientError::Transport(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok((status, text))
    }

    fn log_transcript(&self, request_id: u64, body: &Value, status: u16, response: &str) {
        if let Some(file) = &self.transcript {
            let entry = json!({
                "request_id": format!("req-{request_id:08}"),
                "url": self.endpoint(),
                "request": body,
                "status": status,
                "response": response,
            });
            let mut file = file.lock().expect("transcript poisoned");
            let _ = writeln!(file, "{entry}");
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Option<Vec<WireTopLogprob>>,
}

#[derive(Deserialize)]
struct WireTopLogprob {
    token: String,
    logprob: f64,
}

/// Servers occasionally emit marginally positive logprobs; clamp them so
/// the response invariant (finite, <= 0) holds.
fn sanitize_logprob(value: f64) -> Result<f64, ClientError> {
    if !value.is_finite() || value > 1e-6 {
        return Err(ClientError::BadPayload(format!(
            "logprob {value} is not a log-probability"
        )));
    }
    Ok(value.min(0.0))
}

fn parse_wire_response(text: &str, expects_logprobs: bool) -> Result<ModelResponse, ClientError> {
    let wire: WireResponse =
        serde_json::from_str(text).map_err(|e| ClientError::BadPayload(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ClientError::BadPayload("response has no choices".into()))?;
    let content = choice
        .message
        .content
        .ok_or_else(|| ClientError::BadPayload("choice has no content".into()))?;

    let logprobs = match choice.logprobs.and_then(|l| l.content) {
        Some(entries) if !entries.is_empty() => {
            let mut tokens = Vec::with_capacity(entries.len());
            // chat APIs do not report offsets; reconstruct them from the
            // cumulative token text lengths
            let mut offset = 0usize;
            for entry in entries {
                let mut alternatives = Vec::new();
                for alt in entry.top_logprobs.unwrap_or_default() {
                    alternatives.push(TokenAlternative {
                        token: alt.token,
                        logprob: sanitize_logprob(alt.logprob)?,
                    });
                }
                let len = entry.token.len();
                tokens.push(TokenLogprob {
                    token: entry.token,
                    logprob: sanitize_logprob(entry.logprob)?,
                    offset,
                    top_alternatives: alternatives,
                });
                offset += len;
            }
            Some(tokens)
        }
        _ => None,
    };

    if expects_logprobs && logprobs.is_none() {
        return Err(ClientError::LogprobsUnsupported);
    }

    let token_usage = wire
        .usage
        .and_then(|u| u.completion_tokens)
        .unwrap_or_else(|| content.split_whitespace().count() as u64);

    ModelResponse::new(content, token_usage, logprobs)
        .map_err(|e| ClientError::BadPayload(e.to_string()))
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl Backend for HttpClient {
    fn complete(
        &self,
        bundle: &PromptBundle,
        _ctx: &RequestContext<'_>,
    ) -> Result<ModelResponse, ClientError> {
        if bundle.expects_logprobs && self.cfg.top_logprobs == 0 {
            return Err(ClientError::LogprobsUnsupported);
        }
        let body = self.request_body(bundle);
        let request_id = self.request_counter.fetch_add(1, Ordering::SeqCst);

        self.semaphore.acquire();
        self.gauge.enter();
        let result = (|| {
            let mut last_error = ClientError::Transport("no attempts made".into());
            for attempt in 0..self.cfg.retry.max_attempts {
                if attempt > 0 {
                    let delay = self.cfg.retry.backoff_secs * 2f64.powi(attempt as i32 - 1);
                    std::thread::sleep(Duration::from_secs_f64(delay));
                }
                match self.send_once(&body) {
                    Ok((status, text)) => {
                        self.log_transcript(request_id, &body, status, &text);
                        if (200..300).contains(&status) {
                            return parse_wire_response(&text, bundle.expects_logprobs);
                        }
                        let error = ClientError::Http {
                            status,
                            body: text.chars().take(200).collect(),
                        };
                        if !error.is_retryable() {
                            return Err(error);
                        }
                        last_error = error;
                    }
                    Err(error) => {
                        self.log_transcript(request_id, &body, 0, &error.to_string());
                        if !error.is_retryable() {
                            return Err(error);
                        }
                        last_error = error;
                    }
                }
            }
            Err(last_error)
        })();
        self.gauge.exit();
        self.semaphore.release();
        result
    }

    fn supports_logprobs(&self) -> bool {
        self.cfg.top_logprobs > 0
    }

    fn describe(&self) -> String {
        format!("{} @ {}", self.cfg.model_name, self.endpoint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::RetryPolicy;
    use crate::parse::parse_ptrue_logprobs;
    use crate::prompt::JsonShape;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::atomic::AtomicUsize;

    /// Minimal HTTP/1.1 responder: each connection gets one canned reply
    /// chosen by request index.
    fn spawn_server<F>(handler: F) -> String
    where
        F: Fn(usize) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let counter = Arc::new(AtomicUsize::new(0));
        std::thread::spawn(move || {
            let handler = Arc::new(handler);
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let handler = Arc::clone(&handler);
                let counter = Arc::clone(&counter);
                std::thread::spawn(move || {
                    let index = counter.fetch_add(1, Ordering::SeqCst);
                    let mut reader = BufReader::new(stream);
                    let mut content_length = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty()
                        {
                            break;
                        }
                        if let Some(rest) = line.to_lowercase().strip_prefix("content-length:") {
                            content_length = rest.trim().parse().unwrap_or(0);
                        }
                    }
                    let mut body = vec![0u8; content_length];
                    let _ = reader.read_exact(&mut body);
                    let (status, reply) = handler(index);
                    let response = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                        reply.len(),
                    );
                    let mut stream = reader.into_inner();
                    let _ = stream.write_all(response.as_bytes());
                });
            }
        });
        format!("http://{addr}")
    }

    fn config(base_url: String) -> ClientConfig {
        ClientConfig {
            base_url,
            model_name: "test-model".into(),
            api_key_env: "ELICIT_TEST_KEY_UNSET".into(),
            temperature: 0.0,
            max_tokens: 64,
            top_logprobs: 0,
            max_parallel: 4,
            retry: RetryPolicy {
                max_attempts: 3,
                backoff_secs: 0.01,
            },
            request_timeout_secs: 5.0,
            endpoint_path: "chat/completions".into(),
            extra_body: None,
        }
    }

    fn bundle() -> PromptBundle {
        PromptBundle {
            system: None,
            user: "hello".into(),
            expects_logprobs: false,
            expects_json: JsonShape::FreeText,
        }
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"completion_tokens": 7}
        })
        .to_string()
    }

    #[test]
    fn retries_on_429_then_succeeds() {
        let url = spawn_server(|index| {
            if index == 0 {
                (429, "{\"error\": \"slow down\"}".into())
            } else {
                (200, ok_body("fine now"))
            }
        });
        let client = HttpClient::new(config(url)).unwrap();
        let response = client
            .complete(&bundle(), &RequestContext::bare(0))
            .unwrap();
        assert_eq!(response.raw_text(), "fine now");
        assert_eq!(response.token_usage(), 7);
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        let url = spawn_server(|_| (400, "{\"error\": \"bad request\"}".into()));
        let client = HttpClient::new(config(url)).unwrap();
        match client.complete(&bundle(), &RequestContext::bare(0)) {
            Err(ClientError::Http { status, .. }) => assert_eq!(status, 400),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn logprobs_parse_with_reconstructed_offsets() {
        let payload = serde_json::json!({
            "choices": [{
                "message": {"role": "assistant", "content": "True"},
                "logprobs": {"content": [{
                    "token": "True",
                    "logprob": -0.105360515657826_3,
                    "top_logprobs": [
                        {"token": "True", "logprob": -0.105360515657826_3},
                        {"token": "False", "logprob": -2.302585092994046}
                    ]
                }]}
            }],
            "usage": {"completion_tokens": 1}
        })
        .to_string();
        let url = spawn_server(move |_| (200, payload.clone()));
        let mut cfg = config(url);
        cfg.top_logprobs = 2;
        let client = HttpClient::new(cfg).unwrap();
        let mut wants = bundle();
        wants.expects_logprobs = true;
        let response = client.complete(&wants, &RequestContext::bare(0)).unwrap();
        let logprobs = response.token_logprobs().unwrap();
        assert_eq!(logprobs[0].offset, 0);
        assert_eq!(logprobs[0].top_alternatives.len(), 2);
        let ptrue = parse_ptrue_logprobs(&response).unwrap();
        assert!((ptrue - 0.9).abs() < 1e-3);
    }

    #[test]
    fn missing_logprobs_is_reported_when_required() {
        let url = spawn_server(|_| (200, ok_body("no logprobs here")));
        let mut cfg = config(url);
        cfg.top_logprobs = 2;
        let client = HttpClient::new(cfg).unwrap();
        let mut wants = bundle();
        wants.expects_logprobs = true;
        assert!(matches!(
            client.complete(&wants, &RequestContext::bare(0)),
            Err(ClientError::LogprobsUnsupported)
        ));

        // a backend configured without logprobs refuses before sending
        let url = spawn_server(|_| (200, ok_body("unused")));
        let client = HttpClient::new(config(url)).unwrap();
        let mut wants = bundle();
        wants.expects_logprobs = true;
        assert!(matches!(
            client.complete(&wants, &RequestContext::bare(0)),
            Err(ClientError::LogprobsUnsupported)
        ));
        assert!(!client.supports_logprobs());
    }

    #[test]
    fn parallelism_is_bounded_by_config() {
        let url = spawn_server(|_| {
            std::thread::sleep(Duration::from_millis(60));
            (200, ok_body("slow"))
        });
        let mut cfg = config(url);
        cfg.max_parallel = 3;
        let client = Arc::new(HttpClient::new(cfg).unwrap());
        let gauge = client.gauge();
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let client = Arc::clone(&client);
                scope.spawn(move || {
                    client
                        .complete(&bundle(), &RequestContext::bare(0))
                        .unwrap();
                });
            }
        });
        assert!(gauge.max_observed() <= 3, "saw {}", gauge.max_observed());
        assert!(gauge.max_observed() >= 2);
        assert_eq!(gauge.current(), 0);
    }

    #[test]
    fn transcript_records_request_and_response() {
        let url = spawn_server(|_| (200, ok_body("logged")));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        let client = HttpClient::new(config(url))
            .unwrap()
            .with_transcript(&path)
            .unwrap();
        client
            .complete(&bundle(), &RequestContext::bare(0))
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let entry: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(entry["status"], 200);
        assert!(entry["request"]["messages"][0]["content"]
            .as_str()
            .unwrap()
            .contains("hello"));
        assert!(entry["request_id"].as_str().unwrap().starts_with("req-"));
    }

    #[test]
    fn extra_body_merges_and_removes_fields() {
        let mut cfg = config("http://unused".into());
        cfg.extra_body = Some(serde_json::json!({
            "max_tokens": null,
            "max_completion_tokens": 128,
        }));
        let client = HttpClient::new(cfg).unwrap();
        let body = client.request_body(&bundle());
        assert!(body.get("max_tokens").is_none());
        assert_eq!(body["max_completion_tokens"], 128);
    }
}
