//! Chat-completion style HTTP backend. See `docs/backend.md` for the wire format.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendConfig, JudgeBackend, JudgeRequest, TransportError};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "LRMR_API_KEY";

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        let endpoint = config
            .endpoint_url
            .clone()
            .filter(|u| !u.is_empty())
            .ok_or_else(|| Error::config("http backend requires endpoint_url"))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{API_KEY_ENV} is not set; sending requests without credentials");
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .build()
            .new_agent();
        Ok(HttpBackend {
            agent,
            endpoint,
            api_key,
        })
    }
}

/// Request body for one judge call.
pub fn request_body(request: &JudgeRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.prompt.text})];
    if let Some(png) = &request.image {
        let b64 = base64::engine::general_purpose::STANDARD.encode(png.as_slice());
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{b64}")}
        }));
    }
    json!({
        "model": request.model_id,
        "temperature": request.temperature,
        "stream": false,
        "messages": [{"role": "user", "content": content}],
    })
}

/// Pulls the assistant text out of a chat-completion response. Content may
/// be a string or a list of `{type: "text", text}` parts.
pub fn response_text(body: &Value) -> std::result::Result<String, TransportError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| TransportError("response has no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let text: String = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            Ok(text)
        }
        other => Err(TransportError(format!("unexpected content type: {other}"))),
    }
}

impl JudgeBackend for HttpBackend {
    fn complete(&self, request: &JudgeRequest) -> std::result::Result<String, TransportError> {
        let mut call = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(request_body(request))
            .map_err(|e| TransportError(e.to_string()))?;
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| TransportError(format!("invalid response body: {e}")))?;
        response_text(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{BackendKind, JudgeClient};
    use crate::prompting::{build_stage1_prompt, extract_json_payload};
    use crate::report::ReportMode;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    fn http_config(url: String) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Http,
            model_id: "test-model".into(),
            endpoint_url: Some(url),
            backoff_base_s: 0.0,
            timeout_s: 5.0,
            ..Default::default()
        }
    }

    /// Serves one canned reply per connection and hands back each request body.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, reply) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                bodies.push(String::from_utf8(body).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn body_has_text_and_image_parts() {
        let cfg = BackendConfig::default();
        let req = JudgeRequest::stage_one(build_stage1_prompt(2, ReportMode::Structured).unwrap(), vec![1, 2, 3], &cfg)
            .unwrap();
        let body = request_body(&req);
        assert_eq!(body["model"], "mock");
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
    }

    #[test]
    fn response_text_shapes() {
        let s = json!({"choices":[{"message":{"content":"hi"}}]});
        assert_eq!(response_text(&s).unwrap(), "hi");
        let parts = json!({"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]});
        assert_eq!(response_text(&parts).unwrap(), "ab");
        assert!(response_text(&json!({"error": "x"})).is_err());
    }

    #[test]
    fn round_trip_against_local_server_with_retry_on_500() {
        let ok = json!({"choices":[{"message":{"role":"assistant","content":"```json\n{\"choice\":\"B\"}\n```"}}]});
        let (url, server) = serve(vec![(500, "{}".into()), (200, ok.to_string())]);
        let cfg = http_config(url);
        let client = JudgeClient::new(Arc::new(HttpBackend::new(&cfg).unwrap()), cfg.clone(), None).unwrap();
        let req = JudgeRequest::stage_one(build_stage1_prompt(1, ReportMode::Structured).unwrap(), vec![7], &cfg)
            .unwrap();
        let (payload, resp) = client.invoke(&req, extract_json_payload).unwrap();
        assert_eq!(payload, "{\"choice\":\"B\"}");
        assert_eq!(resp.attempts, 2);
        let bodies = server.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"][0]["role"], "user");
    }

    #[test]
    fn unreachable_endpoint_fails_after_all_attempts() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = BackendConfig {
            max_retries: 2,
            ..http_config(format!("http://127.0.0.1:{port}/"))
        };
        let client = JudgeClient::new(Arc::new(HttpBackend::new(&cfg).unwrap()), cfg.clone(), None).unwrap();
        let req = JudgeRequest::stage_one(build_stage1_prompt(1, ReportMode::Structured).unwrap(), vec![7], &cfg)
            .unwrap();
        let err = client.invoke(&req, extract_json_payload).unwrap_err();
        assert_eq!(err.attempts, 3);
        assert_eq!(client.stats().backend_calls, 3);
    }
}
