use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    ContentPart, EpisodeTag, Generation, GenerationParams, Policy, PolicyError, PolicyMessage,
    Role, StopReason,
};
use crate::protocol::{ANSWER_CLOSE, ANSWER_OPEN, CODE_CLOSE, CODE_OPEN};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "PVRL_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemotePolicyConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_ms: u64,
    /// Retries after the first failed attempt.
    pub retries: u32,
    pub backoff_ms: u64,
    /// Idle connections kept per host.
    pub max_connections: usize,
}

impl Default for RemotePolicyConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "policy".into(),
            timeout_ms: 300_000,
            retries: 2,
            backoff_ms: 500,
            max_connections: 64,
        }
    }
}

/// Chat-completions client with multimodal content parts.
pub struct RemotePolicy {
    cfg: RemotePolicyConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemotePolicy {
    /// Reads the token from [`API_KEY_ENV`].
    pub fn new(cfg: RemotePolicyConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(cfg, key)
    }

    pub fn with_api_key(cfg: RemotePolicyConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .max_idle_connections_per_host(cfg.max_connections.max(1))
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Self { cfg, api_key, agent }
    }

    /// The exact JSON body sent for `messages`. Pure in its inputs.
    pub fn request_body(&self, messages: &[PolicyMessage], params: &GenerationParams) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages.iter().map(wire_message).collect::<Vec<_>>(),
            "temperature": params.temperature,
            "stop": params.stop,
            "max_tokens": params.max_new_tokens,
        });
        if let Some(k) = params.top_k {
            body["top_k"] = json!(k);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<Value, (bool, String)> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("backend returned {status}")));
        }
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((false, format!("backend returned {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| (false, format!("undecodable response: {e}")))
    }
}

/// Images in a system turn are sent as a user turn since many servers only
/// accept images from users. Tool results are user turns as well.
fn wire_message(m: &PolicyMessage) -> Value {
    let has_images = m.images().next().is_some();
    let role = match m.role {
        Role::System if !has_images => "system",
        Role::System | Role::ToolResult => "user",
        Role::Assistant => "assistant",
    };
    let content: Vec<Value> = m
        .parts
        .iter()
        .map(|p| match p {
            ContentPart::Text(t) => json!({"type": "text", "text": t}),
            ContentPart::Image(c) => json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", c.image().to_base64())}
            }),
        })
        .collect();
    json!({"role": role, "content": content})
}

/// Restores the stop sequence that the server strips from the completion.
fn restore_stop(mut text: String, finish: Option<&str>, matched: Option<&str>, stop: &[String]) -> Generation {
    let reason = match finish {
        Some("length") => StopReason::Length,
        Some("stop") => {
            let seq = matched
                .filter(|m| stop.iter().any(|s| s == m))
                .map(str::to_owned)
                .or_else(|| stop.iter().find(|s| text.ends_with(s.as_str())).cloned())
                .or_else(|| infer_open_tag(&text, stop));
            match seq {
                Some(s) => {
                    if !text.ends_with(&s) {
                        text.push_str(&s);
                    }
                    StopReason::Stop(s)
                }
                None => StopReason::EndOfText,
            }
        }
        _ => StopReason::EndOfText,
    };
    Generation { text, stop: reason }
}

/// The close tag of a span left open at the end of `text`, if it is a stop sequence.
fn infer_open_tag(text: &str, stop: &[String]) -> Option<String> {
    let last_code = text.rfind(CODE_OPEN);
    let last_answer = text.rfind(ANSWER_OPEN);
    let (open_at, close) = match (last_code, last_answer) {
        (Some(c), Some(a)) if a > c => (a, ANSWER_CLOSE),
        (Some(c), _) => (c, CODE_CLOSE),
        (None, Some(a)) => (a, ANSWER_CLOSE),
        (None, None) => return None,
    };
    let unclosed = !text[open_at..].contains(close);
    (unclosed && stop.iter().any(|s| s == close)).then(|| close.to_owned())
}

impl Policy for RemotePolicy {
    fn generate(
        &self,
        messages: &[PolicyMessage],
        params: &GenerationParams,
        _episode: &EpisodeTag,
    ) -> Result<Generation, PolicyError> {
        params.validate().map_err(PolicyError::InvalidRequest)?;
        let body = self.request_body(messages, params);
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for n in 0..=self.cfg.retries {
            if n > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&body) {
                Ok(v) => {
                    let choice = &v["choices"][0];
                    let Some(text) = choice["message"]["content"].as_str() else {
                        return Err(PolicyError::BackendFailure("response has no choices[0].message.content".into()));
                    };
                    return Ok(restore_stop(
                        text.to_owned(),
                        choice["finish_reason"].as_str(),
                        choice["stop_reason"].as_str(),
                        &params.stop,
                    ));
                }
                Err((true, msg)) => {
                    tracing::debug!(attempt = n, %msg, "policy transport error");
                    last = msg;
                }
                Err((false, msg)) => return Err(PolicyError::BackendFailure(msg)),
            }
        }
        Err(PolicyError::BackendFailure(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{ClueRendering, ClueSource, ImageClue};
    use crate::raster::RasterImage;

    fn stop() -> Vec<String> {
        GenerationParams::default().stop
    }

    #[test]
    fn stop_sequence_re_appended() {
        let g = restore_stop("look\n<code>print(1)".into(), Some("stop"), Some("</code>"), &stop());
        assert_eq!(g.text, "look\n<code>print(1)</code>");
        assert_eq!(g.stop, StopReason::Stop("</code>".into()));

        let g = restore_stop("<answer>\\boxed{A}".into(), Some("stop"), None, &stop());
        assert_eq!(g.text, "<answer>\\boxed{A}</answer>");

        let g = restore_stop("<code>x</code>".into(), Some("stop"), None, &stop());
        assert_eq!(g.text, "<code>x</code>");

        let g = restore_stop("plain".into(), Some("stop"), None, &stop());
        assert_eq!(g.stop, StopReason::EndOfText);

        let g = restore_stop("<code>x".into(), Some("length"), None, &stop());
        assert_eq!((g.text.as_str(), g.stop), ("<code>x", StopReason::Length));
    }

    #[test]
    fn body_shape() {
        let p = RemotePolicy::with_api_key(RemotePolicyConfig::default(), None);
        let clue = ImageClue::prepare(
            &RasterImage::solid(60, 60, [0, 0, 0]),
            ClueSource::Hint,
            &ClueRendering::default(),
        )
        .unwrap();
        let msgs = vec![
            PolicyMessage {
                role: Role::System,
                parts: vec![ContentPart::Text("sys".into()), ContentPart::Image(clue)],
            },
            PolicyMessage::text(Role::Assistant, "<code>1</code>"),
            PolicyMessage::text(Role::ToolResult, "<interpreter>1\n</interpreter>"),
        ];
        let body = p.request_body(&msgs, &GenerationParams::eval_sampled());
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][1]["type"], "image_url");
        assert!(body["messages"][0]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(body["messages"][1]["role"], "assistant");
        assert_eq!(body["messages"][2]["role"], "user");
        assert_eq!(body["top_k"], 20);
        assert_eq!(body["temperature"], 0.5);
        assert_eq!(body["stop"], json!(["</code>", "</answer>"]));
        // identical inputs give identical bodies
        assert_eq!(body, p.request_body(&msgs, &GenerationParams::eval_sampled()));
        let text_only = p.request_body(&[PolicyMessage::text(Role::System, "s")], &GenerationParams::default());
        assert_eq!(text_only["messages"][0]["role"], "system");
        assert!(text_only.get("top_k").is_none());
    }
}
