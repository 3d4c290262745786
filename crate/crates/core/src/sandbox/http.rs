use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{CreateRequest, CreateResponse, ExecRequest, ExecResponse, HealthResponse};
use super::{ExecResult, SandboxError, SandboxGateway, SandboxInit, SessionId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSandboxConfig {
    pub base_url: String,
    /// Retries after the first failed attempt, for transport errors only.
    pub retries: u32,
    pub backoff_ms: u64,
    pub connect_timeout_ms: u64,
    /// Timeout for session create/delete and health calls.
    pub control_timeout_ms: u64,
    /// Added to the execution timeout to form the client deadline.
    pub grace_ms: u64,
}

impl Default for HttpSandboxConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8765".into(),
            retries: 2,
            backoff_ms: 100,
            connect_timeout_ms: 2_000,
            control_timeout_ms: 60_000,
            grace_ms: 450,
        }
    }
}

/// Sandbox client over the `/v1` JSON protocol.
pub struct HttpSandbox {
    cfg: HttpSandboxConfig,
    agent: ureq::Agent,
}

enum Failure {
    /// Worth retrying: the request may not have reached the service.
    Transport(String),
    Deadline,
    Fatal(SandboxError),
}

fn classify(e: ureq::Error) -> Failure {
    match e {
        ureq::Error::Timeout(_) => Failure::Deadline,
        ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => Failure::Deadline,
        ureq::Error::Json(e) => Failure::Fatal(SandboxError::Protocol(e.to_string())),
        ureq::Error::BadUri(u) => Failure::Fatal(SandboxError::Unreachable(format!("bad url {u}"))),
        other => Failure::Transport(other.to_string()),
    }
}

/// Only connection-establishment failures are replayed: any later failure
/// may come after the code already ran.
fn classify_exec(e: ureq::Error) -> Failure {
    match e {
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => Failure::Transport(e.to_string()),
        ureq::Error::Io(ref io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::ConnectionRefused | std::io::ErrorKind::NotFound
            ) =>
        {
            Failure::Transport(e.to_string())
        }
        other => match classify(other) {
            Failure::Transport(msg) => Failure::Fatal(SandboxError::Unreachable(msg)),
            f => f,
        },
    }
}

impl HttpSandbox {
    pub fn new(cfg: HttpSandboxConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_millis(cfg.connect_timeout_ms)))
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &HttpSandboxConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    /// Runs `attempt` with exponential backoff on transport failures.
    fn with_retries<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, Failure>,
        on_deadline: SandboxError,
    ) -> Result<T, SandboxError> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for n in 0..=self.cfg.retries {
            if n > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match attempt() {
                Ok(v) => return Ok(v),
                Err(Failure::Transport(msg)) => {
                    tracing::debug!(attempt = n, %msg, "sandbox transport error");
                    last = msg;
                }
                Err(Failure::Deadline) => return Err(on_deadline),
                Err(Failure::Fatal(e)) => return Err(e),
            }
        }
        Err(SandboxError::Unreachable(last))
    }

    /// `GET /v1/health`.
    pub fn health(&self) -> Result<(), SandboxError> {
        let url = self.url("/v1/health");
        self.with_retries(
            || {
                let mut resp = self
                    .agent
                    .get(&url)
                    .config()
                    .timeout_global(Some(Duration::from_millis(self.cfg.control_timeout_ms)))
                    .build()
                    .call()
                    .map_err(classify)?;
                if resp.status().as_u16() != 200 {
                    return Err(Failure::Transport(format!("health returned {}", resp.status())));
                }
                let body: HealthResponse = resp.body_mut().read_json().map_err(classify)?;
                if body.status == "ok" {
                    Ok(())
                } else {
                    Err(Failure::Transport(format!("health status {}", body.status)))
                }
            },
            SandboxError::Unreachable("health check timed out".into()),
        )
    }
}

fn body_text(resp: &mut ureq::http::Response<ureq::Body>) -> String {
    resp.body_mut().read_to_string().unwrap_or_default()
}

impl SandboxGateway for HttpSandbox {
    fn create_session(&self, init: &SandboxInit) -> Result<SessionId, SandboxError> {
        let url = self.url("/v1/sessions");
        let body = CreateRequest::from(init);
        self.with_retries(
            || {
                let mut resp = self
                    .agent
                    .post(&url)
                    .config()
                    .timeout_global(Some(Duration::from_millis(self.cfg.control_timeout_ms)))
                    .build()
                    .send_json(&body)
                    .map_err(classify)?;
                match resp.status().as_u16() {
                    200 | 201 => {
                        let r: CreateResponse = resp.body_mut().read_json().map_err(classify)?;
                        Ok(SessionId(r.session_id))
                    }
                    400 | 422 => Err(Failure::Fatal(SandboxError::InitFailure(body_text(&mut resp)))),
                    s if s >= 500 => Err(Failure::Transport(format!("create returned {s}"))),
                    s => Err(Failure::Fatal(SandboxError::Protocol(format!(
                        "create returned {s}: {}",
                        body_text(&mut resp)
                    )))),
                }
            },
            SandboxError::Unreachable("session create timed out".into()),
        )
    }

    fn execute(
        &self,
        session: &SessionId,
        code: &str,
        timeout_ms: u64,
    ) -> Result<ExecResult, SandboxError> {
        let url = self.url(&format!("/v1/sessions/{}/exec", session.0));
        let body = ExecRequest {
            code: code.to_owned(),
            timeout_ms,
        };
        let deadline = Duration::from_millis(timeout_ms + self.cfg.grace_ms);
        self.with_retries(
            || {
                let mut resp = self
                    .agent
                    .post(&url)
                    .config()
                    .timeout_global(Some(deadline))
                    .build()
                    .send_json(&body)
                    .map_err(classify_exec)?;
                match resp.status().as_u16() {
                    200 => {
                        let r: ExecResponse = resp.body_mut().read_json().map_err(classify)?;
                        r.into_result()
                            .map_err(|e| Failure::Fatal(SandboxError::Protocol(e.to_string())))
                    }
                    408 => Err(Failure::Fatal(SandboxError::Timeout)),
                    404 | 410 => Err(Failure::Fatal(SandboxError::SessionDead)),
                    413 => Err(Failure::Fatal(SandboxError::ImageLimitExceeded)),
                    s => Err(Failure::Fatal(SandboxError::Protocol(format!(
                        "exec returned {s}: {}",
                        body_text(&mut resp)
                    )))),
                }
            },
            SandboxError::Timeout,
        )
    }

    fn close_session(&self, session: &SessionId) {
        let url = self.url(&format!("/v1/sessions/{}", session.0));
        let result = self.with_retries(
            || {
                let resp = self
                    .agent
                    .delete(&url)
                    .config()
                    .timeout_global(Some(Duration::from_millis(self.cfg.control_timeout_ms)))
                    .build()
                    .call()
                    .map_err(classify)?;
                match resp.status().as_u16() {
                    s if s >= 500 => Err(Failure::Transport(format!("delete returned {s}"))),
                    _ => Ok(()),
                }
            },
            SandboxError::Unreachable("session delete timed out".into()),
        );
        if let Err(e) = result {
            tracing::warn!(session = %session, "close failed: {e}");
        }
    }
}
