//! Client side of the code-execution service.
//!
//! [`HttpSandbox`] speaks the JSON wire protocol; [`FakeSandbox`] is an
//! in-process stand-in with the same observable contract.

mod fake;
mod http;
mod interp;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::protocol::MediaRef;
use crate::raster::RasterImage;

pub use fake::{FakeResponse, FakeRule, FakeSandbox, Matcher, FAKE_RENDER_PX};
pub use http::{HttpSandbox, HttpSandboxConfig};

/// Opaque session handle issued by the service.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCaps {
    pub max_images_per_exec: u32,
    pub timeout_ceiling_ms: u64,
}

impl Default for SessionCaps {
    fn default() -> Self {
        Self {
            max_images_per_exec: 8,
            timeout_ceiling_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPreload {
    pub media: MediaRef,
    pub max_frames_cap: u32,
}

/// Session preloads. Images bind to `image_clue_0..n-1` in order; the video
/// binds to `video_clue_0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SandboxInit {
    pub images: Vec<RasterImage>,
    pub video: Option<VideoPreload>,
    /// Enforced client side; not part of the create request.
    pub caps: SessionCaps,
}

impl SandboxInit {
    pub fn preload_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.images.len()).map(|i| format!("image_clue_{i}")).collect();
        if self.video.is_some() {
            names.push("video_clue_0".into());
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecResult {
    pub stdout: String,
    pub images: Vec<RasterImage>,
    /// Exception text when the code raised.
    pub error: Option<String>,
    pub display_hook_invoked: bool,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum SandboxError {
    #[error("session init rejected: {0}")]
    InitFailure(String),
    #[error("sandbox unreachable: {0}")]
    Unreachable(String),
    #[error("execution timed out")]
    Timeout,
    #[error("session is dead")]
    SessionDead,
    #[error("execution exceeded the image limit")]
    ImageLimitExceeded,
    #[error("sandbox protocol error: {0}")]
    Protocol(String),
}

/// A code-execution backend. Implementations must accept concurrent calls on
/// distinct sessions.
pub trait SandboxGateway: Send + Sync {
    fn create_session(&self, init: &SandboxInit) -> Result<SessionId, SandboxError>;

    fn execute(
        &self,
        session: &SessionId,
        code: &str,
        timeout_ms: u64,
    ) -> Result<ExecResult, SandboxError>;

    /// Idempotent; unknown ids are accepted.
    fn close_session(&self, session: &SessionId);
}

impl<T: SandboxGateway + ?Sized> SandboxGateway for &T {
    fn create_session(&self, init: &SandboxInit) -> Result<SessionId, SandboxError> {
        (**self).create_session(init)
    }
    fn execute(&self, s: &SessionId, code: &str, t: u64) -> Result<ExecResult, SandboxError> {
        (**self).execute(s, code, t)
    }
    fn close_session(&self, s: &SessionId) {
        (**self).close_session(s)
    }
}

impl<T: SandboxGateway + ?Sized> SandboxGateway for std::sync::Arc<T> {
    fn create_session(&self, init: &SandboxInit) -> Result<SessionId, SandboxError> {
        (**self).create_session(init)
    }
    fn execute(&self, s: &SessionId, code: &str, t: u64) -> Result<ExecResult, SandboxError> {
        (**self).execute(s, code, t)
    }
    fn close_session(&self, s: &SessionId) {
        (**self).close_session(s)
    }
}

impl<T: SandboxGateway + ?Sized> SandboxGateway for Box<T> {
    fn create_session(&self, init: &SandboxInit) -> Result<SessionId, SandboxError> {
        (**self).create_session(init)
    }
    fn execute(&self, s: &SessionId, code: &str, t: u64) -> Result<ExecResult, SandboxError> {
        (**self).execute(s, code, t)
    }
    fn close_session(&self, s: &SessionId) {
        (**self).close_session(s)
    }
}
