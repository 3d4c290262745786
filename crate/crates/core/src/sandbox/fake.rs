use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::interp::{self, Outcome, Value};
use super::{ExecResult, SandboxError, SandboxGateway, SandboxInit, SessionCaps, SessionId};
use crate::protocol::MediaRef;
use crate::raster::RasterImage;

/// Edge length of every image the fake renders on `plt.show()`.
pub const FAKE_RENDER_PX: u32 = 448;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Contains(String),
}

impl Matcher {
    fn matches(&self, code: &str) -> bool {
        match self {
            Matcher::Exact(s) => code.trim() == s.trim(),
            Matcher::Contains(s) => code.contains(s.as_str()),
        }
    }
}

/// Canned reply that bypasses the interpreter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FakeResponse {
    Ok {
        #[serde(default)]
        stdout: String,
        #[serde(default)]
        images: u32,
        #[serde(default)]
        error: Option<String>,
        #[serde(default)]
        display_hook_invoked: bool,
    },
    Timeout,
    /// Kills the session; this and later calls return SessionDead.
    Die,
    Unreachable,
    ImageLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeRule {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub response: FakeResponse,
}

impl FakeRule {
    pub fn contains(needle: &str, response: FakeResponse) -> Self {
        Self {
            matcher: Matcher::Contains(needle.into()),
            response,
        }
    }

    pub fn exact(code: &str, response: FakeResponse) -> Self {
        Self {
            matcher: Matcher::Exact(code.into()),
            response,
        }
    }
}

struct Session {
    ns: HashMap<String, Value>,
    caps: SessionCaps,
    dead: bool,
    closed: bool,
}

#[derive(Default)]
struct State {
    sessions: HashMap<String, Session>,
    close_calls: HashMap<String, u32>,
    executions: u64,
}

/// Deterministic in-process sandbox.
///
/// Rules are checked in order before the built-in interpreter runs. Each
/// session owns a private namespace that persists across executions.
pub struct FakeSandbox {
    rules: Vec<FakeRule>,
    unreadable: HashSet<String>,
    video_frames: u64,
    reported_duration_ms: u64,
    latency: Option<Duration>,
    unreachable: bool,
    next_id: AtomicU64,
    state: Mutex<State>,
}

impl Default for FakeSandbox {
    fn default() -> Self {
        Self::new()
    }
}

fn rendered_image() -> RasterImage {
    static IMG: OnceLock<RasterImage> = OnceLock::new();
    IMG.get_or_init(|| RasterImage::solid(FAKE_RENDER_PX, FAKE_RENDER_PX, [90, 140, 200]))
        .clone()
}

fn media_key(m: &MediaRef) -> &str {
    match m {
        MediaRef::Path(p) | MediaRef::Url(p) => p,
    }
}

impl FakeSandbox {
    pub fn new() -> Self {
        Self {
            rules: Vec::new(),
            unreadable: HashSet::new(),
            video_frames: 1200,
            reported_duration_ms: 5,
            latency: None,
            unreachable: false,
            next_id: AtomicU64::new(0),
            state: Mutex::new(State::default()),
        }
    }

    pub fn with_rule(mut self, rule: FakeRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Video preloads referencing `media` fail with InitFailure.
    pub fn with_unreadable_media(mut self, media: &str) -> Self {
        self.unreadable.insert(media.to_owned());
        self
    }

    /// `len(video_clue_0)` in every session.
    pub fn with_video_frames(mut self, frames: u64) -> Self {
        self.video_frames = frames;
        self
    }

    /// `duration_ms` reported by each execution.
    pub fn with_reported_duration(mut self, ms: u64) -> Self {
        self.reported_duration_ms = ms;
        self
    }

    /// Real sleep per execution, for benchmarking concurrency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Every call fails as if the service were down.
    pub fn unreachable() -> Self {
        Self {
            unreachable: true,
            ..Self::new()
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn sessions_created(&self) -> usize {
        self.next_id.load(Ordering::SeqCst) as usize
    }

    /// Close calls per session id, including repeats and unknown ids.
    pub fn close_counts(&self) -> HashMap<String, u32> {
        self.lock().close_calls.clone()
    }

    /// Ids created but never closed.
    pub fn open_sessions(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .lock()
            .sessions
            .iter()
            .filter(|(_, s)| !s.closed)
            .map(|(k, _)| k.clone())
            .collect();
        v.sort();
        v
    }

    pub fn executions(&self) -> u64 {
        self.lock().executions
    }

    fn canned(&self, code: &str) -> Option<&FakeResponse> {
        self.rules.iter().find(|r| r.matcher.matches(code)).map(|r| &r.response)
    }
}

impl SandboxGateway for FakeSandbox {
    fn create_session(&self, init: &SandboxInit) -> Result<SessionId, SandboxError> {
        if self.unreachable {
            return Err(SandboxError::Unreachable("fake sandbox is down".into()));
        }
        let mut ns = HashMap::new();
        for (i, img) in init.images.iter().enumerate() {
            ns.insert(
                format!("image_clue_{i}"),
                Value::Opaque(format!("PIL.Image {}x{}", img.width(), img.height())),
            );
        }
        if let Some(v) = &init.video {
            let key = media_key(&v.media);
            if key.is_empty() || self.unreadable.contains(key) {
                return Err(SandboxError::InitFailure(format!("cannot open video {key}")));
            }
            ns.insert("video_clue_0".into(), Value::Video(self.video_frames));
        }
        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        let id = format!("fake-{n}");
        self.lock().sessions.insert(
            id.clone(),
            Session {
                ns,
                caps: init.caps,
                dead: false,
                closed: false,
            },
        );
        Ok(SessionId(id))
    }

    fn execute(
        &self,
        session: &SessionId,
        code: &str,
        _timeout_ms: u64,
    ) -> Result<ExecResult, SandboxError> {
        if self.unreachable {
            return Err(SandboxError::Unreachable("fake sandbox is down".into()));
        }
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        // Take the namespace out so the interpreter runs without the lock.
        let (mut ns, caps) = {
            let mut st = self.lock();
            st.executions += 1;
            let s = match st.sessions.get_mut(&session.0) {
                Some(s) if !s.dead && !s.closed => s,
                _ => return Err(SandboxError::SessionDead),
            };
            if let Some(resp) = self.canned(code) {
                return match resp {
                    FakeResponse::Ok {
                        stdout,
                        images,
                        error,
                        display_hook_invoked,
                    } => {
                        if *images > s.caps.max_images_per_exec {
                            return Err(SandboxError::ImageLimitExceeded);
                        }
                        Ok(ExecResult {
                            stdout: stdout.clone(),
                            images: (0..*images).map(|_| rendered_image()).collect(),
                            error: error.clone(),
                            display_hook_invoked: *display_hook_invoked,
                            duration_ms: self.reported_duration_ms,
                        })
                    }
                    FakeResponse::Timeout => Err(SandboxError::Timeout),
                    FakeResponse::Die => {
                        s.dead = true;
                        Err(SandboxError::SessionDead)
                    }
                    FakeResponse::Unreachable => {
                        Err(SandboxError::Unreachable("injected transport failure".into()))
                    }
                    FakeResponse::ImageLimit => Err(SandboxError::ImageLimitExceeded),
                };
            }
            (std::mem::take(&mut s.ns), s.caps)
        };

        let run = interp::run(code, &mut ns);
        if let Some(s) = self.lock().sessions.get_mut(&session.0) {
            s.ns = ns;
        }
        if run.outcome == Outcome::Hangs {
            return Err(SandboxError::Timeout);
        }
        if run.renders > caps.max_images_per_exec {
            return Err(SandboxError::ImageLimitExceeded);
        }
        Ok(ExecResult {
            stdout: run.stdout,
            images: (0..run.renders).map(|_| rendered_image()).collect(),
            error: match run.outcome {
                Outcome::Raised(msg) => Some(msg),
                _ => None,
            },
            display_hook_invoked: run.renders > 0,
            duration_ms: self.reported_duration_ms,
        })
    }

    fn close_session(&self, session: &SessionId) {
        let mut st = self.lock();
        *st.close_calls.entry(session.0.clone()).or_default() += 1;
        if let Some(s) = st.sessions.get_mut(&session.0) {
            s.closed = true;
            s.ns.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::VideoPreload;

    fn video_init(path: &str) -> SandboxInit {
        SandboxInit {
            images: vec![],
            video: Some(VideoPreload {
                media: MediaRef::Path(path.into()),
                max_frames_cap: 64,
            }),
            caps: SessionCaps::default(),
        }
    }

    #[test]
    fn print_and_persistence() {
        let sb = FakeSandbox::new();
        let s = sb.create_session(&SandboxInit::default()).unwrap();
        let r = sb.execute(&s, "print(1+1)", 1000).unwrap();
        assert_eq!(r.stdout, "2\n");
        assert!(r.images.is_empty());
        sb.execute(&s, "x = 5", 1000).unwrap();
        assert_eq!(sb.execute(&s, "print(x)", 1000).unwrap().stdout, "5\n");
    }

    #[test]
    fn sessions_are_isolated() {
        let sb = FakeSandbox::new();
        let a = sb.create_session(&SandboxInit::default()).unwrap();
        let b = sb.create_session(&SandboxInit::default()).unwrap();
        sb.execute(&a, "secret = 1", 1000).unwrap();
        let r = sb.execute(&b, "print(secret)", 1000).unwrap();
        assert!(r.error.unwrap().contains("NameError"));
    }

    #[test]
    fn display_hook_renders() {
        let sb = FakeSandbox::new();
        let s = sb.create_session(&SandboxInit::default()).unwrap();
        let r = sb.execute(&s, "plt.plot([1,2])\nplt.show()", 1000).unwrap();
        assert!(r.display_hook_invoked);
        assert_eq!(r.images.len(), 1);
        assert_eq!((r.images[0].width(), r.images[0].height()), (448, 448));
    }

    #[test]
    fn preloads_are_bound() {
        let sb = FakeSandbox::new().with_video_frames(90);
        let s = sb.create_session(&video_init("/v.mp4")).unwrap();
        assert_eq!(sb.execute(&s, "print(len(video_clue_0))", 1000).unwrap().stdout, "90\n");

        let init = SandboxInit {
            images: vec![RasterImage::solid(8, 8, [0, 0, 0])],
            ..Default::default()
        };
        let s = sb.create_session(&init).unwrap();
        let r = sb.execute(&s, "print(image_clue_0.size)", 1000).unwrap();
        assert!(r.error.is_none());
    }

    #[test]
    fn unreadable_video_fails_init() {
        let sb = FakeSandbox::new().with_unreadable_media("/missing.mp4");
        assert!(matches!(
            sb.create_session(&video_init("/missing.mp4")),
            Err(SandboxError::InitFailure(_))
        ));
    }

    #[test]
    fn timeout_keeps_session() {
        let sb = FakeSandbox::new();
        let s = sb.create_session(&SandboxInit::default()).unwrap();
        assert_eq!(sb.execute(&s, "while True: pass", 1000), Err(SandboxError::Timeout));
        assert_eq!(sb.execute(&s, "print(3)", 1000).unwrap().stdout, "3\n");
    }

    #[test]
    fn close_semantics() {
        let sb = FakeSandbox::new();
        let s = sb.create_session(&SandboxInit::default()).unwrap();
        sb.close_session(&s);
        sb.close_session(&s);
        sb.close_session(&SessionId("nope".into()));
        assert_eq!(sb.execute(&s, "print(1)", 1000), Err(SandboxError::SessionDead));
        assert_eq!(sb.close_counts()[&s.0], 2);
        assert!(sb.open_sessions().is_empty());
    }

    #[test]
    fn rules_and_limits() {
        let sb = FakeSandbox::new()
            .with_rule(FakeRule::contains("die()", FakeResponse::Die))
            .with_rule(FakeRule::exact(
                "many()",
                FakeResponse::Ok {
                    stdout: String::new(),
                    images: 9,
                    error: None,
                    display_hook_invoked: true,
                },
            ));
        let s = sb.create_session(&SandboxInit::default()).unwrap();
        assert_eq!(sb.execute(&s, "many()", 1000), Err(SandboxError::ImageLimitExceeded));
        let code = "for i in range(9):\n    plt.show()";
        assert_eq!(sb.execute(&s, code, 1000), Err(SandboxError::ImageLimitExceeded));
        assert_eq!(sb.execute(&s, "die()", 1000), Err(SandboxError::SessionDead));
        assert_eq!(sb.execute(&s, "print(1)", 1000), Err(SandboxError::SessionDead));
    }
}
