//! One agent episode: generate, parse, execute, repeat.

mod context;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::policy::{ContentPart, EpisodeTag, GenerationParams, Policy, PolicyMessage, Role};
use crate::protocol::{
    estimate_text_tokens, parse_turn, render_interpreter_segment, render_turn, BrokenReason,
    ClueRendering, Modality, ParsedTurn, PromptSample, ProtocolError, Segment, Trajectory,
    TrajectoryBuilder,
};
use crate::sandbox::{SandboxError, SandboxGateway, SessionId};
use crate::vision::PixelBounds;

pub use crate::vision::{cap_long_edge, estimate_visual_tokens, resize_to_bounds};
pub use context::{
    assemble_initial_context, render_image_prompt, render_video_prompt, InitialContext,
    IMAGE_PROMPT_TEMPLATE, VIDEO_PROMPT_TEMPLATE,
};

/// How `wall_clock_ms` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Real elapsed time of the episode.
    #[default]
    Wall,
    /// Sum of sandbox-reported execution durations; reproducible.
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaffoldConfig {
    /// Tool turns (executed code blocks) per episode.
    pub max_turns: u32,
    pub max_context_tokens: u64,
    pub code_timeout_ms: u64,
    pub max_images_per_exec: u32,
    /// Long-edge cap applied to rendered images before bounding.
    pub max_image_edge_px: u32,
    pub patch_px: u32,
    pub merge: u32,
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub stdout_cap_chars: usize,
    /// Frame cap sent with video preloads.
    pub video_max_frames: u32,
    pub timing: Timing,
}

impl Default for ScaffoldConfig {
    /// Training defaults.
    fn default() -> Self {
        Self {
            max_turns: 4,
            max_context_tokens: 32_768,
            code_timeout_ms: 30_000,
            max_images_per_exec: 8,
            max_image_edge_px: 1024,
            patch_px: 28,
            merge: 2,
            min_pixels: 3136,
            max_pixels: 2_000_000,
            stdout_cap_chars: 4096,
            video_max_frames: 2048,
            timing: Timing::Wall,
        }
    }
}

impl ScaffoldConfig {
    /// Evaluation defaults: the larger turn budget.
    pub fn eval_defaults() -> Self {
        Self {
            max_turns: 30,
            ..Self::default()
        }
    }

    /// Returns `(field, problem)` for the first violated constraint.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive: [(&'static str, u64); 9] = [
            ("max_turns", self.max_turns as u64),
            ("max_context_tokens", self.max_context_tokens),
            ("code_timeout_ms", self.code_timeout_ms),
            ("max_images_per_exec", self.max_images_per_exec as u64),
            ("max_image_edge_px", self.max_image_edge_px as u64),
            ("patch_px", self.patch_px as u64),
            ("merge", self.merge as u64),
            ("min_pixels", self.min_pixels),
            ("stdout_cap_chars", self.stdout_cap_chars as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err((name, "must be positive".into()));
            }
        }
        if self.min_pixels >= self.max_pixels {
            return Err(("min_pixels", format!("must be below max_pixels ({})", self.max_pixels)));
        }
        let f = self.patch_px as u64;
        if f * f > self.max_pixels {
            return Err(("patch_px", "one patch exceeds max_pixels".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> PixelBounds {
        PixelBounds {
            min_pixels: self.min_pixels,
            max_pixels: self.max_pixels,
            factor: self.patch_px,
        }
    }

    pub fn rendering(&self) -> ClueRendering {
        ClueRendering {
            max_edge_px: self.max_image_edge_px,
            bounds: self.bounds(),
            patch_px: self.patch_px,
            merge: self.merge,
            stdout_cap_chars: self.stdout_cap_chars,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ScaffoldError {
    #[error("unsupported modality: {0}")]
    UnsupportedModality(String),
    #[error("undecodable image hint: {0}")]
    InvalidHint(String),
}

/// Live state of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub messages: Vec<PolicyMessage>,
    pub text_tokens: u64,
    pub visual_tokens: u64,
    pub turns_used: u32,
    pub session: Option<SessionId>,
}

impl EpisodeState {
    pub fn context_tokens(&self) -> u64 {
        self.text_tokens + self.visual_tokens
    }

    fn push(&mut self, msg: PolicyMessage) {
        for p in &msg.parts {
            match p {
                ContentPart::Text(t) => self.text_tokens += estimate_text_tokens(t),
                ContentPart::Image(c) => self.visual_tokens += c.tokens(),
            }
        }
        self.messages.push(msg);
    }
}

/// Observer hooks for tests and tracing; all methods default to no-ops.
pub trait EpisodeObserver {
    /// Called right before each policy call.
    fn before_generate(&mut self, _state: &EpisodeState) {}
}

impl EpisodeObserver for () {}

fn sandbox_reason(e: &SandboxError) -> BrokenReason {
    match e {
        SandboxError::Timeout => BrokenReason::ExecutionTimeout,
        SandboxError::SessionDead => BrokenReason::SandboxDeath,
        SandboxError::ImageLimitExceeded => BrokenReason::ImageLimitExceeded,
        SandboxError::InitFailure(_) | SandboxError::Unreachable(_) | SandboxError::Protocol(_) => {
            BrokenReason::BackendFailure
        }
    }
}

/// Runs one episode of `sample`. Runtime failures end up in the returned
/// trajectory's status; only malformed samples are errors.
pub fn run_episode<P, S>(
    sample: &PromptSample,
    rollout_index: u32,
    policy: &P,
    sandbox: &S,
    cfg: &ScaffoldConfig,
    params: &GenerationParams,
) -> Result<Trajectory, ScaffoldError>
where
    P: Policy + ?Sized,
    S: SandboxGateway + ?Sized,
{
    run_episode_observed(sample, rollout_index, policy, sandbox, cfg, params, &mut ())
}

pub fn run_episode_observed<P, S, O>(
    sample: &PromptSample,
    rollout_index: u32,
    policy: &P,
    sandbox: &S,
    cfg: &ScaffoldConfig,
    params: &GenerationParams,
    observer: &mut O,
) -> Result<Trajectory, ScaffoldError>
where
    P: Policy + ?Sized,
    S: SandboxGateway + ?Sized,
    O: EpisodeObserver + ?Sized,
{
    let started = Instant::now();
    let init = assemble_initial_context(sample, cfg)?;
    let mut builder = TrajectoryBuilder::new(
        format!("{}/{}", sample.id, rollout_index),
        sample.id.clone(),
        rollout_index,
    );
    for clue in &init.hint_clues {
        builder.push_context_image(clue.clone());
    }
    let mut state = EpisodeState {
        messages: Vec::new(),
        text_tokens: 0,
        visual_tokens: 0,
        turns_used: 0,
        session: None,
    };
    for m in init.messages {
        state.push(m);
    }

    let finish = |mut b: TrajectoryBuilder, outcome: Option<BrokenReason>, simulated_ms: u64| {
        b.add_wall_clock(match cfg.timing {
            Timing::Wall => started.elapsed().as_millis() as u64,
            Timing::Simulated => simulated_ms,
        });
        match outcome {
            Some(reason) => b.finish_broken(reason),
            None => b.finish(),
        }
    };

    if state.context_tokens() > cfg.max_context_tokens {
        return Ok(finish(builder, Some(BrokenReason::ContextOverflow), 0));
    }

    let session = match sandbox.create_session(&init.sandbox_init) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(sample = %sample.id, rollout_index, "session create failed: {e}");
            return Ok(finish(builder, Some(BrokenReason::BackendFailure), 0));
        }
    };
    state.session = Some(session.clone());

    let mut simulated_ms = 0u64;
    let outcome = drive(
        sample,
        rollout_index,
        policy,
        sandbox,
        cfg,
        params,
        &session,
        &mut state,
        &mut builder,
        &mut simulated_ms,
        observer,
    );
    sandbox.close_session(&session);
    Ok(finish(builder, outcome, simulated_ms))
}

/// The turn loop. Returns `Some(reason)` when the episode is broken.
#[allow(clippy::too_many_arguments)]
fn drive<P, S, O>(
    sample: &PromptSample,
    rollout_index: u32,
    policy: &P,
    sandbox: &S,
    cfg: &ScaffoldConfig,
    params: &GenerationParams,
    session: &SessionId,
    state: &mut EpisodeState,
    builder: &mut TrajectoryBuilder,
    simulated_ms: &mut u64,
    observer: &mut O,
) -> Option<BrokenReason>
where
    P: Policy + ?Sized,
    S: SandboxGateway + ?Sized,
    O: EpisodeObserver + ?Sized,
{
    let rendering = cfg.rendering();
    let mut call_index = 0u32;
    loop {
        // One completion, with a single retry on malformed tags.
        let mut parsed: Option<(String, ParsedTurn)> = None;
        for attempt in 0..2 {
            if state.context_tokens() > cfg.max_context_tokens {
                tracing::debug!(sample = %sample.id, rollout_index, "context budget reached");
                return None;
            }
            observer.before_generate(state);
            let tag = EpisodeTag {
                sample_id: sample.id.clone(),
                rollout_index,
                modality: sample.modality,
                call_index,
            };
            call_index += 1;
            let generation = match policy.generate(&state.messages, params, &tag) {
                Ok(g) => g,
                Err(e) => {
                    tracing::warn!(sample = %sample.id, rollout_index, "policy failed: {e}");
                    return Some(BrokenReason::BackendFailure);
                }
            };
            match parse_turn(&generation.text, builder.next_ordinal()) {
                Ok(turn) => {
                    parsed = Some((generation.text, turn));
                    break;
                }
                Err(ProtocolError::MalformedTags { tag, offset }) => {
                    tracing::debug!(attempt, tag, offset, "malformed completion");
                }
                Err(e) => {
                    tracing::warn!("unexpected parse failure: {e}");
                }
            }
        }
        let Some((_, turn)) = parsed else {
            return Some(BrokenReason::BackendFailure);
        };

        let code = turn.code().map(str::to_owned);
        if code.is_some() && state.turns_used >= cfg.max_turns {
            // Over budget: record what the policy asked for, without running it.
            for seg in turn.segments {
                if builder.push_segment(seg).is_err() {
                    return Some(BrokenReason::BackendFailure);
                }
            }
            return None;
        }

        let assistant_text = render_turn(&turn.segments);
        let has_answer = turn.answer().is_some();
        for seg in turn.segments {
            if let Err(e) = builder.push_segment(seg) {
                tracing::warn!("trajectory rejected segment: {e}");
                return Some(BrokenReason::BackendFailure);
            }
        }
        if has_answer {
            return None;
        }
        let Some(code) = code else {
            // The policy yielded without acting or answering.
            return None;
        };
        state.push(PolicyMessage::text(Role::Assistant, assistant_text));

        let result = match sandbox.execute(session, &code, cfg.code_timeout_ms) {
            Ok(r) => r,
            Err(e) => {
                tracing::debug!(sample = %sample.id, rollout_index, "execution failed: {e}");
                return Some(sandbox_reason(&e));
            }
        };
        *simulated_ms += result.duration_ms;
        if result.images.len() > cfg.max_images_per_exec as usize {
            return Some(BrokenReason::ImageLimitExceeded);
        }
        if sample.modality == Modality::Video && result.display_hook_invoked && result.images.is_empty()
        {
            return Some(BrokenReason::NoImageRendered);
        }
        let segment = match render_interpreter_segment(&result, &rendering) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!("undecodable rendered image: {e}");
                return Some(BrokenReason::BackendFailure);
            }
        };
        let mut parts = vec![ContentPart::Text(segment.protocol_text())];
        parts.extend(segment.images().iter().cloned().map(ContentPart::Image));
        if builder.push_segment(segment).is_err() {
            return Some(BrokenReason::BackendFailure);
        }
        state.turns_used += 1;
        state.push(PolicyMessage {
            role: Role::ToolResult,
            parts,
        });
    }
}

/// Segments of `t` as the policy saw them, concatenated.
pub fn transcript(t: &Trajectory) -> String {
    t.segments().iter().map(Segment::protocol_text).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Script, ScriptedPolicy};
    use crate::protocol::{Status, TaskKind};
    use crate::raster::RasterImage;
    use crate::sandbox::{FakeResponse, FakeRule, FakeSandbox};

    fn sample() -> PromptSample {
        PromptSample {
            id: "s".into(),
            query: "q".into(),
            image_hints: vec![RasterImage::solid(448, 448, [1, 1, 1])],
            video: None,
            gold_answer: "A".into(),
            task_kind: TaskKind::MultipleChoice,
            modality: Modality::Image,
        }
    }

    fn cfg() -> ScaffoldConfig {
        ScaffoldConfig {
            timing: Timing::Simulated,
            ..ScaffoldConfig::default()
        }
    }

    fn run(turns: &[&str], sb: &FakeSandbox, cfg: &ScaffoldConfig) -> Trajectory {
        let p = ScriptedPolicy::new(Script::from_iter(turns.iter().copied()));
        run_episode(&sample(), 0, &p, sb, cfg, &GenerationParams::default()).unwrap()
    }

    #[test]
    fn code_code_answer() {
        let sb = FakeSandbox::new();
        let t = run(
            &["<code>print(1)</code>", "<code>plt.show()</code>", "<answer>\\boxed{A}</answer>"],
            &sb,
            &cfg(),
        );
        assert_eq!(t.status(), Status::Completed);
        assert_eq!(t.n_tc(), 2);
        // hint 448x448 -> 64, one render -> 64
        assert_eq!(t.visual_tokens(), 128);
        assert_eq!(t.wall_clock_ms(), 10);
        assert_eq!(sb.close_counts()["fake-0"], 1);
    }

    #[test]
    fn budget_exhaustion_is_unanswered() {
        let sb = FakeSandbox::new();
        let t = run(&["<code>print(1)</code>"], &sb, &cfg());
        assert_eq!(t.status(), Status::Unanswered);
        assert_eq!(t.n_tc(), 4);
        assert_eq!(t.code_blocks().count(), 5);
    }

    #[test]
    fn timeout_is_broken() {
        let sb = FakeSandbox::new();
        let t = run(&["<code>while True: pass</code>"], &sb, &cfg());
        assert_eq!(t.status(), Status::Broken(BrokenReason::ExecutionTimeout));
        assert_eq!(sb.close_counts()["fake-0"], 1);
    }

    #[test]
    fn malformed_retry_then_recover() {
        let sb = FakeSandbox::new();
        let t = run(&["<code>oops", "<answer>A</answer>"], &sb, &cfg());
        assert_eq!(t.status(), Status::Completed);

        let t = run(&["<code>oops"], &sb, &cfg());
        assert_eq!(t.status(), Status::Broken(BrokenReason::BackendFailure));
    }

    #[test]
    fn plain_text_ends_unanswered() {
        let sb = FakeSandbox::new();
        let t = run(&["I am not sure."], &sb, &cfg());
        assert_eq!(t.status(), Status::Unanswered);
        assert_eq!(t.n_tc(), 0);
    }

    #[test]
    fn context_budget_stops_calls() {
        let sb = FakeSandbox::new();
        let mut c = cfg();
        c.max_turns = 30;
        c.max_context_tokens = 2600;
        struct Max(u64);
        impl EpisodeObserver for Max {
            fn before_generate(&mut self, s: &EpisodeState) {
                self.0 = self.0.max(s.context_tokens());
            }
        }
        let mut obs = Max(0);
        let p = ScriptedPolicy::new(Script::from_iter(["<code>plt.show()\nplt.show()</code>"]));
        let t = run_episode_observed(&sample(), 0, &p, &sb, &c, &GenerationParams::default(), &mut obs)
            .unwrap();
        assert_eq!(t.status(), Status::Unanswered);
        assert!(obs.0 <= 2600);
        assert!(t.n_tc() < 30);
    }

    #[test]
    fn initial_overflow_is_broken() {
        let sb = FakeSandbox::new();
        let mut c = cfg();
        c.max_context_tokens = 10;
        let t = run(&["<answer>A</answer>"], &sb, &c);
        assert_eq!(t.status(), Status::Broken(BrokenReason::ContextOverflow));
        assert_eq!(sb.sessions_created(), 0);
    }

    #[test]
    fn sandbox_failures_map_to_reasons() {
        let cases = [
            (FakeResponse::Die, BrokenReason::SandboxDeath),
            (FakeResponse::ImageLimit, BrokenReason::ImageLimitExceeded),
            (FakeResponse::Unreachable, BrokenReason::BackendFailure),
            (FakeResponse::Timeout, BrokenReason::ExecutionTimeout),
        ];
        for (resp, reason) in cases {
            let sb = FakeSandbox::new().with_rule(FakeRule::contains("boom", resp));
            let t = run(&["<code>boom</code>"], &sb, &cfg());
            assert_eq!(t.status(), Status::Broken(reason));
            assert_eq!(sb.close_counts()["fake-0"], 1);
        }
    }

    #[test]
    fn unreachable_sandbox_is_broken_without_session() {
        let sb = FakeSandbox::unreachable();
        let t = run(&["<answer>A</answer>"], &sb, &cfg());
        assert_eq!(t.status(), Status::Broken(BrokenReason::BackendFailure));
    }

    #[test]
    fn config_validation() {
        assert!(ScaffoldConfig::default().validate().is_ok());
        assert_eq!(ScaffoldConfig::eval_defaults().max_turns, 30);
        let mut c = ScaffoldConfig::default();
        c.max_turns = 0;
        assert_eq!(c.validate().unwrap_err().0, "max_turns");
        let mut c = ScaffoldConfig::default();
        c.min_pixels = c.max_pixels;
        assert_eq!(c.validate().unwrap_err().0, "min_pixels");
    }
}
