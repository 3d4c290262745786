use serde::{Deserialize, Serialize};

use super::parse::extract_boxed_answer;
use super::segment::{ImageClue, InterpreterOutput, Segment};
use super::{estimate_text_tokens, DecodeError, ProtocolError};

/// Current trajectory log schema version (top-level `v`).
pub const SCHEMA_VERSION: u64 = 1;

/// Why an episode was invalidated. Broken trajectories are never trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokenReason {
    ExecutionTimeout,
    SandboxDeath,
    ImageLimitExceeded,
    /// A video frame-fetch call invoked the display hook but produced no image.
    NoImageRendered,
    /// The initial context alone exceeds the context budget.
    ContextOverflow,
    BackendFailure,
}

impl BrokenReason {
    pub const ALL: [BrokenReason; 6] = [
        BrokenReason::ExecutionTimeout,
        BrokenReason::SandboxDeath,
        BrokenReason::ImageLimitExceeded,
        BrokenReason::NoImageRendered,
        BrokenReason::ContextOverflow,
        BrokenReason::BackendFailure,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum Status {
    Completed,
    Unanswered,
    Broken(BrokenReason),
}

impl Status {
    pub fn is_broken(&self) -> bool {
        matches!(self, Status::Broken(_))
    }
}

/// One agent episode. Constructed through [`TrajectoryBuilder`], immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    id: String,
    sample_id: String,
    rollout_index: u32,
    context_images: Vec<ImageClue>,
    segments: Vec<Segment>,
    status: Status,
    n_tc: u32,
    text_tokens: u64,
    visual_tokens: u64,
    wall_clock_ms: u64,
}

impl Trajectory {
    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }
    pub fn rollout_index(&self) -> u32 {
        self.rollout_index
    }
    /// Prompt-supplied images that sat in context from the start.
    pub fn context_images(&self) -> &[ImageClue] {
        &self.context_images
    }
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
    pub fn status(&self) -> Status {
        self.status
    }
    pub fn is_broken(&self) -> bool {
        self.status.is_broken()
    }
    /// Tool calls: code blocks that received interpreter output.
    pub fn n_tc(&self) -> u32 {
        self.n_tc
    }
    pub fn text_tokens(&self) -> u64 {
        self.text_tokens
    }
    pub fn visual_tokens(&self) -> u64 {
        self.visual_tokens
    }
    pub fn wall_clock_ms(&self) -> u64 {
        self.wall_clock_ms
    }

    pub fn final_answer(&self) -> Option<&str> {
        match self.segments.last() {
            Some(Segment::Answer { extracted, .. }) => Some(extracted),
            _ => None,
        }
    }

    pub fn code_blocks(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Code { code, .. } => Some(code.as_str()),
            _ => None,
        })
    }

    pub fn rendered_images(&self) -> impl Iterator<Item = &ImageClue> {
        self.segments.iter().flat_map(|s| s.images().iter())
    }
}

/// Accumulates segments while maintaining the trajectory invariants.
#[derive(Debug, Clone)]
pub struct TrajectoryBuilder {
    inner: Trajectory,
    next_ordinal: u32,
}

impl TrajectoryBuilder {
    pub fn new(id: impl Into<String>, sample_id: impl Into<String>, rollout_index: u32) -> Self {
        Self {
            inner: Trajectory {
                id: id.into(),
                sample_id: sample_id.into(),
                rollout_index,
                context_images: Vec::new(),
                segments: Vec::new(),
                status: Status::Unanswered,
                n_tc: 0,
                text_tokens: 0,
                visual_tokens: 0,
                wall_clock_ms: 0,
            },
            next_ordinal: 0,
        }
    }

    pub fn push_context_image(&mut self, clue: ImageClue) {
        self.inner.visual_tokens += clue.tokens();
        self.inner.context_images.push(clue);
    }

    /// Ordinal the next code block must carry.
    pub fn next_ordinal(&self) -> u32 {
        self.next_ordinal
    }

    pub fn has_answer(&self) -> bool {
        matches!(self.inner.segments.last(), Some(Segment::Answer { .. }))
    }

    pub fn push_reasoning(&mut self, text: impl Into<String>) -> Result<(), ProtocolError> {
        let text = text.into();
        if text.is_empty() {
            return Ok(());
        }
        self.push_segment(Segment::Reasoning { text })
    }

    pub fn push_code(&mut self, code: impl Into<String>) -> Result<u32, ProtocolError> {
        let ordinal = self.next_ordinal;
        self.push_segment(Segment::Code {
            code: code.into(),
            ordinal,
        })?;
        Ok(ordinal)
    }

    pub fn push_interpreter(&mut self, output: InterpreterOutput) -> Result<(), ProtocolError> {
        self.push_segment(Segment::Interpreter(output))
    }

    pub fn push_answer(&mut self, raw: impl Into<String>) -> Result<(), ProtocolError> {
        let raw = raw.into();
        let extracted = extract_boxed_answer(&raw);
        self.push_segment(Segment::Answer { raw, extracted })
    }

    /// Appends any segment, rejecting sequences that break the invariants.
    pub fn push_segment(&mut self, segment: Segment) -> Result<(), ProtocolError> {
        if self.has_answer() {
            return Err(ProtocolError::Invariant(
                "no segment may follow the final answer".into(),
            ));
        }
        match &segment {
            Segment::Code { ordinal, .. } if *ordinal != self.next_ordinal => {
                return Err(ProtocolError::Invariant(format!(
                    "code ordinal {ordinal} out of sequence (expected {})",
                    self.next_ordinal
                )));
            }
            Segment::Code { .. } => self.next_ordinal += 1,
            Segment::Interpreter(out) => {
                if !matches!(self.inner.segments.last(), Some(Segment::Code { .. })) {
                    return Err(ProtocolError::Invariant(
                        "interpreter output must directly follow a code block".into(),
                    ));
                }
                self.inner.n_tc += 1;
                self.inner.visual_tokens += out.images.iter().map(ImageClue::tokens).sum::<u64>();
            }
            Segment::Reasoning { .. } | Segment::Answer { .. } => {}
        }
        self.inner.text_tokens += estimate_text_tokens(&segment.protocol_text());
        self.inner.segments.push(segment);
        Ok(())
    }

    pub fn add_wall_clock(&mut self, ms: u64) {
        self.inner.wall_clock_ms += ms;
    }

    pub fn n_tc(&self) -> u32 {
        self.inner.n_tc
    }

    pub fn visual_tokens(&self) -> u64 {
        self.inner.visual_tokens
    }

    pub fn segments(&self) -> &[Segment] {
        &self.inner.segments
    }

    /// Completed when a final answer exists, Unanswered otherwise.
    pub fn finish(mut self) -> Trajectory {
        self.inner.status = if self.has_answer() {
            Status::Completed
        } else {
            Status::Unanswered
        };
        self.inner
    }

    /// Marks the episode broken. A trajectory that already holds a final
    /// answer stays Completed.
    pub fn finish_broken(mut self, reason: BrokenReason) -> Trajectory {
        self.inner.status = if self.has_answer() {
            Status::Completed
        } else {
            Status::Broken(reason)
        };
        self.inner
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    v: u64,
    id: String,
    sample_id: String,
    rollout_index: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    context_images: Vec<ImageClue>,
    segments: Vec<Segment>,
    status: Status,
    n_tc: u32,
    text_tokens: u64,
    visual_tokens: u64,
    wall_clock_ms: u64,
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrajectoryRecord {
            v: SCHEMA_VERSION,
            id: self.id.clone(),
            sample_id: self.sample_id.clone(),
            rollout_index: self.rollout_index,
            context_images: self.context_images.clone(),
            segments: self.segments.clone(),
            status: self.status,
            n_tc: self.n_tc,
            text_tokens: self.text_tokens,
            visual_tokens: self.visual_tokens,
            wall_clock_ms: self.wall_clock_ms,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let record = TrajectoryRecord::deserialize(d)?;
        Trajectory::try_from(record).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = DecodeError;

    /// Replays the record through the builder and checks every stored
    /// derived field against the replay.
    fn try_from(r: TrajectoryRecord) -> Result<Self, DecodeError> {
        if r.v != SCHEMA_VERSION {
            return Err(DecodeError::Version {
                found: r.v,
                expected: SCHEMA_VERSION,
            });
        }
        let invariant = |m: String| DecodeError::Invariant(m);
        let mut b = TrajectoryBuilder::new(r.id, r.sample_id, r.rollout_index);
        for clue in r.context_images {
            b.push_context_image(clue);
        }
        for seg in r.segments {
            b.push_segment(seg).map_err(|e| invariant(e.to_string()))?;
        }
        b.add_wall_clock(r.wall_clock_ms);
        let rebuilt = match r.status {
            Status::Broken(reason) => {
                if b.has_answer() {
                    return Err(invariant("broken trajectory carries a final answer".into()));
                }
                b.finish_broken(reason)
            }
            _ => b.finish(),
        };
        if rebuilt.status != r.status {
            return Err(invariant(format!(
                "status {:?} disagrees with segments ({:?})",
                r.status, rebuilt.status
            )));
        }
        if rebuilt.n_tc != r.n_tc {
            return Err(invariant(format!(
                "n_tc {} but {} executed code blocks",
                r.n_tc, rebuilt.n_tc
            )));
        }
        if rebuilt.visual_tokens != r.visual_tokens {
            return Err(invariant(format!(
                "visual_tokens {} but clues sum to {}",
                r.visual_tokens, rebuilt.visual_tokens
            )));
        }
        if rebuilt.text_tokens != r.text_tokens {
            return Err(invariant(format!(
                "text_tokens {} but segments estimate {}",
                r.text_tokens, rebuilt.text_tokens
            )));
        }
        Ok(rebuilt)
    }
}

/// One log line (no trailing newline).
pub fn serialize_trajectory(t: &Trajectory) -> String {
    serde_json::to_string(t).expect("trajectory serialization is infallible")
}

pub fn deserialize_trajectory(line: &str) -> Result<Trajectory, DecodeError> {
    let record: TrajectoryRecord = serde_json::from_str(line)?;
    Trajectory::try_from(record)
}
