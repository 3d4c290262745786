//! Trajectory data model and the tag-based interaction protocol.
//!
//! A policy turn interleaves free-form reasoning with at most one
//! `<code>…</code>` block or one `<answer>…</answer>` block. The environment
//! replies with `<interpreter>…</interpreter>`. All of it is kept as an
//! ordered list of [`Segment`]s inside a [`Trajectory`].

mod parse;
mod sample;
mod segment;
mod trajectory;

pub use parse::{
    extract_boxed_answer, parse_model_output, parse_turn, render_turn, ParsedTurn,
    ANSWER_CLOSE, ANSWER_OPEN, CODE_CLOSE, CODE_OPEN, INTERPRETER_CLOSE, INTERPRETER_OPEN,
};
pub use sample::{load_prompts, parse_prompt_line, write_prompts, MediaRef, Modality, PromptSample, TaskKind, VideoHint};
pub use segment::{
    render_interpreter_segment, ClueRendering, ClueSource, ImageClue, InterpreterOutput, Segment,
    TRUNCATION_MARKER,
};
pub use trajectory::{
    deserialize_trajectory, serialize_trajectory, BrokenReason, Status, Trajectory,
    TrajectoryBuilder, SCHEMA_VERSION,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed tags: `{tag}` opened at byte {offset} is never closed")]
    MalformedTags { tag: &'static str, offset: usize },
    #[error("trajectory invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("record violates trajectory invariants: {0}")]
    Invariant(String),
    #[error("invalid prompt sample `{id}`: {reason}")]
    Sample { id: String, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Raster(#[from] crate::raster::RasterError),
    #[error("{location}: {source}")]
    At {
        location: String,
        source: Box<DecodeError>,
    },
}

impl DecodeError {
    /// The error with any location wrappers removed.
    pub fn root(&self) -> &DecodeError {
        match self {
            DecodeError::At { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Tokenizer-agnostic text token estimate: one token per four bytes, rounded up.
pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::estimate_text_tokens;

    #[test]
    fn text_tokens_round_up() {
        assert_eq!(estimate_text_tokens(""), 0);
        assert_eq!(estimate_text_tokens("a"), 1);
        assert_eq!(estimate_text_tokens("abcd"), 1);
        assert_eq!(estimate_text_tokens("abcde"), 2);
    }
}
