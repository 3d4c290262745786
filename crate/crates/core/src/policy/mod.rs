//! Policy backends: a remote chat-completions client plus scripted and
//! stochastic mocks.

mod remote;
mod scripted;
mod stochastic;

use serde::{Deserialize, Serialize};

use crate::protocol::{ImageClue, Modality, ANSWER_CLOSE, CODE_CLOSE};

pub use remote::{RemotePolicy, RemotePolicyConfig, API_KEY_ENV};
pub use scripted::{Script, ScriptedPolicy};
pub use stochastic::{CorrectnessCurve, EpisodePlan, StochasticMock, StochasticSpec, TurnDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Assistant,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image(ImageClue),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl PolicyMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageClue> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Image(c) => Some(c),
            _ => None,
        })
    }

    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_k: Option<u32>,
    pub max_new_tokens: u32,
    pub stop: Vec<String>,
    /// Used by the mocks only.
    pub seed: u64,
}

impl Default for GenerationParams {
    /// Training-time rollout decoding.
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            max_new_tokens: 2048,
            stop: vec![CODE_CLOSE.into(), ANSWER_CLOSE.into()],
            seed: 0,
        }
    }
}

impl GenerationParams {
    /// Near-greedy evaluation decoding.
    pub fn eval_greedy() -> Self {
        Self {
            temperature: 0.01,
            ..Self::default()
        }
    }

    /// Sampled evaluation decoding.
    pub fn eval_sampled() -> Self {
        Self {
            temperature: 0.5,
            top_k: Some(20),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        if self.top_k == Some(0) {
            return Err("top_k must be >= 1".into());
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be >= 1".into());
        }
        if self.stop.is_empty() || self.stop.iter().any(String::is_empty) {
            return Err("stop sequences must be nonempty".into());
        }
        Ok(())
    }
}

/// Identifies the episode and turn a generate call belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTag {
    pub sample_id: String,
    pub rollout_index: u32,
    pub modality: Modality,
    /// Zero-based count of generate calls already made in this episode.
    pub call_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Generation hit this stop sequence (re-appended to the text).
    Stop(String),
    Length,
    EndOfText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub stop: StopReason,
}

impl Generation {
    /// Classifies a complete canned text against the stop list.
    pub fn from_text(text: String, stop: &[String]) -> Self {
        let reason = stop
            .iter()
            .find(|s| text.ends_with(s.as_str()))
            .map(|s| StopReason::Stop(s.clone()))
            .unwrap_or(StopReason::EndOfText);
        Self { text, stop: reason }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy backend failure: {0}")]
    BackendFailure(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

/// The policy being rolled out. Implementations must accept concurrent calls.
pub trait Policy: Send + Sync {
    fn generate(
        &self,
        messages: &[PolicyMessage],
        params: &GenerationParams,
        episode: &EpisodeTag,
    ) -> Result<Generation, PolicyError>;
}

impl<T: Policy + ?Sized> Policy for &T {
    fn generate(
        &self,
        m: &[PolicyMessage],
        p: &GenerationParams,
        e: &EpisodeTag,
    ) -> Result<Generation, PolicyError> {
        (**self).generate(m, p, e)
    }
}

impl<T: Policy + ?Sized> Policy for std::sync::Arc<T> {
    fn generate(
        &self,
        m: &[PolicyMessage],
        p: &GenerationParams,
        e: &EpisodeTag,
    ) -> Result<Generation, PolicyError> {
        (**self).generate(m, p, e)
    }
}

impl<T: Policy + ?Sized> Policy for Box<T> {
    fn generate(
        &self,
        m: &[PolicyMessage],
        p: &GenerationParams,
        e: &EpisodeTag,
    ) -> Result<Generation, PolicyError> {
        (**self).generate(m, p, e)
    }
}
