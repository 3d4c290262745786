use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpisodeTag, Generation, GenerationParams, Policy, PolicyError, PolicyMessage};

/// Canned completions. Call `k` of an episode returns `turns[k]`; calls past
/// the end repeat the last turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub turns: Vec<String>,
}

impl<S: Into<String>> FromIterator<S> for Script {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            turns: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Replays scripts chosen by `(sample, rollout)`, then by sample, then the default.
///
/// Fixture files are JSON:
/// `{"default": [...], "samples": {"id": [...]}, "rollouts": {"id/3": [...]}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedPolicy {
    pub default: Script,
    pub samples: HashMap<String, Script>,
    pub rollouts: HashMap<String, Script>,
}

impl ScriptedPolicy {
    pub fn new(default: Script) -> Self {
        Self {
            default,
            ..Self::default()
        }
    }

    pub fn with_sample(mut self, sample_id: &str, script: Script) -> Self {
        self.samples.insert(sample_id.to_owned(), script);
        self
    }

    pub fn with_rollout(mut self, sample_id: &str, rollout: u32, script: Script) -> Self {
        self.rollouts.insert(format!("{sample_id}/{rollout}"), script);
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn script_for(&self, ep: &EpisodeTag) -> &Script {
        self.rollouts
            .get(&format!("{}/{}", ep.sample_id, ep.rollout_index))
            .or_else(|| self.samples.get(&ep.sample_id))
            .unwrap_or(&self.default)
    }
}

impl Policy for ScriptedPolicy {
    fn generate(
        &self,
        _messages: &[PolicyMessage],
        params: &GenerationParams,
        episode: &EpisodeTag,
    ) -> Result<Generation, PolicyError> {
        let script = self.script_for(episode);
        let Some(last) = script.turns.len().checked_sub(1) else {
            return Err(PolicyError::BackendFailure(format!(
                "no script for sample {}",
                episode.sample_id
            )));
        };
        let text = script.turns[(episode.call_index as usize).min(last)].clone();
        Ok(Generation::from_text(text, &params.stop))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::StopReason;
    use crate::protocol::Modality;

    fn tag(sample: &str, rollout: u32, call: u32) -> EpisodeTag {
        EpisodeTag {
            sample_id: sample.into(),
            rollout_index: rollout,
            modality: Modality::Image,
            call_index: call,
        }
    }

    #[test]
    fn turns_in_order_then_repeat() {
        let p = ScriptedPolicy::new(Script::from_iter(["<code>a</code>", "<answer>B</answer>"]));
        let params = GenerationParams::default();
        let g0 = p.generate(&[], &params, &tag("s", 0, 0)).unwrap();
        assert_eq!(g0.text, "<code>a</code>");
        assert_eq!(g0.stop, StopReason::Stop("</code>".into()));
        let g5 = p.generate(&[], &params, &tag("s", 0, 5)).unwrap();
        assert_eq!(g5.text, "<answer>B</answer>");
    }

    #[test]
    fn lookup_precedence() {
        let p = ScriptedPolicy::new(Script::from_iter(["d"]))
            .with_sample("s", Script::from_iter(["s"]))
            .with_rollout("s", 2, Script::from_iter(["r"]));
        let params = GenerationParams::default();
        assert_eq!(p.generate(&[], &params, &tag("s", 2, 0)).unwrap().text, "r");
        assert_eq!(p.generate(&[], &params, &tag("s", 1, 0)).unwrap().text, "s");
        assert_eq!(p.generate(&[], &params, &tag("t", 2, 0)).unwrap().text, "d");
    }

    #[test]
    fn empty_script_is_backend_failure() {
        let p = ScriptedPolicy::default();
        assert!(p.generate(&[], &GenerationParams::default(), &tag("s", 0, 0)).is_err());
    }

    #[test]
    fn fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(&path, r#"{"default": ["x"], "samples": {"a": ["y"]}}"#).unwrap();
        let p = ScriptedPolicy::load(&path).unwrap();
        assert_eq!(p.samples["a"].turns, vec!["y".to_string()]);
    }
}
