//! Run configuration: one TOML file, defaulted and validated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::pipeline::{PipelineConfig, StepConfig};
use crate::policy::{GenerationParams, Policy, RemotePolicy, RemotePolicyConfig, ScriptedPolicy, StochasticMock, StochasticSpec};
use crate::protocol::PromptSample;
use crate::reward::RewardConfig;
use crate::sandbox::{FakeRule, FakeSandbox, HttpSandbox, HttpSandboxConfig, SandboxGateway};
use crate::scaffold::ScaffoldConfig;

/// Overrides `policy.base_url` for remote policies.
pub const POLICY_URL_ENV: &str = "PVRL_POLICY_URL";
/// Overrides `sandbox.base_url` for HTTP sandboxes.
pub const SANDBOX_URL_ENV: &str = "PVRL_SANDBOX_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Training defaults (turn budget 4).
    #[default]
    Train,
    /// Evaluation defaults (turn budget 30).
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyBackend {
    Remote(RemotePolicyConfig),
    /// Canned completions from a JSON fixture, relative to the config file.
    Scripted { path: PathBuf },
    Stochastic(StochasticSpec),
}

impl Default for PolicyBackend {
    fn default() -> Self {
        PolicyBackend::Remote(RemotePolicyConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FakeSandboxConfig {
    pub video_frames: u64,
    pub reported_duration_ms: u64,
    pub unreadable_media: Vec<String>,
    pub rules: Vec<FakeRule>,
}

impl Default for FakeSandboxConfig {
    fn default() -> Self {
        Self {
            video_frames: 1200,
            reported_duration_ms: 5,
            unreadable_media: Vec::new(),
            rules: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SandboxBackend {
    Http(HttpSandboxConfig),
    Fake(FakeSandboxConfig),
}

impl Default for SandboxBackend {
    fn default() -> Self {
        SandboxBackend::Http(HttpSandboxConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scaffold: ScaffoldConfig,
    pub pipeline: PipelineConfig,
    pub reward: RewardConfig,
    pub generation: GenerationParams,
    pub policy: PolicyBackend,
    pub sandbox: SandboxBackend,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Train,
            seed: 0,
            output_dir: PathBuf::from("pvrl-out"),
            scaffold: ScaffoldConfig::default(),
            pipeline: PipelineConfig::default(),
            reward: RewardConfig::default(),
            generation: GenerationParams::default(),
            policy: PolicyBackend::default(),
            sandbox: SandboxBackend::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("cannot build {what}: {reason}")]
    Backend { what: &'static str, reason: String },
}

fn invalid(prefix: &str, (field, reason): (&str, String)) -> ConfigError {
    ConfigError::Validation {
        field: format!("{prefix}.{field}"),
        reason,
    }
}

impl RunConfig {
    /// Parses TOML text. Unknown keys are returned rather than rejected.
    pub fn from_toml_str(text: &str) -> Result<(Self, Vec<String>), ConfigError> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.profile == Profile::Eval {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
            let set = table
                .get("scaffold")
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key("max_turns"));
            if !set {
                cfg.scaffold.max_turns = ScaffoldConfig::eval_defaults().max_turns;
            }
        }
        cfg.validate()?;
        Ok((cfg, unknown))
    }

    /// Loads, applies URL overrides from the environment and validates.
    /// Relative fixture paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let (mut cfg, unknown) = Self::from_toml_str(&text)?;
        for key in unknown {
            tracing::warn!(key, file = %path.display(), "ignoring unknown config key");
        }
        if let PolicyBackend::Scripted { path: p } = &mut cfg.policy {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let (PolicyBackend::Remote(r), Some(url)) = (&mut self.policy, get(POLICY_URL_ENV)) {
            r.base_url = url;
        }
        if let (SandboxBackend::Http(h), Some(url)) = (&mut self.sandbox, get(SANDBOX_URL_ENV)) {
            h.base_url = url;
        }
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scaffold.validate().map_err(|e| invalid("scaffold", e))?;
        self.pipeline.validate().map_err(|e| invalid("pipeline", e))?;
        self.reward.validate().map_err(|e| invalid("reward", e))?;
        self.generation.validate().map_err(|reason| ConfigError::Validation {
            field: "generation".into(),
            reason,
        })?;
        match &self.policy {
            PolicyBackend::Remote(r) => {
                if r.base_url.trim().is_empty() {
                    return Err(invalid("policy", ("base_url", "must be set".into())));
                }
                if r.model.trim().is_empty() {
                    return Err(invalid("policy", ("model", "must be set".into())));
                }
            }
            PolicyBackend::Scripted { path } => {
                if path.as_os_str().is_empty() {
                    return Err(invalid("policy", ("path", "must be set".into())));
                }
            }
            PolicyBackend::Stochastic(spec) => {
                spec.validate(self.scaffold.max_turns)
                    .map_err(|reason| invalid("policy", ("curve", reason)))?;
            }
        }
        if let SandboxBackend::Http(h) = &self.sandbox {
            if h.base_url.trim().is_empty() {
                return Err(invalid("sandbox", ("base_url", "must be set".into())));
            }
        }
        Ok(())
    }

    /// Honors `pipeline.max_concurrency`.
    pub fn execution(&self) -> Execution {
        self.pipeline.execution()
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            scaffold: self.scaffold,
            pipeline: self.pipeline,
            reward: self.reward,
            params: self.generation.clone(),
            seed: self.seed,
            execution: self.execution(),
        }
    }

    /// The stochastic mock needs gold answers, hence `samples`.
    pub fn build_policy(&self, samples: &[PromptSample]) -> Result<Box<dyn Policy>, ConfigError> {
        Ok(match &self.policy {
            PolicyBackend::Remote(r) => Box::new(RemotePolicy::new(r.clone())),
            PolicyBackend::Scripted { path } => Box::new(ScriptedPolicy::load(path).map_err(|reason| ConfigError::Backend {
                what: "scripted policy",
                reason,
            })?),
            PolicyBackend::Stochastic(spec) => Box::new(StochasticMock::for_samples(spec.clone(), samples)),
        })
    }

    pub fn build_sandbox(&self) -> Result<SandboxHandle, ConfigError> {
        Ok(match &self.sandbox {
            SandboxBackend::Http(h) => SandboxHandle::Http(HttpSandbox::new(h.clone())),
            SandboxBackend::Fake(f) => {
                let mut sb = FakeSandbox::new()
                    .with_video_frames(f.video_frames)
                    .with_reported_duration(f.reported_duration_ms);
                for m in &f.unreadable_media {
                    sb = sb.with_unreadable_media(m);
                }
                for r in &f.rules {
                    sb = sb.with_rule(r.clone());
                }
                SandboxHandle::Fake(sb)
            }
        })
    }
}

/// A concrete sandbox plus the capabilities callers need beyond the trait.
pub enum SandboxHandle {
    Http(HttpSandbox),
    Fake(FakeSandbox),
}

impl SandboxHandle {
    pub fn gateway(&self) -> &dyn SandboxGateway {
        match self {
            SandboxHandle::Http(h) => h,
            SandboxHandle::Fake(f) => f,
        }
    }

    /// `Err` with a reason when the service cannot be reached.
    pub fn check_reachable(&self) -> Result<(), String> {
        match self {
            SandboxHandle::Http(h) => h.health().map_err(|e| e.to_string()),
            SandboxHandle::Fake(_) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{FakeResponse, Matcher};

    #[test]
    fn minimal_file_defaults() {
        let (cfg, unknown) = RunConfig::from_toml_str(
            r#"
            [policy]
            kind = "remote"
            base_url = "http://10.0.0.2:8000/v1"
            [sandbox]
            kind = "http"
            base_url = "http://10.0.0.3:8765"
            "#,
        )
        .unwrap();
        assert!(unknown.is_empty());
        assert_eq!(cfg.pipeline, PipelineConfig::default());
        assert_eq!((cfg.pipeline.alpha, cfg.pipeline.batch_size, cfg.pipeline.group_size), (2.0, 16, 8));
        assert_eq!(cfg.reward.tool_coef, 0.1);
        assert_eq!(cfg.scaffold.max_turns, 4);
        assert_eq!(cfg.scaffold.max_context_tokens, 32_768);
        match &cfg.policy {
            PolicyBackend::Remote(r) => {
                assert_eq!(r.base_url, "http://10.0.0.2:8000/v1");
                assert_eq!(r.model, RemotePolicyConfig::default().model);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eval_profile_turn_budget() {
        let (cfg, _) = RunConfig::from_toml_str("profile = \"eval\"").unwrap();
        assert_eq!(cfg.scaffold.max_turns, 30);
        let (cfg, _) = RunConfig::from_toml_str("profile = \"eval\"\n[scaffold]\nmax_turns = 6").unwrap();
        assert_eq!(cfg.scaffold.max_turns, 6);
    }

    #[test]
    fn validation_names_field() {
        let err = RunConfig::from_toml_str("[pipeline]\ngroup_size = 0").unwrap_err();
        assert_eq!(err.to_string(), "pipeline.group_size: must be >= 1");
        let err = RunConfig::from_toml_str("[scaffold]\nmin_pixels = 5000000").unwrap_err();
        assert!(err.to_string().starts_with("scaffold.min_pixels"), "{err}");
        let err = RunConfig::from_toml_str("[reward]\ntool_coef = -1.0").unwrap_err();
        assert!(err.to_string().starts_with("reward.tool_coef"), "{err}");
    }

    #[test]
    fn unknown_keys_are_reported() {
        let (cfg, unknown) = RunConfig::from_toml_str("colour = 3\n[pipeline]\nbatch_size = 4\nbogus = true").unwrap();
        assert_eq!(cfg.pipeline.batch_size, 4);
        assert_eq!(unknown, vec!["colour".to_string(), "pipeline.bogus".to_string()]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(RunConfig::from_toml_str("[pipeline"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            RunConfig::from_toml_str("[policy]\nkind = \"psychic\""),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn round_trip() {
        let text = r#"
            seed = 7
            output_dir = "out"
            [scaffold]
            timing = "simulated"
            [pipeline]
            alpha = 1.5
            batch_size = 3
            max_concurrency = 2
            [policy]
            kind = "stochastic"
            answer_pool = ["A", "B"]
            [policy.curve]
            kind = "constant"
            p = 0.5
            [policy.turns]
            kind = "fixed"
            n = 2
            [sandbox]
            kind = "fake"
            video_frames = 300
            [[sandbox.rules]]
            contains = "boom"
            response = { kind = "timeout" }
            [[sandbox.rules]]
            exact = "print(1)"
            response = { kind = "ok", stdout = "1\n" }
        "#;
        let (a, unknown) = RunConfig::from_toml_str(text).unwrap();
        assert!(unknown.is_empty(), "{unknown:?}");
        let dumped = a.to_toml_string().unwrap();
        let (b, _) = RunConfig::from_toml_str(&dumped).unwrap();
        assert_eq!(a, b);
        match &a.sandbox {
            SandboxBackend::Fake(f) => {
                assert_eq!(f.rules[0].matcher, Matcher::Contains("boom".into()));
                assert_eq!(f.rules[0].response, FakeResponse::Timeout);
                assert!(matches!(&f.rules[1].response, FakeResponse::Ok { stdout, .. } if stdout == "1\n"));
            }
            other => panic!("{other:?}"),
        }
        let (d, _) = RunConfig::from_toml_str(&RunConfig::default().to_toml_string().unwrap()).unwrap();
        assert_eq!(d, RunConfig::default());
    }

    #[test]
    fn env_overrides_urls_only() {
        let mut cfg = RunConfig::default();
        cfg.apply_env(|k| (k == SANDBOX_URL_ENV).then(|| "http://sb:1".to_string()));
        match &cfg.sandbox {
            SandboxBackend::Http(h) => assert_eq!(h.base_url, "http://sb:1"),
            _ => unreachable!(),
        }
        match &cfg.policy {
            PolicyBackend::Remote(r) => assert_eq!(r.base_url, RemotePolicyConfig::default().base_url),
            _ => unreachable!(),
        }
    }
}
