//! Rollout orchestration for agentic multimodal RL.
//!
//! The crate runs multi-turn code-tool episodes against a policy and a code
//! sandbox, scores them with a tool-aware reward, selects training groups by
//! reward spread and computes group-baseline advantages.

pub mod advantage;
pub mod analytics;
pub mod config;
pub mod exec;
pub mod policy;
pub mod logio;
pub mod pipeline;
pub mod protocol;
pub mod raster;
pub mod reward;
pub mod rng;
pub mod sandbox;
pub mod scaffold;
pub mod selftest;
pub mod vision;
