//! Group-baseline advantages and the training batch file.
//!
//! One scalar per trajectory: the advantage does not vary across a rollout's
//! tokens, so a trainer broadcasts it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::logio;
use crate::pipeline::{group_stats, TrainingBatch, SIGMA_EPS};
use crate::protocol::DecodeError;

/// Guard added to σ in the normalized variant.
pub const STD_EPS: f64 = 1e-6;

pub const BATCH_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum AdvantageError {
    #[error("group has zero reward variance (sigma = {0})")]
    InvalidGroup(f64),
}

/// `R_i − mean(R)`, computed as `(n·R_i − ΣR)/n` so a common shift of the
/// rewards cancels before rounding.
pub fn advantages_mean_only(rewards: &[f64]) -> Result<Vec<f64>, AdvantageError> {
    let s = group_stats(rewards).map_err(|_| AdvantageError::InvalidGroup(0.0))?;
    if s.sigma <= SIGMA_EPS {
        return Err(AdvantageError::InvalidGroup(s.sigma));
    }
    Ok(centered(rewards))
}

fn centered(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    // members at the mean would otherwise pick up a rounding-residue sign
    let scale = sorted.iter().fold(1.0f64, |m, r| m.max(r.abs()));
    let tol = 8.0 * n * f64::EPSILON * scale;
    rewards
        .iter()
        .map(|r| {
            let a = (n * r - total) / n;
            if a.abs() <= tol { 0.0 } else { a }
        })
        .collect()
}

/// `(R_i − mean(R)) / (σ + eps)`.
pub fn advantages_std_normalized(rewards: &[f64], eps: f64) -> Result<Vec<f64>, AdvantageError> {
    let s = group_stats(rewards).map_err(|_| AdvantageError::InvalidGroup(0.0))?;
    if s.sigma <= SIGMA_EPS {
        return Err(AdvantageError::InvalidGroup(s.sigma));
    }
    Ok(centered(rewards).into_iter().map(|a| a / (s.sigma + eps)).collect())
}

/// One line of the training batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub v: u64,
    pub trajectory_id: String,
    pub sample_id: String,
    pub rollout_index: u32,
    pub rank: usize,
    pub group_mu: f64,
    pub group_sigma: f64,
    pub r_acc: u8,
    pub n_tc: u32,
    pub reward: f64,
    pub advantage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage_norm: Option<f64>,
}

/// Advantage records for every member of `batch`, in rank then member order.
pub fn compute_batch_advantages(
    batch: &TrainingBatch,
    normalize_std: bool,
    exec: Execution,
) -> Result<Vec<AdvantageRecord>, AdvantageError> {
    let per_group = exec.map(&batch.groups, |rg| -> Result<Vec<AdvantageRecord>, AdvantageError> {
        let g = &rg.group;
        let rewards = g.rewards();
        let stats = group_stats(&rewards).map_err(|_| AdvantageError::InvalidGroup(0.0))?;
        let adv = advantages_mean_only(&rewards)?;
        let norm = if normalize_std {
            Some(advantages_std_normalized(&rewards, STD_EPS)?)
        } else {
            None
        };
        Ok(g.members
            .iter()
            .filter(|m| m.reward.is_some())
            .enumerate()
            .map(|(i, m)| {
                let r = m.reward.expect("filtered");
                AdvantageRecord {
                    v: BATCH_SCHEMA_VERSION,
                    trajectory_id: m.trajectory_id.clone(),
                    sample_id: g.sample_id.clone(),
                    rollout_index: m.rollout_index,
                    rank: rg.rank,
                    group_mu: stats.mu,
                    group_sigma: stats.sigma,
                    r_acc: r.r_acc,
                    n_tc: r.n_tc,
                    reward: r.total,
                    advantage: adv[i],
                    advantage_norm: norm.as_ref().map(|n| n[i]),
                }
            })
            .collect())
    });
    let mut out = Vec::with_capacity(batch.total_rollouts());
    for g in per_group {
        out.extend(g?);
    }
    Ok(out)
}

pub fn write_advantage_records(path: &Path, records: &[AdvantageRecord]) -> Result<(), DecodeError> {
    logio::write_jsonl(path, records)
}

pub fn read_advantage_records(path: &Path) -> Result<Vec<AdvantageRecord>, DecodeError> {
    logio::read_lines(path, |l| {
        let r: AdvantageRecord = serde_json::from_str(l)?;
        if r.v != BATCH_SCHEMA_VERSION {
            return Err(DecodeError::Version {
                found: r.v,
                expected: BATCH_SCHEMA_VERSION,
            });
        }
        Ok(r)
    })
}

/// Computes advantages for `batch` and writes them to `path`.
pub fn emit_training_batch(
    path: &Path,
    batch: &TrainingBatch,
    normalize_std: bool,
) -> Result<Vec<AdvantageRecord>, EmitError> {
    let records = compute_batch_advantages(batch, normalize_std, Execution::Sequential)?;
    write_advantage_records(path, &records)?;
    Ok(records)
}

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Io(#[from] DecodeError),
}
