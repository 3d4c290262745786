//! Line-delimited record files: trajectory logs, score logs and group files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::pipeline::{DropReason, GroupStats, Member, RankedGroup, RolloutGroup, StepOutput, TrainingBatch};
use crate::protocol::{deserialize_trajectory, serialize_trajectory, DecodeError, Status, Trajectory};
use crate::reward::RewardRecord;

pub const GROUP_SCHEMA_VERSION: u64 = 1;
pub const SCORE_SCHEMA_VERSION: u64 = 1;

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads non-blank lines through `parse`; errors carry the 1-based line number.
pub fn read_lines<T>(
    path: &Path,
    mut parse: impl FnMut(&str) -> Result<T, DecodeError>,
) -> Result<Vec<T>, DecodeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| DecodeError::At {
            location: format!("{}:{}", path.display(), n + 1),
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DecodeError> {
    read_lines(path, |l| Ok(serde_json::from_str(l)?))
}

pub fn write_trajectory_log(path: &Path, ts: &[Trajectory]) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in ts {
        w.write_all(serialize_trajectory(t).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<Trajectory>, DecodeError> {
    read_lines(path, deserialize_trajectory)
}

fn check_version(found: u64, expected: u64) -> Result<(), DecodeError> {
    if found == expected {
        Ok(())
    } else {
        Err(DecodeError::Version { found, expected })
    }
}

/// What happened to a group during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fate {
    Selected { rank: usize },
    Dropped { reason: DropReason },
    /// Valid but ranked below the batch cut.
    NotSelected,
}

/// One line of a group file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub v: u64,
    pub sample_id: String,
    pub order: usize,
    pub fate: Fate,
    pub stats: Option<GroupStats>,
    /// Selected groups list survivors only; other groups list every rollout.
    pub members: Vec<Member>,
}

impl GroupRecord {
    fn new(g: &RolloutGroup, fate: Fate) -> Self {
        Self {
            v: GROUP_SCHEMA_VERSION,
            sample_id: g.sample_id.clone(),
            order: g.order,
            fate,
            stats: g.stats,
            members: g.members.clone(),
        }
    }

    fn into_group(self) -> RolloutGroup {
        RolloutGroup {
            sample_id: self.sample_id,
            order: self.order,
            members: self.members,
            stats: self.stats,
        }
    }
}

/// Batch file lines: selected groups in rank order.
pub fn batch_records(batch: &TrainingBatch) -> Vec<GroupRecord> {
    batch
        .groups
        .iter()
        .map(|rg| GroupRecord::new(&rg.group, Fate::Selected { rank: rg.rank }))
        .collect()
}

/// Every group of a step in sampling order, labelled with its fate.
pub fn group_records(step: &StepOutput) -> Vec<GroupRecord> {
    step.groups
        .iter()
        .map(|g| {
            let fate = if let Some(rg) = step.batch.groups.iter().find(|rg| rg.group.order == g.order) {
                Fate::Selected { rank: rg.rank }
            } else if let Some((_, r)) = step.dropped.iter().find(|(id, _)| *id == g.sample_id) {
                Fate::Dropped { reason: *r }
            } else {
                Fate::NotSelected
            };
            GroupRecord::new(g, fate)
        })
        .collect()
}

pub fn read_group_records(path: &Path) -> Result<Vec<GroupRecord>, DecodeError> {
    read_lines(path, |l| {
        let r: GroupRecord = serde_json::from_str(l)?;
        check_version(r.v, GROUP_SCHEMA_VERSION)?;
        Ok(r)
    })
}

/// Rebuilds a batch from its file, checking rank order and survivor-only members.
pub fn read_batch(path: &Path, requested: usize) -> Result<TrainingBatch, DecodeError> {
    let records = read_group_records(path)?;
    let available = records.len();
    let mut groups = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let rank = match r.fate {
            Fate::Selected { rank } if rank == i => rank,
            other => {
                return Err(DecodeError::Invariant(format!(
                    "batch line {} has fate {other:?}, expected rank {i}",
                    i + 1
                )))
            }
        };
        if r.members.iter().any(|m| m.is_broken() || m.reward.is_none()) {
            return Err(DecodeError::Invariant(format!(
                "selected group {} lists a broken member",
                r.sample_id
            )));
        }
        groups.push(RankedGroup {
            rank,
            group: r.into_group(),
        });
    }
    Ok(TrainingBatch {
        groups,
        requested: requested.max(available),
        available,
    })
}

/// Reward annotation for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub v: u64,
    pub trajectory_id: String,
    pub sample_id: String,
    pub rollout_index: u32,
    pub status: Status,
    pub final_answer: Option<String>,
    /// Absent for broken trajectories.
    pub reward: Option<RewardRecord>,
}

impl ScoreRecord {
    pub fn new(t: &Trajectory, reward: Option<RewardRecord>) -> Self {
        Self {
            v: SCORE_SCHEMA_VERSION,
            trajectory_id: t.id().to_owned(),
            sample_id: t.sample_id().to_owned(),
            rollout_index: t.rollout_index(),
            status: t.status(),
            final_answer: t.final_answer().map(str::to_owned),
            reward,
        }
    }
}

pub fn read_score_records(path: &Path) -> Result<Vec<ScoreRecord>, DecodeError> {
    read_lines(path, |l| {
        let r: ScoreRecord = serde_json::from_str(l)?;
        check_version(r.v, SCORE_SCHEMA_VERSION)?;
        Ok(r)
    })
}
