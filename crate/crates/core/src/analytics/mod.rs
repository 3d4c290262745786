//! Training-batch analytics: tool-call statistics, the share of correct
//! rollouts pushed down by their group baseline, tool taxonomy counts and
//! visual-token summaries.

mod plot;
mod taxonomy;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageRecord;
use crate::exec::Execution;
use crate::logio::{Fate, GroupRecord};
use crate::pipeline::DropReason;
use crate::protocol::{Status, Trajectory};

pub use plot::{bar_chart_png, PlotError};
pub use taxonomy::{classify_tool_category, RuleError, ToolCategory, ToolRules, BUILTIN_RULES};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch and trajectory log disagree: {0}")]
    SchemaMismatch(String),
}

/// Denominator of the positive-with-negative-advantage ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    #[default]
    AllRollouts,
    CorrectOnly,
}

/// Share of rollouts that are correct yet receive a negative advantage.
pub fn pos_neg_adv_ratio(records: &[AdvantageRecord], denominator: Denominator) -> Result<f64, AnalyticsError> {
    let hits = records.iter().filter(|r| r.r_acc == 1 && r.advantage < 0.0).count();
    let total = match denominator {
        Denominator::AllRollouts => records.len(),
        Denominator::CorrectOnly => records.iter().filter(|r| r.r_acc == 1).count(),
    };
    if records.is_empty() {
        return Err(AnalyticsError::EmptyBatch);
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / total as f64)
}

/// Additive tallies; metrics derive from these so logs can be combined.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub attempts: u64,
    pub broken: u64,
    pub broken_by_reason: BTreeMap<String, u64>,
    pub unanswered: u64,
    /// Non-broken attempts, before group filtering.
    pub scored_attempts: u64,
    pub tool_calls_all: u64,
    pub batch_rollouts: u64,
    pub batch_groups: u64,
    pub tool_calls_batch: u64,
    pub response_tokens_batch: u64,
    pub correct_batch: u64,
    pub correct_negative_batch: u64,
    pub visual_tokens_batch: Vec<u64>,
    pub tool_categories_batch: BTreeMap<ToolCategory, u64>,
    pub tool_categories_all: BTreeMap<ToolCategory, u64>,
    pub code_blocks_batch: u64,
    pub code_blocks_all: u64,
    pub groups_seen: u64,
    pub dropped_groups: BTreeMap<DropReason, u64>,
}

fn add_maps<K: Ord + Clone>(a: &mut BTreeMap<K, u64>, b: &BTreeMap<K, u64>) {
    for (k, v) in b {
        *a.entry(k.clone()).or_default() += v;
    }
}

impl MetricCounts {
    pub fn merge(mut self, o: MetricCounts) -> MetricCounts {
        self.attempts += o.attempts;
        self.broken += o.broken;
        add_maps(&mut self.broken_by_reason, &o.broken_by_reason);
        self.unanswered += o.unanswered;
        self.scored_attempts += o.scored_attempts;
        self.tool_calls_all += o.tool_calls_all;
        self.batch_rollouts += o.batch_rollouts;
        self.batch_groups += o.batch_groups;
        self.tool_calls_batch += o.tool_calls_batch;
        self.response_tokens_batch += o.response_tokens_batch;
        self.correct_batch += o.correct_batch;
        self.correct_negative_batch += o.correct_negative_batch;
        self.visual_tokens_batch.extend(o.visual_tokens_batch);
        add_maps(&mut self.tool_categories_batch, &o.tool_categories_batch);
        add_maps(&mut self.tool_categories_all, &o.tool_categories_all);
        self.code_blocks_batch += o.code_blocks_batch;
        self.code_blocks_all += o.code_blocks_all;
        self.groups_seen += o.groups_seen;
        add_maps(&mut self.dropped_groups, &o.dropped_groups);
        self
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Nearest-rank percentile of `sorted`.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub attempts: u64,
    pub broken_ratio: f64,
    pub broken_by_reason: BTreeMap<String, u64>,
    pub batch_groups: u64,
    pub batch_rollouts: u64,
    /// Over the selected batch.
    pub mean_tool_calls_post_filter: f64,
    /// Over every non-broken attempt.
    pub mean_tool_calls_pre_filter: f64,
    pub mean_response_tokens: f64,
    pub accuracy_reward_mean: f64,
    pub pos_neg_adv_ratio: f64,
    pub pos_neg_denominator: Denominator,
    pub visual_tokens_mean: f64,
    pub visual_tokens_p50: u64,
    pub visual_tokens_p90: u64,
    pub tool_categories_batch: BTreeMap<ToolCategory, u64>,
    pub tool_categories_all: BTreeMap<ToolCategory, u64>,
    /// Present when a group file was supplied.
    pub dropped_groups: Option<BTreeMap<DropReason, u64>>,
    pub counts: MetricCounts,
}

impl BatchMetrics {
    pub fn from_counts(c: MetricCounts, denominator: Denominator, have_groups: bool) -> Self {
        let mut vt = c.visual_tokens_batch.clone();
        vt.sort_unstable();
        let pos_neg_den = match denominator {
            Denominator::AllRollouts => c.batch_rollouts,
            Denominator::CorrectOnly => c.correct_batch,
        };
        let dropped_groups = have_groups.then(|| {
            let mut m = c.dropped_groups.clone();
            for r in DropReason::ALL {
                m.entry(r).or_default();
            }
            m
        });
        let mut cats_batch = c.tool_categories_batch.clone();
        let mut cats_all = c.tool_categories_all.clone();
        for k in ToolCategory::ALL {
            cats_batch.entry(k).or_default();
            cats_all.entry(k).or_default();
        }
        Self {
            attempts: c.attempts,
            broken_ratio: ratio(c.broken, c.attempts),
            broken_by_reason: c.broken_by_reason.clone(),
            batch_groups: c.batch_groups,
            batch_rollouts: c.batch_rollouts,
            mean_tool_calls_post_filter: ratio(c.tool_calls_batch, c.batch_rollouts),
            mean_tool_calls_pre_filter: ratio(c.tool_calls_all, c.scored_attempts),
            mean_response_tokens: ratio(c.response_tokens_batch, c.batch_rollouts),
            accuracy_reward_mean: ratio(c.correct_batch, c.batch_rollouts),
            pos_neg_adv_ratio: ratio(c.correct_negative_batch, pos_neg_den),
            pos_neg_denominator: denominator,
            visual_tokens_mean: ratio(vt.iter().sum(), vt.len() as u64),
            visual_tokens_p50: percentile(&vt, 50.0),
            visual_tokens_p90: percentile(&vt, 90.0),
            tool_categories_batch: cats_batch,
            tool_categories_all: cats_all,
            dropped_groups,
            counts: c,
        }
    }
}

fn categorize(t: &Trajectory, rules: &ToolRules, into: &mut BTreeMap<ToolCategory, u64>) -> u64 {
    let mut n = 0;
    for code in t.code_blocks() {
        *into.entry(rules.classify(code)).or_default() += 1;
        n += 1;
    }
    n
}

/// Tallies one trajectory log against its advantage batch and, optionally,
/// its group file.
pub fn count_metrics(
    trajectories: &[Trajectory],
    batch: &[AdvantageRecord],
    groups: Option<&[GroupRecord]>,
    rules: &ToolRules,
    exec: Execution,
) -> Result<MetricCounts, AnalyticsError> {
    let by_id: HashMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.id(), t)).collect();
    if by_id.len() != trajectories.len() {
        return Err(AnalyticsError::SchemaMismatch("duplicate trajectory ids in log".into()));
    }

    let per_traj = exec.map_reduce(
        trajectories,
        MetricCounts::default(),
        |t| {
            let mut c = MetricCounts {
                attempts: 1,
                ..MetricCounts::default()
            };
            match t.status() {
                Status::Broken(r) => {
                    c.broken = 1;
                    let key = serde_json::to_value(r)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_owned))
                        .unwrap_or_default();
                    c.broken_by_reason.insert(key, 1);
                }
                s => {
                    c.scored_attempts = 1;
                    c.tool_calls_all = t.n_tc() as u64;
                    c.unanswered = (s == Status::Unanswered) as u64;
                }
            }
            c.code_blocks_all = categorize(t, rules, &mut c.tool_categories_all);
            c
        },
        MetricCounts::merge,
    );

    let mut members = Vec::with_capacity(batch.len());
    for r in batch {
        let t = by_id.get(r.trajectory_id.as_str()).ok_or_else(|| {
            AnalyticsError::SchemaMismatch(format!("batch names unknown trajectory {}", r.trajectory_id))
        })?;
        if t.is_broken() {
            return Err(AnalyticsError::SchemaMismatch(format!("batch contains broken trajectory {}", r.trajectory_id)));
        }
        if t.n_tc() != r.n_tc || t.sample_id() != r.sample_id {
            return Err(AnalyticsError::SchemaMismatch(format!(
                "trajectory {} differs between log and batch",
                r.trajectory_id
            )));
        }
        members.push((*t, r));
    }
    let per_member = exec.map_reduce(
        &members,
        MetricCounts::default(),
        |(t, r)| {
            let mut c = MetricCounts {
                batch_rollouts: 1,
                tool_calls_batch: t.n_tc() as u64,
                response_tokens_batch: t.text_tokens(),
                correct_batch: r.r_acc as u64,
                correct_negative_batch: (r.r_acc == 1 && r.advantage < 0.0) as u64,
                visual_tokens_batch: vec![t.visual_tokens()],
                ..MetricCounts::default()
            };
            c.code_blocks_batch = categorize(t, rules, &mut c.tool_categories_batch);
            c
        },
        MetricCounts::merge,
    );

    let mut c = per_traj.merge(per_member);
    let mut ranks: Vec<(&str, usize)> = batch.iter().map(|r| (r.sample_id.as_str(), r.rank)).collect();
    ranks.sort_unstable();
    ranks.dedup();
    c.batch_groups = ranks.len() as u64;

    if let Some(groups) = groups {
        c.groups_seen = groups.len() as u64;
        for g in groups {
            if let Fate::Dropped { reason } = g.fate {
                *c.dropped_groups.entry(reason).or_default() += 1;
            }
        }
    }
    Ok(c)
}

/// Metrics for one log and batch.
pub fn batch_metrics(
    trajectories: &[Trajectory],
    batch: &[AdvantageRecord],
    groups: Option<&[GroupRecord]>,
    denominator: Denominator,
) -> Result<BatchMetrics, AnalyticsError> {
    let c = count_metrics(trajectories, batch, groups, ToolRules::builtin(), Execution::default())?;
    Ok(BatchMetrics::from_counts(c, denominator, groups.is_some()))
}
