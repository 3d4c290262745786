//! Oversample prompts, roll out groups, filter, rank by reward spread, select.

use std::cmp::Reverse;
use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::policy::{GenerationParams, Policy};
use crate::protocol::{BrokenReason, PromptSample, Status, Trajectory, TrajectoryBuilder};
use crate::reward::{score_trajectory, RewardConfig, RewardRecord};
use crate::rng;
use crate::sandbox::SandboxGateway;
use crate::scaffold::{run_episode, ScaffoldConfig};

/// Groups whose reward std is at or below this are treated as constant.
pub const SIGMA_EPS: f64 = 1e-12;

/// Quantum for comparing σ when ranking, so equal spreads computed along
/// different float paths still tie.
pub const SIGMA_TIE_QUANTUM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Oversampling ratio.
    pub alpha: f64,
    /// Groups per training batch.
    pub batch_size: u32,
    /// Rollouts per prompt.
    pub group_size: u32,
    /// Concurrent episodes; `None` uses every core, `1` runs sequentially.
    pub max_concurrency: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            batch_size: 16,
            group_size: 8,
            max_concurrency: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(("alpha", format!("must be finite and > 1, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be >= 1".into()));
        }
        if self.group_size == 0 {
            return Err(("group_size", "must be >= 1".into()));
        }
        if self.max_concurrency == Some(0) {
            return Err(("max_concurrency", "must be >= 1".into()));
        }
        Ok(())
    }

    /// Prompts drawn per step: `alpha·batch_size`, rounded up.
    pub fn prompts_per_step(&self) -> usize {
        let x = self.alpha * self.batch_size as f64;
        if (x - x.round()).abs() < 1e-9 {
            x.round() as usize
        } else {
            let n = x.ceil() as usize;
            tracing::info!(alpha = self.alpha, batch_size = self.batch_size, n, "alpha*B not integral; rounding up");
            n
        }
    }

    pub fn execution(&self) -> Execution {
        Execution::with_max_concurrency(self.max_concurrency)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu: f64,
    /// Population std (divisor = survivor count).
    pub sigma: f64,
    pub survivors: u32,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("group has no non-broken members")]
    EmptyGroup,
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("sample id {0} appears more than once in the pool")]
    DuplicateSample(String),
}

/// Population mean and std of `rewards`.
///
/// Summation runs over the sorted values, so equal multisets give
/// bit-identical results whatever the member order.
pub fn group_stats(rewards: &[f64]) -> Result<GroupStats, PipelineError> {
    if rewards.is_empty() {
        return Err(PipelineError::EmptyGroup);
    }
    let mut r = rewards.to_vec();
    r.sort_by(f64::total_cmp);
    let n = r.len() as f64;
    let mu = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    Ok(GroupStats {
        mu,
        sigma: var.sqrt(),
        survivors: r.len() as u32,
    })
}

/// One rollout as seen by selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub trajectory_id: String,
    pub rollout_index: u32,
    pub status: Status,
    /// `None` exactly when the rollout is broken.
    pub reward: Option<RewardRecord>,
}

impl Member {
    pub fn is_broken(&self) -> bool {
        self.status.is_broken()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    AllBroken,
    TooFewSurvivors,
    ZeroVariance,
}

impl DropReason {
    pub const ALL: [DropReason; 3] = [
        DropReason::AllBroken,
        DropReason::TooFewSurvivors,
        DropReason::ZeroVariance,
    ];
}

/// One prompt's rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: String,
    /// Position in the step's sampling order; breaks σ ties.
    pub order: usize,
    pub members: Vec<Member>,
    /// Over non-broken members; `None` when all are broken.
    pub stats: Option<GroupStats>,
}

impl RolloutGroup {
    pub fn new(sample_id: impl Into<String>, order: usize, members: Vec<Member>) -> Self {
        let rewards: Vec<f64> = members
            .iter()
            .filter_map(|m| m.reward.map(|r| r.total))
            .collect();
        Self {
            sample_id: sample_id.into(),
            order,
            members,
            stats: group_stats(&rewards).ok(),
        }
    }

    pub fn broken_count(&self) -> usize {
        self.members.iter().filter(|m| m.is_broken()).count()
    }

    pub fn sigma(&self) -> f64 {
        self.stats.map_or(0.0, |s| s.sigma)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.members
            .iter()
            .filter_map(|m| m.reward.map(|r| r.total))
            .collect()
    }

    /// `Some(reason)` if the group cannot train.
    pub fn drop_reason(&self) -> Option<DropReason> {
        match self.stats {
            None => Some(DropReason::AllBroken),
            Some(s) if s.survivors < 2 => Some(DropReason::TooFewSurvivors),
            Some(s) if s.sigma <= SIGMA_EPS => Some(DropReason::ZeroVariance),
            Some(_) => None,
        }
    }

    fn without_broken(mut self) -> Self {
        self.members.retain(|m| !m.is_broken());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filtered {
    /// Trainable groups, broken members removed, in input order.
    pub valid: Vec<RolloutGroup>,
    pub dropped: Vec<(RolloutGroup, DropReason)>,
    /// Broken members removed from groups that were kept.
    pub broken_removed: usize,
}

impl Filtered {
    pub fn dropped_by(&self, reason: DropReason) -> usize {
        self.dropped.iter().filter(|(_, r)| *r == reason).count()
    }
}

pub fn filter_groups(groups: Vec<RolloutGroup>) -> Filtered {
    let mut out = Filtered::default();
    for g in groups {
        match g.drop_reason() {
            Some(r) => out.dropped.push((g, r)),
            None => {
                out.broken_removed += g.broken_count();
                out.valid.push(g.without_broken());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGroup {
    /// Zero-based position after sorting by σ.
    pub rank: usize,
    pub group: RolloutGroup,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub groups: Vec<RankedGroup>,
    pub requested: usize,
    /// Valid groups available before truncation.
    pub available: usize,
}

impl TrainingBatch {
    pub fn total_rollouts(&self) -> usize {
        self.groups.iter().map(|g| g.group.members.len()).sum()
    }

    pub fn members(&self) -> impl Iterator<Item = (&RolloutGroup, &Member)> {
        self.groups
            .iter()
            .flat_map(|g| g.group.members.iter().map(move |m| (&g.group, m)))
    }

    pub fn sample_ids(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.group.sample_id.as_str()).collect()
    }
}

fn sigma_key(sigma: f64) -> u64 {
    (sigma / SIGMA_TIE_QUANTUM).round() as u64
}

/// Stable sort by σ descending (ties keep input order), then the first
/// `batch_size` whole groups.
pub fn rank_and_select(mut valid: Vec<RolloutGroup>, batch_size: usize) -> TrainingBatch {
    valid.sort_by_key(|g| (Reverse(sigma_key(g.sigma())), g.order));
    let available = valid.len();
    if available < batch_size {
        tracing::warn!(available, batch_size, "fewer valid groups than the batch size");
    }
    valid.truncate(batch_size);
    TrainingBatch {
        groups: valid
            .into_iter()
            .enumerate()
            .map(|(rank, group)| RankedGroup { rank, group })
            .collect(),
        requested: batch_size,
        available,
    }
}

/// Draws `n` prompts from `pool` for `step`. A pool of at most `n` is used
/// whole, in order.
pub fn sample_prompts(pool: &[PromptSample], n: usize, seed: u64, step: u64) -> Vec<&PromptSample> {
    if pool.len() <= n {
        if pool.len() < n {
            tracing::warn!(pool = pool.len(), wanted = n, "prompt pool smaller than alpha*B; using all of it");
        }
        return pool.iter().collect();
    }
    let mut r = rng::stream(seed, "prompts", step);
    index::sample(&mut r, pool.len(), n)
        .into_iter()
        .map(|i| &pool[i])
        .collect()
}

/// Everything one step needs besides the gateways.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub scaffold: ScaffoldConfig,
    pub pipeline: PipelineConfig,
    pub reward: RewardConfig,
    pub params: GenerationParams,
    pub seed: u64,
    pub execution: Execution,
}

impl StepConfig {
    /// Generation params for `step`, reseeded so mocks vary across steps.
    pub fn step_params(&self, step: u64) -> GenerationParams {
        GenerationParams {
            seed: rng::derive_seed(self.seed, "generation", step),
            ..self.params.clone()
        }
    }
}

fn check_pool(prompts: &[&PromptSample]) -> Result<(), PipelineError> {
    let mut seen = HashSet::new();
    for s in prompts {
        s.validate().map_err(|reason| PipelineError::InvalidSample {
            id: s.id.clone(),
            reason,
        })?;
        if !seen.insert(s.id.as_str()) {
            return Err(PipelineError::DuplicateSample(s.id.clone()));
        }
    }
    Ok(())
}

/// Runs `group_size` episodes for every prompt. Returns groups in prompt
/// order and every trajectory, broken ones included.
pub fn generate_groups<P, S>(
    prompts: &[&PromptSample],
    policy: &P,
    sandbox: &S,
    cfg: &StepConfig,
    step: u64,
) -> Result<(Vec<RolloutGroup>, Vec<Trajectory>), PipelineError>
where
    P: Policy + ?Sized,
    S: SandboxGateway + ?Sized,
{
    check_pool(prompts)?;
    let g = cfg.pipeline.group_size;
    let params = cfg.step_params(step);
    let jobs: Vec<(usize, u32)> = (0..prompts.len())
        .flat_map(|p| (0..g).map(move |i| (p, i)))
        .collect();
    let trajectories = cfg.execution.map(&jobs, |&(p, i)| {
        let sample = prompts[p];
        run_episode(sample, i, policy, sandbox, &cfg.scaffold, &params).unwrap_or_else(|e| {
            tracing::warn!(sample = %sample.id, rollout = i, "episode setup failed: {e}");
            TrajectoryBuilder::new(format!("{}/{}", sample.id, i), sample.id.clone(), i)
                .finish_broken(BrokenReason::BackendFailure)
        })
    });
    let groups = prompts
        .iter()
        .enumerate()
        .map(|(p, sample)| {
            let members = trajectories[p * g as usize..(p + 1) * g as usize]
                .iter()
                .map(|t| Member {
                    trajectory_id: t.id().to_owned(),
                    rollout_index: t.rollout_index(),
                    status: t.status(),
                    reward: score_trajectory(t, &sample.gold_answer, sample.task_kind, &cfg.reward).ok(),
                })
                .collect();
            RolloutGroup::new(sample.id.clone(), p, members)
        })
        .collect();
    Ok((groups, trajectories))
}

/// Result of one oversample-filter-rank step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Every group in sampling order, before filtering.
    pub groups: Vec<RolloutGroup>,
    pub trajectories: Vec<Trajectory>,
    pub dropped: Vec<(String, DropReason)>,
    pub batch: TrainingBatch,
}

/// Filter and rank already generated groups.
pub fn select(groups: &[RolloutGroup], batch_size: usize) -> (TrainingBatch, Vec<(String, DropReason)>) {
    let filtered = filter_groups(groups.to_vec());
    let dropped = filtered
        .dropped
        .iter()
        .map(|(g, r)| (g.sample_id.clone(), *r))
        .collect();
    if filtered.valid.is_empty() {
        tracing::warn!("no valid groups; emitting an empty batch");
    }
    (rank_and_select(filtered.valid, batch_size), dropped)
}

/// One full step. Selection starts only after every episode has finished.
pub fn run_step<P, S>(
    pool: &[PromptSample],
    policy: &P,
    sandbox: &S,
    cfg: &StepConfig,
    step: u64,
) -> Result<StepOutput, PipelineError>
where
    P: Policy + ?Sized,
    S: SandboxGateway + ?Sized,
{
    let prompts = sample_prompts(pool, cfg.pipeline.prompts_per_step(), cfg.seed, step);
    let (groups, trajectories) = generate_groups(&prompts, policy, sandbox, cfg, step)?;
    let (batch, dropped) = select(&groups, cfg.pipeline.batch_size as usize);
    Ok(StepOutput {
        groups,
        trajectories,
        dropped,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::compute_reward;
    use proptest::prelude::*;

    fn member(i: u32, reward: Option<f64>) -> Member {
        Member {
            trajectory_id: format!("t{i}"),
            rollout_index: i,
            status: if reward.is_some() {
                Status::Completed
            } else {
                Status::Broken(BrokenReason::ExecutionTimeout)
            },
            reward: reward.map(|r| RewardRecord {
                r_acc: (r > 0.0) as u8,
                n_tc: 0,
                tool_bonus: 0.0,
                total: r,
            }),
        }
    }

    fn group(order: usize, rewards: &[Option<f64>]) -> RolloutGroup {
        let members = rewards
            .iter()
            .enumerate()
            .map(|(i, r)| member(i as u32, *r))
            .collect();
        RolloutGroup::new(format!("g{order}"), order, members)
    }

    #[test]
    fn stats_examples() {
        let s = group_stats(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!((s.mu, s.sigma), (0.5, 0.5));
        let s = group_stats(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.mu, 0.25);
        assert!((s.sigma - 0.1875f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma - 0.4330).abs() < 1e-4);
        let s = group_stats(&[1.0; 4]).unwrap();
        assert_eq!((s.mu, s.sigma), (1.0, 0.0));
        assert_eq!(group_stats(&[]), Err(PipelineError::EmptyGroup));
    }

    #[test]
    fn oversampling_count() {
        let c = PipelineConfig::default();
        assert_eq!(c.prompts_per_step(), 32);
        let c = PipelineConfig {
            alpha: 1.5,
            batch_size: 3,
            ..c
        };
        assert_eq!(c.prompts_per_step(), 5);
        assert!(PipelineConfig { alpha: 1.0, ..c }.validate().is_err());
        assert_eq!(
            PipelineConfig { group_size: 0, ..c }.validate().unwrap_err().0,
            "group_size"
        );
    }

    #[test]
    fn filter_examples() {
        let all_zero = group(0, &[Some(0.0); 8]);
        assert_eq!(all_zero.drop_reason(), Some(DropReason::ZeroVariance));

        let mut rs = vec![None; 3];
        rs.extend([Some(1.0), Some(0.0), Some(1.2), Some(0.0), Some(0.0)]);
        let partly_broken = group(1, &rs);
        let same_calls = group(2, &[Some(1.2); 8]);
        let lone = group(3, &[None, None, Some(1.0)]);
        let dead = group(4, &[None, None]);
        let f = filter_groups(vec![all_zero, partly_broken, same_calls, lone, dead]);
        assert_eq!(f.valid.len(), 1);
        assert_eq!(f.valid[0].members.len(), 5);
        assert_eq!(f.broken_removed, 3);
        assert_eq!(f.dropped_by(DropReason::ZeroVariance), 2);
        assert_eq!(f.dropped_by(DropReason::TooFewSurvivors), 1);
        assert_eq!(f.dropped_by(DropReason::AllBroken), 1);
    }

    #[test]
    fn ranking_examples() {
        // σ of [1,1,0,0] = 0.5, [1,0,0,0] ≈ 0.433, [1,0,0,0,0,0,0,0] ≈ 0.331
        let a = group(0, &[Some(1.0), Some(1.0), Some(0.0), Some(0.0)]);
        let b = group(1, &[Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        let c = group(2, &[Some(1.0), Some(0.0), Some(0.0), Some(0.0), Some(0.0), Some(0.0), Some(0.0), Some(0.0)]);
        let batch = rank_and_select(vec![c.clone(), b.clone(), a.clone()], 2);
        assert_eq!(batch.sample_ids(), vec!["g0", "g1"]);
        assert_eq!(batch.available, 3);

        let g3 = group(3, &[Some(1.0), Some(0.0)]);
        let g7 = group(7, &[Some(0.0), Some(1.0)]);
        let batch = rank_and_select(vec![g7, g3], 1);
        assert_eq!(batch.sample_ids(), vec!["g3"]);

        let empty = rank_and_select(vec![], 16);
        assert!(empty.groups.is_empty());
    }

    #[test]
    fn shifted_spreads_tie() {
        // Same true σ along different float paths.
        let a = group(0, &[Some(1.2), Some(1.1)]);
        let b = group(1, &[Some(1.1), Some(1.0)]);
        assert_eq!(sigma_key(a.sigma()), sigma_key(b.sigma()));
        let batch = rank_and_select(vec![b, a], 2);
        assert_eq!(batch.sample_ids(), vec!["g0", "g1"]);
    }

    #[test]
    fn prompt_sampling() {
        let pool: Vec<PromptSample> = (0..3).map(sample).collect();
        assert_eq!(sample_prompts(&pool, 32, 0, 0).len(), 3);
        let pool: Vec<PromptSample> = (0..50).map(sample).collect();
        let a = sample_prompts(&pool, 32, 9, 1);
        let b = sample_prompts(&pool, 32, 9, 1);
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 32);
        assert_ne!(a, sample_prompts(&pool, 32, 9, 2));
    }

    fn sample(i: usize) -> PromptSample {
        use crate::protocol::{Modality, TaskKind};
        use crate::raster::RasterImage;
        PromptSample {
            id: format!("p{i}"),
            query: "q".into(),
            image_hints: vec![RasterImage::solid(56, 56, [0, 0, 0])],
            video: None,
            gold_answer: "A".into(),
            task_kind: TaskKind::MultipleChoice,
            modality: Modality::Image,
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = sample(0);
        let err = check_pool(&[&a, &a]).unwrap_err();
        assert_eq!(err, PipelineError::DuplicateSample("p0".into()));
    }

    fn arb_group(order: usize) -> impl Strategy<Value = RolloutGroup> {
        prop::collection::vec(
            prop_oneof![
                1 => Just(None),
                2 => Just(Some(0.0)),
                3 => (0u32..5).prop_map(|k| Some(compute_reward(1, k, 0.1).total)),
            ],
            1..9,
        )
        .prop_map(move |rs| group(order, &rs))
    }

    fn arb_groups() -> impl Strategy<Value = Vec<RolloutGroup>> {
        (1usize..20).prop_flat_map(|n| (0..n).map(arb_group).collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn batch_guarantees(groups in arb_groups(), b in 1usize..12) {
            let (batch, dropped) = select(&groups, b);
            prop_assert!(batch.groups.len() <= b);
            prop_assert_eq!(batch.groups.len(), (groups.len() - dropped.len()).min(b));
            let mut last = f64::INFINITY;
            for rg in &batch.groups {
                let g = &rg.group;
                prop_assert!(g.members.iter().all(|m| !m.is_broken()));
                prop_assert!(g.sigma() > SIGMA_EPS);
                prop_assert!(g.members.len() >= 2);
                prop_assert!(g.sigma() <= last + SIGMA_TIE_QUANTUM);
                last = g.sigma();
                // group-granular: every survivor of the source group is present
                let src = &groups[g.order];
                prop_assert_eq!(src.members.len() - src.broken_count(), g.members.len());
            }
        }

        #[test]
        fn stats_order_independent(mut rs in prop::collection::vec(0u32..20, 1..9)) {
            let a: Vec<f64> = rs.iter().map(|k| *k as f64 / 10.0).collect();
            rs.reverse();
            let b: Vec<f64> = rs.iter().map(|k| *k as f64 / 10.0).collect();
            prop_assert_eq!(group_stats(&a), group_stats(&b));
        }
    }
}
