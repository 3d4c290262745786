//! End-to-end smoke run on mocks: scripted and stochastic policies against
//! the fake sandbox, with every pipeline invariant checked on the output.

use std::collections::HashMap;

use serde::Serialize;

use crate::advantage::{compute_batch_advantages, AdvantageRecord};
use crate::analytics::{pos_neg_adv_ratio, Denominator};
use crate::exec::Execution;
use crate::pipeline::{run_step, PipelineConfig, StepConfig, StepOutput, SIGMA_EPS};
use crate::policy::{GenerationParams, Script, ScriptedPolicy, StochasticMock, StochasticSpec};
use crate::protocol::{serialize_trajectory, Modality, PromptSample, TaskKind, VideoHint, MediaRef};
use crate::raster::RasterImage;
use crate::reward::{compute_reward, RewardConfig};
use crate::sandbox::{FakeResponse, FakeRule, FakeSandbox};
use crate::scaffold::{ScaffoldConfig, Timing};

const SHOW_CROP: &str = "<code>\nimport matplotlib.pyplot as plt\ncrop = image_clue_0.crop((0, 0, 224, 224))\nplt.imshow(crop)\nplt.show()\n</code>";
const SHOW_FRAME: &str = "<code>\nimport matplotlib.pyplot as plt\nframe = video_clue_0[12]\nplt.imshow(frame.asnumpy())\nplt.show()\n</code>";
const PRINT: &str = "<code>\nprint(3 * 4)\n</code>";
const HANG: &str = "<code>\nwhile True:\n    pass\n</code>";
const DIE: &str = "<code>\nkill_kernel()\n</code>";

/// `n` prompts alternating image and video, ids `demo-0..`.
pub fn demo_pool(n: usize) -> Vec<PromptSample> {
    (0..n)
        .map(|i| {
            let video = i % 3 == 2;
            PromptSample {
                id: format!("demo-{i}"),
                query: format!("Which option matches panel {i}?"),
                image_hints: if video {
                    vec![]
                } else {
                    vec![RasterImage::solid(448 + 28 * (i as u32 % 4), 448, [200, 120, 40])]
                },
                video: video.then(|| VideoHint {
                    media: MediaRef::Path(format!("clips/demo-{i}.mp4")),
                    frame_count: 300,
                    fps: 30.0,
                    duration_s: 10.0,
                }),
                gold_answer: ["A", "B", "C", "D"][i % 4].into(),
                task_kind: TaskKind::MultipleChoice,
                modality: if video { Modality::Video } else { Modality::Image },
            }
        })
        .collect()
}

fn answer(a: &str) -> String {
    format!("So the answer is <answer>\\boxed{{{a}}}</answer>")
}

/// Behaviour of rollout `r` of prompt `i`. Some prompts get identical
/// rollouts so that zero-variance and all-broken groups occur.
fn script_for(sample: &PromptSample, i: usize, r: u32) -> Script {
    let gold = sample.gold_answer.as_str();
    let wrong = if gold == "A" { "B" } else { "A" };
    let look = if sample.modality == Modality::Video { SHOW_FRAME } else { SHOW_CROP };
    let kind = match i % 7 {
        5 => 0,
        6 => 5,
        _ => (r as usize + i) % 8,
    };
    let turns: Vec<String> = match kind {
        0 => vec![answer(gold)],
        1 => vec![PRINT.into(), answer(gold)],
        2 => vec![look.into(), look.into(), answer(gold)],
        3 => vec![answer(wrong)],
        4 => vec![look.into(), answer(wrong)],
        5 => vec![HANG.into()],
        6 => vec!["I cannot tell from the image.".into()],
        _ => vec![look.into(), DIE.into()],
    };
    Script { turns }
}

/// Scripted policy covering success, wrong answers, every terminal status
/// and the zero-variance and all-broken drop paths.
pub fn demo_policy(pool: &[PromptSample], group_size: u32) -> ScriptedPolicy {
    let mut p = ScriptedPolicy::new(Script::from_iter([answer("A")]));
    for (i, s) in pool.iter().enumerate() {
        for r in 0..group_size {
            p = p.with_rollout(&s.id, r, script_for(s, i, r));
        }
    }
    p
}

pub fn demo_sandbox() -> FakeSandbox {
    FakeSandbox::new()
        .with_video_frames(300)
        .with_rule(FakeRule::contains("kill_kernel", FakeResponse::Die))
}

/// Small step config with reproducible timing.
pub fn demo_step_config(seed: u64, execution: Execution) -> StepConfig {
    StepConfig {
        scaffold: ScaffoldConfig {
            timing: Timing::Simulated,
            ..ScaffoldConfig::default()
        },
        pipeline: PipelineConfig {
            alpha: 2.0,
            batch_size: 4,
            group_size: 8,
            max_concurrency: None,
        },
        reward: RewardConfig::default(),
        params: GenerationParams::default(),
        seed,
        execution,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: &str, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Checks on one step's selection output and its advantages.
pub fn check_step(out: &StepOutput, cfg: &StepConfig, records: &[AdvantageRecord]) -> Vec<(&'static str, Result<(), String>)> {
    let batch = &out.batch;
    let mut v: Vec<(&'static str, Result<(), String>)> = Vec::new();

    v.push(("batch_has_no_broken", {
        let bad: Vec<_> = batch.members().filter(|(_, m)| m.is_broken() || m.reward.is_none()).map(|(_, m)| m.trajectory_id.clone()).collect();
        ensure(bad.is_empty(), || format!("broken members selected: {bad:?}"))
    }));

    v.push(("batch_groups_have_variance", {
        let bad: Vec<_> = batch
            .groups
            .iter()
            .filter(|g| g.group.members.len() < 2 || g.group.sigma() <= SIGMA_EPS)
            .map(|g| g.group.sample_id.clone())
            .collect();
        ensure(bad.is_empty(), || format!("degenerate groups selected: {bad:?}"))
    }));

    v.push(("sigma_nonincreasing", {
        let s: Vec<f64> = batch.groups.iter().map(|g| g.group.sigma()).collect();
        ensure(s.windows(2).all(|w| w[0] + 1e-9 >= w[1]), || format!("sigma order {s:?}"))
    }));

    v.push(("batch_size_bound", {
        let b = cfg.pipeline.batch_size as usize;
        let n = batch.groups.len();
        ensure(n <= b && batch.groups.iter().enumerate().all(|(i, g)| g.rank == i), || {
            format!("{n} groups for B = {b}, or ranks out of order")
        })
    }));

    v.push(("groups_whole", {
        let by_id: HashMap<&str, _> = out.groups.iter().map(|g| (g.sample_id.as_str(), g)).collect();
        let bad: Vec<_> = batch
            .groups
            .iter()
            .filter(|g| {
                let orig = by_id[g.group.sample_id.as_str()];
                orig.members.len() - orig.broken_count() != g.group.members.len()
            })
            .map(|g| g.group.sample_id.clone())
            .collect();
        ensure(bad.is_empty(), || format!("partially selected groups: {bad:?}"))
    }));

    v.push(("reward_formula", {
        let lambda = cfg.reward.tool_coef;
        let bad: Vec<_> = batch
            .members()
            .filter_map(|(_, m)| m.reward.map(|r| (m, r)))
            .filter(|(_, r)| {
                let want = r.r_acc as f64 + if r.r_acc == 1 { lambda * r.n_tc as f64 } else { 0.0 };
                r.total != want || *r != compute_reward(r.r_acc, r.n_tc, lambda)
            })
            .map(|(m, _)| m.trajectory_id.clone())
            .collect();
        ensure(bad.is_empty(), || format!("reward mismatch: {bad:?}"))
    }));

    v.push(("turn_budget", {
        let max = cfg.scaffold.max_turns;
        let bad: Vec<_> = out.trajectories.iter().filter(|t| t.n_tc() > max).map(|t| t.id().to_owned()).collect();
        ensure(bad.is_empty(), || format!("n_tc above {max}: {bad:?}"))
    }));

    v.push(("advantages_zero_sum", {
        let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
        for r in records {
            let e = sums.entry(r.sample_id.as_str()).or_default();
            e.0 += r.advantage;
            e.1 += 1;
        }
        let bad: Vec<_> = sums.iter().filter(|(_, (s, n))| s.abs() > 1e-9 * *n as f64).collect();
        ensure(records.len() == batch.total_rollouts() && bad.is_empty(), || {
            format!("{} records for {} rollouts; nonzero sums {bad:?}", records.len(), batch.total_rollouts())
        })
    }));

    v.push(("advantage_sign_agreement", {
        let bad: Vec<_> = records
            .iter()
            .filter(|r| r.advantage_norm.is_none_or(|n| n.signum() != r.advantage.signum() && r.advantage != 0.0))
            .map(|r| r.trajectory_id.clone())
            .collect();
        ensure(bad.is_empty(), || format!("sign disagreement: {bad:?}"))
    }));

    v.push(("pos_neg_ratio_recount", {
        let hits = records.iter().filter(|r| r.r_acc == 1 && r.advantage < 0.0).count();
        match pos_neg_adv_ratio(records, Denominator::AllRollouts) {
            Ok(x) => ensure(x == hits as f64 / records.len() as f64, || format!("ratio {x}, recount {hits}/{}", records.len())),
            Err(e) => ensure(records.is_empty(), || e.to_string()),
        }
    }));
    v
}

fn run_checked(
    report: &mut SelftestReport,
    label: &str,
    pool: &[PromptSample],
    policy: &dyn crate::policy::Policy,
    cfg: &StepConfig,
) -> Option<(StepOutput, FakeSandbox)> {
    let sandbox = demo_sandbox();
    let out = match run_step(pool, policy, &sandbox, cfg, 0) {
        Ok(o) => o,
        Err(e) => {
            report.check(&format!("{label}/run_step"), Err(e.to_string()));
            return None;
        }
    };
    let records = compute_batch_advantages(&out.batch, true, cfg.execution).map_err(|e| e.to_string());
    report.check(&format!("{label}/advantages"), records.as_ref().map(|_| ()).map_err(Clone::clone));
    let records = records.unwrap_or_default();
    for (name, r) in check_step(&out, cfg, &records) {
        report.check(&format!("{label}/{name}"), r);
    }
    report.check(&format!("{label}/sessions_closed_once"), {
        let counts = sandbox.close_counts();
        let bad: Vec<_> = counts.iter().filter(|(_, n)| **n != 1).collect();
        ensure(
            bad.is_empty() && sandbox.open_sessions().is_empty() && counts.len() == sandbox.sessions_created(),
            || format!("close counts {bad:?}, open {:?}", sandbox.open_sessions()),
        )
    });
    Some((out, sandbox))
}

/// Runs both mock configurations twice and checks every invariant.
pub fn run_selftest(seed: u64) -> SelftestReport {
    let mut report = SelftestReport::default();
    let cfg = demo_step_config(seed, Execution::default());
    let pool = demo_pool(cfg.pipeline.prompts_per_step() + 4);
    let scripted = demo_policy(&pool, cfg.pipeline.group_size);

    let first = run_checked(&mut report, "scripted", &pool, &scripted, &cfg);
    if let Some((out, _)) = &first {
        report.check("scripted/exercises_filters", {
            ensure(!out.dropped.is_empty() && out.trajectories.iter().any(|t| t.is_broken()), || {
                "demo run produced no drops or no broken rollouts".into()
            })
        });
        let again = run_step(&pool, &scripted, &demo_sandbox(), &demo_step_config(seed, Execution::Sequential), 0);
        report.check("scripted/reproducible", match again {
            Ok(b) => {
                let ser = |o: &StepOutput| o.trajectories.iter().map(serialize_trajectory).collect::<Vec<_>>();
                ensure(ser(out) == ser(&b) && out.batch == b.batch, || "second run differs".into())
            }
            Err(e) => Err(e.to_string()),
        });
    }

    let spec = StochasticSpec::default();
    let mock = StochasticMock::for_samples(spec, &pool);
    run_checked(&mut report, "stochastic", &pool, &mock, &cfg);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        let r = run_selftest(7);
        let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(r.checks.len() > 20);
    }

    #[test]
    fn check_step_catches_broken_member() {
        let cfg = demo_step_config(1, Execution::Sequential);
        let pool = demo_pool(8);
        let p = demo_policy(&pool, 8);
        let mut out = run_step(&pool, &p, &demo_sandbox(), &cfg, 0).unwrap();
        let records = compute_batch_advantages(&out.batch, true, cfg.execution).unwrap();
        let broken = out.groups.iter().flat_map(|g| &g.members).find(|m| m.is_broken()).unwrap().clone();
        out.batch.groups[0].group.members.push(broken);
        let results = check_step(&out, &cfg, &records);
        let failed: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
        assert!(failed.contains(&"batch_has_no_broken"), "{failed:?}");
    }
}
