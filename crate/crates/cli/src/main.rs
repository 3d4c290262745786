use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use pvrl_core::advantage::{compute_batch_advantages, write_advantage_records, read_advantage_records};
use pvrl_core::analytics::{bar_chart_png, batch_metrics, Denominator, ToolCategory};
use pvrl_core::config::{RunConfig, SandboxHandle};
use pvrl_core::logio::{
    batch_records, group_records, read_batch, read_group_records, read_trajectory_log, write_jsonl,
    write_trajectory_log, ScoreRecord,
};
use pvrl_core::pipeline::run_step;
use pvrl_core::protocol::{load_prompts, BrokenReason, Status};
use pvrl_core::reward::score_trajectory;
use pvrl_core::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "pvrl", version, about = "Rollout collection, selection and advantage tooling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_concurrency: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenominatorArg {
    All,
    Correct,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate groups for one step and select the training batch.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Score a trajectory log against the prompts' gold answers.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
    },
    /// Compute advantages for a selected batch.
    TrainBatch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        /// Also emit the std-normalized advantage column.
        #[arg(long)]
        normalize_std: bool,
    },
    /// Summarize a trajectory log and its advantage batch.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectories: PathBuf,
        /// Output of `train-batch`.
        #[arg(long)]
        advantages: PathBuf,
        /// Group file from `rollout`, for drop counts.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        denominator: DenominatorArg,
        /// Write PNG bar charts next to the report.
        #[arg(long)]
        plots: bool,
    },
    /// End-to-end run on mocks with invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with its exit class.
struct Fail {
    code: u8,
    err: anyhow::Error,
}

const CONFIG: u8 = 2;
const BACKEND: u8 = 3;
const INVARIANT: u8 = 4;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Fail {
    move |err| Fail { code, err }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail {
            code: 1,
            err: e.into(),
        }
    }
}

type Res<T> = Result<T, Fail>;

fn load_config(c: &Common) -> Res<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())).map_err(fail(CONFIG))?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env(|k| std::env::var(k).ok());
            cfg
        }
    };
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.max_concurrency.is_some() {
        cfg.pipeline.max_concurrency = c.max_concurrency;
    }
    cfg.validate().map_err(|e| fail(CONFIG)(e.into()))?;
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg)
}

fn input<T, E>(r: Result<T, E>, what: &Path) -> Res<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.with_context(|| format!("reading {}", what.display())).map_err(fail(CONFIG))
}

fn rollout(common: &Common, prompts: &Path, step: u64) -> Res<()> {
    let cfg = load_config(common)?;
    let pool = input(load_prompts(prompts), prompts)?;
    let sandbox = cfg.build_sandbox().map_err(|e| fail(CONFIG)(e.into()))?;
    if let Err(reason) = sandbox.check_reachable() {
        return Err(fail(BACKEND)(anyhow!("sandbox unreachable: {reason}")));
    }
    let policy = cfg.build_policy(&pool).map_err(|e| fail(CONFIG)(e.into()))?;
    let step_cfg = cfg.step_config();
    let out = match &sandbox {
        SandboxHandle::Http(h) => run_step(&pool, &*policy, h, &step_cfg, step),
        SandboxHandle::Fake(f) => run_step(&pool, &*policy, f, &step_cfg, step),
    }
    .map_err(|e| fail(CONFIG)(e.into()))?;

    let dir = &cfg.output_dir;
    write_trajectory_log(&dir.join("trajectories.jsonl"), &out.trajectories).map_err(|e| fail(1)(e.into()))?;
    write_jsonl(&dir.join("groups.jsonl"), group_records(&out)).map_err(|e| fail(1)(e.into()))?;
    write_jsonl(&dir.join("batch.jsonl"), batch_records(&out.batch)).map_err(|e| fail(1)(e.into()))?;
    fs::write(
        dir.join("run_config.toml"),
        cfg.to_toml_string().map_err(|e| fail(CONFIG)(e.into()))?,
    )?;

    let backend = out
        .trajectories
        .iter()
        .filter(|t| t.status() == Status::Broken(BrokenReason::BackendFailure))
        .count();
    tracing::info!(
        trajectories = out.trajectories.len(),
        dropped = out.dropped.len(),
        selected = out.batch.groups.len(),
        out = %dir.display(),
        "rollout done"
    );
    if !out.trajectories.is_empty() && backend == out.trajectories.len() {
        return Err(fail(BACKEND)(anyhow!("every episode failed on a backend call")));
    }
    Ok(())
}

fn score(common: &Common, prompts: &Path, trajectories: &Path) -> Res<()> {
    let cfg = load_config(common)?;
    let pool = input(load_prompts(prompts), prompts)?;
    let golds: HashMap<&str, _> = pool.iter().map(|s| (s.id.as_str(), s)).collect();
    let log = input(read_trajectory_log(trajectories), trajectories)?;
    let mut records = Vec::with_capacity(log.len());
    for t in &log {
        let s = golds
            .get(t.sample_id())
            .ok_or_else(|| fail(INVARIANT)(anyhow!("trajectory {} names unknown sample {}", t.id(), t.sample_id())))?;
        let reward = score_trajectory(t, &s.gold_answer, s.task_kind, &cfg.reward).ok();
        records.push(ScoreRecord::new(t, reward));
    }
    write_jsonl(&cfg.output_dir.join("scores.jsonl"), &records).map_err(|e| fail(1)(e.into()))?;
    Ok(())
}

fn train_batch(common: &Common, trajectories: &Path, batch: &Path, normalize_std: bool) -> Res<()> {
    let cfg = load_config(common)?;
    let log = input(read_trajectory_log(trajectories), trajectories)?;
    let batch = read_batch(batch, cfg.pipeline.batch_size as usize)
        .with_context(|| format!("reading {}", batch.display()))
        .map_err(fail(INVARIANT))?;
    let by_id: HashMap<&str, _> = log.iter().map(|t| (t.id(), t)).collect();
    for (g, m) in batch.members() {
        let t = by_id
            .get(m.trajectory_id.as_str())
            .ok_or_else(|| fail(INVARIANT)(anyhow!("batch names unknown trajectory {}", m.trajectory_id)))?;
        if t.sample_id() != g.sample_id || t.status() != m.status || m.reward.is_some_and(|r| r.n_tc != t.n_tc()) {
            return Err(fail(INVARIANT)(anyhow!("trajectory {} differs between log and batch", m.trajectory_id)));
        }
    }
    let records = compute_batch_advantages(&batch, normalize_std, cfg.execution()).map_err(|e| fail(INVARIANT)(e.into()))?;
    write_advantage_records(&cfg.output_dir.join("advantages.jsonl"), &records).map_err(|e| fail(1)(e.into()))?;
    Ok(())
}

fn analyze(
    common: &Common,
    trajectories: &Path,
    advantages: &Path,
    groups: Option<&Path>,
    denominator: DenominatorArg,
    plots: bool,
) -> Res<()> {
    let cfg = load_config(common)?;
    let log = input(read_trajectory_log(trajectories), trajectories)?;
    let records = read_advantage_records(advantages)
        .with_context(|| format!("reading {}", advantages.display()))
        .map_err(fail(INVARIANT))?;
    let groups = match groups {
        Some(p) => Some(
            read_group_records(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(fail(INVARIANT))?,
        ),
        None => None,
    };
    let den = match denominator {
        DenominatorArg::All => Denominator::AllRollouts,
        DenominatorArg::Correct => Denominator::CorrectOnly,
    };
    let m = batch_metrics(&log, &records, groups.as_deref(), den).map_err(|e| fail(INVARIANT)(e.into()))?;
    let dir = &cfg.output_dir;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&m).map_err(|e| fail(1)(e.into()))?,
    )?;
    if plots {
        let cats: Vec<f64> = ToolCategory::ALL.iter().map(|c| m.tool_categories_batch[c] as f64).collect();
        let mut vt = m.counts.visual_tokens_batch.clone();
        vt.sort_unstable();
        let vt: Vec<f64> = vt.into_iter().map(|x| x as f64).collect();
        for (name, values) in [("tool_categories.png", cats), ("visual_tokens.png", vt)] {
            match bar_chart_png(&values, 640, 320) {
                Ok(png) => fs::write(dir.join(name), png)?,
                Err(e) => tracing::warn!(plot = name, "skipped: {e}"),
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&m).unwrap_or_default());
    Ok(())
}

fn selftest(seed: u64) -> Res<()> {
    let report = run_selftest(seed);
    for c in &report.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{mark} {}", c.name);
        } else {
            println!("{mark} {}: {}", c.name, c.detail);
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(fail(INVARIANT)(anyhow!("selftest found invariant violations")))
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match &cli.cmd {
        Cmd::Rollout { common, prompts, step } => rollout(common, prompts, *step),
        Cmd::Score {
            common,
            prompts,
            trajectories,
        } => score(common, prompts, trajectories),
        Cmd::TrainBatch {
            common,
            trajectories,
            batch,
            normalize_std,
        } => train_batch(common, trajectories, batch, *normalize_std),
        Cmd::Analyze {
            common,
            trajectories,
            advantages,
            groups,
            denominator,
            plots,
        } => analyze(common, trajectories, advantages, groups.as_deref(), *denominator, *plots),
        Cmd::Selftest { seed } => selftest(*seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

