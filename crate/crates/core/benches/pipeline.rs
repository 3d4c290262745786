use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pvrl_core::advantage::compute_batch_advantages;
use pvrl_core::exec::Execution;
use pvrl_core::pipeline::{run_step, PipelineConfig};
use pvrl_core::policy::{StochasticMock, StochasticSpec};
use pvrl_core::sandbox::FakeSandbox;
use pvrl_core::selftest::{demo_policy, demo_pool, demo_sandbox, demo_step_config};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn step(c: &mut Criterion) {
    let pool = demo_pool(32);
    let policy = demo_policy(&pool, 8);
    let mut g = c.benchmark_group("run_step");
    g.sample_size(20);
    for (name, exec) in MODES {
        let cfg = demo_step_config(1, exec);
        g.bench_function(BenchmarkId::new("scripted", name), |b| {
            b.iter(|| run_step(&pool, &policy, &demo_sandbox(), &cfg, 0).unwrap())
        });
    }

    let mock = StochasticMock::for_samples(StochasticSpec::default(), &pool);
    let sandbox = FakeSandbox::new().with_video_frames(300);
    for (name, exec) in MODES {
        let mut cfg = demo_step_config(1, exec);
        cfg.pipeline = PipelineConfig {
            batch_size: 16,
            ..PipelineConfig::default()
        };
        g.bench_function(BenchmarkId::new("stochastic", name), |b| {
            b.iter(|| run_step(&pool, &mock, &sandbox, &cfg, 0).unwrap())
        });
    }
    g.finish();
}

fn advantages(c: &mut Criterion) {
    let pool = demo_pool(256);
    let mock = StochasticMock::for_samples(StochasticSpec::default(), &pool);
    let mut cfg = demo_step_config(2, Execution::Parallel);
    cfg.pipeline = PipelineConfig {
        batch_size: 128,
        group_size: 16,
        ..PipelineConfig::default()
    };
    let out = run_step(&pool, &mock, &FakeSandbox::new().with_video_frames(300), &cfg, 0).unwrap();
    let mut g = c.benchmark_group("batch_advantages");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| compute_batch_advantages(&out.batch, true, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, step, advantages);
criterion_main!(benches);
