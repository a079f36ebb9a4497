use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fmrsv_core::density::{beta_grad_hess, log_joint, Problem};
use fmrsv_core::samplers::{sweep, McmcTuning};
use fmrsv_core::simulate::generate;
use fmrsv_core::{ModelConfig, Parameters, PriorSpec, Variant};

fn problem(t: usize) -> (Problem, Parameters, fmrsv_core::LatentState) {
    let cfg = ModelConfig::new(9, 2, t, Variant::Fmrsv).unwrap();
    let params = Parameters::simulation_truth(9, 2);
    let (data, state) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (Problem::new(cfg, PriorSpec::vague(9, 2), data).unwrap(), params, state)
}

fn bench_sweep(c: &mut Criterion) {
    let (problem, params, state) = problem(250);
    let tuning = McmcTuning::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    g.bench_function("p9_q2_t250", |b| {
        b.iter_batched(
            || (params.clone(), state.clone()),
            |(mut p, mut s)| sweep(&problem, &mut p, &mut s, &tuning, &mut rng, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn bench_density(c: &mut Criterion) {
    let (problem, params, state) = problem(250);
    c.bench_function("log_joint_p9_q2_t250", |b| b.iter(|| log_joint(&problem, &params, &state).unwrap()));
    let beta = DMatrix::from_fn(9, 2, |i, k| 0.3 + 0.1 * (i + k) as f64);
    let h: Vec<f64> = (0..11).map(|j| -1.0 + 0.05 * j as f64).collect();
    c.bench_function("beta_grad_hess_p9_q2", |b| b.iter(|| beta_grad_hess(&beta, &h, 3).unwrap()));
}

criterion_group!(benches, bench_sweep, bench_density);
criterion_main!(benches);
