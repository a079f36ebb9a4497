use std::collections::BTreeMap;

use fmrsv_core::density::Problem;
use fmrsv_core::diagnostics::summarize;
use fmrsv_core::driver::{run_chain, ChainConfig, ChainStore};
use fmrsv_core::io::{load_dataset, save_dataset};
use fmrsv_core::preprocess::{correct_rcov, sample_moments, VarianceDivisor};
use fmrsv_core::simulate::generate;
use fmrsv_core::{ModelConfig, Parameters, PriorSpec, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simulated(p: usize, q: usize, t: usize, seed: u64) -> (ModelConfig, Parameters, fmrsv_core::Dataset) {
    let config = ModelConfig::new(p, q, t, Variant::Fmrsv).unwrap();
    let truth = Parameters::simulation_truth(p, q);
    let (data, _) = generate(&config, &truth, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (config, truth, data)
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let (_, _, data) = simulated(3, 2, 25, 11);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(&dir.path().join("returns.csv"), &dir.path().join("factors.csv"), Some(&dir.path().join("rcov.csv")))
        .unwrap();
    assert_eq!(back.y, data.y);
    assert_eq!(back.x, data.x);
    assert_eq!(back.w, data.w);
    assert_eq!(back.dates, data.dates);
}

#[test]
fn short_chain_writes_reads_and_summarizes() {
    let (config, truth, data) = simulated(3, 1, 60, 3);
    let problem = Problem::new(config, PriorSpec::vague(3, 1), data).unwrap();
    let chain = ChainConfig { n_burn: 20, n_keep: 40, thin: 10, checkpoint_every: 0, ..Default::default() };
    let store = run_chain(&problem, &chain, 0, None).unwrap();
    assert_eq!(store.n_draws(), 40);
    assert_eq!(store.paths.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    store.write(dir.path(), &BTreeMap::new()).unwrap();
    let back = ChainStore::read(dir.path()).unwrap();
    assert_eq!(back.draws, store.draws);
    let summary = summarize(&[back], Some(&truth), 0.95).unwrap();
    assert_eq!(summary.rows.len(), store.names.len());
    assert!(summary.rows.iter().all(|r| r.lower <= r.mean && r.mean <= r.upper));
}

#[test]
fn identical_seeds_give_identical_chains() {
    let (config, _, data) = simulated(2, 1, 40, 8);
    let problem = Problem::new(config, PriorSpec::vague(2, 1), data).unwrap();
    let chain = ChainConfig { n_burn: 5, n_keep: 15, thin: 0, checkpoint_every: 0, seed: 9, ..Default::default() };
    let a = run_chain(&problem, &chain, 0, None).unwrap();
    let b = run_chain(&problem, &chain, 0, None).unwrap();
    assert_eq!(a.draws, b.draws);
    let c = run_chain(&problem, &chain, 1, None).unwrap();
    assert_ne!(a.draws, c.draws);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corrected_variances_average_to_the_daily_sample_variance(p in 1usize..5, t in 20usize..60, seed in 0u64..1000) {
        let (_, _, data) = simulated(p, 1, t, seed);
        let (_, w) = correct_rcov(&data.y, data.w.as_ref().unwrap(), VarianceDivisor::Population).unwrap();
        let (_, s2) = sample_moments(&data.y, VarianceDivisor::Population).unwrap();
        for i in 0..p {
            let mean = w.iter().map(|m| m[(i, i)]).sum::<f64>() / t as f64;
            prop_assert!((mean - s2[i]).abs() <= 1e-12 * s2[i]);
            for m in &w {
                prop_assert!(m.clone().cholesky().is_some());
            }
        }
    }
}
