//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.
//!
//! `FMRSV_ACCEPTANCE_ONLY=1,7` restricts the run to the listed criteria.
//! `FMRSV_ACCEPTANCE_QUICK=1` replaces the T=2000 replication by its T=500
//! smoke variant (criterion 1 is then reported as skipped).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fmrsv_core::checks::{run_suite, Suite};
use fmrsv_core::diagnostics::{group_of, Summary, TABLE_GROUPS};
use fmrsv_core::driver::{ChainConfig, Manifest};
use fmrsv_core::portfolio::{optimal_weights, rolling_backtest, BacktestConfig, VolForecast};
use fmrsv_core::simulate::generate;
use fmrsv_core::{ModelConfig, Parameters, PriorSpec, Variant};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COVERAGE_FULL: f64 = 0.90;
const COVERAGE_SMOKE: f64 = 0.80;
const DELTA_RANGE: (f64, f64) = (7.5, 8.5);
const FULL_BUDGET: Duration = Duration::from_secs(4 * 3600);
const SMOKE_BUDGET: Duration = Duration::from_secs(20 * 60);
const DELTA_ACCEPTANCE: f64 = 0.8;
const BUDGET_TOL: f64 = 1e-10;
const SCALAR_TOL: f64 = 1e-14;
const SCALING_TOL: f64 = 1e-12;
const BACKTEST_SEEDS: u64 = 11;

struct Outcome {
    passed: Option<bool>,
    detail: String,
}

fn pass_if(passed: bool, detail: String) -> Outcome {
    Outcome { passed: Some(passed), detail }
}

fn fmrsv(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fmrsv")).args(args).current_dir(dir).output().expect("binary runs");
    assert!(out.status.success(), "fmrsv {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn truth_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/truth_p9_q2.cfg")
}

struct Replication {
    covered: usize,
    table: usize,
    delta_mean: f64,
    delta_rate: f64,
    elapsed: Duration,
}

fn replication(t: usize) -> Replication {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let truth = truth_file();
    let truth = truth.to_str().unwrap();
    let start = Instant::now();
    fmrsv(dir, &["simulate", "--p", "9", "--q", "2", "--T", &t.to_string(), "--seed", "1", "--truth", truth, "--out", "data"]);
    fmrsv(
        dir,
        &["estimate", "--data", "data", "--burn", "2000", "--keep", "10000", "--thin", "0", "--seed", "1", "--out", "chain"],
    );
    let elapsed = start.elapsed();
    let out = fmrsv(dir, &["summarize", "chain", "--truth", truth, "--format", "json"]);
    let summary: Summary = serde_json::from_slice(&out.stdout).unwrap();
    let (covered, table) = summary.coverage(|name| TABLE_GROUPS.contains(&group_of(name)));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("chain/manifest.json")).unwrap()).unwrap();
    Replication {
        covered,
        table,
        delta_mean: summary.row("delta").unwrap().mean,
        delta_rate: manifest.acceptance["delta"].rate.unwrap_or(0.0),
        elapsed,
    }
}

fn replication_outcome(r: &Replication, coverage: f64, budget: Duration) -> Outcome {
    let share = r.covered as f64 / r.table as f64;
    let delta_ok = (DELTA_RANGE.0..=DELTA_RANGE.1).contains(&r.delta_mean);
    pass_if(
        share >= coverage && delta_ok && r.elapsed <= budget,
        format!(
            "coverage {}/{} ({:.1}%, need {:.0}%), delta mean {:.3} (need [{}, {}]), {:.1} min (budget {} min)",
            r.covered,
            r.table,
            100.0 * share,
            100.0 * coverage,
            r.delta_mean,
            DELTA_RANGE.0,
            DELTA_RANGE.1,
            r.elapsed.as_secs_f64() / 60.0,
            budget.as_secs() / 60
        ),
    )
}

fn suites(suites: &[Suite]) -> Outcome {
    let mut failed = Vec::new();
    let mut n = 0;
    for &suite in suites {
        match run_suite(suite, 1) {
            Ok(results) => {
                n += results.len();
                failed.extend(results.into_iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.name, r.detail)));
            }
            Err(e) => failed.push(format!("{}: {e}", suite.as_str())),
        }
    }
    let detail =
        if failed.is_empty() { format!("{n} checks passed") } else { format!("{} of {n} failed: {}", failed.len(), failed.join("; ")) };
    pass_if(failed.is_empty(), detail)
}

fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(p, p) * 0.1
}

fn portfolio_identities() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut budget, mut scaling) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let p = rng.random_range(1..=10);
        let m = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let sigma = random_spd(p, &mut rng);
        let r_f = rng.random_range(0.0..0.05);
        let target = rng.random_range(-0.2..0.3);
        let w = optimal_weights(&m, &sigma, r_f, target).unwrap();
        budget = budget.max((w.w.dot(&m) + w.cash * r_f - target).abs());
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled = optimal_weights(&m, &(&sigma * c), r_f, target).unwrap();
        scaling = scaling.max((&scaled.w - &w.w).amax() / w.w.amax().max(1.0));
    }
    let mut scalar = 0.0f64;
    for _ in 0..1000 {
        let (m, s2, r_f, target) = (rng.random_range(0.01..0.5), rng.random_range(0.01..2.0), rng.random_range(0.0..0.01), rng.random_range(0.0..0.3));
        let w = optimal_weights(&DVector::from_element(1, m), &DMatrix::from_element(1, 1, s2), r_f, target).unwrap();
        let exact = (target - r_f) / (m - r_f);
        scalar = scalar.max((w.w[0] - exact).abs() / exact.abs().max(1.0));
    }
    let ok = budget <= BUDGET_TOL && scalar <= SCALAR_TOL && scaling <= SCALING_TOL;
    (ok, format!("budget {budget:.1e} (tol {BUDGET_TOL:.0e}), scalar {scalar:.1e} (tol {SCALAR_TOL:.0e}), scaling {scaling:.1e} (tol {SCALING_TOL:.0e})"))
}

/// Cumulative realized variance of one synthetic backtest per variant.
fn backtest_scores(seed: u64) -> (f64, f64) {
    let (p, q, window, horizon) = (4, 1, 250, 40);
    // expected excess returns near zero make the target-return weights
    // explode; a larger factor mean keeps them away from zero
    let mut truth = Parameters::simulation_truth(p, q);
    truth.gamma.fill(0.5);
    let model = ModelConfig::new(p, q, window + horizon, Variant::Fmrsv).unwrap();
    let (data, _) = generate(&model, &truth, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let score = |variant| {
        let config = BacktestConfig {
            variant,
            window,
            horizon,
            mu_targets: vec![0.1],
            r_f: 0.0,
            chain: ChainConfig { n_burn: 300, n_keep: 200, seed, ..Default::default() },
            refit_burn: 30,
            vol: VolForecast::Lognormal,
        };
        rolling_backtest(&data, &PriorSpec::vague(p, q), &config).unwrap().score()[0]
    };
    (score(Variant::Fmrsv), score(Variant::Fmsv))
}

fn criterion_7() -> Outcome {
    let (identities_ok, identities) = portfolio_identities();
    let start = Instant::now();
    let scores: Vec<(f64, f64)> = (1..=BACKTEST_SEEDS).map(backtest_scores).collect();
    let wins = scores.iter().filter(|(rsv, sv)| rsv <= sv).count();
    let mut ratios: Vec<f64> = scores.iter().map(|(rsv, sv)| rsv / sv).collect();
    let per_seed = ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
    ratios.sort_by(f64::total_cmp);
    let majority = 2 * wins > BACKTEST_SEEDS as usize;
    pass_if(
        identities_ok && majority,
        format!(
            "{identities}; FMRSV <= FMSV in {wins}/{BACKTEST_SEEDS} synthetic backtests, median score ratio {:.3}, per seed [{per_seed}] ({:.1} min)",
            ratios[ratios.len() / 2],
            start.elapsed().as_secs_f64() / 60.0
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn criterion_9() -> Outcome {
    let commands: [&[&str]; 7] = [
        &["simulate", "--p", "3", "--q", "1", "--T", "60", "--seed", "4", "--out", "data"],
        &["preprocess", "--returns", "data/returns.csv", "--rcov", "data/rcov.csv", "--out", "pre"],
        &["estimate", "--data", "data", "--burn", "10", "--keep", "20", "--thin", "5", "--seed", "2", "--out", "one"],
        &["estimate", "--data", "data", "--burn", "10", "--keep", "20", "--chains", "2", "--jobs", "2", "--out", "two"],
        &["summarize", "two", "--truth", "data/truth.cfg", "--format", "csv", "--out", "summary.csv"],
        &[
            "backtest", "--data", "data", "--window", "50", "--horizon", "3", "--burn", "5", "--keep", "10", "--refit-burn", "2",
            "--out", "bt",
        ],
        &["check", "--suite", "ledger", "--format", "json"],
    ];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut differing = Vec::new();
    for args in commands {
        let out_a = fmrsv(a.path(), args);
        let out_b = fmrsv(b.path(), args);
        if out_a.stdout != out_b.stdout {
            differing.push(format!("{} stdout", args[0]));
        }
    }
    let (files_a, files_b) = (snapshot(a.path()), snapshot(b.path()));
    if files_a.keys().ne(files_b.keys()) {
        differing.push("file sets".to_string());
    }
    differing.extend(files_a.iter().filter(|(k, v)| files_b.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()));
    pass_if(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands, {} artifacts byte-identical", commands.len(), files_a.len())
        } else {
            format!("differences: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> =
        std::env::var("FMRSV_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let quick = std::env::var("FMRSV_ACCEPTANCE_QUICK").is_ok_and(|v| v != "0");
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));

    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut report = |id: &str, o: Outcome| {
        let status = match o.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("criterion {id:<8} {status}  {}", o.detail);
        lines.push((id.to_string(), o));
    };

    let mut tuning_source = None;
    if wanted(1) || wanted(8) {
        let smoke = replication(500);
        report("1-smoke", replication_outcome(&smoke, COVERAGE_SMOKE, SMOKE_BUDGET));
        if quick {
            report("1", Outcome { passed: None, detail: "T=2000 replication skipped (quick mode)".into() });
            tuning_source = Some(("T=500", smoke.delta_rate));
        } else {
            let full = replication(2000);
            report("1", replication_outcome(&full, COVERAGE_FULL, FULL_BUDGET));
            tuning_source = Some(("T=2000", full.delta_rate));
        }
    }
    if wanted(2) {
        report("2", suites(&[Suite::Derivatives]));
    }
    if wanted(3) {
        report("3", suites(&[Suite::StateSpace]));
    }
    if wanted(4) {
        report("4", suites(&[Suite::Exactness, Suite::Ledger]));
    }
    if wanted(5) {
        report("5", suites(&[Suite::Preprocess]));
    }
    if wanted(6) {
        report("6", suites(&[Suite::Rcov]));
    }
    if wanted(7) {
        report("7", criterion_7());
    }
    if let (true, Some((source, rate))) = (wanted(8), tuning_source) {
        report(
            "8",
            pass_if(rate > DELTA_ACCEPTANCE, format!("delta acceptance {rate:.3} on the {source} replication (need > {DELTA_ACCEPTANCE})")),
        );
    }
    if wanted(9) {
        report("9", criterion_9());
    }

    let failed: Vec<&str> = lines.iter().filter(|(_, o)| o.passed == Some(false)).map(|(id, _)| id.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} reported criteria passed", lines.iter().filter(|(_, o)| o.passed.is_some()).count());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
