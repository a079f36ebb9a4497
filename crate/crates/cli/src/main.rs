//! `fmrsv`: simulate, preprocess, estimate, summarize, backtest and check.

mod settings;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fmrsv_core::checks::{run_suite, Suite};
use fmrsv_core::density::Problem;
use fmrsv_core::diagnostics::summarize;
use fmrsv_core::driver::{run_chains, ChainConfig, ChainStore, CHECKPOINT_FILE, MANIFEST_FILE};
use fmrsv_core::io::{self, load_dataset, save_dataset, write_rcov, write_table, FACTORS_FILE, RCOV_FILE, RETURNS_FILE};
use fmrsv_core::portfolio::{rolling_backtest, BacktestConfig, VolForecast};
use fmrsv_core::preprocess::{correct_rcov, VarianceDivisor};
use fmrsv_core::samplers::McmcTuning;
use fmrsv_core::simulate::generate;
use fmrsv_core::{Dataset, Error, ModelConfig, Parameters, PriorSpec, Result, Variant};

use settings::Settings;

const SCHEMAS: &str = "\
File formats (all numbers written with 17 significant digits):
  returns.csv   date,<asset 1>,...,<asset p>         one row per period
  factors.csv   date,<factor 1>,...,<factor q>       realized factors, one row per period
  rcov.csv      date,i,j,value                       realized covariance, 1-based i <= j,
                                                     every pair present for every date
  *.cfg         name.index = value                   parameters (alpha.j.k, beta.i.k, mu.i,
                                                     gamma.k, phi.i, psi.k, rho.k, sigma_eta.i,
                                                     sigma_nu.k, delta), priors, or run settings
Chain directory (one per chain; `chain-<k>/` below --out when --chains > 1):
  <group>.csv   one column per parameter of the group, one row per retained draw
  terminal.csv  h.1..h.<p+q>,f.1..f.<q> at the last period, one row per draw
  h_mean.csv, f_mean.csv   posterior-mean latent paths
  paths.csv     draw,t,h.*,f.*   every --thin-th retained latent path
  manifest.json settings, dimensions and acceptance rates
Settings precedence: built-in default < --config file (keys are the long flag
names) < command-line flag. Exit codes: 0 success, 1 invalid input, 2 numeric
failure or failed check.";

#[derive(Parser)]
#[command(name = "fmrsv", version, about = "Factor stochastic volatility with leverage and realized measures", after_long_help = SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from the model.
    Simulate(SimulateArgs),
    /// Bias-correct raw realized covariances against daily returns.
    Preprocess(PreprocessArgs),
    /// Run the MCMC sampler.
    Estimate(EstimateArgs),
    /// Posterior summaries of one or more chain directories.
    Summarize(SummarizeArgs),
    /// Rolling one-step minimum-variance portfolio backtest.
    Backtest(BacktestArgs),
    /// Run the oracle suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of assets [default: 9]
    #[arg(long)]
    p: Option<usize>,
    /// Number of factors [default: 2]
    #[arg(long)]
    q: Option<usize>,
    /// Number of periods [default: 2000]
    #[arg(long = "T")]
    t: Option<usize>,
    /// Parameter file overriding the default true values
    #[arg(long)]
    truth: Option<String>,
    /// [default: fmrsv]
    #[arg(long)]
    variant: Option<Variant>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    returns: Option<String>,
    /// Raw realized covariances, long format
    #[arg(long)]
    rcov: Option<String>,
    /// Variance divisor: population (1/T) or unbiased (1/(T-1)) [default: population]
    #[arg(long)]
    divisor: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding returns.csv, factors.csv and rcov.csv
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    returns: Option<String>,
    #[arg(long)]
    factors: Option<String>,
    #[arg(long)]
    rcov: Option<String>,
}

#[derive(Args)]
struct SamplerArgs {
    /// fmsv, fmrsv or fmrsv-nl [default: fmrsv]
    #[arg(long)]
    variant: Option<Variant>,
    /// [default: 2000]
    #[arg(long)]
    burn: Option<usize>,
    /// [default: 10000]
    #[arg(long)]
    keep: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Prior file overriding the vague defaults
    #[arg(long)]
    priors: Option<String>,
    /// Log-volatility blocks per series [default: ceil(T/5)]
    #[arg(long)]
    blocks: Option<usize>,
    /// Mode refinements per block [default: 5]
    #[arg(long)]
    mode_iters: Option<usize>,
    /// Random-walk step of log delta [default: 0.001]
    #[arg(long)]
    sigma_delta: Option<f64>,
    /// Jitter block boundaries every sweep [default: false]
    #[arg(long)]
    stochastic_knots: Option<bool>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Keep every n-th retained latent path, 0 for none [default: 10]
    #[arg(long)]
    thin: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    chains: Option<usize>,
    /// Chains run at once [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
    /// Sweeps between checkpoints, 0 for none [default: 1000]
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Chain directories, or parents of `chain-<k>` directories
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Parameter file with true values; adds coverage flags
    #[arg(long)]
    truth: Option<String>,
    /// Credible level [default: 0.95]
    #[arg(long)]
    level: Option<f64>,
    /// text, csv or json [default: text]
    #[arg(long)]
    format: Option<String>,
    /// Write to this file instead of standard output
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct BacktestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Estimation window length [default: 1000]
    #[arg(long)]
    window: Option<usize>,
    /// Number of forecast periods at the end of the sample [default: 100]
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated target returns [default: 0.05,0.1,0.15]
    #[arg(long)]
    targets: Option<String>,
    /// Risk-free rate [default: 0]
    #[arg(long)]
    rf: Option<f64>,
    /// Burn-in of warm-started refits [default: 500]
    #[arg(long)]
    refit_burn: Option<usize>,
    /// lognormal or naive [default: lognormal]
    #[arg(long)]
    vol: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct CheckArgs {
    /// Comma-separated suites: derivatives, state-space, exactness, ledger,
    /// preprocess, rcov, or all [default: all]
    #[arg(long)]
    suite: Option<String>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// text or json [default: text]
    #[arg(long)]
    format: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Estimate(a) => estimate(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Backtest(a) => backtest(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn write_manifest(dir: &Path, command: &str, settings: &BTreeMap<String, String>, extra: serde_json::Value) -> Result<()> {
    let mut doc = serde_json::json!({ "command": command, "settings": settings });
    if let (Some(obj), serde_json::Value::Object(more)) = (doc.as_object_mut(), extra) {
        obj.extend(more);
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let p = s.get("p", a.p, 9)?;
    let q = s.get("q", a.q, 2)?;
    let t = s.get("T", a.t, 2000)?;
    let variant = s.get("variant", a.variant, Variant::Fmrsv)?;
    let seed = s.get("seed", a.seed, 1)?;
    let truth_file = s.opt("truth", a.truth)?;
    let out = PathBuf::from(s.required::<String>("out", a.out)?);
    let settings = s.finish()?;

    let config = ModelConfig::new(p, q, t, variant)?;
    let mut truth = Parameters::simulation_truth(p, q);
    if let Some(f) = truth_file {
        io::apply_params_kv(&mut truth, &io::read_kv(Path::new(&f))?)?;
    }
    truth.validate(&config)?;
    let (data, state) = generate(&config, &truth, &mut ChaCha8Rng::seed_from_u64(seed))?;
    save_dataset(&out, &data)?;
    fs::write(out.join("truth.cfg"), io::params_to_kv(&truth))?;
    let h_names: Vec<String> = (1..=p + q).map(|j| format!("h.{j}")).collect();
    let f_names: Vec<String> = (1..=q).map(|k| format!("f.{k}")).collect();
    write_table(&out.join("latent_h.csv"), &h_names, Some(&data.dates), &state.h)?;
    write_table(&out.join("latent_f.csv"), &f_names, Some(&data.dates), &state.f)?;
    write_manifest(&out, "simulate", &settings, serde_json::json!({}))
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let returns = s.required::<String>("returns", a.returns)?;
    let rcov = s.required::<String>("rcov", a.rcov)?;
    let divisor = match s.get("divisor", a.divisor, "population".to_string())?.as_str() {
        "population" => VarianceDivisor::Population,
        "unbiased" => VarianceDivisor::Unbiased,
        other => return Err(Error::Validation(format!("unknown divisor `{other}`"))),
    };
    let out = PathBuf::from(s.required::<String>("out", a.out)?);
    let settings = s.finish()?;

    let y = io::read_table(Path::new(&returns))?;
    let (dates, raw) = io::read_rcov(Path::new(&rcov), y.values.ncols())?;
    if let Some(d) = &y.dates {
        if *d != dates {
            return Err(Error::Validation("covariance dates do not match the return dates".into()));
        }
    }
    let (correction, w) = correct_rcov(&y.values, &raw, divisor)?;
    fs::create_dir_all(&out)?;
    write_rcov(&out.join(RCOV_FILE), &dates, &w)?;
    fs::write(out.join("correction.json"), serde_json::to_string_pretty(&correction)? + "\n")?;
    write_manifest(&out, "preprocess", &settings, serde_json::json!({}))
}

fn resolve_data(s: &mut Settings, a: DataArgs, need_rcov: bool) -> Result<Dataset> {
    let dir = s.opt::<String>("data", a.data)?;
    let in_dir = |name: &str| dir.as_ref().map(|d| Path::new(d).join(name).display().to_string());
    let returns = s.opt("returns", a.returns.or_else(|| in_dir(RETURNS_FILE)))?;
    let factors = s.opt("factors", a.factors.or_else(|| in_dir(FACTORS_FILE)))?;
    let rcov = if need_rcov { s.opt("rcov", a.rcov.or_else(|| in_dir(RCOV_FILE)))? } else { s.opt("rcov", a.rcov)? };
    let missing = |what: &str| Error::Validation(format!("no {what} file: pass --data or --{what}"));
    let returns = returns.ok_or_else(|| missing("returns"))?;
    let factors = factors.ok_or_else(|| missing("factors"))?;
    if need_rcov && rcov.is_none() {
        return Err(missing("rcov"));
    }
    load_dataset(Path::new(&returns), Path::new(&factors), rcov.as_deref().map(Path::new))
}

struct Sampler {
    variant: Variant,
    priors_file: Option<String>,
    config: ChainConfig,
}

fn resolve_sampler(s: &mut Settings, a: SamplerArgs) -> Result<Sampler> {
    let d = ChainConfig::default();
    let dt = McmcTuning::default();
    let variant = s.get("variant", a.variant, Variant::Fmrsv)?;
    let config = ChainConfig {
        n_burn: s.get("burn", a.burn, d.n_burn)?,
        n_keep: s.get("keep", a.keep, d.n_keep)?,
        seed: s.get("seed", a.seed, d.seed)?,
        tuning: McmcTuning {
            n_blocks: s.opt("blocks", a.blocks)?,
            mode_iters: s.get("mode-iters", a.mode_iters, dt.mode_iters)?,
            sigma_delta: s.get("sigma-delta", a.sigma_delta, dt.sigma_delta)?,
            stochastic_knots: s.get("stochastic-knots", a.stochastic_knots, dt.stochastic_knots)?,
        },
        ..d
    };
    Ok(Sampler { variant, priors_file: s.opt("priors", a.priors)?, config })
}

fn build_priors(file: Option<&str>, p: usize, q: usize) -> Result<PriorSpec> {
    let mut priors = PriorSpec::vague(p, q);
    if let Some(f) = file {
        io::apply_priors_kv(&mut priors, &io::read_kv(Path::new(f))?)?;
    }
    Ok(priors)
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let sampler = resolve_sampler(&mut s, a.sampler)?;
    let data = resolve_data(&mut s, a.data, sampler.variant.uses_rcov())?;
    let d = ChainConfig::default();
    let config = ChainConfig {
        thin: s.get("thin", a.thin, d.thin)?,
        n_chains: s.get("chains", a.chains, d.n_chains)?,
        checkpoint_every: s.get("checkpoint-every", a.checkpoint_every, d.checkpoint_every)?,
        ..sampler.config
    };
    let jobs = s.get("jobs", a.jobs, 1usize)?;
    let out = PathBuf::from(s.required::<String>("out", a.out)?);
    let settings = s.finish()?;

    let (p, q, t) = (data.p(), data.q(), data.t());
    let priors = build_priors(sampler.priors_file.as_deref(), p, q)?;
    let problem = Problem::new(ModelConfig::new(p, q, t, sampler.variant)?, priors, data)?;
    let dirs: Vec<PathBuf> = if config.n_chains == 1 {
        vec![out.clone()]
    } else {
        (1..=config.n_chains).map(|k| out.join(format!("chain-{k}"))).collect()
    };
    for dir in &dirs {
        fs::create_dir_all(dir)?;
    }
    let dir_refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    let stores = run_chains(&problem, &config, jobs, Some(&dir_refs))?;
    for (store, dir) in stores.iter().zip(&dirs) {
        store.write(dir, &settings)?;
        let ck = dir.join(CHECKPOINT_FILE);
        if ck.exists() {
            fs::remove_file(ck)?;
        }
    }
    Ok(())
}

/// Chain directories named on the command line, expanding parents of
/// `chain-<k>` directories in chain order.
fn chain_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in dirs {
        if dir.join(MANIFEST_FILE).exists() {
            out.push(dir.clone());
            continue;
        }
        let mut found: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let k = name.strip_prefix("chain-")?.parse::<usize>().ok()?;
                Some((k, e.path()))
            })
            .filter(|(_, p)| p.join(MANIFEST_FILE).exists())
            .collect();
        if found.is_empty() {
            return Err(Error::Validation(format!("{} holds no chain output", dir.display())));
        }
        found.sort();
        out.extend(found.into_iter().map(|(_, p)| p));
    }
    Ok(out)
}

fn summarize_cmd(a: SummarizeArgs) -> Result<()> {
    let level = a.level.unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("level must lie in (0, 1), got {level}")));
    }
    let stores = chain_dirs(&a.dirs)?.iter().map(|d| ChainStore::read(d)).collect::<Result<Vec<_>>>()?;
    let (p, q) = (stores[0].p, stores[0].q);
    let truth = match &a.truth {
        Some(f) => {
            let mut t = Parameters::simulation_truth(p, q);
            io::apply_params_kv(&mut t, &io::read_kv(Path::new(f))?)?;
            Some(t)
        }
        None => None,
    };
    let summary = summarize(&stores, truth.as_ref(), level)?;
    let text = match a.format.as_deref().unwrap_or("text") {
        "text" => summary.to_text(),
        "csv" => summary.to_csv()?,
        "json" => summary.to_json()?,
        other => return Err(Error::Validation(format!("unknown format `{other}`"))),
    };
    match a.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn backtest(a: BacktestArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let sampler = resolve_sampler(&mut s, a.sampler)?;
    // realized covariances score every variant, so they are always required
    let data = resolve_data(&mut s, a.data, true)?;
    let window = s.get("window", a.window, 1000usize)?;
    let horizon = s.get("horizon", a.horizon, 100usize)?;
    let targets_raw = s.get("targets", a.targets, "0.05,0.1,0.15".to_string())?;
    let mu_targets = targets_raw
        .split(',')
        .map(|v| io::parse_f64("targets", v.trim()))
        .collect::<Result<Vec<f64>>>()?;
    let r_f = s.get("rf", a.rf, 0.0)?;
    let refit_burn = s.get("refit-burn", a.refit_burn, 500usize)?;
    let vol = match s.get("vol", a.vol, "lognormal".to_string())?.as_str() {
        "lognormal" => VolForecast::Lognormal,
        "naive" => VolForecast::Naive,
        other => return Err(Error::Validation(format!("unknown volatility forecast `{other}`"))),
    };
    let out = PathBuf::from(s.required::<String>("out", a.out)?);
    let settings = s.finish()?;

    let priors = build_priors(sampler.priors_file.as_deref(), data.p(), data.q())?;
    let config = BacktestConfig {
        variant: sampler.variant,
        window,
        horizon,
        mu_targets,
        r_f,
        chain: sampler.config,
        refit_burn,
        vol,
    };
    let result = rolling_backtest(&data, &priors, &config)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("weights.csv"), result.weights_csv(&data.tickers)?)?;
    fs::write(out.join("cumulative.csv"), result.cumulative_csv()?)?;
    let score: Vec<String> = result.score().iter().map(|&v| io::fmt_f64(v)).collect();
    write_manifest(&out, "backtest", &settings, serde_json::json!({ "score": score }))
}

fn check(a: CheckArgs) -> Result<()> {
    let raw = a.suite.unwrap_or_else(|| "all".into());
    let suites: Vec<Suite> = if raw == "all" {
        Suite::ALL.to_vec()
    } else {
        raw.split(',').map(|v| v.trim().parse()).collect::<Result<_>>()?
    };
    let json = match a.format.as_deref().unwrap_or("text") {
        "text" => false,
        "json" => true,
        other => return Err(Error::Validation(format!("unknown format `{other}`"))),
    };
    let seed = a.seed.unwrap_or(1);
    let mut results = Vec::new();
    for suite in suites {
        let r = run_suite(suite, seed)?;
        if !json {
            for c in &r {
                println!("{} {:<12} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.suite, c.name, c.detail);
            }
        }
        results.extend(r);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    if json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        println!("{}/{} checks passed", results.len() - failed, results.len());
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} check(s) failed")));
    }
    Ok(())
}
