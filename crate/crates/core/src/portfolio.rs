//! One-step-ahead forecasts, minimum-variance weights at a target return and
//! rolling-window backtests scored by cumulative realized variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::Problem;
use crate::driver::{Chain, ChainConfig, ChainStore};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg;
use crate::types::{Dataset, LatentState, ModelConfig, PriorSpec, Variant};

/// How the next-period variance `E[exp(h_{T+1})]` is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolForecast {
    /// Lognormal mean `exp(m + s^2 / 2)` of the one-step transition.
    #[default]
    Lognormal,
    /// `exp(m)`, ignoring the transition noise.
    Naive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub m: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Posterior-mean forecast of the next period's return mean and covariance,
/// averaging the closed-form one-step moments over the retained draws.
pub fn forecast_moments(store: &ChainStore, vol: VolForecast) -> Result<Forecast> {
    let n = store.n_draws();
    if n == 0 {
        return Err(Error::validation("cannot forecast from an empty chain"));
    }
    let (p, q) = (store.p, store.q);
    let mut m = DVector::zeros(p);
    let mut sigma = DMatrix::zeros(p, p);
    for i in 0..n {
        let params = store.params_at(i)?;
        let row = store.terminal.row(i);
        let var = DVector::from_fn(p + q, |j, _| {
            let mu = params.mu[j];
            let mean = mu + params.phi[j] * (row[j] - mu);
            match vol {
                VolForecast::Lognormal => (mean + 0.5 * params.sigma_eta[j].powi(2)).exp(),
                VolForecast::Naive => mean.exp(),
            }
        });
        let f_next = DVector::from_fn(q, |k, _| params.gamma[k] + params.psi[k] * (row[p + q + k] - params.gamma[k]));
        m += &params.beta * f_next;
        let scaled = &params.beta * DMatrix::from_diagonal(&var.rows(p, q));
        sigma += scaled * params.beta.transpose();
        for a in 0..p {
            sigma[(a, a)] += var[a];
        }
    }
    m /= n as f64;
    sigma /= n as f64;
    Ok(Forecast { m, sigma: linalg::symmetrize(&sigma) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub w: DVector<f64>,
    pub cash: f64,
}

/// Minimum-variance risky weights achieving expected return `mu_target`
/// with the remainder in the risk-free asset.
pub fn optimal_weights(m: &DVector<f64>, sigma: &DMatrix<f64>, r_f: f64, mu_target: f64) -> Result<Weights> {
    let p = m.len();
    if sigma.shape() != (p, p) {
        return Err(Error::validation("forecast covariance does not match the mean"));
    }
    let excess = m.add_scalar(-r_f);
    if excess.norm() < 1e-12 {
        return Err(Error::validation("expected excess returns are all zero"));
    }
    let chol = linalg::cholesky(sigma)?;
    let dir = chol.solve(&excess);
    let w = &dir * ((mu_target - r_f) / excess.dot(&dir));
    let cash = 1.0 - w.sum();
    Ok(Weights { w, cash })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub variant: Variant,
    pub window: usize,
    pub horizon: usize,
    pub mu_targets: Vec<f64>,
    pub r_f: f64,
    /// Chain settings of the first fit.
    pub chain: ChainConfig,
    /// Burn-in of every later, warm-started refit.
    pub refit_burn: usize,
    pub vol: VolForecast,
}

/// One forecast date.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestDay {
    /// Index of the forecast period in the full dataset.
    pub t: usize,
    pub date: String,
    pub forecast: Forecast,
    /// One entry per target.
    pub weights: Vec<Weights>,
    /// `w' W_{t} w` per target with `W_t` the realized covariance.
    pub realized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backtest {
    pub mu_targets: Vec<f64>,
    pub days: Vec<BacktestDay>,
}

impl Backtest {
    /// Running sums of the realized variances, one row per day.
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.mu_targets.len()];
        self.days
            .iter()
            .map(|d| {
                for (a, r) in acc.iter_mut().zip(&d.realized) {
                    *a += r;
                }
                acc.clone()
            })
            .collect()
    }

    /// Final cumulative score per target.
    pub fn score(&self) -> Vec<f64> {
        self.cumulative().pop().unwrap_or_else(|| vec![0.0; self.mu_targets.len()])
    }

    /// Long-format weights: `date,target,<tickers...>,cash`.
    pub fn weights_csv(&self, tickers: &[String]) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["date".to_string(), "target".to_string()];
        header.extend(tickers.iter().cloned());
        header.push("cash".to_string());
        wtr.write_record(&header)?;
        for day in &self.days {
            for (target, w) in self.mu_targets.iter().zip(&day.weights) {
                let mut row = vec![day.date.clone(), fmt_f64(*target)];
                row.extend(w.w.iter().map(|&v| fmt_f64(v)));
                row.push(fmt_f64(w.cash));
                wtr.write_record(&row)?;
            }
        }
        into_string(wtr)
    }

    /// `date,<one cumulative column per target>`.
    pub fn cumulative_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["date".to_string()];
        header.extend(self.mu_targets.iter().map(|m| format!("target_{}", fmt_f64(*m))));
        wtr.write_record(&header)?;
        for (day, cum) in self.days.iter().zip(self.cumulative()) {
            let mut row = vec![day.date.clone()];
            row.extend(cum.iter().map(|&v| fmt_f64(v)));
            wtr.write_record(&row)?;
        }
        into_string(wtr)
    }
}

fn into_string(wtr: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Latent state of the next window: drop the oldest period, repeat the last.
fn shift_state(state: &LatentState) -> LatentState {
    let shift = |m: &DMatrix<f64>| {
        let n = m.nrows();
        let mut out = m.clone();
        for t in 0..n - 1 {
            out.set_row(t, &m.row(t + 1));
        }
        out
    };
    LatentState { h: shift(&state.h), f: shift(&state.f) }
}

/// Rolling one-step forecasts over the last `horizon` periods. The forecast
/// for period `t` uses the `window` periods before it and is scored against
/// the realized covariance of period `t`. Every refit after the first starts
/// from the previous fit's final state.
pub fn rolling_backtest(data: &Dataset, priors: &PriorSpec, config: &BacktestConfig) -> Result<Backtest> {
    let (n, p, q) = (data.t(), data.p(), data.q());
    let (window, horizon) = (config.window, config.horizon);
    if window == 0 || horizon == 0 {
        return Err(Error::validation("window and horizon must be positive"));
    }
    if window + horizon > n {
        return Err(Error::validation(format!("window {window} + horizon {horizon} exceeds the {n} periods available")));
    }
    if config.mu_targets.is_empty() {
        return Err(Error::validation("at least one target return is required"));
    }
    let w = data
        .w
        .as_ref()
        .ok_or_else(|| Error::validation("backtests are scored with realized covariances; none were loaded"))?;
    let model = ModelConfig::new(p, q, window, config.variant)?;
    let mut days = Vec::with_capacity(horizon);
    let mut warm = None;
    for d in 0..horizon {
        let t = n - horizon + d;
        let mut window_data = data.window(t - window, window);
        if !config.variant.uses_rcov() {
            window_data.w = None;
        }
        let problem = Problem::new(model, priors.clone(), window_data)?;
        let mut chain_cfg = ChainConfig { thin: 0, checkpoint_every: 0, ..config.chain.clone() };
        let mut runner = match warm.take() {
            None => Chain::new(&problem, &chain_cfg, d)?,
            Some((params, state)) => {
                chain_cfg.n_burn = config.refit_burn;
                Chain::warm(&problem, &chain_cfg, d, params, shift_state(&state))?
            }
        };
        let total = runner.total_sweeps();
        runner.run_until(total, None)?;
        let store = runner.finish();
        let forecast = forecast_moments(&store, config.vol)?;
        let weights = config
            .mu_targets
            .iter()
            .map(|&mu| optimal_weights(&forecast.m, &forecast.sigma, config.r_f, mu))
            .collect::<Result<Vec<_>>>()?;
        let realized = weights.iter().map(|wt| (wt.w.transpose() * &w[t] * &wt.w)[0]).collect();
        log::info!("backtest day {}/{horizon} ({}) done", d + 1, data.dates[t]);
        days.push(BacktestDay { t, date: data.dates[t].clone(), forecast, weights, realized });
        warm = Some((store.last_params, store.last_state));
    }
    Ok(Backtest { mu_targets: config.mu_targets.clone(), days })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::param_names;
    use crate::samplers::{McmcTuning, SweepTallies};
    use crate::simulate::generate;
    use crate::types::Parameters;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(params: &[Parameters], terminal: DMatrix<f64>) -> ChainStore {
        let (p, q) = (params[0].p(), params[0].q());
        let rows: Vec<f64> = params.iter().flat_map(crate::driver::flatten).collect();
        ChainStore {
            variant: Variant::Fmrsv,
            p,
            q,
            t: 1,
            chain: 0,
            config: ChainConfig::default(),
            names: param_names(p, q),
            draws: DMatrix::from_row_slice(params.len(), param_names(p, q).len(), &rows),
            terminal,
            h_mean: DMatrix::zeros(1, p + q),
            f_mean: DMatrix::zeros(1, q),
            paths: Vec::new(),
            tallies: SweepTallies::default(),
            last_params: params[0].clone(),
            last_state: LatentState { h: DMatrix::zeros(1, p + q), f: DMatrix::zeros(1, q) },
        }
    }

    #[test]
    fn two_asset_hand_computation() {
        let mut params = Parameters::zeros(2, 1);
        params.beta = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        params.gamma[0] = 0.2;
        params.psi[0] = 0.5;
        params.mu = DVector::from_vec(vec![-1.0, -2.0, 0.0]);
        params.phi = DVector::from_vec(vec![0.5, 0.8, 0.9]);
        params.sigma_eta = DVector::from_vec(vec![0.2, 0.4, 0.6]);
        let terminal = DMatrix::from_row_slice(1, 4, &[0.0, -1.0, 1.0, 0.6]);
        let store = store_with(&[params], terminal);
        let fc = forecast_moments(&store, VolForecast::Lognormal).unwrap();
        // f_next = 0.2 + 0.5 * 0.4 = 0.4
        assert!((fc.m[0] - 0.4).abs() < 1e-15 && (fc.m[1] - 0.2).abs() < 1e-15);
        let v1 = (-0.5f64 + 0.02).exp();
        let v2 = (-2.0 + 0.8 + 0.08f64).exp();
        let v3 = (0.9 + 0.18f64).exp();
        assert!((fc.sigma[(0, 0)] - (v3 + v1)).abs() < 1e-12);
        assert!((fc.sigma[(1, 1)] - (0.25 * v3 + v2)).abs() < 1e-12);
        assert!((fc.sigma[(0, 1)] - 0.5 * v3).abs() < 1e-12);
        let naive = forecast_moments(&store, VolForecast::Naive).unwrap();
        assert!((naive.sigma[(0, 1)] - 0.5 * 0.9f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn no_persistence_gives_loading_times_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<Parameters> = (0..5)
            .map(|_| {
                let mut p = Parameters::simulation_truth(3, 2);
                p.psi.fill(0.0);
                p.beta = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>());
                p.gamma = DVector::from_fn(2, |_, _| rng.random::<f64>());
                p
            })
            .collect();
        let terminal = DMatrix::from_fn(5, 7, |_, _| rng.random::<f64>());
        let fc = forecast_moments(&store_with(&draws, terminal), VolForecast::Lognormal).unwrap();
        let want = draws.iter().map(|p| &p.beta * &p.gamma).fold(DVector::zeros(3), |a, b| a + b) / 5.0;
        assert!((fc.m - want).amax() < 1e-14);
    }

    #[test]
    fn empty_store_is_an_error() {
        let params = Parameters::simulation_truth(2, 1);
        let mut store = store_with(&[params], DMatrix::zeros(1, 4));
        store.draws = DMatrix::zeros(0, store.names.len());
        assert!(forecast_moments(&store, VolForecast::Lognormal).is_err());
    }

    #[test]
    fn closed_forms() {
        let w = optimal_weights(&DVector::from_element(1, 0.05), &DMatrix::from_element(1, 1, 3.0), 0.01, 0.03).unwrap();
        let want = (0.03 - 0.01) / (0.05 - 0.01);
        assert!((w.w[0] - want).abs() <= 4.0 * f64::EPSILON * want);
        let mut m = DVector::zeros(3);
        m[0] = 1.0;
        let w = optimal_weights(&m, &DMatrix::identity(3, 3), 0.0, 1.0).unwrap();
        assert_eq!(w.w, m);
        assert!(optimal_weights(&DVector::from_element(3, 0.02), &DMatrix::identity(3, 3), 0.02, 0.1).is_err());
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.1
    }

    /// No random feasible portfolio has lower variance than the closed form.
    #[test]
    fn weights_beat_random_feasible_portfolios() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = 5;
        let sigma = random_spd(&mut rng, p);
        let m = DVector::from_fn(p, |_, _| rng.random::<f64>() * 0.1);
        let (r_f, target) = (0.01, 0.06);
        let best = optimal_weights(&m, &sigma, r_f, target).unwrap().w;
        let best_var = (best.transpose() * &sigma * &best)[0];
        let excess = m.add_scalar(-r_f);
        for _ in 0..100_000 {
            let mut v = DVector::from_fn(p, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            // project onto the return constraint
            v += &excess * ((target - r_f - excess.dot(&v)) / excess.norm_squared());
            assert!((v.transpose() * &sigma * &v)[0] >= best_var - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn return_constraint_scaling_and_homogeneity(seed in any::<u64>(), p in 1usize..7, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = random_spd(&mut rng, p);
            let m = DVector::from_fn(p, |_, _| rng.random::<f64>() * 0.2 - 0.05);
            let r_f = 0.01;
            let target = 0.05;
            prop_assume!(m.add_scalar(-r_f).norm() > 1e-6);
            let w = optimal_weights(&m, &sigma, r_f, target).unwrap();
            let achieved = w.w.dot(&m) + w.cash * r_f;
            prop_assert!((achieved - target).abs() < 1e-10);
            let scaled = optimal_weights(&m, &(&sigma * c), r_f, target).unwrap();
            prop_assert!((scaled.w - &w.w).amax() < 1e-12 * w.w.amax().max(1.0));
            let doubled = optimal_weights(&m, &sigma, r_f, r_f + 2.0 * (target - r_f)).unwrap();
            prop_assert!((doubled.w - &w.w * 2.0).amax() < 1e-12 * w.w.amax().max(1.0));
        }
    }

    fn backtest_config(variant: Variant, horizon: usize) -> BacktestConfig {
        BacktestConfig {
            variant,
            window: 40,
            horizon,
            mu_targets: vec![0.01, 0.05],
            r_f: 0.0,
            chain: ChainConfig {
                n_burn: 10,
                n_keep: 20,
                thin: 1,
                seed: 5,
                n_chains: 1,
                checkpoint_every: 0,
                tuning: McmcTuning { n_blocks: Some(8), ..Default::default() },
            },
            refit_burn: 5,
            vol: VolForecast::Lognormal,
        }
    }

    fn data(n: usize) -> Dataset {
        let cfg = ModelConfig::new(3, 1, n, Variant::Fmrsv).unwrap();
        let mut params = Parameters::simulation_truth(3, 1);
        params.gamma.fill(0.3);
        generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(8)).unwrap().0
    }

    #[test]
    fn cumulative_score_is_nondecreasing() {
        let data = data(45);
        let bt = rolling_backtest(&data, &PriorSpec::vague(3, 1), &backtest_config(Variant::Fmsv, 4)).unwrap();
        assert_eq!(bt.days.len(), 4);
        assert_eq!(bt.days[3].t, 44);
        let cum = bt.cumulative();
        for pair in cum.windows(2) {
            for k in 0..2 {
                assert!(pair[1][k] >= pair[0][k]);
            }
        }
        assert_eq!(bt.weights_csv(&data.tickers).unwrap().lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn horizon_one_is_a_single_fit() {
        let data = data(45);
        let cfg = backtest_config(Variant::Fmrsv, 1);
        let bt = rolling_backtest(&data, &PriorSpec::vague(3, 1), &cfg).unwrap();
        let cfg_model = ModelConfig::new(3, 1, 40, Variant::Fmrsv).unwrap();
        let problem = Problem::new(cfg_model, PriorSpec::vague(3, 1), data.window(4, 40)).unwrap();
        let chain_cfg = ChainConfig { thin: 0, ..cfg.chain.clone() };
        let store = crate::driver::run_chain(&problem, &chain_cfg, 0, None).unwrap();
        assert_eq!(bt.days[0].forecast, forecast_moments(&store, VolForecast::Lognormal).unwrap());
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let data = data(45);
        assert!(rolling_backtest(&data, &PriorSpec::vague(3, 1), &backtest_config(Variant::Fmrsv, 6)).is_err());
    }
}
