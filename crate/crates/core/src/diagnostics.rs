//! Posterior summaries: means, central intervals, inefficiency factors and
//! effective sample sizes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::driver::{flatten, ChainStore};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::types::Parameters;

/// Minimum number of draws for an autocorrelation-based estimate.
pub const MIN_DRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inefficiency {
    /// `1 + 2 * sum of autocorrelations` up to the truncation lag.
    pub factor: f64,
    /// `n / factor`.
    pub ess: f64,
    /// Last lag included in the sum.
    pub lag: usize,
}

/// Sample autocorrelations at lags `0..=max_lag` (biased normalization).
pub fn autocorrelations(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0 = dev.iter().map(|d| d * d).sum::<f64>();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|g| dev[..n - g].iter().zip(&dev[g..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect()
}

/// Inefficiency factor with the sum truncated before the first negative
/// autocorrelation and capped at `n / 3` lags.
pub fn inefficiency_factor(x: &[f64]) -> Result<Inefficiency> {
    let n = x.len();
    if n < MIN_DRAWS {
        return Err(Error::validation(format!("inefficiency factor needs at least {MIN_DRAWS} draws, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("draws contain non-finite values"));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    if x.iter().all(|v| *v == x[0]) || x.iter().all(|v| (v - mean).abs() == 0.0) {
        return Err(Error::validation("draws have zero variance"));
    }
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0 = dev.iter().map(|d| d * d).sum::<f64>();
    let mut sum = 0.0;
    let mut lag = 0;
    for g in 1..=n / 3 {
        let r = dev[..n - g].iter().zip(&dev[g..]).map(|(a, b)| a * b).sum::<f64>() / c0;
        if r < 0.0 {
            break;
        }
        sum += r;
        lag = g;
    }
    let factor = 1.0 + 2.0 * sum;
    Ok(Inefficiency { factor, ess: n as f64 / factor, lag })
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = prob.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], prob: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, prob)
}

/// Potential scale reduction of several equally long chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    if m < 2 || n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::validation("R-hat needs at least two chains of equal length >= 2"));
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        return Err(Error::validation("R-hat of chains with zero within-chain variance"));
    }
    let var = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Ok((var / w).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// Missing for fewer than [`MIN_DRAWS`] draws or constant draws.
    pub inefficiency: Option<f64>,
    pub ess: Option<f64>,
    pub truth: Option<f64>,
    pub covered: Option<bool>,
    /// Present when more than one chain was pooled.
    pub r_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_draws: usize,
    pub n_chains: usize,
    pub level: f64,
    pub rows: Vec<ParamSummary>,
}

/// Parameter groups reported in the simulation-study tables (the variance
/// parameters and `delta` are summarized separately there).
pub const TABLE_GROUPS: [&str; 7] = ["alpha", "beta", "psi", "gamma", "mu", "phi", "rho"];

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl Summary {
    /// `(covered, with_truth)` over rows accepted by `keep`.
    pub fn coverage(&self, keep: impl Fn(&str) -> bool) -> (usize, usize) {
        let flagged = self.rows.iter().filter(|r| keep(&r.name)).filter_map(|r| r.covered);
        flagged.fold((0, 0), |(c, n), ok| (c + ok as usize, n + 1))
    }

    pub fn row(&self, name: &str) -> Option<&ParamSummary> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let with_truth = self.rows.iter().any(|r| r.truth.is_some());
        let with_rhat = self.rows.iter().any(|r| r.r_hat.is_some());
        let mut out = String::new();
        let _ = write!(out, "{:<14} {:>11}", "parameter", "mean");
        if with_truth {
            let _ = write!(out, " {:>9}", "true");
        }
        let _ = write!(out, " {:>25} {:>8}", format!("{:.0}% interval", self.level * 100.0), "IF");
        if with_rhat {
            let _ = write!(out, " {:>7}", "R-hat");
        }
        if with_truth {
            let _ = write!(out, " {:>7}", "covered");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<14} {:>11.4}", r.name, r.mean);
            if with_truth {
                match r.truth {
                    Some(v) => write!(out, " {v:>9.4}"),
                    None => write!(out, " {:>9}", "-"),
                }
                .ok();
            }
            let interval = format!("[{:.4}, {:.4}]", r.lower, r.upper);
            let ineff = r.inefficiency.map_or("-".to_string(), |v| format!("{v:.1}"));
            let _ = write!(out, " {interval:>25} {ineff:>8}");
            if with_rhat {
                let _ = write!(out, " {:>7}", r.r_hat.map_or("-".to_string(), |v| format!("{v:.3}")));
            }
            if with_truth {
                let flag = match r.covered {
                    Some(true) => "yes",
                    Some(false) => "NO",
                    None => "-",
                };
                let _ = write!(out, " {flag:>7}");
            }
            out.push('\n');
        }
        let (c, n) = self.coverage(|name| TABLE_GROUPS.contains(&group_of(name)));
        if n > 0 {
            let (ca, na) = self.coverage(|_| true);
            let _ = writeln!(out, "coverage: {c}/{n} table parameters, {ca}/{na} all parameters");
        }
        let _ = writeln!(out, "draws: {} from {} chain(s)", self.n_draws, self.n_chains);
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["parameter", "mean", "sd", "lower", "upper", "inefficiency", "ess", "truth", "covered", "r_hat"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), fmt_f64);
        for r in &self.rows {
            wtr.write_record([
                r.name.clone(),
                fmt_f64(r.mean),
                fmt_f64(r.sd),
                fmt_f64(r.lower),
                fmt_f64(r.upper),
                opt(r.inefficiency),
                opt(r.ess),
                opt(r.truth),
                r.covered.map_or(String::new(), |c| c.to_string()),
                opt(r.r_hat),
            ])?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Summary of one parameter from the draws of each chain.
pub fn summarize_draws(name: &str, chains: &[Vec<f64>], level: f64, truth: Option<f64>) -> Result<ParamSummary> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::validation(format!("no draws for {name}")));
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let sd = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lower = quantile_sorted(&sorted, tail);
    let upper = quantile_sorted(&sorted, 1.0 - tail);
    // effective sizes add across independent chains
    let per_chain: Vec<_> = chains.iter().map(|c| inefficiency_factor(c).ok()).collect();
    let (inefficiency, ess) = if per_chain.iter().all(Option::is_some) {
        let ess: f64 = per_chain.iter().flatten().map(|i| i.ess).sum();
        (Some(n / ess), Some(ess))
    } else {
        (None, None)
    };
    let r_hat = if chains.len() > 1 { gelman_rubin(chains).ok() } else { None };
    Ok(ParamSummary {
        name: name.to_string(),
        mean,
        sd,
        lower,
        upper,
        inefficiency,
        ess,
        truth,
        covered: truth.map(|v| lower <= v && v <= upper),
        r_hat,
    })
}

/// Summarizes pooled chains. Parameters fixed by the model variant (for
/// example `rho` without leverage or `delta` without realized covariances)
/// are left out.
pub fn summarize(stores: &[ChainStore], truth: Option<&Parameters>, level: f64) -> Result<Summary> {
    let first = stores.first().ok_or_else(|| Error::validation("nothing to summarize"))?;
    if stores.iter().any(|s| s.names != first.names) {
        return Err(Error::validation("chains have different parameters"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("interval level must be in (0, 1)"));
    }
    let truth_vec = match truth {
        Some(t) if t.p() == first.p && t.q() == first.q => Some(flatten(t)),
        Some(_) => return Err(Error::validation("truth dimensions do not match the chain")),
        None => None,
    };
    let n_draws: usize = stores.iter().map(ChainStore::n_draws).sum();
    let mut rows = Vec::new();
    if n_draws > 0 {
        for (j, name) in first.names.iter().enumerate() {
            let group = group_of(name);
            if (group == "rho" && !first.variant.has_leverage()) || (group == "delta" && !first.variant.uses_rcov()) {
                continue;
            }
            let chains: Vec<Vec<f64>> = stores
                .iter()
                .filter(|s| s.n_draws() > 0)
                .map(|s| s.draws.column(j).iter().copied().collect())
                .collect();
            rows.push(summarize_draws(name, &chains, level, truth_vec.as_ref().map(|t| t[j]))?);
        }
    }
    Ok(Summary { n_draws, n_chains: stores.len(), level, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ar1(a: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        let sd = (1.0 - a * a).sqrt();
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                x = a * x + sd * e;
                x
            })
            .collect()
    }

    #[test]
    fn iid_inefficiency_near_one() {
        let ineff = inefficiency_factor(&ar1(0.0, 100_000, 1)).unwrap();
        assert!((0.9..=1.1).contains(&ineff.factor), "{ineff:?}");
    }

    #[test]
    fn ar1_inefficiency_matches_spectrum() {
        for a in [0.5, 0.9] {
            let ineff = inefficiency_factor(&ar1(a, 200_000, 7)).unwrap();
            let want = (1.0 + a) / (1.0 - a);
            assert!((ineff.factor / want - 1.0).abs() < 0.1, "a={a}: {} vs {want}", ineff.factor);
        }
    }

    #[test]
    fn near_constant_is_large_not_a_crash() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = vec![5.0; 1000];
        for (i, v) in x.iter_mut().enumerate() {
            // slow drift dominates a tiny white-noise component
            *v += 1e-12 * (i as f64) + 1e-15 * rng.random::<f64>();
        }
        let ineff = inefficiency_factor(&x).unwrap();
        assert!(ineff.factor > 50.0, "{ineff:?}");
        assert!(inefficiency_factor(&[1.0; 50]).is_err());
        assert!(inefficiency_factor(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let x = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert_eq!(quantile(&x, 0.5), 2.5);
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn single_draw_summary() {
        let s = summarize_draws("mu.1", &[vec![0.7]], 0.95, Some(0.7)).unwrap();
        assert_eq!((s.mean, s.lower, s.upper), (0.7, 0.7, 0.7));
        assert_eq!(s.covered, Some(true));
        assert!(s.inefficiency.is_none());
    }

    #[test]
    fn uniform_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let s = summarize_draws("u", &[x], 0.95, None).unwrap();
        assert!((s.lower - 0.025).abs() < 0.01 && (s.upper - 0.975).abs() < 0.01, "{s:?}");
    }

    #[test]
    fn rhat_of_agreeing_and_disagreeing_chains() {
        let same = vec![ar1(0.3, 5000, 1), ar1(0.3, 5000, 2)];
        assert!(gelman_rubin(&same).unwrap() < 1.01);
        let shifted: Vec<f64> = ar1(0.3, 5000, 3).iter().map(|v| v + 3.0).collect();
        assert!(gelman_rubin(&[same[0].clone(), shifted]).unwrap() > 1.5);
    }

    #[test]
    fn formats_agree_on_rows() {
        let rows = vec![
            summarize_draws("beta.1.1", &[ar1(0.2, 200, 1)], 0.95, Some(0.0)).unwrap(),
            summarize_draws("sigma_eta.1", &[ar1(0.2, 200, 2)], 0.95, Some(10.0)).unwrap(),
        ];
        let s = Summary { n_draws: 200, n_chains: 1, level: 0.95, rows };
        assert_eq!(s.coverage(|_| true), (1, 2));
        let text = s.to_text();
        assert!(text.contains("coverage: 1/1 table parameters, 1/2 all parameters"), "{text}");
        assert_eq!(s.to_csv().unwrap().lines().count(), 3);
        let back: Summary = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].covered, Some(false));
    }
}
