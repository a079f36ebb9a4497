//! Block sampler for the idiosyncratic log-volatilities.
//!
//! For each asset the path is split into blocks. Within a block the exact
//! log conditional is approximated by a second-order expansion around its
//! mode, which turns the block into a linear Gaussian state-space model with
//! pseudo-observations; the mode is found by repeated disturbance smoothing,
//! a proposal is drawn with the simulation smoother and corrected by a
//! Metropolis–Hastings step.

use rand::Rng;

use super::{mh_accept, MCache, McmcTuning, Tally};
use crate::density::{Problem, H_LIMIT};
use crate::error::Result;
use crate::linalg::small;
use crate::state_space::ScalarStateSpace;
use crate::types::{LatentState, Parameters};

/// Curvatures below this fall back to the expected information.
const MIN_CURVATURE: f64 = 1e-10;
const MODE_TOL: f64 = 1e-8;

/// Per-period pieces of the exact conditional of one asset's log-volatility.
///
/// Changing `h_{it}` moves `X_t` by a rank-one term along `e_i`, so
/// `log |X_t|` and `(X_t^{-1})_{ii}` follow from their values at the current
/// state in closed form.
pub(crate) struct IdioTerms {
    d_cur: Vec<f64>,
    h_cur: Vec<f64>,
    w_ii: Vec<f64>,
    r2: Vec<f64>,
    s0: f64,
    k0: f64,
    rcov: bool,
}

impl IdioTerms {
    pub fn new(problem: &Problem, params: &Parameters, state: &LatentState, cache: &MCache, i: usize) -> Result<Self> {
        let n = problem.t();
        let q = params.q();
        let rcov = problem.rcov.is_some();
        let beta_i: Vec<f64> = params.beta.row(i).iter().copied().collect();
        let mut buf = vec![0.0; q * q];
        let mut sol = vec![0.0; q];
        let mut d_cur = vec![0.0; n];
        let mut w_ii = vec![0.0; n];
        let mut r2 = vec![0.0; n];
        for t in 0..n {
            let h = state.h[(t, i)];
            if rcov {
                cache.factor(t, &mut buf)?;
                sol.copy_from_slice(&beta_i);
                small::chol_solve(&buf, q, &mut sol);
                let quad: f64 = beta_i.iter().zip(&sol).map(|(a, b)| a * b).sum();
                d_cur[t] = (-h).exp() - (-2.0 * h).exp() * quad;
                w_ii[t] = problem.rcov.as_ref().map_or(0.0, |r| r.w_inv[t][(i, i)]);
            }
            let resid = problem.data.y[(t, i)] - params.beta.row(i).dot(&state.f.row(t));
            r2[t] = resid * resid;
        }
        let h_cur = state.h.column(i).iter().copied().collect();
        Ok(IdioTerms { d_cur, h_cur, w_ii, r2, s0: params.s0(), k0: params.k0(), rcov })
    }

    /// `(1 + Delta d, d(h))` for the rank-one update at `t`.
    fn update(&self, t: usize, h: f64) -> (f64, f64) {
        let den = 1.0 + (h.exp() - self.h_cur[t].exp()) * self.d_cur[t];
        (den, self.d_cur[t] / den)
    }

    /// Exact log conditional contribution at `t`, relative to the current
    /// `log |X_t|`.
    pub fn l(&self, t: usize, h: f64) -> f64 {
        let mut v = -0.5 * (h + self.r2[t] * (-h).exp());
        if self.rcov {
            let (den, _) = self.update(t, h);
            if !(den > 0.0) {
                return f64::NEG_INFINITY;
            }
            v += 0.5 * self.s0 * den.ln() - 0.5 * self.k0 * self.w_ii[t] * h.exp();
        }
        v
    }

    /// First derivative, second derivative and expected information at `t`.
    pub fn derivs(&self, t: usize, h: f64) -> (f64, f64, f64) {
        let e = h.exp();
        let mut l1 = -0.5 + 0.5 * self.r2[t] / e;
        let mut l2 = -0.5 * self.r2[t] / e;
        let mut info = 0.5;
        if self.rcov {
            let (_, d) = self.update(t, h);
            let u = d * e;
            l1 += 0.5 * self.s0 * u - 0.5 * self.k0 * self.w_ii[t] * e;
            l2 += 0.5 * self.s0 * (u - u * u) - 0.5 * self.k0 * self.w_ii[t] * e;
            info += 0.5 * self.s0 * u * u;
        }
        (l1, l2, info)
    }

    fn commit(&mut self, t: usize, h: f64) {
        let (_, d) = self.update(t, h);
        self.d_cur[t] = d;
        self.h_cur[t] = h;
    }
}

/// Gaussian approximation of one block around its (approximate) mode.
#[derive(Debug, Clone)]
pub struct IdioVolApprox {
    /// Expansion point.
    pub mode: Vec<f64>,
    /// First derivative of the exact log conditional at the expansion point.
    pub slope: Vec<f64>,
    /// Curvature used by the proposal (negative second derivative, or the
    /// expected information where that is not positive).
    pub curvature: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub ssm: ScalarStateSpace,
    pub fallbacks: u64,
    /// The mode search kept decreasing the exact target.
    pub diverged: bool,
}

impl IdioVolApprox {
    /// Log proposal density up to terms shared with the exact target.
    pub fn log_q(&self, h: &[f64]) -> f64 {
        h.iter()
            .enumerate()
            .map(|(k, &v)| {
                let dh = v - self.mode[k];
                self.slope[k] * dh - 0.5 * self.curvature[k] * dh * dh
            })
            .sum()
    }
}

struct Block<'a> {
    params: &'a Parameters,
    state: &'a LatentState,
    terms: &'a IdioTerms,
    i: usize,
    s: usize,
    e: usize,
}

impl Block<'_> {
    fn ar(&self) -> (f64, f64, f64) {
        let i = self.i;
        (self.params.mu[i], self.params.phi[i], self.params.sigma_eta[i])
    }

    fn next_h(&self) -> Option<f64> {
        (self.e + 1 < self.state.h.nrows()).then(|| self.state.h[(self.e + 1, self.i)])
    }

    fn build(&self, mode: &[f64]) -> IdioVolApprox {
        let (mu, phi, sig) = self.ar();
        let len = self.e - self.s + 1;
        let mut ssm = ScalarStateSpace::with_len(len);
        let mut slope = vec![0.0; len];
        let mut curvature = vec![0.0; len];
        let mut y_hat = vec![0.0; len];
        let mut fallbacks = 0;
        for k in 0..len {
            let t = self.s + k;
            let (l1, l2, info) = self.terms.derivs(t, mode[k]);
            let mut kappa = -l2;
            if !(kappa > MIN_CURVATURE) {
                kappa = info;
                fallbacks += 1;
            }
            slope[k] = l1;
            curvature[k] = kappa;
            let (v, y) = match self.next_h().filter(|_| k + 1 == len) {
                Some(next) => {
                    let v = 1.0 / (phi * phi / (sig * sig) + kappa);
                    (v, v * (l1 + kappa * mode[k] + phi / (sig * sig) * (next - (1.0 - phi) * mu)))
                }
                None => {
                    let v = 1.0 / kappa;
                    (v, mode[k] + v * l1)
                }
            };
            y_hat[k] = y;
            ssm.z[k] = 1.0;
            ssm.d[k] = 0.0;
            ssm.g[k] = [v.sqrt(), 0.0];
            ssm.tt[k] = phi;
            ssm.c[k] = (1.0 - phi) * mu;
            ssm.hh[k] = [0.0, sig];
        }
        if self.s == 0 {
            ssm.a1 = mu;
            ssm.p1 = sig * sig / (1.0 - phi * phi);
        } else {
            ssm.a1 = mu + phi * (self.state.h[(self.s - 1, self.i)] - mu);
            ssm.p1 = sig * sig;
        }
        IdioVolApprox { mode: mode.to_vec(), slope, curvature, y_hat, ssm, fallbacks, diverged: false }
    }

    /// Exact log conditional of the block including its AR prior.
    fn log_target(&self, hb: &[f64]) -> f64 {
        let (mu, phi, sig) = self.ar();
        let s2 = sig * sig;
        let mut v: f64 = hb.iter().enumerate().map(|(k, &h)| self.terms.l(self.s + k, h)).sum();
        let mut prev = if self.s == 0 { None } else { Some(self.state.h[(self.s - 1, self.i)]) };
        for &h in hb {
            v += match prev {
                None => -0.5 * (1.0 - phi * phi) * (h - mu).powi(2) / s2,
                Some(hp) => -0.5 * (h - mu - phi * (hp - mu)).powi(2) / s2,
            };
            prev = Some(h);
        }
        if let Some(next) = self.next_h() {
            v -= 0.5 * (next - mu - phi * (hb[hb.len() - 1] - mu)).powi(2) / s2;
        }
        v
    }

    fn approximate(&self, mode_iters: usize) -> Result<IdioVolApprox> {
        let mut mode: Vec<f64> = (self.s..=self.e).map(|t| self.state.h[(t, self.i)]).collect();
        let mut prev_target = self.log_target(&mode);
        let mut decreases = 0;
        let mut diverged = false;
        for _ in 0..mode_iters {
            let approx = self.build(&mode);
            let next = approx.ssm.smooth(&approx.y_hat)?;
            let change = next.iter().zip(&mode).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            mode = next;
            if change < MODE_TOL {
                break;
            }
            let target = self.log_target(&mode);
            if target < prev_target {
                decreases += 1;
                if decreases >= 3 {
                    diverged = true;
                    break;
                }
            } else {
                decreases = 0;
            }
            prev_target = target;
        }
        let mut approx = self.build(&mode);
        approx.diverged = diverged || mode.iter().any(|h| !h.is_finite());
        Ok(approx)
    }
}

/// Approximation used for block `s..=e` (0-based, inclusive) of asset `i` at
/// the current state.
pub fn idio_vol_approximation(
    problem: &Problem,
    params: &Parameters,
    state: &LatentState,
    i: usize,
    (s, e): (usize, usize),
    mode_iters: usize,
) -> Result<IdioVolApprox> {
    let cache = MCache::build(params, &state.h);
    let terms = IdioTerms::new(problem, params, state, &cache, i)?;
    Block { params, state, terms: &terms, i, s, e }.approximate(mode_iters)
}

/// Log conditional of the whole path of asset `i` at `path`, as the sampler
/// evaluates it (up to a constant).
pub(crate) fn path_log_target(problem: &Problem, params: &Parameters, state: &LatentState, i: usize, path: &[f64]) -> Result<f64> {
    let cache = MCache::build(params, &state.h);
    let terms = IdioTerms::new(problem, params, state, &cache, i)?;
    Ok(Block { params, state, terms: &terms, i, s: 0, e: problem.t() - 1 }.log_target(path))
}

/// Updates every idiosyncratic log-volatility path block by block.
pub fn sample_h1<R: Rng + ?Sized>(
    problem: &Problem,
    params: &Parameters,
    state: &mut LatentState,
    knots: &[(usize, usize)],
    tuning: &McmcTuning,
    rng: &mut R,
) -> Result<Tally> {
    let p = params.p();
    let mut tally = Tally::default();
    let mut cache = MCache::build(params, &state.h);
    for i in 0..p {
        let beta_i: Vec<f64> = params.beta.row(i).iter().copied().collect();
        let mut terms = IdioTerms::new(problem, params, state, &cache, i)?;
        for &(s, e) in knots {
            let approx = Block { params, state, terms: &terms, i, s, e }.approximate(tuning.mode_iters)?;
            tally.fallbacks += approx.fallbacks;
            tally.proposed += 1;
            if approx.diverged {
                continue;
            }
            let proposal = approx.ssm.simulation_smoother(&approx.y_hat, rng)?;
            if proposal.iter().any(|h| !(h.abs() <= H_LIMIT)) {
                continue;
            }
            let current: Vec<f64> = (s..=e).map(|t| state.h[(t, i)]).collect();
            let mut log_ratio = approx.log_q(&current) - approx.log_q(&proposal);
            for (k, t) in (s..=e).enumerate() {
                log_ratio += terms.l(t, proposal[k]) - terms.l(t, current[k]);
            }
            if mh_accept(rng, log_ratio) {
                tally.accepted += 1;
                for (k, t) in (s..=e).enumerate() {
                    let old = state.h[(t, i)];
                    let new = proposal[k];
                    cache.rank_one(t, (-new).exp() - (-old).exp(), &beta_i);
                    terms.commit(t, new);
                    state.h[(t, i)] = new;
                }
            }
        }
    }
    Ok(tally)
}
