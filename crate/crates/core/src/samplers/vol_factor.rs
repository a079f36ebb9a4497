//! Block sampler for the factor log-volatilities.
//!
//! With leverage the factor at `t` depends on `h_t` and `h_{t+1}`, so the
//! block log conditional has a tridiagonal curvature. Its expansion
//! `d'(h - m) - (h - m)' Q (h - m) / 2` is rewritten through the bidiagonal
//! factor of `Q` as a pseudo-observation equation whose noise is correlated
//! with the AR disturbance, which the scalar simulation smoother handles
//! directly.

use rand::Rng;

use super::{mh_accept, MCache, McmcTuning, Tally};
use crate::density::{factor_innovation, H2Coeffs, Problem, H_LIMIT};
use crate::error::{Error, Result};
use crate::state_space::ScalarStateSpace;
use crate::types::{LatentState, Parameters};

const MODE_TOL: f64 = 1e-8;

/// Realized-covariance part of the conditional of one factor's
/// log-volatility. `h_{p+k,t}` enters `X_t` only through `e^h b_k b_k'`, so
/// every quantity follows from its value at the current state.
struct FactorTerms {
    u_cur: Vec<f64>,
    h_cur: Vec<f64>,
    wq: Vec<f64>,
    s0: f64,
    k0: f64,
    rcov: bool,
}

impl FactorTerms {
    fn new(problem: &Problem, params: &Parameters, state: &LatentState, cache: &MCache, k: usize) -> Result<Self> {
        let n = problem.t();
        let (p, q) = (params.p(), params.q());
        let mut u_cur = vec![0.0; n];
        let mut wq = vec![0.0; n];
        let mut buf = vec![0.0; q * q];
        let mut col = vec![0.0; q];
        let b = params.beta.column(k);
        if let Some(rcov) = &problem.rcov {
            for t in 0..n {
                let h = state.h[(t, p + k)];
                cache.factor(t, &mut buf)?;
                col.fill(0.0);
                col[k] = 1.0;
                crate::linalg::small::chol_solve(&buf, q, &mut col);
                // b_k' X^{-1} b_k = e^{-h} - e^{-2h} (M^{-1})_kk
                u_cur[t] = (-h).exp() - (-2.0 * h).exp() * col[k];
                wq[t] = b.dot(&(&rcov.w_inv[t] * b));
            }
        }
        let h_cur = state.h.column(p + k).iter().copied().collect();
        Ok(FactorTerms { u_cur, h_cur, wq, s0: params.s0(), k0: params.k0(), rcov: problem.rcov.is_some() })
    }

    fn value(&self, t: usize, h: f64) -> f64 {
        if !self.rcov {
            return 0.0;
        }
        let den = 1.0 + (h.exp() - self.h_cur[t].exp()) * self.u_cur[t];
        if !(den > 0.0) {
            return f64::NEG_INFINITY;
        }
        0.5 * self.s0 * den.ln() - 0.5 * self.k0 * self.wq[t] * h.exp()
    }

    /// Gradient and expected information.
    fn derivs(&self, t: usize, h: f64) -> (f64, f64) {
        if !self.rcov {
            return (0.0, 0.0);
        }
        let e = h.exp();
        let den = 1.0 + (e - self.h_cur[t].exp()) * self.u_cur[t];
        let u = self.u_cur[t] / den * e;
        (0.5 * self.s0 * u - 0.5 * self.k0 * self.wq[t] * e, 0.5 * self.s0 * u * u)
    }

    fn commit(&mut self, t: usize, h: f64) {
        let den = 1.0 + (h.exp() - self.h_cur[t].exp()) * self.u_cur[t];
        self.u_cur[t] /= den;
        self.h_cur[t] = h;
    }
}

/// Gaussian approximation of one block around its (approximate) mode.
#[derive(Debug, Clone)]
pub struct FactorVolApprox {
    pub mode: Vec<f64>,
    /// Gradient `d`, diagonal `A` and sub-diagonal `B` of the expansion.
    pub coeffs: Vec<H2Coeffs>,
    pub y_hat: Vec<f64>,
    pub ssm: ScalarStateSpace,
    pub diverged: bool,
}

impl FactorVolApprox {
    /// `d'(h - m) - (h - m)' Q (h - m) / 2` with `Q` tridiagonal.
    pub fn log_q(&self, h: &[f64]) -> f64 {
        let mut v = 0.0;
        for (t, c) in self.coeffs.iter().enumerate() {
            let x = h[t] - self.mode[t];
            v += c.d * x - 0.5 * c.a * x * x;
            if t > 0 {
                v -= c.b * x * (h[t - 1] - self.mode[t - 1]);
            }
        }
        v
    }
}

struct Block<'a> {
    problem: &'a Problem,
    params: &'a Parameters,
    state: &'a LatentState,
    terms: &'a FactorTerms,
    k: usize,
    s: usize,
    e: usize,
}

impl Block<'_> {
    fn col(&self) -> usize {
        self.params.p() + self.k
    }

    fn ar(&self) -> (f64, f64, f64) {
        let j = self.col();
        (self.params.mu[j], self.params.phi[j], self.params.sigma_eta[j])
    }

    fn hv(&self, hb: &[f64], t: usize) -> f64 {
        if t >= self.s && t <= self.e {
            hb[t - self.s]
        } else {
            self.state.h[(t, self.col())]
        }
    }

    /// Residual and variance of the factor at `t` given the volatilities,
    /// plus the volatility innovation into `t + 1`.
    fn f_moments(&self, hb: &[f64], t: usize) -> (f64, f64, f64) {
        let (mu, phi, s) = self.ar();
        let rho = self.params.rho[self.k];
        let ht = self.hv(hb, t);
        let base = factor_innovation(self.params, &self.state.f, t, self.k);
        if t + 1 < self.problem.t() {
            let innov = self.hv(hb, t + 1) - mu - phi * (ht - mu);
            (base - rho * (0.5 * ht).exp() / s * innov, (1.0 - rho * rho) * ht.exp(), innov)
        } else {
            (base, ht.exp(), 0.0)
        }
    }

    /// Exact log conditional without the AR prior of the block.
    fn log_lik(&self, hb: &[f64]) -> f64 {
        let (mu, phi, s) = self.ar();
        let mut total: f64 = (self.s..=self.e).map(|t| self.terms.value(t, hb[t - self.s])).sum();
        for t in self.s.saturating_sub(1)..=self.e {
            let (resid, var, _) = self.f_moments(hb, t);
            total -= 0.5 * (var.ln() + resid * resid / var);
        }
        if self.e + 1 < self.problem.t() {
            let innov = self.hv(hb, self.e + 1) - mu - phi * (hb[hb.len() - 1] - mu);
            total -= innov * innov / (2.0 * s * s);
        }
        total
    }

    fn log_ar(&self, hb: &[f64]) -> f64 {
        let (mu, phi, s) = self.ar();
        let s2 = s * s;
        let mut prev = (self.s > 0).then(|| self.hv(hb, self.s - 1));
        let mut v = 0.0;
        for &h in hb {
            v -= match prev {
                None => 0.5 * (1.0 - phi * phi) * (h - mu).powi(2) / s2,
                Some(hp) => 0.5 * (h - mu - phi * (hp - mu)).powi(2) / s2,
            };
            prev = Some(h);
        }
        v
    }

    fn coeffs(&self, hb: &[f64]) -> Vec<H2Coeffs> {
        let n = self.problem.t();
        let (mu, phi, sig) = self.ar();
        let rho = self.params.rho[self.k];
        let mut out = Vec::with_capacity(hb.len());
        for t in self.s..=self.e {
            let h = self.hv(hb, t);
            let (mut d, mut a) = self.terms.derivs(t, h);
            d -= 0.5;
            a += 0.5;
            let (resid, var, innov) = self.f_moments(hb, t);
            d += 0.5 * resid * resid / var;
            let dmu_t = if t + 1 < n { rho / sig * (-phi + 0.5 * innov) * (0.5 * h).exp() } else { 0.0 };
            d += resid / var * dmu_t;
            a += dmu_t * dmu_t / var;
            let mut b = 0.0;
            if t > 0 {
                let hp = self.hv(hb, t - 1);
                let (resid_p, var_p, innov_p) = self.f_moments(hb, t - 1);
                let dmu_prev = rho / sig * (0.5 * hp).exp();
                d += resid_p / var_p * dmu_prev;
                a += dmu_prev * dmu_prev / var_p;
                if t > self.s {
                    b = rho / sig * (-phi + 0.5 * innov_p) * (0.5 * hp).exp() * dmu_prev / var_p;
                }
            }
            if t == self.e && t + 1 < n {
                d += phi * (self.hv(hb, t + 1) - (1.0 - phi) * mu - phi * h) / (sig * sig);
                a += phi * phi / (sig * sig);
            }
            out.push(H2Coeffs { d, a, b });
        }
        out
    }

    fn build(&self, mode: &[f64]) -> Result<FactorVolApprox> {
        let (mu, phi, sig) = self.ar();
        let coeffs = self.coeffs(mode);
        let len = coeffs.len();
        // Q = L L' with L lower bidiagonal: L_tt = sqrt(D_t), L_{t,t-1} = J_t
        let mut dd = vec![0.0; len];
        let mut jj = vec![0.0; len + 1];
        let mut bb = vec![0.0; len];
        for t in 0..len {
            let c = coeffs[t];
            if t == 0 {
                dd[0] = c.a;
                bb[0] = c.d;
            } else {
                dd[t] = c.a - c.b * c.b / dd[t - 1];
                jj[t] = c.b / dd[t - 1].sqrt();
                bb[t] = c.d - jj[t] * bb[t - 1] / dd[t - 1].sqrt();
            }
            if !(dd[t] > 0.0) {
                return Err(Error::numeric("factor volatility curvature is not positive definite"));
            }
        }
        let mut ssm = ScalarStateSpace::with_len(len);
        let mut y_hat = vec![0.0; len];
        for t in 0..len {
            let kinv = 1.0 / dd[t].sqrt();
            let lead = kinv * jj[t + 1];
            let next_mode = if t + 1 < len { mode[t + 1] } else { 0.0 };
            y_hat[t] = mode[t] + lead * next_mode + bb[t] / dd[t];
            ssm.z[t] = 1.0 + phi * lead;
            ssm.d[t] = lead * (1.0 - phi) * mu;
            ssm.g[t] = [kinv, sig * lead];
            ssm.tt[t] = phi;
            ssm.c[t] = (1.0 - phi) * mu;
            ssm.hh[t] = [0.0, sig];
        }
        if self.s == 0 {
            ssm.a1 = mu;
            ssm.p1 = sig * sig / (1.0 - phi * phi);
        } else {
            ssm.a1 = mu + phi * (self.state.h[(self.s - 1, self.col())] - mu);
            ssm.p1 = sig * sig;
        }
        Ok(FactorVolApprox { mode: mode.to_vec(), coeffs, y_hat, ssm, diverged: false })
    }

    fn approximate(&self, mode_iters: usize) -> Result<FactorVolApprox> {
        let mut mode: Vec<f64> = (self.s..=self.e).map(|t| self.state.h[(t, self.col())]).collect();
        let target = |m: &[f64]| self.log_lik(m) + self.log_ar(m);
        let mut prev_target = target(&mode);
        let mut decreases = 0;
        let mut diverged = false;
        for _ in 0..mode_iters {
            let approx = self.build(&mode)?;
            let next = approx.ssm.smooth(&approx.y_hat)?;
            if next.iter().any(|h| !(h.abs() <= H_LIMIT)) {
                diverged = true;
                break;
            }
            let change = next.iter().zip(&mode).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            mode = next;
            if change < MODE_TOL {
                break;
            }
            let value = target(&mode);
            if value < prev_target {
                decreases += 1;
                if decreases >= 3 {
                    diverged = true;
                    break;
                }
            } else {
                decreases = 0;
            }
            prev_target = value;
        }
        let mut approx = self.build(&mode)?;
        approx.diverged = diverged;
        Ok(approx)
    }
}

/// Approximation used for block `s..=e` (0-based, inclusive) of factor `k`.
pub fn factor_vol_approximation(
    problem: &Problem,
    params: &Parameters,
    state: &LatentState,
    k: usize,
    (s, e): (usize, usize),
    mode_iters: usize,
) -> Result<FactorVolApprox> {
    let cache = MCache::build(params, &state.h);
    let terms = FactorTerms::new(problem, params, state, &cache, k)?;
    Block { problem, params, state, terms: &terms, k, s, e }.approximate(mode_iters)
}

/// Log conditional of the whole log-volatility path of factor `k` at `path`,
/// as the sampler evaluates it (up to a constant).
pub(crate) fn path_log_target(problem: &Problem, params: &Parameters, state: &LatentState, k: usize, path: &[f64]) -> Result<f64> {
    let cache = MCache::build(params, &state.h);
    let terms = FactorTerms::new(problem, params, state, &cache, k)?;
    let block = Block { problem, params, state, terms: &terms, k, s: 0, e: problem.t() - 1 };
    Ok(block.log_lik(path) + block.log_ar(path))
}

/// Updates every factor log-volatility path block by block.
pub fn sample_h2<R: Rng + ?Sized>(
    problem: &Problem,
    params: &Parameters,
    state: &mut LatentState,
    knots: &[(usize, usize)],
    tuning: &McmcTuning,
    rng: &mut R,
) -> Result<Tally> {
    let (p, q) = (params.p(), params.q());
    let mut tally = Tally::default();
    let mut cache = MCache::build(params, &state.h);
    for k in 0..q {
        let mut terms = FactorTerms::new(problem, params, state, &cache, k)?;
        for &(s, e) in knots {
            let block = Block { problem, params, state, terms: &terms, k, s, e };
            let approx = block.approximate(tuning.mode_iters)?;
            tally.proposed += 1;
            if approx.diverged {
                tally.fallbacks += 1;
                continue;
            }
            let proposal = approx.ssm.simulation_smoother(&approx.y_hat, rng)?;
            if proposal.iter().any(|h| !(h.abs() <= H_LIMIT)) {
                continue;
            }
            let current: Vec<f64> = (s..=e).map(|t| state.h[(t, p + k)]).collect();
            let log_ratio = block.log_lik(&proposal) - block.log_lik(&current) - approx.log_q(&proposal)
                + approx.log_q(&current);
            if mh_accept(rng, log_ratio) {
                tally.accepted += 1;
                for (i, t) in (s..=e).enumerate() {
                    let old = state.h[(t, p + k)];
                    cache.at_mut(t)[k * q + k] += (-proposal[i]).exp() - (-old).exp();
                    terms.commit(t, proposal[i]);
                    state.h[(t, p + k)] = proposal[i];
                }
            }
        }
    }
    Ok(tally)
}
