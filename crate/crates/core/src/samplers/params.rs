//! Static parameter updates.
//!
//! `alpha`, `mu`, `gamma`, `sigma_nu` and the idiosyncratic `sigma_eta` have
//! conjugate conditionals. `phi`, `psi` and the factor `sigma_eta` use
//! independence proposals from their Gaussian or inverse-gamma part, `rho`
//! a Laplace proposal on the Fisher scale, and `delta` a random walk on the
//! log scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{mh_accept, McmcTuning, Tally};
use crate::density::{
    factor_cond_var, factor_drift, factor_innovation, log_beta_sym, log_inv_gamma, trace_x_winv, vol_drift, wishart_constant,
    LowRank, Problem,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::types::{alpha_index, LatentState, Parameters};

/// Precisions at or below this are treated as uninformative.
const MIN_PRECISION: f64 = 1e-12;
const RHO_RW_STEP: f64 = 0.1;
const FISHER_LIMIT: f64 = 30.0;

fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0).map_err(|e| Error::numeric(e.to_string()))?;
    Ok(scale / g.sample(rng))
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Precision and linear term of the Gaussian conditional of row `j >= 1` of
/// the realized-factor loading matrix.
fn alpha_conditional(problem: &Problem, params: &Parameters, state: &LatentState, j: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let prior_prec = linalg::inv_spd(&problem.priors.s_alpha[j - 1])?;
    let mut lin = &prior_prec * &problem.priors.m_alpha[j - 1];
    let mut prec = prior_prec;
    let w = params.sigma_nu[j].powi(-2);
    for t in 0..problem.t() {
        let reg = state.f.view((t, 0), (1, j)).transpose();
        let z = problem.data.x[(t, j)] - state.f[(t, j)];
        prec += &reg * reg.transpose() * w;
        lin += reg * (z * w);
    }
    Ok((prec, lin))
}

/// Draws the free entries of the realized-factor loading matrix row by row.
pub fn sample_alpha<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let q = params.q();
    for j in 1..q {
        let (prec, lin) = alpha_conditional(problem, params, state, j)?;
        let (draw, _) = linalg::sample_canonical(rng, &prec, &lin)?;
        for k in 0..j {
            params.alpha[alpha_index(j, k)] = draw[k];
        }
    }
    Ok(Tally::gibbs(q as u64 - 1))
}

/// Gaussian conditional of the log-volatility means, from the transition
/// `h_{t+1} - c*_t = mu + Phi (h_t - mu) + noise` and the stationary start.
fn mu_conditional(problem: &Problem, params: &Parameters, state: &LatentState) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (h, f) = (&state.h, &state.f);
    let n = problem.t();
    let prior_prec = linalg::inv_spd(&problem.priors.s_mu)?;
    let mut lin = &prior_prec * &problem.priors.m_mu;
    let mut prec = prior_prec;
    for j in 0..h.ncols() {
        let (phi, s2) = (params.phi[j], params.sigma_eta[j].powi(2));
        let rho = params.rho_of(j);
        let v = s2 * (1.0 - rho * rho);
        prec[(j, j)] += (1.0 - phi * phi) / s2 + (n - 1) as f64 * (1.0 - phi).powi(2) / v;
        lin[j] += (1.0 - phi * phi) / s2 * h[(0, j)];
        let mut acc = 0.0;
        for t in 0..n - 1 {
            acc += h[(t + 1, j)] - phi * h[(t, j)] - vol_drift(params, h, f, t, j);
        }
        lin[j] += (1.0 - phi) / v * acc;
    }
    Ok((prec, lin))
}

pub fn sample_mu<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let (prec, lin) = mu_conditional(problem, params, state)?;
    params.mu = linalg::sample_canonical(rng, &prec, &lin)?.0;
    Ok(Tally::gibbs(1))
}

/// Gaussian conditional of the factor means given `h` (with `f_0 = gamma`).
fn gamma_conditional(problem: &Problem, params: &Parameters, state: &LatentState) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (h, f) = (&state.h, &state.f);
    let prior_prec = linalg::inv_spd(&problem.priors.s_gamma)?;
    let mut lin = &prior_prec * &problem.priors.m_gamma;
    let mut prec = prior_prec;
    for k in 0..params.q() {
        let psi = params.psi[k];
        for t in 0..problem.t() {
            let v = factor_cond_var(params, h, t, k);
            let c = factor_drift(params, h, t, k);
            let (load, obs) = if t == 0 {
                (1.0, f[(0, k)] - c)
            } else {
                (1.0 - psi, f[(t, k)] - psi * f[(t - 1, k)] - c)
            };
            prec[(k, k)] += load * load / v;
            lin[k] += load * obs / v;
        }
    }
    Ok((prec, lin))
}

pub fn sample_gamma<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let (prec, lin) = gamma_conditional(problem, params, state)?;
    params.gamma = linalg::sample_canonical(rng, &prec, &lin)?.0;
    Ok(Tally::gibbs(1))
}

/// `(linear, precision)` of the Gaussian part of the conditional of `phi_j`:
/// the log conditional is `linear phi - precision phi^2 / 2 + log k(phi)`
/// with `k(phi) = sqrt(1 - phi^2)` times the prior.
pub fn phi_proposal_moments(params: &Parameters, state: &LatentState, j: usize) -> (f64, f64) {
    let (h, f) = (&state.h, &state.f);
    let n = h.nrows();
    let (mu, s2) = (params.mu[j], params.sigma_eta[j].powi(2));
    let rho = params.rho_of(j);
    let v = s2 * (1.0 - rho * rho);
    let mut prec = -(h[(0, j)] - mu).powi(2) / s2;
    let mut lin = 0.0;
    for t in 0..n - 1 {
        let x = h[(t, j)] - mu;
        prec += x * x / v;
        lin += x * (h[(t + 1, j)] - mu - vol_drift(params, h, f, t, j)) / v;
    }
    (lin, prec)
}

fn psi_moments(params: &Parameters, state: &LatentState, k: usize) -> (f64, f64) {
    let (h, f) = (&state.h, &state.f);
    let g = params.gamma[k];
    let mut prec = 0.0;
    let mut lin = 0.0;
    for t in 1..f.nrows() {
        let v = factor_cond_var(params, h, t, k);
        let x = f[(t - 1, k)] - g;
        prec += x * x / v;
        lin += x * (f[(t, k)] - g - factor_drift(params, h, t, k)) / v;
    }
    (lin, prec)
}

/// Independence MH on `(-1, 1)` for a conditional
/// `linear x - precision x^2 / 2 + log_k(x)`.
fn ar_coefficient_step<R: Rng + ?Sized>(
    rng: &mut R,
    current: f64,
    (lin, prec): (f64, f64),
    log_k: impl Fn(f64) -> f64,
    tally: &mut Tally,
) -> f64 {
    if prec > MIN_PRECISION {
        let proposal = lin / prec + std_normal(rng) / prec.sqrt();
        if !(proposal.abs() < 1.0) {
            tally.record(false);
            return current;
        }
        let accept = mh_accept(rng, log_k(proposal) - log_k(current));
        tally.record(accept);
        if accept { proposal } else { current }
    } else {
        tally.fallbacks += 1;
        let proposal = rng.random_range(-1.0..1.0);
        let full = |x: f64| lin * x - 0.5 * prec * x * x + log_k(x);
        let accept = mh_accept(rng, full(proposal) - full(current));
        tally.record(accept);
        if accept { proposal } else { current }
    }
}

fn phi_log_k(problem: &Problem, x: f64) -> f64 {
    0.5 * (1.0 - x * x).ln() + log_beta_sym(x, problem.priors.a_phi, problem.priors.b_phi)
}

fn psi_log_k(problem: &Problem, x: f64) -> f64 {
    log_beta_sym(x, problem.priors.a_psi, problem.priors.b_psi)
}

/// Log conditional of `phi_j` at `x`, up to a constant.
pub(crate) fn phi_log_target(problem: &Problem, params: &Parameters, state: &LatentState, j: usize, x: f64) -> f64 {
    let (lin, prec) = phi_proposal_moments(params, state, j);
    lin * x - 0.5 * prec * x * x + phi_log_k(problem, x)
}

/// Log conditional of `psi_k` at `x`, up to a constant.
pub(crate) fn psi_log_target(problem: &Problem, params: &Parameters, state: &LatentState, k: usize, x: f64) -> f64 {
    let (lin, prec) = psi_moments(params, state, k);
    lin * x - 0.5 * prec * x * x + psi_log_k(problem, x)
}

/// Updates the AR coefficients of every log-volatility series.
pub fn sample_phi<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let mut tally = Tally::default();
    for j in 0..params.phi.len() {
        let moments = phi_proposal_moments(params, state, j);
        params.phi[j] = ar_coefficient_step(rng, params.phi[j], moments, |x| phi_log_k(problem, x), &mut tally);
    }
    Ok(tally)
}

/// Updates the AR coefficients of the factors.
pub fn sample_psi<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let mut tally = Tally::default();
    for k in 0..params.q() {
        let moments = psi_moments(params, state, k);
        params.psi[k] = ar_coefficient_step(rng, params.psi[k], moments, |x| psi_log_k(problem, x), &mut tally);
    }
    Ok(tally)
}

/// Per-period pieces of the factor density that involve the leverage of
/// factor `k`: innovation, scaled volatility innovation and `e^h`.
struct LeverageTerms {
    innov: Vec<f64>,
    vol: Vec<f64>,
    var: Vec<f64>,
}

impl LeverageTerms {
    fn new(params: &Parameters, state: &LatentState, k: usize) -> Self {
        let (h, f) = (&state.h, &state.f);
        let j = params.p() + k;
        let (mu, phi) = (params.mu[j], params.phi[j]);
        let n = h.nrows();
        let mut out = LeverageTerms { innov: vec![], vol: vec![], var: vec![] };
        for t in 0..n - 1 {
            out.innov.push(factor_innovation(params, f, t, k));
            out.vol.push((0.5 * h[(t, j)]).exp() * (h[(t + 1, j)] - mu - phi * (h[(t, j)] - mu)));
            out.var.push(h[(t, j)].exp());
        }
        out
    }

    /// Log density of the factor innovations before the last period as a
    /// function of `rho` and the volatility-of-volatility `sigma`.
    fn log_lik(&self, rho: f64, sigma: f64) -> f64 {
        let shrink = 1.0 - rho * rho;
        let mut total = 0.0;
        for t in 0..self.innov.len() {
            let v = shrink * self.var[t];
            let r = self.innov[t] - rho / sigma * self.vol[t];
            total -= 0.5 * (v.ln() + r * r / v);
        }
        total
    }
}

/// Log conditional of the leverage `rho_k` at `rho`, up to a constant.
pub fn rho_log_conditional(problem: &Problem, params: &Parameters, state: &LatentState, k: usize, rho: f64) -> f64 {
    if !(rho.abs() < 1.0) {
        return f64::NEG_INFINITY;
    }
    let sigma = params.sigma_eta[params.p() + k];
    LeverageTerms::new(params, state, k).log_lik(rho, sigma)
        + log_beta_sym(rho, problem.priors.a_rho, problem.priors.b_rho)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Updates each factor leverage through its Fisher transform
/// `g = log((1 + rho) / (1 - rho))`.
pub fn sample_rho<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let (a, b) = (problem.priors.a_rho, problem.priors.b_rho);
    let mut tally = Tally::default();
    for k in 0..params.q() {
        let terms = LeverageTerms::new(params, state, k);
        let sigma = params.sigma_eta[params.p() + k];
        let target = |g: f64| {
            let rho = (0.5 * g).tanh();
            if !(rho.abs() < 1.0) || g.abs() > FISHER_LIMIT {
                return f64::NEG_INFINITY;
            }
            terms.log_lik(rho, sigma) + log_beta_sym(rho, a, b) + 2f64.ln() + g - 2.0 * softplus(g)
        };
        let eps = 1e-4;
        let derivs = |g: f64| {
            let (up, mid, dn) = (target(g + eps), target(g), target(g - eps));
            ((up - dn) / (2.0 * eps), (up - 2.0 * mid + dn) / (eps * eps))
        };
        let rho_cur = params.rho[k];
        let g_cur = ((1.0 + rho_cur) / (1.0 - rho_cur)).ln();
        let mut g_hat = g_cur;
        let mut concave = false;
        for _ in 0..30 {
            let (d1, d2) = derivs(g_hat);
            concave = d2 < 0.0 && d2.is_finite();
            if !concave {
                break;
            }
            let step = (-d1 / d2).clamp(-2.0, 2.0);
            g_hat = (g_hat + step).clamp(-FISHER_LIMIT, FISHER_LIMIT);
            if step.abs() < 1e-8 {
                break;
            }
        }
        let (d1, d2) = derivs(g_hat);
        let g_new;
        let log_ratio;
        if concave && d2 < 0.0 && d2.is_finite() {
            let var = -1.0 / d2;
            let mean = g_hat + var * d1;
            g_new = mean + var.sqrt() * std_normal(rng);
            let lq = |g: f64| -0.5 * (g - mean).powi(2) / var;
            log_ratio = target(g_new) - target(g_cur) - lq(g_new) + lq(g_cur);
        } else {
            tally.fallbacks += 1;
            g_new = g_cur + RHO_RW_STEP * std_normal(rng);
            log_ratio = target(g_new) - target(g_cur);
        }
        let accept = mh_accept(rng, log_ratio);
        tally.record(accept);
        if accept {
            params.rho[k] = (0.5 * g_new).tanh();
        }
    }
    Ok(tally)
}

/// Inverse-gamma conditional `(shape, scale)` of `sigma_eta_j^2` from the AR
/// transition of `h_j` alone.
fn sigma_eta_ig(problem: &Problem, params: &Parameters, state: &LatentState, j: usize) -> (f64, f64) {
    let h = &state.h;
    let n = problem.t();
    let (mu, phi) = (params.mu[j], params.phi[j]);
    let mut ss = (1.0 - phi * phi) * (h[(0, j)] - mu).powi(2);
    for t in 0..n - 1 {
        ss += (h[(t + 1, j)] - mu - phi * (h[(t, j)] - mu)).powi(2);
    }
    (0.5 * (problem.priors.n_eta + n as f64), 0.5 * (problem.priors.d_eta + ss))
}

/// Log conditional of `sigma_eta_j` at `sigma`, up to a constant, in the
/// variance parametrization the prior is stated in.
pub(crate) fn sigma_eta_log_target(problem: &Problem, params: &Parameters, state: &LatentState, j: usize, sigma: f64) -> f64 {
    let (shape, scale) = sigma_eta_ig(problem, params, state, j);
    let p = params.p();
    let lev = if j < p || params.rho_of(j) == 0.0 {
        0.0
    } else {
        LeverageTerms::new(params, state, j - p).log_lik(params.rho_of(j), sigma)
    };
    log_inv_gamma(sigma * sigma, shape, scale) + lev
}

/// Log conditional of `delta`, up to a constant; `None` without realized
/// covariances.
pub(crate) fn delta_log_target(problem: &Problem, params: &Parameters, state: &LatentState, delta: f64) -> Result<Option<f64>> {
    Ok(DeltaTarget::new(problem, params, state)?.map(|t| t.value(delta)))
}

/// Updates every volatility-of-volatility. Factor entries also enter the
/// factor density through the leverage drift and need an MH correction.
pub fn sample_sigma_eta<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let p = params.p();
    let mut tally = Tally::default();
    for j in 0..params.sigma_eta.len() {
        let (shape, scale) = sigma_eta_ig(problem, params, state, j);
        let proposal = sample_inv_gamma(rng, shape, scale)?.sqrt();
        let rho = params.rho_of(j);
        if j < p || rho == 0.0 {
            params.sigma_eta[j] = proposal;
            tally.record(true);
            continue;
        }
        let terms = LeverageTerms::new(params, state, j - p);
        let log_ratio = terms.log_lik(rho, proposal) - terms.log_lik(rho, params.sigma_eta[j]);
        let accept = mh_accept(rng, log_ratio);
        tally.record(accept);
        if accept {
            params.sigma_eta[j] = proposal;
        }
    }
    Ok(tally)
}

pub fn sample_sigma_nu<R: Rng + ?Sized>(problem: &Problem, params: &mut Parameters, state: &LatentState, rng: &mut R) -> Result<Tally> {
    let a = params.a_matrix();
    let q = params.q();
    let n = problem.t();
    let mut ss = vec![0.0; q];
    for t in 0..n {
        let fitted = &a * state.f.row(t).transpose();
        for j in 0..q {
            ss[j] += (problem.data.x[(t, j)] - fitted[j]).powi(2);
        }
    }
    let shape = 0.5 * (problem.priors.n_nu + n as f64);
    for j in 0..q {
        params.sigma_nu[j] = sample_inv_gamma(rng, shape, 0.5 * (problem.priors.d_nu + ss[j]))?.sqrt();
    }
    Ok(Tally::gibbs(q as u64))
}

/// Log conditional of `delta` (flat prior on `(0, inf)`), with the sums over
/// periods that do not depend on `delta` computed once.
struct DeltaTarget {
    n: usize,
    p: usize,
    mean_log_det_w: f64,
    sum_log_det_x: f64,
    sum_trace: f64,
}

impl DeltaTarget {
    fn new(problem: &Problem, params: &Parameters, state: &LatentState) -> Result<Option<Self>> {
        let Some(rcov) = &problem.rcov else { return Ok(None) };
        let n = problem.t();
        let mut sum_log_det_x = 0.0;
        let mut sum_trace = 0.0;
        for t in 0..n {
            let row: Vec<f64> = state.h.row(t).iter().copied().collect();
            sum_log_det_x += LowRank::new(&params.beta, &row)?.log_det_x;
            sum_trace += trace_x_winv(&params.beta, &row, &rcov.w_inv[t]);
        }
        Ok(Some(DeltaTarget {
            n,
            p: problem.p(),
            mean_log_det_w: rcov.sum_log_det_w / n as f64,
            sum_log_det_x,
            sum_trace,
        }))
    }

    fn value(&self, delta: f64) -> f64 {
        if !(delta > 0.0) {
            return f64::NEG_INFINITY;
        }
        let pf = self.p as f64;
        self.n as f64 * wishart_constant(self.p, delta, self.mean_log_det_w) + 0.5 * (delta + pf + 3.0) * self.sum_log_det_x
            - 0.5 * (delta + 2.0) * self.sum_trace
    }
}

/// Random-walk MH on `log delta`.
pub fn sample_delta<R: Rng + ?Sized>(
    problem: &Problem,
    params: &mut Parameters,
    state: &LatentState,
    tuning: &McmcTuning,
    rng: &mut R,
) -> Result<Tally> {
    let Some(target) = DeltaTarget::new(problem, params, state)? else { return Ok(Tally::default()) };
    let old = params.delta;
    let new = old * (tuning.sigma_delta * std_normal(rng)).exp();
    let log_ratio = target.value(new) - target.value(old) + (new / old).ln();
    let accept = mh_accept(rng, log_ratio);
    if accept {
        params.delta = new;
    }
    let mut tally = Tally::default();
    tally.record(accept);
    Ok(tally)
}
