//! Log joint posterior and the analytic pieces the samplers share:
//! the low-rank structure of `X_t = B V2_t B' + V1_t`, its derivatives,
//! leverage drifts and the auxiliary coefficients of the factor-volatility
//! block sampler.

use nalgebra::{DMatrix, DVector};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;
use crate::types::{Dataset, LatentState, ModelConfig, Parameters, PriorSpec, Variant};

/// Log-volatilities outside `[-H_LIMIT, H_LIMIT]` are rejected as overflow.
pub const H_LIMIT: f64 = 50.0;

/// Everything a sampler needs that does not change during a chain.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: ModelConfig,
    pub priors: PriorSpec,
    pub data: Dataset,
    pub rcov: Option<RcovStats>,
}

impl Problem {
    pub fn new(config: ModelConfig, priors: PriorSpec, data: Dataset) -> Result<Self> {
        config.validate()?;
        priors.validate(&config)?;
        data.validate(&config)?;
        let rcov = match (&data.w, config.variant.uses_rcov()) {
            (Some(w), true) => Some(RcovStats::new(w)?),
            _ => None,
        };
        Ok(Problem { config, priors, data, rcov })
    }

    pub fn t(&self) -> usize {
        self.config.t
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn q(&self) -> usize {
        self.config.q
    }
}

/// Inverses and log-determinants of the realized covariances.
#[derive(Debug, Clone)]
pub struct RcovStats {
    pub w_inv: Vec<DMatrix<f64>>,
    pub log_det_w: Vec<f64>,
    pub sum_log_det_w: f64,
}

impl RcovStats {
    pub fn new(w: &[DMatrix<f64>]) -> Result<Self> {
        let mut w_inv = Vec::with_capacity(w.len());
        let mut log_det_w = Vec::with_capacity(w.len());
        for wt in w {
            let c = linalg::cholesky(wt)?;
            log_det_w.push(linalg::log_det_chol(&c));
            w_inv.push(linalg::symmetrize(&c.inverse()));
        }
        let sum_log_det_w = log_det_w.iter().sum();
        Ok(RcovStats { w_inv, log_det_w, sum_log_det_w })
    }
}

/// Low-rank view of `X_t` for one period: `M = V2^{-1} + B' V1^{-1} B`.
#[derive(Debug, Clone)]
pub struct LowRank {
    pub m_inv: DMatrix<f64>,
    /// `log |X_t|`.
    pub log_det_x: f64,
}

impl LowRank {
    /// `h_row` holds the `p + q` log-volatilities of one period.
    pub fn new(beta: &DMatrix<f64>, h_row: &[f64]) -> Result<Self> {
        let (p, q) = beta.shape();
        let mut m = DMatrix::zeros(q, q);
        for k in 0..q {
            m[(k, k)] = (-h_row[p + k]).exp();
        }
        for i in 0..p {
            let w = (-h_row[i]).exp();
            for a in 0..q {
                let ba = beta[(i, a)] * w;
                for b in 0..=a {
                    m[(a, b)] += ba * beta[(i, b)];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                m[(b, a)] = m[(a, b)];
            }
        }
        let c = linalg::cholesky(&m).map_err(|_| Error::numeric("X_t is singular"))?;
        let sum_h: f64 = h_row.iter().sum();
        Ok(LowRank { log_det_x: sum_h + linalg::log_det_chol(&c), m_inv: linalg::symmetrize(&c.inverse()) })
    }

    /// Diagonal element `(X^{-1})_{ii}`.
    pub fn x_inv_diag(&self, beta: &DMatrix<f64>, h_i: f64, i: usize) -> f64 {
        let b = beta.row(i).transpose();
        let quad = b.dot(&(&self.m_inv * &b));
        (-h_i).exp() - (-2.0 * h_i).exp() * quad
    }

    /// `b_k' X^{-1} b_k` for column `k` of `B`.
    pub fn col_quad(&self, beta: &DMatrix<f64>, h_row: &[f64], k: usize) -> f64 {
        let p = beta.nrows();
        // X^{-1} b = V1^{-1} b - V1^{-1} B M^{-1} B' V1^{-1} b
        let v1b = DVector::from_fn(p, |i, _| (-h_row[i]).exp() * beta[(i, k)]);
        let bt = beta.transpose() * &v1b;
        v1b.dot(&beta.column(k)) - bt.dot(&(&self.m_inv * &bt))
    }

    pub fn x_inv(&self, beta: &DMatrix<f64>, h_row: &[f64]) -> DMatrix<f64> {
        let p = beta.nrows();
        let v1_inv = DVector::from_fn(p, |i, _| (-h_row[i]).exp());
        let u = DMatrix::from_fn(p, beta.ncols(), |i, k| v1_inv[i] * beta[(i, k)]);
        let mut out = -(&u * &self.m_inv * u.transpose());
        for i in 0..p {
            out[(i, i)] += v1_inv[i];
        }
        out
    }
}

/// `X_t = B V2 B' + V1` formed densely.
pub fn x_matrix(beta: &DMatrix<f64>, h_row: &[f64]) -> DMatrix<f64> {
    let (p, q) = beta.shape();
    let v2 = DVector::from_fn(q, |k, _| h_row[p + k].exp());
    let bv = DMatrix::from_fn(p, q, |i, k| beta[(i, k)] * v2[k]);
    let mut x = bv * beta.transpose();
    for i in 0..p {
        x[(i, i)] += h_row[i].exp();
    }
    x
}

/// `tr(X_t W^{-1})` without forming `X_t`.
pub fn trace_x_winv(beta: &DMatrix<f64>, h_row: &[f64], w_inv: &DMatrix<f64>) -> f64 {
    let (p, q) = beta.shape();
    let mut tr = 0.0;
    for i in 0..p {
        tr += h_row[i].exp() * w_inv[(i, i)];
    }
    for k in 0..q {
        let b = beta.column(k);
        tr += h_row[p + k].exp() * b.dot(&(w_inv * b));
    }
    tr
}

/// Gradient and Hessian of `log |X_t|` with respect to row `i` of `B`.
pub fn beta_grad_hess(beta: &DMatrix<f64>, h_row: &[f64], i: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let lr = LowRank::new(beta, h_row)?;
    Ok(beta_grad_hess_with(&lr, beta, h_row, i))
}

pub(crate) fn beta_grad_hess_with(
    lr: &LowRank,
    beta: &DMatrix<f64>,
    h_row: &[f64],
    i: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let b = beta.row(i).transpose();
    let mb = &lr.m_inv * &b;
    let e = (-h_row[i]).exp();
    let d_ii = e - e * e * b.dot(&mb);
    let g = mb * (2.0 * e);
    let hess = &lr.m_inv * (2.0 * d_ii) - &g * g.transpose() * 0.5;
    (g, hess)
}

/// First and second derivatives of `log |X_t|` in an idiosyncratic
/// log-volatility `h_{it}`, `i < p`.
pub fn h1_logdet_derivs(beta: &DMatrix<f64>, h_row: &[f64], i: usize) -> Result<(f64, f64)> {
    let lr = LowRank::new(beta, h_row)?;
    let u = lr.x_inv_diag(beta, h_row[i], i) * h_row[i].exp();
    Ok((u, u - u * u))
}

/// First and second derivatives of `log |X_t|` in the factor log-volatility
/// `h_{p+k,t}`.
pub fn h2_logdet_derivs(beta: &DMatrix<f64>, h_row: &[f64], k: usize) -> Result<(f64, f64)> {
    let lr = LowRank::new(beta, h_row)?;
    let p = beta.nrows();
    let u = lr.col_quad(beta, h_row, k) * h_row[p + k].exp();
    Ok((u, u - u * u))
}

/// Innovation of the factor log-volatility `h_{p+k, t+1}` from its AR mean.
fn vol_innovation(params: &Parameters, h: &DMatrix<f64>, t: usize, j: usize) -> f64 {
    let (mu, phi) = (params.mu[j], params.phi[j]);
    h[(t + 1, j)] - mu - phi * (h[(t, j)] - mu)
}

/// Leverage drift `c_{kt}` of factor `k` at period `t` (0-based); zero at the
/// last period.
pub fn factor_drift(params: &Parameters, h: &DMatrix<f64>, t: usize, k: usize) -> f64 {
    let j = params.p() + k;
    let rho = params.rho[k];
    if t + 1 >= h.nrows() || rho == 0.0 {
        return 0.0;
    }
    rho * (0.5 * h[(t, j)]).exp() / params.sigma_eta[j] * vol_innovation(params, h, t, j)
}

/// Conditional variance of factor `k` given the log-volatility path.
pub fn factor_cond_var(params: &Parameters, h: &DMatrix<f64>, t: usize, k: usize) -> f64 {
    let j = params.p() + k;
    let rho = params.rho[k];
    let shrink = if t + 1 < h.nrows() { 1.0 - rho * rho } else { 1.0 };
    shrink * h[(t, j)].exp()
}

/// Factor innovation `f_t - gamma - psi (f_{t-1} - gamma)` with `f_0 = gamma`.
pub fn factor_innovation(params: &Parameters, f: &DMatrix<f64>, t: usize, k: usize) -> f64 {
    let g = params.gamma[k];
    let prev = if t == 0 { 0.0 } else { f[(t - 1, k)] - g };
    f[(t, k)] - g - params.psi[k] * prev
}

/// Leverage drift `c*_{jt}` of log-volatility series `j` in the transition to
/// `t + 1`; zero for idiosyncratic series.
pub fn vol_drift(params: &Parameters, h: &DMatrix<f64>, f: &DMatrix<f64>, t: usize, j: usize) -> f64 {
    let p = params.p();
    if j < p {
        return 0.0;
    }
    let k = j - p;
    let rho = params.rho[k];
    if rho == 0.0 {
        return 0.0;
    }
    rho * params.sigma_eta[j] * (-0.5 * h[(t, j)]).exp() * factor_innovation(params, f, t, k)
}

/// Log density of `x` when `(1 + x) / 2 ~ Beta(a, b)`.
pub fn log_beta_sym(x: f64, a: f64, b: f64) -> f64 {
    if !(x.abs() < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * (0.5 * (1.0 + x)).ln() + (b - 1.0) * (0.5 * (1.0 - x)).ln() - ln_beta(a, b) - 2f64.ln()
}

/// Log density of `IG(shape, scale)` at `v`.
pub fn log_inv_gamma(v: f64, shape: f64, scale: f64) -> f64 {
    if !(v > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * v.ln() - scale / v
}

/// Log normalizing constant and `log|W|` part of the realized covariance
/// density that depends only on `delta`, per period.
pub fn wishart_constant(p: usize, delta: f64, log_det_w: f64) -> f64 {
    let pf = p as f64;
    let s0 = delta + pf + 3.0;
    let k0 = delta + 2.0;
    0.5 * s0 * pf * k0.ln() - 0.5 * s0 * pf * 2f64.ln() - linalg::ln_mvgamma(p, 0.5 * s0)
        - 0.5 * (s0 + pf + 1.0) * log_det_w
}

/// Contributions to the log joint posterior, one entry per equation group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermLedger {
    pub wishart: f64,
    pub returns: f64,
    pub vol_transition: f64,
    pub factor_transition: f64,
    pub realized_factor: f64,
    pub prior: f64,
}

impl TermLedger {
    pub fn total(&self) -> f64 {
        self.wishart + self.returns + self.vol_transition + self.factor_transition + self.realized_factor + self.prior
    }
}

fn check_state(config: &ModelConfig, state: &LatentState) -> Result<()> {
    state.validate(config)?;
    if let Some(v) = state.h.iter().find(|v| v.abs() > H_LIMIT) {
        return Err(Error::numeric(format!("log-volatility {v} outside [-{H_LIMIT}, {H_LIMIT}]")));
    }
    Ok(())
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(format!("non-finite {what} term")))
    }
}

/// Realized-covariance log density summed over periods.
pub fn wishart_term(problem: &Problem, params: &Parameters, h: &DMatrix<f64>) -> Result<f64> {
    let Some(rcov) = &problem.rcov else { return Ok(0.0) };
    let (p, s0, k0) = (problem.p(), params.s0(), params.k0());
    let mut total = 0.0;
    for t in 0..problem.t() {
        let row: Vec<f64> = h.row(t).iter().copied().collect();
        let lr = LowRank::new(&params.beta, &row)?;
        total += wishart_constant(p, params.delta, rcov.log_det_w[t]) + 0.5 * s0 * lr.log_det_x
            - 0.5 * k0 * trace_x_winv(&params.beta, &row, &rcov.w_inv[t]);
    }
    Ok(total)
}

fn returns_term(problem: &Problem, params: &Parameters, state: &LatentState) -> f64 {
    let mut total = 0.0;
    for t in 0..problem.t() {
        for i in 0..problem.p() {
            let mean = params.beta.row(i).dot(&state.f.row(t));
            total += linalg::normal_logpdf(problem.data.y[(t, i)], mean, state.h[(t, i)].exp());
        }
    }
    total
}

fn realized_factor_term(problem: &Problem, params: &Parameters, f: &DMatrix<f64>) -> f64 {
    let a = params.a_matrix();
    let mut total = 0.0;
    for t in 0..problem.t() {
        let mean = &a * f.row(t).transpose();
        for j in 0..problem.q() {
            total += linalg::normal_logpdf(problem.data.x[(t, j)], mean[j], params.sigma_nu[j].powi(2));
        }
    }
    total
}

/// Marginal AR(1) density of every log-volatility path, stationary start.
fn vol_ar_term(params: &Parameters, h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let mut total = 0.0;
    for j in 0..h.ncols() {
        let (mu, phi, s2) = (params.mu[j], params.phi[j], params.sigma_eta[j].powi(2));
        total += linalg::normal_logpdf(h[(0, j)], mu, s2 / (1.0 - phi * phi));
        for t in 0..n - 1 {
            total += linalg::normal_logpdf(h[(t + 1, j)], mu + phi * (h[(t, j)] - mu), s2);
        }
    }
    total
}

/// Factors given the whole log-volatility path (leverage drift included).
pub fn factor_given_vol_term(params: &Parameters, h: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for k in 0..params.q() {
        for t in 0..f.nrows() {
            let e = factor_innovation(params, f, t, k) - factor_drift(params, h, t, k);
            total += linalg::normal_logpdf(e, 0.0, factor_cond_var(params, h, t, k));
        }
    }
    total
}

/// Log prior density of all parameters (variances in `sigma^2` scale).
pub fn log_prior(params: &Parameters, priors: &PriorSpec, variant: Variant) -> Result<f64> {
    let mut lp = linalg::mvn_logpdf(&params.mu, &priors.m_mu, &priors.s_mu)?
        + linalg::mvn_logpdf(&params.gamma, &priors.m_gamma, &priors.s_gamma)?;
    for i in 0..params.p() {
        lp += linalg::mvn_logpdf(&params.beta.row(i).transpose(), &priors.m_beta[i], &priors.s_beta[i])?;
    }
    for j in 1..params.q() {
        let row = DVector::from_fn(j, |k, _| params.alpha[crate::types::alpha_index(j, k)]);
        lp += linalg::mvn_logpdf(&row, &priors.m_alpha[j - 1], &priors.s_alpha[j - 1])?;
    }
    lp += params.phi.iter().map(|&v| log_beta_sym(v, priors.a_phi, priors.b_phi)).sum::<f64>();
    lp += params.psi.iter().map(|&v| log_beta_sym(v, priors.a_psi, priors.b_psi)).sum::<f64>();
    if variant.has_leverage() {
        lp += params.rho.iter().map(|&v| log_beta_sym(v, priors.a_rho, priors.b_rho)).sum::<f64>();
    }
    lp += params
        .sigma_eta
        .iter()
        .map(|s| log_inv_gamma(s * s, 0.5 * priors.n_eta, 0.5 * priors.d_eta))
        .sum::<f64>();
    lp += params
        .sigma_nu
        .iter()
        .map(|s| log_inv_gamma(s * s, 0.5 * priors.n_nu, 0.5 * priors.d_nu))
        .sum::<f64>();
    Ok(lp)
}

/// Per-equation contributions to the log joint posterior.
pub fn log_joint_terms(problem: &Problem, params: &Parameters, state: &LatentState) -> Result<TermLedger> {
    check_state(&problem.config, state)?;
    let ledger = TermLedger {
        wishart: finite(wishart_term(problem, params, &state.h)?, "realized covariance")?,
        returns: finite(returns_term(problem, params, state), "returns")?,
        vol_transition: finite(vol_ar_term(params, &state.h), "volatility transition")?,
        factor_transition: finite(factor_given_vol_term(params, &state.h, &state.f), "factor transition")?,
        realized_factor: finite(realized_factor_term(problem, params, &state.f), "realized factor")?,
        prior: finite(log_prior(params, &problem.priors, problem.config.variant)?, "prior")?,
    };
    Ok(ledger)
}

/// Log joint posterior density (up to the normalizing constant).
pub fn log_joint(problem: &Problem, params: &Parameters, state: &LatentState) -> Result<f64> {
    finite(log_joint_terms(problem, params, state)?.total(), "log joint")
}

/// The same joint density of `(f, h)` factorized the other way round:
/// factors marginally given their current volatility, log-volatilities given
/// the factor shocks. Returns `(vol_transition, factor_transition)`.
pub fn vol_given_factor_terms(params: &Parameters, h: &DMatrix<f64>, f: &DMatrix<f64>) -> (f64, f64) {
    let p = params.p();
    let n = h.nrows();
    let mut vol = 0.0;
    for j in 0..h.ncols() {
        let (mu, phi, s) = (params.mu[j], params.phi[j], params.sigma_eta[j]);
        let rho = params.rho_of(j);
        vol += linalg::normal_logpdf(h[(0, j)], mu, s * s / (1.0 - phi * phi));
        for t in 0..n - 1 {
            let mean = mu + phi * (h[(t, j)] - mu) + vol_drift(params, h, f, t, j);
            vol += linalg::normal_logpdf(h[(t + 1, j)], mean, s * s * (1.0 - rho * rho));
        }
    }
    let mut fac = 0.0;
    for k in 0..params.q() {
        for t in 0..n {
            fac += linalg::normal_logpdf(factor_innovation(params, f, t, k), 0.0, h[(t, p + k)].exp());
        }
    }
    (vol, fac)
}

/// Pieces of the exact factor-volatility conditional restricted to one block
/// `s..=e` (0-based) of factor `k`.
///
/// The target includes every term touching `h_{p+k, s..=e}`: the realized
/// covariance terms, the factor densities at periods `s-1..=e` and the
/// transition out of the block when `e < T-1`. The AR prior of the block is
/// left out.
pub struct FactorVolBlock<'a> {
    pub problem: &'a Problem,
    pub params: &'a Parameters,
    pub state: &'a LatentState,
    pub k: usize,
    pub s: usize,
    pub e: usize,
}

/// Per-period coefficients of the quadratic approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H2Coeffs {
    pub d: f64,
    pub a: f64,
    pub b: f64,
}

impl FactorVolBlock<'_> {
    fn col(&self) -> usize {
        self.params.p() + self.k
    }

    /// Log-volatility of this factor at `t`, with the block entries replaced
    /// by `hb` (indexed from `s`).
    fn hv(&self, hb: &[f64], t: usize) -> f64 {
        if t >= self.s && t <= self.e {
            hb[t - self.s]
        } else {
            self.state.h[(t, self.col())]
        }
    }

    fn row_with(&self, hb: &[f64], t: usize) -> Vec<f64> {
        let mut row: Vec<f64> = self.state.h.row(t).iter().copied().collect();
        row[self.col()] = self.hv(hb, t);
        row
    }

    /// Mean and variance of `f_{kt}` given the log-volatilities.
    fn f_moments(&self, hb: &[f64], t: usize) -> (f64, f64, f64) {
        let params = self.params;
        let j = self.col();
        let n = self.problem.t();
        let (mu, phi, s) = (params.mu[j], params.phi[j], params.sigma_eta[j]);
        let rho = params.rho[self.k];
        let ht = self.hv(hb, t);
        let base = factor_innovation(params, &self.state.f, t, self.k);
        if t + 1 < n {
            let innov = self.hv(hb, t + 1) - mu - phi * (ht - mu);
            let c = rho * (0.5 * ht).exp() / s * innov;
            (base - c, (1.0 - rho * rho) * ht.exp(), innov)
        } else {
            (base, ht.exp(), 0.0)
        }
    }

    /// Exact log target of the block (up to a constant).
    pub fn log_target(&self, hb: &[f64]) -> Result<f64> {
        let params = self.params;
        let (s0, k0) = (params.s0(), params.k0());
        let j = self.col();
        let n = self.problem.t();
        let mut total = 0.0;
        for t in self.s..=self.e {
            let h = self.hv(hb, t);
            if !(h.abs() <= H_LIMIT) {
                return Err(Error::numeric("factor log-volatility outside the allowed range"));
            }
            if let Some(rcov) = &self.problem.rcov {
                let row = self.row_with(hb, t);
                let lr = LowRank::new(&params.beta, &row)?;
                let b = params.beta.column(self.k);
                total += 0.5 * s0 * lr.log_det_x - 0.5 * k0 * h.exp() * b.dot(&(&rcov.w_inv[t] * b));
            }
        }
        let first = self.s.saturating_sub(1);
        for t in first..=self.e {
            let (resid, var, _) = self.f_moments(hb, t);
            total += -0.5 * (var.ln() + resid * resid / var);
        }
        if self.e + 1 < n {
            let (mu, phi, s) = (params.mu[j], params.phi[j], params.sigma_eta[j]);
            let innov = self.hv(hb, self.e + 1) - mu - phi * (self.hv(hb, self.e) - mu);
            total -= innov * innov / (2.0 * s * s);
        }
        finite(total, "factor volatility block")
    }

    /// `d_t`, `A_t`, `B_t` for every period of the block at `hb`.
    pub fn coeffs(&self, hb: &[f64]) -> Result<Vec<H2Coeffs>> {
        let params = self.params;
        let (s0, k0) = (params.s0(), params.k0());
        let j = self.col();
        let n = self.problem.t();
        let (mu, phi, sig) = (params.mu[j], params.phi[j], params.sigma_eta[j]);
        let rho = params.rho[self.k];
        let mut out = Vec::with_capacity(self.e - self.s + 1);
        for t in self.s..=self.e {
            let h = self.hv(hb, t);
            let mut d = -0.5;
            let mut a = 0.5;
            if let Some(rcov) = &self.problem.rcov {
                let row = self.row_with(hb, t);
                let lr = LowRank::new(&params.beta, &row)?;
                let u = lr.col_quad(&params.beta, &row, self.k) * h.exp();
                let b = params.beta.column(self.k);
                d += 0.5 * s0 * u - 0.5 * k0 * b.dot(&(&rcov.w_inv[t] * b)) * h.exp();
                a += 0.5 * s0 * u * u;
            }
            let (resid, var, innov) = self.f_moments(hb, t);
            d += 0.5 * resid * resid / var;
            // derivative of the factor mean at t with respect to h_t
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
                    let dmu_prev_own = rho / sig * (-phi + 0.5 * innov_p) * (0.5 * hp).exp();
                    b = dmu_prev_own * dmu_prev / var_p;
                }
            }
            if t == self.e && t + 1 < n {
                let next = self.hv(hb, t + 1);
                d += phi * (next - (1.0 - phi) * mu - phi * h) / (sig * sig);
                a += phi * phi / (sig * sig);
            }
            out.push(H2Coeffs { d, a, b });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_instance(rng: &mut ChaCha8Rng, p: usize, q: usize) -> (DMatrix<f64>, Vec<f64>) {
        let beta = DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = (0..p + q).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        (beta, h)
    }

    fn log_det_dense(beta: &DMatrix<f64>, h: &[f64]) -> f64 {
        linalg::log_det_spd(&x_matrix(beta, h)).unwrap()
    }

    #[test]
    fn low_rank_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (beta, h) = random_instance(&mut rng, 5, 2);
        let lr = LowRank::new(&beta, &h).unwrap();
        let x = x_matrix(&beta, &h);
        assert_relative_eq!(lr.log_det_x, log_det_dense(&beta, &h), epsilon = 1e-12);
        let xi = linalg::inv_spd(&x).unwrap();
        assert_relative_eq!(lr.x_inv(&beta, &h), xi, epsilon = 1e-10);
        assert_relative_eq!(lr.x_inv_diag(&beta, h[2], 2), xi[(2, 2)], epsilon = 1e-12);
        let b = beta.column(1);
        assert_relative_eq!(lr.col_quad(&beta, &h, 1), b.dot(&(&xi * b)), epsilon = 1e-12);
        let w = x.clone() * 1.3 + DMatrix::identity(5, 5);
        let wi = linalg::inv_spd(&w).unwrap();
        assert_relative_eq!(trace_x_winv(&beta, &h, &wi), (&x * &wi).trace(), epsilon = 1e-12);
    }

    #[test]
    fn scalar_beta_gradient() {
        let (b, h1, h2) = (0.7, -0.3, 0.4);
        let beta = DMatrix::from_element(1, 1, b);
        let (g, _) = beta_grad_hess(&beta, &[h1, h2], 0).unwrap();
        let (v1, v2) = (h1.exp(), h2.exp());
        assert_relative_eq!(g[0], 2.0 * b * v2 / (b * b * v2 + v1), epsilon = 1e-14);
    }

    #[test]
    fn zero_loadings_reduce() {
        let beta = DMatrix::zeros(3, 2);
        let h = [0.1, -0.2, 0.3, 0.5, -0.5];
        let (g, _) = beta_grad_hess(&beta, &h, 1).unwrap();
        assert_eq!(g.amax(), 0.0);
        let (d1, d2) = h1_logdet_derivs(&beta, &h, 2).unwrap();
        assert_relative_eq!(d1, 1.0, epsilon = 1e-14);
        assert_relative_eq!(d2, 0.0, epsilon = 1e-14);
        assert_eq!(h2_logdet_derivs(&beta, &h, 0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn log_beta_sym_is_a_density() {
        let (a, b) = (20.0, 1.5);
        let n = 200_000;
        let dx = 2.0 / n as f64;
        let mass: f64 = (0..n).map(|k| log_beta_sym(-1.0 + (k as f64 + 0.5) * dx, a, b).exp() * dx).sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-6);
    }
}
