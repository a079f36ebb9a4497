//! Oracle suites run by the `check` command and the acceptance tests.
//!
//! Every suite compares the production code against an independent
//! reference: finite differences, dense joint-Gaussian conditioning, grid
//! quadrature of the log joint, or closed-form moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::density::{beta_grad_hess, h1_logdet_derivs, h2_logdet_derivs, log_joint, x_matrix, Problem};
use crate::error::{Error, Result};
use crate::linalg;
use crate::preprocess::{self, VarianceDivisor};
use crate::diagnostics::inefficiency_factor;
use crate::samplers::{self, step_log_target, McmcTuning, MhStep, Tally};
use crate::simulate::{generate, sample_inv_wishart};
use crate::state_space::StateSpace;
use crate::types::{LatentState, ModelConfig, Parameters, PriorSpec, Variant};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * normal(rng))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * normal(rng))
}

/// `max |a - b| / max(max |b|, floor)`.
fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub instances: usize,
    /// Worst relative gradient error over all instances and formulas.
    pub grad_rel: f64,
    pub hess_rel: f64,
}

impl DerivativeReport {
    pub fn passed(&self, grad_tol: f64, hess_tol: f64) -> bool {
        self.grad_rel <= grad_tol && self.hess_rel <= hess_tol
    }
}

/// Analytic derivatives of `log |B V2 B' + V1|` in a loading row and in each
/// log-volatility, against central differences (step `1e-5`) on random
/// instances with `p <= 4`, `q <= 2`. Second derivatives are differenced from
/// the analytic first derivatives.
pub fn derivative_oracle(instances: usize, seed: u64) -> Result<DerivativeReport> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad_rel = 0.0f64;
    let mut hess_rel = 0.0f64;
    for _ in 0..instances {
        let p = rng.random_range(1..=4);
        let q = rng.random_range(1..=2);
        let beta = random_matrix(&mut rng, p, q, 1.0);
        let h: Vec<f64> = (0..p + q).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g = |b: &DMatrix<f64>, h: &[f64]| linalg::log_det_spd(&x_matrix(b, h));

        for i in 0..p {
            let (grad, hess) = beta_grad_hess(&beta, &h, i)?;
            let mut fd_grad = vec![0.0; q];
            let mut fd_hess = DMatrix::zeros(q, q);
            for k in 0..q {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[(i, k)] += STEP;
                dn[(i, k)] -= STEP;
                fd_grad[k] = (g(&up, &h)? - g(&dn, &h)?) / (2.0 * STEP);
                let col = (beta_grad_hess(&up, &h, i)?.0 - beta_grad_hess(&dn, &h, i)?.0) / (2.0 * STEP);
                fd_hess.set_column(k, &col);
            }
            grad_rel = grad_rel.max(rel_err(grad.as_slice(), &fd_grad, FLOOR));
            hess_rel = hess_rel.max(rel_err(hess.as_slice(), fd_hess.as_slice(), FLOOR));
        }
        for j in 0..p + q {
            let derivs = |h: &[f64]| if j < p { h1_logdet_derivs(&beta, h, j) } else { h2_logdet_derivs(&beta, h, j - p) };
            let (d1, d2) = derivs(&h)?;
            let mut up = h.clone();
            let mut dn = h.clone();
            up[j] += STEP;
            dn[j] -= STEP;
            let fd1 = (g(&beta, &up)? - g(&beta, &dn)?) / (2.0 * STEP);
            let fd2 = (derivs(&up)?.0 - derivs(&dn)?.0) / (2.0 * STEP);
            grad_rel = grad_rel.max(rel_err(&[d1], &[fd1], FLOOR));
            hess_rel = hess_rel.max(rel_err(&[d2], &[fd2], FLOOR));
        }
    }
    Ok(DerivativeReport { instances, grad_rel, hess_rel })
}

/// Joint Gaussian of all states and observations of a state-space model,
/// written as `mean + loading * z` with `z` standard normal.
struct DenseModel {
    state_mean: DVector<f64>,
    state_load: DMatrix<f64>,
    obs_mean: DVector<f64>,
    obs_load: DMatrix<f64>,
}

impl DenseModel {
    fn new(ss: &StateSpace) -> Result<Self> {
        let (n, m) = (ss.len(), ss.state_dim());
        let r = ss.g[0].ncols();
        let k = ss.z[0].nrows();
        let width = m + n * r;
        let mut state_mean = DVector::zeros(n * m);
        let mut state_load = DMatrix::zeros(n * m, width);
        let mut obs_mean = DVector::zeros(n * k);
        let mut obs_load = DMatrix::zeros(n * k, width);
        let mut a_mean = ss.a1.clone();
        let mut a_load = DMatrix::zeros(m, width);
        a_load.view_mut((0, 0), (m, m)).copy_from(&linalg::cholesky(&ss.p1)?.l());
        for t in 0..n {
            state_mean.rows_mut(t * m, m).copy_from(&a_mean);
            state_load.view_mut((t * m, 0), (m, width)).copy_from(&a_load);
            let mut u_load = DMatrix::zeros(r, width);
            u_load.view_mut((0, m + t * r), (r, r)).fill_with_identity();
            obs_mean.rows_mut(t * k, k).copy_from(&(&ss.z[t] * &a_mean + &ss.d[t]));
            obs_load.view_mut((t * k, 0), (k, width)).copy_from(&(&ss.z[t] * &a_load + &ss.g[t] * &u_load));
            a_mean = &ss.tt[t] * &a_mean + &ss.c[t];
            a_load = &ss.tt[t] * &a_load + &ss.hh[t] * &u_load;
        }
        Ok(DenseModel { state_mean, state_load, obs_mean, obs_load })
    }

    /// Posterior mean and covariance of the stacked states given `y`.
    fn posterior(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let syy = &self.obs_load * self.obs_load.transpose();
        let sxy = &self.state_load * self.obs_load.transpose();
        let sxx = &self.state_load * self.state_load.transpose();
        let chol = linalg::cholesky(&syy)?;
        let mean = &self.state_mean + &sxy * chol.solve(&(y - &self.obs_mean));
        let cov = sxx - &sxy * chol.solve(&sxy.transpose());
        Ok((mean, linalg::symmetrize(&cov)))
    }

    fn log_marginal(&self, y: &DVector<f64>) -> Result<f64> {
        linalg::mvn_logpdf(y, &self.obs_mean, &(&self.obs_load * self.obs_load.transpose()))
    }

    /// One-step prediction errors `y_t - E[y_t | y_1..y_{t-1}]`.
    fn innovations(&self, y: &DVector<f64>, k: usize) -> Result<Vec<DVector<f64>>> {
        let syy = &self.obs_load * self.obs_load.transpose();
        let n = y.len() / k;
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let cur = y.rows(t * k, k) - self.obs_mean.rows(t * k, k);
            if t == 0 {
                out.push(cur);
                continue;
            }
            let past = t * k;
            let s_pp = syy.view((0, 0), (past, past)).into_owned();
            let s_cp = syy.view((t * k, 0), (k, past)).into_owned();
            let resid = y.rows(0, past) - self.obs_mean.rows(0, past);
            out.push(cur - s_cp * linalg::cholesky(&s_pp)?.solve(&resid));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StateSpaceCase {
    pub periods: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    /// Largest absolute error of the smoothed state means.
    pub mean_err: f64,
    /// Largest absolute error of the filter's prediction errors.
    pub innovation_err: f64,
    /// Relative error of the log-likelihood.
    pub loglik_err: f64,
    /// Largest |z| of simulation-smoother means and covariances.
    pub mean_z: f64,
    pub cov_z: f64,
}

impl StateSpaceCase {
    pub fn passed(&self, tol: f64, z: f64) -> bool {
        self.mean_err <= tol && self.innovation_err <= tol && self.loglik_err <= tol && self.mean_z <= z && self.cov_z <= z
    }
}

fn random_state_space(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize) -> StateSpace {
    let r = m + k;
    let p1 = {
        let a = random_matrix(rng, m, m, 1.0);
        &a * a.transpose() + DMatrix::identity(m, m) * 0.2
    };
    StateSpace {
        z: (0..n).map(|_| random_matrix(rng, k, m, 1.0)).collect(),
        d: (0..n).map(|_| random_vector(rng, k, 1.0)).collect(),
        g: (0..n).map(|_| random_matrix(rng, k, r, 0.6)).collect(),
        tt: (0..n).map(|_| random_matrix(rng, m, m, 0.4)).collect(),
        c: (0..n).map(|_| random_vector(rng, m, 1.0)).collect(),
        hh: (0..n).map(|_| random_matrix(rng, m, r, 0.6)).collect(),
        a1: random_vector(rng, m, 1.0),
        p1,
    }
}

/// Filter, smoother and simulation smoother against dense conditioning for
/// every `(T, state dim, obs dim)` in `1..=5 x 1..=3 x 1..=3`.
pub fn state_space_oracle(draws: usize, seed: u64) -> Result<Vec<StateSpaceCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for n in 1..=5 {
        for m in 1..=3 {
            for k in 1..=3 {
                let ss = random_state_space(&mut rng, n, m, k);
                let (_, y) = ss.simulate(&mut rng)?;
                let dense = DenseModel::new(&ss)?;
                let y_stack = DVector::from_iterator(n * k, y.iter().flat_map(|v| v.iter().copied()));
                let (mean, cov) = dense.posterior(&y_stack)?;

                let filtered = ss.filter(&y)?;
                let want_v = dense.innovations(&y_stack, k)?;
                let innovation_err = filtered.v.iter().zip(&want_v).fold(0.0f64, |e, (a, b)| e.max((a - b).amax()));
                let want_ll = dense.log_marginal(&y_stack)?;
                let loglik_err = (filtered.loglik - want_ll).abs() / want_ll.abs().max(1.0);

                let smoothed = ss.smooth(&y)?;
                let got = DVector::from_iterator(n * m, smoothed.states.iter().flat_map(|v| v.iter().copied()));
                let mean_err = (&got - &mean).amax();

                let dim = n * m;
                let mut sum = DVector::zeros(dim);
                let mut cross = DMatrix::zeros(dim, dim);
                for _ in 0..draws {
                    let draw = ss.simulation_smoother(&y, &mut rng)?;
                    let x = DVector::from_iterator(dim, draw.iter().flat_map(|v| v.iter().copied())) - &mean;
                    sum += &x;
                    cross.syger(1.0, &x, &x, 1.0);
                }
                let nd = draws as f64;
                let mut mean_z = 0.0f64;
                let mut cov_z = 0.0f64;
                for i in 0..dim {
                    mean_z = mean_z.max((sum[i] / nd).abs() / (cov[(i, i)] / nd).sqrt());
                    for j in 0..=i {
                        let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / nd).sqrt();
                        cov_z = cov_z.max((cross[(i, j)] / nd - cov[(i, j)]).abs() / se);
                    }
                }
                out.push(StateSpaceCase {
                    periods: n,
                    state_dim: m,
                    obs_dim: k,
                    mean_err,
                    innovation_err,
                    loglik_err,
                    mean_z,
                    cov_z,
                });
            }
        }
    }
    Ok(out)
}

/// Frozen `T = 3`, `p = 1`, `q = 1` problem with leverage and realized
/// covariances, with its generating parameters and latent path.
pub fn toy_problem() -> Result<(Problem, Parameters, LatentState)> {
    let cfg = ModelConfig::new(1, 1, 3, Variant::Fmrsv)?;
    let mut params = Parameters::simulation_truth(1, 1);
    params.rho[0] = -0.4;
    params.sigma_eta.fill(0.3);
    params.beta[(0, 0)] = 0.8;
    let (data, state) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(20_240_601))?;
    let mut priors = PriorSpec::vague(1, 1);
    // proper, moderately informative priors keep every conditional compact
    priors.s_mu *= 1e-4;
    priors.s_gamma *= 1e-4;
    priors.s_beta[0] *= 1e-4;
    priors.a_phi = 4.0;
    priors.b_phi = 2.0;
    priors.a_psi = 2.0;
    priors.b_psi = 2.0;
    priors.a_rho = 2.0;
    priors.b_rho = 2.0;
    priors.n_eta = 5.0;
    priors.d_eta = 0.5;
    priors.n_nu = 5.0;
    priors.d_nu = 0.05;
    Ok((Problem::new(cfg, priors, data)?, params, state))
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerGap {
    pub step: String,
    /// `|target difference - log joint difference|` for a random move.
    pub gap: f64,
}

/// For every MH update, the change of the sampler's log target between the
/// current value and a random nearby value against the change of the full
/// log joint.
pub fn acceptance_ledger(problem: &Problem, params: &Parameters, state: &LatentState, seed: u64) -> Result<Vec<LedgerGap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = log_joint(problem, params, state)?;
    let mut out = Vec::new();
    for step in MhStep::all(problem) {
        let cur = step.get(params, state);
        let moved: Vec<f64> = cur
            .iter()
            .map(|&v| match step {
                MhStep::Phi(_) | MhStep::Psi(_) | MhStep::Rho(_) => (v + 0.05 * normal(&mut rng)).clamp(-0.99, 0.99),
                MhStep::SigmaEta(_) | MhStep::Delta => v * (0.1 * normal(&mut rng)).exp(),
                _ => v + 0.1 * normal(&mut rng),
            })
            .collect();
        let (mut p2, mut s2) = (params.clone(), state.clone());
        step.set(&mut p2, &mut s2, &moved);
        let want = log_joint(problem, &p2, &s2)? - base;
        let got = step_log_target(problem, params, state, step, &moved)? - step_log_target(problem, params, state, step, &cur)?;
        out.push(LedgerGap { step: step.label(), gap: (got - want).abs() });
    }
    Ok(out)
}

/// Asymptotic Kolmogorov tail `P(K > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-1.0f64).powi(j - 1) * (-2.0 * (j as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sample KS statistic and p-value against a CDF.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        let c = cdf(v);
        d.max(c - i as f64 / n).max((i + 1) as f64 / n - c)
    });
    let root = n.sqrt();
    (d, kolmogorov_tail((root + 0.12 + 0.11 / root) * d))
}

/// Piecewise-linear CDF through grid points.
struct GridCdf {
    x: Vec<f64>,
    c: Vec<f64>,
}

impl GridCdf {
    #[cfg(test)]
    /// From unnormalized log density values on an even grid (trapezoid rule).
    fn from_log_density(x: Vec<f64>, log_d: &[f64]) -> Self {
        let top = log_d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d: Vec<f64> = log_d.iter().map(|v| (v - top).exp()).collect();
        Self::from_density(x, &d)
    }

    fn from_density(x: Vec<f64>, d: &[f64]) -> Self {
        let mut c = vec![0.0; x.len()];
        for i in 1..x.len() {
            c[i] = c[i - 1] + 0.5 * (d[i] + d[i - 1]) * (x[i] - x[i - 1]);
        }
        let total = c[c.len() - 1];
        c.iter_mut().for_each(|v| *v /= total);
        GridCdf { x, c }
    }

    fn eval(&self, v: f64) -> f64 {
        match self.x.partition_point(|&g| g <= v) {
            0 => 0.0,
            i if i == self.x.len() => 1.0,
            i => {
                let w = (v - self.x[i - 1]) / (self.x[i] - self.x[i - 1]);
                self.c[i - 1] + w * (self.c[i] - self.c[i - 1])
            }
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct KsResult {
    pub step: String,
    pub draws: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Which value a conditional update moves and how its density is measured.
#[derive(Clone, Copy)]
enum Coord {
    /// Log-volatility `(t, column)`.
    H(usize, usize),
    F(usize, usize),
    Beta,
    Mu(usize),
    Gamma,
    Phi(usize),
    Psi,
    Rho,
    /// Scale parameters: the prior is on the variance, so the density of the
    /// standard deviation picks up a factor `2 sigma`.
    SigmaEta(usize),
    SigmaNu,
    Delta,
}

impl Coord {
    fn get(self, params: &Parameters, state: &LatentState) -> f64 {
        match self {
            Coord::H(t, j) => state.h[(t, j)],
            Coord::F(t, k) => state.f[(t, k)],
            Coord::Beta => params.beta[(0, 0)],
            Coord::Mu(j) => params.mu[j],
            Coord::Gamma => params.gamma[0],
            Coord::Phi(j) => params.phi[j],
            Coord::Psi => params.psi[0],
            Coord::Rho => params.rho[0],
            Coord::SigmaEta(j) => params.sigma_eta[j],
            Coord::SigmaNu => params.sigma_nu[0],
            Coord::Delta => params.delta,
        }
    }

    fn set(self, params: &mut Parameters, state: &mut LatentState, v: f64) {
        match self {
            Coord::H(t, j) => state.h[(t, j)] = v,
            Coord::F(t, k) => state.f[(t, k)] = v,
            Coord::Beta => params.beta[(0, 0)] = v,
            Coord::Mu(j) => params.mu[j] = v,
            Coord::Gamma => params.gamma[0] = v,
            Coord::Phi(j) => params.phi[j] = v,
            Coord::Psi => params.psi[0] = v,
            Coord::Rho => params.rho[0] = v,
            Coord::SigmaEta(j) => params.sigma_eta[j] = v,
            Coord::SigmaNu => params.sigma_nu[0] = v,
            Coord::Delta => params.delta = v,
        }
    }

    fn bounds(self) -> (f64, f64) {
        match self {
            Coord::Phi(_) | Coord::Psi | Coord::Rho => (-1.0, 1.0),
            Coord::SigmaEta(_) | Coord::SigmaNu | Coord::Delta => (0.0, f64::INFINITY),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn log_jacobian(self, v: f64) -> f64 {
        match self {
            Coord::SigmaEta(_) | Coord::SigmaNu => (2.0 * v).ln(),
            _ => 0.0,
        }
    }
}

fn grid_for(coord: Coord, draws: &[f64], n: usize) -> Vec<f64> {
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    let lo_d = draws.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_d = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lb, ub) = coord.bounds();
    let width = (hi_d - lo_d).max(1e-12);
    let lo = (lo_d - 0.5 * width - 4.0 * sd).max(lb + 1e-9 * (1.0 + lb.abs()));
    let hi = (hi_d + 0.5 * width + 4.0 * sd).min(ub - 1e-9 * (1.0 + ub.abs()));
    linspace(lo, hi, n)
}

/// Marginal CDFs of the log joint over a tensor grid of up to three
/// coordinates, all others held at their values in `(params, state)`.
fn grid_marginals(
    problem: &Problem,
    params: &Parameters,
    state: &LatentState,
    coords: &[Coord],
    grids: &[Vec<f64>],
) -> Result<Vec<GridCdf>> {
    let dims: Vec<usize> = grids.iter().map(Vec::len).collect();
    let total: usize = dims.iter().product();
    let mut logs = vec![0.0; total];
    let (mut p2, mut s2) = (params.clone(), state.clone());
    for (flat, slot) in logs.iter_mut().enumerate() {
        let mut rest = flat;
        let mut lj = 0.0;
        for (c, g) in coords.iter().zip(grids).rev() {
            let v = g[rest % g.len()];
            rest /= g.len();
            c.set(&mut p2, &mut s2, v);
            lj += c.log_jacobian(v);
        }
        *slot = log_joint(problem, &p2, &s2).map(|l| l + lj).unwrap_or(f64::NEG_INFINITY);
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::numeric("log joint is not finite anywhere on the grid"));
    }
    let dens: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
    let mut out = Vec::with_capacity(coords.len());
    for (axis, g) in grids.iter().enumerate() {
        let stride: usize = dims[axis + 1..].iter().product();
        let mut marg = vec![0.0; g.len()];
        for (flat, d) in dens.iter().enumerate() {
            marg[(flat / stride) % g.len()] += d;
        }
        out.push(GridCdf::from_density(g.clone(), &marg));
    }
    Ok(out)
}

const PILOT: usize = 5000;
const MAX_THIN: usize = 2000;

/// Settings of the sampler-exactness suite.
#[derive(Debug, Clone, Copy)]
pub struct ExactnessConfig {
    pub draws: usize,
    pub burn: usize,
    /// Minimum sampler calls between retained draws; raised to three times the
    /// inefficiency factor measured on a pilot run.
    pub thin: usize,
    pub seed: u64,
}

impl Default for ExactnessConfig {
    fn default() -> Self {
        ExactnessConfig { draws: 4000, burn: 200, thin: 5, seed: 1 }
    }
}

/// Runs each conditional update alone on the toy problem and KS-tests the
/// long-run marginal of every coordinate it moves against grid quadrature of
/// the log joint.
pub fn sampler_exactness(config: &ExactnessConfig) -> Result<Vec<KsResult>> {
    let (problem, params0, state0) = toy_problem()?;
    // a wide delta random walk: exactness does not depend on the step size,
    // and the default step would need far longer runs to mix over this
    // diffuse conditional
    let tuning = McmcTuning { n_blocks: Some(1), sigma_delta: 0.3, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = problem.t();

    type Update = fn(&Problem, &mut Parameters, &mut LatentState, &McmcTuning, &mut ChaCha8Rng) -> Result<Tally>;
    let blocks: Vec<(&str, Vec<Coord>, bool, Update)> = vec![
        ("h_idio", (0..n).map(|t| Coord::H(t, 0)).collect(), true, |pr, pa, st, tu, r| {
            samplers::sample_h1(pr, pa, st, &[(0, pr.t() - 1)], tu, r)
        }),
        ("h_factor", (0..n).map(|t| Coord::H(t, 1)).collect(), true, |pr, pa, st, tu, r| {
            samplers::sample_h2(pr, pa, st, &[(0, pr.t() - 1)], tu, r)
        }),
        ("f", (0..n).map(|t| Coord::F(t, 0)).collect(), true, |pr, pa, st, _, r| samplers::sample_f(pr, pa, st, r)),
        ("beta", vec![Coord::Beta], false, |pr, pa, st, tu, r| samplers::sample_beta(pr, pa, st, tu, r)),
        ("mu", vec![Coord::Mu(0), Coord::Mu(1)], false, |pr, pa, st, _, r| samplers::sample_mu(pr, pa, st, r)),
        ("gamma", vec![Coord::Gamma], false, |pr, pa, st, _, r| samplers::sample_gamma(pr, pa, st, r)),
        ("phi", vec![Coord::Phi(0), Coord::Phi(1)], false, |pr, pa, st, _, r| samplers::sample_phi(pr, pa, st, r)),
        ("psi", vec![Coord::Psi], false, |pr, pa, st, _, r| samplers::sample_psi(pr, pa, st, r)),
        ("rho", vec![Coord::Rho], false, |pr, pa, st, _, r| samplers::sample_rho(pr, pa, st, r)),
        ("sigma_eta", vec![Coord::SigmaEta(0), Coord::SigmaEta(1)], false, |pr, pa, st, _, r| {
            samplers::sample_sigma_eta(pr, pa, st, r)
        }),
        ("sigma_nu", vec![Coord::SigmaNu], false, |pr, pa, st, _, r| samplers::sample_sigma_nu(pr, pa, st, r)),
        ("delta", vec![Coord::Delta], false, |pr, pa, st, tu, r| samplers::sample_delta(pr, pa, st, tu, r)),
    ];

    let mut out = Vec::new();
    for (name, coords, joint, update) in blocks {
        let (mut params, mut state) = (params0.clone(), state0.clone());
        for _ in 0..config.burn {
            update(&problem, &mut params, &mut state, &tuning, &mut rng)?;
        }
        // thin by the pilot's worst inefficiency so the retained draws are
        // close to independent
        let mut pilot = vec![Vec::with_capacity(PILOT); coords.len()];
        let mut tally = Tally::default();
        for _ in 0..PILOT {
            tally.add(update(&problem, &mut params, &mut state, &tuning, &mut rng)?);
            for (c, d) in coords.iter().zip(pilot.iter_mut()) {
                d.push(c.get(&params, &state));
            }
        }
        let worst = pilot
            .iter()
            .map(|d| inefficiency_factor(d).map(|i| i.factor).unwrap_or(1.0))
            .fold(1.0f64, f64::max);
        // a stuck independence sampler can look uncorrelated on a short
        // pilot, so the acceptance rate bounds the thinning as well
        let rate = if tally.proposed == 0 { 1.0 } else { tally.rate().max(1e-3) };
        let thin = config.thin.max((3.0 * worst).ceil() as usize).max((3.0 / rate).ceil() as usize).min(MAX_THIN);
        let mut draws = vec![Vec::with_capacity(config.draws); coords.len()];
        for _ in 0..config.draws {
            for _ in 0..thin {
                update(&problem, &mut params, &mut state, &tuning, &mut rng)?;
            }
            for (c, d) in coords.iter().zip(draws.iter_mut()) {
                d.push(c.get(&params, &state));
            }
        }
        // coordinates moved jointly share one tensor grid; the others have
        // independent conditionals and get one line each
        let cdfs = if joint {
            let grids: Vec<Vec<f64>> = coords.iter().zip(&draws).map(|(c, d)| grid_for(*c, d, 81)).collect();
            grid_marginals(&problem, &params0, &state0, &coords, &grids)?
        } else {
            let mut v = Vec::new();
            for (c, d) in coords.iter().zip(&draws) {
                let grid = grid_for(*c, d, 4001);
                v.extend(grid_marginals(&problem, &params0, &state0, &[*c], &[grid])?);
            }
            v
        };
        for (k, (cdf, d)) in cdfs.iter().zip(&draws).enumerate() {
            let (statistic, p_value) = ks_test(d, |v| cdf.eval(v));
            let step = if coords.len() > 1 { format!("{name}[{}]", k + 1) } else { name.to_string() };
            out.push(KsResult { step, draws: d.len(), statistic, p_value });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessReport {
    /// Largest relative gap between the time-averaged corrected realized
    /// variance and the daily sample variance.
    pub rv_mean_err: f64,
    pub unit_diag_err: f64,
    pub min_eigen: f64,
    /// Largest entry error of `exp(log R)` reconstructions.
    pub round_trip_err: f64,
}

fn random_correlation(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, p, p + 2, 1.0);
    let s = &a * a.transpose();
    let d = s.diagonal().map(|v| 1.0 / v.sqrt());
    let mut r = DMatrix::from_fn(p, p, |i, j| s[(i, j)] * d[i] * d[j]);
    r.fill_diagonal(1.0);
    linalg::symmetrize(&r)
}

/// Bias-correction invariants on random panels and round trips of random
/// correlation matrices with `p <= 10`.
pub fn preprocess_invariants(cases: usize, seed: u64) -> Result<PreprocessReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = PreprocessReport { rv_mean_err: 0.0, unit_diag_err: 0.0, min_eigen: f64::INFINITY, round_trip_err: 0.0 };
    for _ in 0..cases {
        let p = rng.random_range(1..=10);
        let t = rng.random_range(20..=60);
        let y = random_matrix(&mut rng, t, p, 0.01);
        let raw: Vec<DMatrix<f64>> = (0..t)
            .map(|_| {
                let r = random_correlation(&mut rng, p);
                let sd = DVector::from_fn(p, |_, _| 0.01 * (0.5 + rng.random::<f64>()));
                DMatrix::from_fn(p, p, |i, j| r[(i, j)] * sd[i] * sd[j])
            })
            .collect();
        let (_, corrected) = preprocess::correct_rcov(&y, &raw, VarianceDivisor::Population)?;
        let (_, s2) = preprocess::sample_moments(&y, VarianceDivisor::Population)?;
        for i in 0..p {
            let mean = corrected.iter().map(|w| w[(i, i)]).sum::<f64>() / t as f64;
            rep.rv_mean_err = rep.rv_mean_err.max((mean - s2[i]).abs() / s2[i]);
        }
        for w in &corrected {
            let (_, r) = preprocess::split_covariance(w)?;
            let d = w.diagonal().map(f64::sqrt);
            let raw_r = DMatrix::from_fn(p, p, |i, j| w[(i, j)] / (d[i] * d[j]));
            rep.unit_diag_err = rep.unit_diag_err.max(raw_r.diagonal().add_scalar(-1.0).amax());
            rep.min_eigen = rep.min_eigen.min(linalg::sym_eigen(&r)?.values[p - 1]);
        }
        let r = random_correlation(&mut rng, p);
        let back = preprocess::reconstruct_correlation(&preprocess::log_correlation(&r)?)?;
        rep.round_trip_err = rep.round_trip_err.max((back - r).amax());
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct RcovMoments {
    pub draws: usize,
    /// Largest |z| of the entrywise means against `X`.
    pub mean_z: f64,
    /// Largest |z| of the diagonal variances against `2 x_ii^2 / delta`.
    pub var_z: f64,
}

/// Moments of the realized-covariance measurement density at a fixed
/// covariance `X`: mean `X` and `Var(w_ii) = 2 x_ii^2 / delta`.
pub fn rcov_moments(draws: usize, delta: f64, seed: u64) -> Result<RcovMoments> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 3;
    let x = {
        let a = random_matrix(&mut rng, p, p, 1.0);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    };
    let mut params = Parameters::zeros(p, 1);
    params.delta = delta;
    let (s0, k0) = (params.s0(), params.k0());
    let scale = &x * k0;
    let mut sum = DMatrix::zeros(p, p);
    let mut sum2 = DMatrix::zeros(p, p);
    let mut diag_dev2 = vec![Vec::with_capacity(draws); p];
    for _ in 0..draws {
        let w = sample_inv_wishart(&mut rng, s0, &scale)?;
        sum += &w;
        sum2 += w.component_mul(&w);
        for i in 0..p {
            diag_dev2[i].push((w[(i, i)] - x[(i, i)]).powi(2));
        }
    }
    let n = draws as f64;
    let mut mean_z = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            let m = sum[(i, j)] / n;
            let var = sum2[(i, j)] / n - m * m;
            mean_z = mean_z.max((m - x[(i, j)]).abs() / (var / n).sqrt());
        }
    }
    let mut var_z = 0.0f64;
    for (i, dev2) in diag_dev2.iter().enumerate() {
        // variance about the known mean and the standard error of that average
        let v = dev2.iter().sum::<f64>() / n;
        let v2 = dev2.iter().map(|d| d * d).sum::<f64>() / n;
        let se = ((v2 - v * v) / n).sqrt();
        var_z = var_z.max((v - 2.0 * x[(i, i)].powi(2) / delta).abs() / se);
    }
    Ok(RcovMoments { draws, mean_z, var_z })
}

/// Pass thresholds of the `check` command.
pub mod tolerance {
    pub const GRADIENT: f64 = 1e-6;
    pub const HESSIAN: f64 = 1e-4;
    pub const STATE_SPACE: f64 = 1e-8;
    pub const STATE_SPACE_Z: f64 = 4.0;
    pub const KS_P: f64 = 0.01;
    pub const LEDGER: f64 = 1e-8;
    pub const RV_MEAN: f64 = 1e-12;
    pub const UNIT_DIAG: f64 = 1e-8;
    pub const ROUND_TRIP: f64 = 1e-7;
    pub const RCOV_Z: f64 = 3.0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Derivatives,
    StateSpace,
    Exactness,
    Ledger,
    Preprocess,
    Rcov,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Derivatives, Suite::StateSpace, Suite::Exactness, Suite::Ledger, Suite::Preprocess, Suite::Rcov];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Derivatives => "derivatives",
            Suite::StateSpace => "state-space",
            Suite::Exactness => "exactness",
            Suite::Ledger => "ledger",
            Suite::Preprocess => "preprocess",
            Suite::Rcov => "rcov",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs one suite at full size and grades it with [`tolerance`].
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    use tolerance::*;
    let one = |name: &str, passed: bool, detail: String| CheckResult { suite: suite.as_str(), name: name.into(), passed, detail };
    Ok(match suite {
        Suite::Derivatives => {
            let r = derivative_oracle(50, seed)?;
            vec![one(
                "loading and log-volatility derivatives",
                r.passed(GRADIENT, HESSIAN),
                format!("{} instances, gradient rel {:.3e}, hessian rel {:.3e}", r.instances, r.grad_rel, r.hess_rel),
            )]
        }
        Suite::StateSpace => state_space_oracle(100_000, seed)?
            .into_iter()
            .map(|c| {
                one(
                    &format!("T={} m={} n={}", c.periods, c.state_dim, c.obs_dim),
                    c.passed(STATE_SPACE, STATE_SPACE_Z),
                    format!(
                        "mean {:.2e}, innovations {:.2e}, loglik {:.2e}, |z| mean {:.2}, cov {:.2}",
                        c.mean_err, c.innovation_err, c.loglik_err, c.mean_z, c.cov_z
                    ),
                )
            })
            .collect(),
        Suite::Exactness => sampler_exactness(&ExactnessConfig::default())?
            .into_iter()
            .map(|r| one(&r.step, r.p_value > KS_P, format!("{} draws, D {:.4}, p {:.4}", r.draws, r.statistic, r.p_value)))
            .collect(),
        Suite::Ledger => {
            let (problem, params, state) = toy_problem()?;
            acceptance_ledger(&problem, &params, &state, seed)?
                .into_iter()
                .map(|g| one(&g.step, g.gap <= LEDGER, format!("gap {:.3e}", g.gap)))
                .collect()
        }
        Suite::Preprocess => {
            let r = preprocess_invariants(100, seed)?;
            vec![
                one("corrected variance mean", r.rv_mean_err <= RV_MEAN, format!("rel {:.3e}", r.rv_mean_err)),
                one("unit diagonal", r.unit_diag_err <= UNIT_DIAG, format!("{:.3e}", r.unit_diag_err)),
                one("positive definite", r.min_eigen > 0.0, format!("min eigenvalue {:.3e}", r.min_eigen)),
                one("log/exp round trip", r.round_trip_err <= ROUND_TRIP, format!("{:.3e}", r.round_trip_err)),
            ]
        }
        Suite::Rcov => {
            let r = rcov_moments(100_000, 8.0, seed)?;
            vec![
                one("mean", r.mean_z <= RCOV_Z, format!("max |z| {:.2} at {} draws", r.mean_z, r.draws)),
                one("diagonal variance", r.var_z <= RCOV_Z, format!("max |z| {:.2} at {} draws", r.var_z, r.draws)),
            ]
        }
    })
}
