//! Full-conditional updates, one per MCMC step.
//!
//! Each update takes the fixed [`Problem`], mutates only its own block of
//! `Parameters` or `LatentState`, and reports a [`Tally`] of proposals and
//! acceptances (Gibbs steps report every draw as accepted).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::Problem;
use crate::error::{Error, Result};
use crate::linalg::small;
use crate::types::{LatentState, Parameters};

mod factors;
mod loadings;
mod params;
mod vol_factor;
mod vol_idio;

pub use factors::{factor_state_space, sample_f};
pub use loadings::{sample_beta, BetaProposal};
pub use params::{
    phi_proposal_moments, rho_log_conditional, sample_alpha, sample_delta, sample_gamma, sample_mu, sample_phi,
    sample_psi, sample_rho, sample_sigma_eta, sample_sigma_nu,
};
pub use vol_factor::{factor_vol_approximation, sample_h2, FactorVolApprox};
pub use vol_idio::{idio_vol_approximation, sample_h1, IdioVolApprox};

/// Sampler tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcTuning {
    /// Number of log-volatility blocks; `None` means `ceil(T / 5)`.
    pub n_blocks: Option<usize>,
    /// Disturbance-smoother refinements of the block mode.
    pub mode_iters: usize,
    /// Random-walk step for `log delta`.
    pub sigma_delta: f64,
    /// Jitter interior block boundaries every sweep.
    pub stochastic_knots: bool,
}

impl Default for McmcTuning {
    fn default() -> Self {
        McmcTuning { n_blocks: None, mode_iters: 5, sigma_delta: 0.001, stochastic_knots: false }
    }
}

impl McmcTuning {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == Some(0) {
            return Err(Error::validation("the number of volatility blocks must be at least 1"));
        }
        if !(self.sigma_delta > 0.0) || !self.sigma_delta.is_finite() {
            return Err(Error::validation("sigma_delta must be positive"));
        }
        Ok(())
    }

    pub fn blocks_for(&self, t: usize) -> usize {
        self.n_blocks.unwrap_or_else(|| t.div_ceil(5)).clamp(1, t)
    }
}

/// Proposal and acceptance counts of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub proposed: u64,
    pub accepted: u64,
    /// Proposals built with a fallback (non-concave mode search, curvature
    /// regularization).
    pub fallbacks: u64,
}

impl Tally {
    pub fn gibbs(n: u64) -> Self {
        Tally { proposed: n, accepted: n, fallbacks: 0 }
    }

    pub fn add(&mut self, other: Tally) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.fallbacks += other.fallbacks;
    }

    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Metropolis–Hastings decision from a log acceptance ratio.
pub(crate) fn mh_accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Inclusive `(start, end)` block boundaries covering `0..n`.
pub fn blocks<R: Rng + ?Sized>(n: usize, tuning: &McmcTuning, rng: &mut R) -> Vec<(usize, usize)> {
    let k = tuning.blocks_for(n);
    let size = n.div_ceil(k);
    let mut starts: Vec<usize> = (0..k).map(|b| b * size).filter(|&s| s < n).collect();
    if tuning.stochastic_knots && starts.len() > 1 {
        for b in 1..starts.len() {
            let jitter = rng.random_range(0..size) as isize - (size / 2) as isize;
            starts[b] = (starts[b] as isize + jitter).clamp(1, n as isize - 1) as usize;
        }
        starts.sort_unstable();
        starts.dedup();
    }
    starts
        .iter()
        .enumerate()
        .map(|(b, &s)| (s, starts.get(b + 1).map_or(n - 1, |&next| next - 1)))
        .collect()
}

/// Per-period `M_t = V2_t^{-1} + B' V1_t^{-1} B`, row-major `q x q`.
#[derive(Debug, Clone)]
pub(crate) struct MCache {
    pub q: usize,
    pub m: Vec<f64>,
}

impl MCache {
    pub fn build(params: &Parameters, h: &nalgebra::DMatrix<f64>) -> Self {
        let (p, q) = (params.p(), params.q());
        let n = h.nrows();
        let mut m = vec![0.0; n * q * q];
        for t in 0..n {
            let mt = &mut m[t * q * q..(t + 1) * q * q];
            for k in 0..q {
                mt[k * q + k] = (-h[(t, p + k)]).exp();
            }
            for i in 0..p {
                let w = (-h[(t, i)]).exp();
                for a in 0..q {
                    let ba = params.beta[(i, a)] * w;
                    for b in 0..q {
                        mt[a * q + b] += ba * params.beta[(i, b)];
                    }
                }
            }
        }
        MCache { q, m }
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.m[t * self.q * self.q..(t + 1) * self.q * self.q]
    }

    pub fn at_mut(&mut self, t: usize) -> &mut [f64] {
        let qq = self.q * self.q;
        &mut self.m[t * qq..(t + 1) * qq]
    }

    /// Adds `scale * v v'` to `M_t`.
    pub fn rank_one(&mut self, t: usize, scale: f64, v: &[f64]) {
        let q = self.q;
        let mt = self.at_mut(t);
        for a in 0..q {
            for b in 0..q {
                mt[a * q + b] += scale * v[a] * v[b];
            }
        }
    }

    /// Cholesky factor of `M_t` into `buf`.
    pub fn factor(&self, t: usize, buf: &mut [f64]) -> Result<()> {
        buf.copy_from_slice(self.at(t));
        if small::chol(buf, self.q) {
            Ok(())
        } else {
            Err(Error::numeric(format!("X_t is singular at t = {}", t + 1)))
        }
    }
}

/// Acceptance tallies of one or more sweeps, by step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTallies {
    pub h_idio: Tally,
    pub h_factor: Tally,
    pub f: Tally,
    pub alpha: Tally,
    pub beta: Tally,
    pub mu: Tally,
    pub gamma: Tally,
    pub phi: Tally,
    pub psi: Tally,
    pub rho: Tally,
    pub sigma_eta: Tally,
    pub sigma_nu: Tally,
    pub delta: Tally,
}

impl SweepTallies {
    pub fn add(&mut self, o: &SweepTallies) {
        for (a, b) in self.entries_mut().into_iter().zip(o.entries()) {
            a.1.add(b.1);
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, Tally)> {
        vec![
            ("h_idio", self.h_idio),
            ("h_factor", self.h_factor),
            ("f", self.f),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("mu", self.mu),
            ("gamma", self.gamma),
            ("phi", self.phi),
            ("psi", self.psi),
            ("rho", self.rho),
            ("sigma_eta", self.sigma_eta),
            ("sigma_nu", self.sigma_nu),
            ("delta", self.delta),
        ]
    }

    /// Sets every count, in [`SweepTallies::entries`] order.
    pub fn set_all(&mut self, counts: &[Tally]) {
        for ((_, slot), c) in self.entries_mut().into_iter().zip(counts) {
            *slot = *c;
        }
    }

    fn entries_mut(&mut self) -> Vec<(&'static str, &mut Tally)> {
        vec![
            ("h_idio", &mut self.h_idio),
            ("h_factor", &mut self.h_factor),
            ("f", &mut self.f),
            ("alpha", &mut self.alpha),
            ("beta", &mut self.beta),
            ("mu", &mut self.mu),
            ("gamma", &mut self.gamma),
            ("phi", &mut self.phi),
            ("psi", &mut self.psi),
            ("rho", &mut self.rho),
            ("sigma_eta", &mut self.sigma_eta),
            ("sigma_nu", &mut self.sigma_nu),
            ("delta", &mut self.delta),
        ]
    }
}

/// One Metropolis-Hastings update, addressed by its block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhStep {
    /// Whole log-volatility path of asset `i`.
    IdioVol(usize),
    /// Whole log-volatility path of factor `k`.
    FactorVol(usize),
    /// Loading row of asset `i`.
    Beta(usize),
    Phi(usize),
    Psi(usize),
    Rho(usize),
    SigmaEta(usize),
    Delta,
}

impl MhStep {
    /// Every MH update the sweep performs under the problem's variant.
    pub fn all(problem: &Problem) -> Vec<MhStep> {
        let (p, q) = (problem.p(), problem.q());
        let variant = problem.config.variant;
        let mut out: Vec<MhStep> = (0..p).map(MhStep::IdioVol).collect();
        out.extend((0..q).map(MhStep::FactorVol));
        if variant.uses_rcov() {
            out.extend((0..p).map(MhStep::Beta));
        }
        out.extend((0..p + q).map(MhStep::Phi));
        out.extend((0..q).map(MhStep::Psi));
        if variant.has_leverage() {
            out.extend((0..q).map(MhStep::Rho));
            out.extend((p..p + q).map(MhStep::SigmaEta));
        }
        if variant.uses_rcov() {
            out.push(MhStep::Delta);
        }
        out
    }

    /// Current value of the block.
    pub fn get(&self, params: &Parameters, state: &LatentState) -> Vec<f64> {
        let p = params.p();
        match *self {
            MhStep::IdioVol(i) => state.h.column(i).iter().copied().collect(),
            MhStep::FactorVol(k) => state.h.column(p + k).iter().copied().collect(),
            MhStep::Beta(i) => params.beta.row(i).iter().copied().collect(),
            MhStep::Phi(j) => vec![params.phi[j]],
            MhStep::Psi(k) => vec![params.psi[k]],
            MhStep::Rho(k) => vec![params.rho[k]],
            MhStep::SigmaEta(j) => vec![params.sigma_eta[j]],
            MhStep::Delta => vec![params.delta],
        }
    }

    /// Writes `value` into the block.
    pub fn set(&self, params: &mut Parameters, state: &mut LatentState, value: &[f64]) {
        let p = params.p();
        match *self {
            MhStep::IdioVol(i) => state.h.column_mut(i).copy_from_slice(value),
            MhStep::FactorVol(k) => state.h.column_mut(p + k).copy_from_slice(value),
            MhStep::Beta(i) => params.beta.row_mut(i).copy_from_slice(value),
            MhStep::Phi(j) => params.phi[j] = value[0],
            MhStep::Psi(k) => params.psi[k] = value[0],
            MhStep::Rho(k) => params.rho[k] = value[0],
            MhStep::SigmaEta(j) => params.sigma_eta[j] = value[0],
            MhStep::Delta => params.delta = value[0],
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MhStep::IdioVol(i) => format!("h_idio[{}]", i + 1),
            MhStep::FactorVol(k) => format!("h_factor[{}]", k + 1),
            MhStep::Beta(i) => format!("beta[{}]", i + 1),
            MhStep::Phi(j) => format!("phi[{}]", j + 1),
            MhStep::Psi(k) => format!("psi[{}]", k + 1),
            MhStep::Rho(k) => format!("rho[{}]", k + 1),
            MhStep::SigmaEta(j) => format!("sigma_eta[{}]", j + 1),
            MhStep::Delta => "delta".to_string(),
        }
    }
}

/// Log target of an MH update at `value`, computed by the same code the
/// sampler uses for its acceptance ratio. Defined up to a constant that does
/// not depend on `value`.
pub fn step_log_target(problem: &Problem, params: &Parameters, state: &LatentState, step: MhStep, value: &[f64]) -> Result<f64> {
    Ok(match step {
        MhStep::IdioVol(i) => vol_idio::path_log_target(problem, params, state, i, value)?,
        MhStep::FactorVol(k) => vol_factor::path_log_target(problem, params, state, k, value)?,
        MhStep::Beta(i) => {
            let prop = BetaProposal::new(problem, params, state, i, 0)?;
            prop.log_target(&nalgebra::DVector::from_column_slice(value))
        }
        MhStep::Phi(j) => params::phi_log_target(problem, params, state, j, value[0]),
        MhStep::Psi(k) => params::psi_log_target(problem, params, state, k, value[0]),
        MhStep::Rho(k) => rho_log_conditional(problem, params, state, k, value[0]),
        MhStep::SigmaEta(j) => params::sigma_eta_log_target(problem, params, state, j, value[0]),
        MhStep::Delta => params::delta_log_target(problem, params, state, value[0])?
            .ok_or_else(|| Error::validation("delta is not sampled without realized covariances"))?,
    })
}

fn tag(step: &'static str, sweep: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Sweep { sweep, step, source: Box::new(e) }
}

/// One full sweep: log-volatilities, factors, then every parameter block.
pub fn sweep<R: Rng + ?Sized>(
    problem: &Problem,
    params: &mut Parameters,
    state: &mut LatentState,
    tuning: &McmcTuning,
    rng: &mut R,
    sweep_index: usize,
) -> Result<SweepTallies> {
    let variant = problem.config.variant;
    let mut out = SweepTallies::default();
    let knots = blocks(problem.t(), tuning, rng);
    out.h_idio = sample_h1(problem, params, state, &knots, tuning, rng).map_err(tag("h_idio", sweep_index))?;
    out.h_factor = sample_h2(problem, params, state, &knots, tuning, rng).map_err(tag("h_factor", sweep_index))?;
    out.f = sample_f(problem, params, state, rng).map_err(tag("f", sweep_index))?;
    out.alpha = sample_alpha(problem, params, state, rng).map_err(tag("alpha", sweep_index))?;
    out.beta = sample_beta(problem, params, state, tuning, rng).map_err(tag("beta", sweep_index))?;
    out.mu = sample_mu(problem, params, state, rng).map_err(tag("mu", sweep_index))?;
    out.gamma = sample_gamma(problem, params, state, rng).map_err(tag("gamma", sweep_index))?;
    out.phi = sample_phi(problem, params, state, rng).map_err(tag("phi", sweep_index))?;
    out.psi = sample_psi(problem, params, state, rng).map_err(tag("psi", sweep_index))?;
    if variant.has_leverage() {
        out.rho = sample_rho(problem, params, state, rng).map_err(tag("rho", sweep_index))?;
    }
    out.sigma_eta = sample_sigma_eta(problem, params, state, rng).map_err(tag("sigma_eta", sweep_index))?;
    out.sigma_nu = sample_sigma_nu(problem, params, state, rng).map_err(tag("sigma_nu", sweep_index))?;
    if variant.uses_rcov() {
        out.delta = sample_delta(problem, params, state, tuning, rng).map_err(tag("delta", sweep_index))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_blocks_cover_range() {
        let tuning = McmcTuning { n_blocks: Some(3), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(blocks(10, &tuning, &mut rng), vec![(0, 3), (4, 7), (8, 9)]);
        let one = McmcTuning { n_blocks: Some(1), ..Default::default() };
        assert_eq!(blocks(7, &one, &mut rng), vec![(0, 6)]);
        // more blocks than periods collapse to singletons
        let many = McmcTuning { n_blocks: Some(50), ..Default::default() };
        assert_eq!(blocks(3, &many, &mut rng), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn stochastic_blocks_partition() {
        let tuning = McmcTuning { n_blocks: Some(7), stochastic_knots: true, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let b = blocks(101, &tuning, &mut rng);
            assert_eq!(b[0].0, 0);
            assert_eq!(b.last().unwrap().1, 100);
            for w in b.windows(2) {
                assert_eq!(w[0].1 + 1, w[1].0);
                assert!(w[0].0 <= w[0].1);
            }
        }
    }

    #[test]
    fn default_block_count() {
        assert_eq!(McmcTuning::default().blocks_for(2350), 470);
        assert_eq!(McmcTuning::default().blocks_for(3), 1);
    }
}
