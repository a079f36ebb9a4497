//! Row-by-row update of the loading matrix.
//!
//! Given everything else, the conditional of a row `b_i` is Gaussian apart
//! from `s0/2 sum_t log |X_t|`. Because `b_i` enters `M_t` through a rank-one
//! term, that piece is `s0/2 sum_t log(1 + e^{-h_it} b' N_t b)` with `N_t` the
//! inverse of `M_t` without asset `i`. The proposal expands it to second
//! order around the Newton mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{mh_accept, MCache, McmcTuning, Tally};
use crate::density::Problem;
use crate::error::{Error, Result};
use crate::linalg::{self, small};
use crate::types::{LatentState, Parameters};

const NEWTON_TOL: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

/// Exact conditional of one loading row, split into its Gaussian part and
/// the per-period log-determinant terms.
#[derive(Debug, Clone)]
struct BetaTarget {
    q: usize,
    s0: f64,
    p0: DMatrix<f64>,
    b0: DVector<f64>,
    /// Row-major `N_t` for every period.
    n_inv: Vec<f64>,
    w: Vec<f64>,
}

impl BetaTarget {
    fn log_det_part(&self, beta: &DVector<f64>) -> f64 {
        let q = self.q;
        let b = beta.as_slice();
        let mut total = 0.0;
        for (t, &w) in self.w.iter().enumerate() {
            let n = &self.n_inv[t * q * q..(t + 1) * q * q];
            total += (1.0 + w * small::quad(n, q, b, b)).ln();
        }
        0.5 * self.s0 * total
    }

    fn value(&self, beta: &DVector<f64>) -> f64 {
        -0.5 * beta.dot(&(&self.p0 * beta)) + self.b0.dot(beta) + self.log_det_part(beta)
    }

    /// Gradient and Hessian of the log-determinant part.
    fn log_det_derivs(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.q;
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        let mut nb = vec![0.0; q];
        for (t, &w) in self.w.iter().enumerate() {
            let n = &self.n_inv[t * q * q..(t + 1) * q * q];
            for a in 0..q {
                nb[a] = (0..q).map(|c| n[a * q + c] * beta[c]).sum();
            }
            let s = w * (0..q).map(|a| beta[a] * nb[a]).sum::<f64>();
            let scale = 2.0 * w / (1.0 + s);
            for a in 0..q {
                let ga = scale * nb[a];
                grad[a] += ga;
                for c in 0..q {
                    hess[(a, c)] += scale * (n[a * q + c] - ga * nb[c]);
                }
            }
        }
        (grad * (0.5 * self.s0), hess * (0.5 * self.s0))
    }
}

/// Gaussian proposal `N(P^{-1} b, P^{-1})` for one loading row.
#[derive(Debug, Clone)]
pub struct BetaProposal {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub mode: DVector<f64>,
    /// The expansion curvature had to be regularized or dropped.
    pub fallback: bool,
    target: BetaTarget,
}

impl BetaProposal {
    /// Builds the proposal for row `i` at the current state.
    pub fn new(problem: &Problem, params: &Parameters, state: &LatentState, i: usize, newton_iters: usize) -> Result<Self> {
        let cache = MCache::build(params, &state.h);
        Self::with_cache(problem, params, state, &cache, i, newton_iters)
    }

    fn with_cache(
        problem: &Problem,
        params: &Parameters,
        state: &LatentState,
        cache: &MCache,
        i: usize,
        newton_iters: usize,
    ) -> Result<Self> {
        let target = build_target(problem, params, state, cache, i)?;
        let start = params.beta.row(i).transpose();
        let (mut precision, mut linear, mut fallback) = expand(&target, &start);
        let mut mode = solve(&precision, &linear)?;
        if problem.rcov.is_some() {
            for _ in 0..newton_iters {
                let next = {
                    let (pr, li, _) = expand(&target, &mode);
                    solve(&pr, &li)?
                };
                let change = (&next - &mode).amax();
                mode = next;
                if change < NEWTON_TOL {
                    break;
                }
            }
            (precision, linear, fallback) = expand(&target, &mode);
            mode = solve(&precision, &linear)?;
        }
        Ok(BetaProposal { precision, linear, mode, fallback, target })
    }

    /// Exact log conditional of the row, up to a constant.
    pub fn log_target(&self, beta: &DVector<f64>) -> f64 {
        self.target.value(beta)
    }

    /// Log proposal density, up to a constant.
    pub fn log_proposal(&self, beta: &DVector<f64>) -> f64 {
        -0.5 * beta.dot(&(&self.precision * beta)) + self.linear.dot(beta)
    }
}

fn solve(precision: &DMatrix<f64>, linear: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(linalg::cholesky(precision)?.solve(linear))
}

/// Precision and linear term of the second-order expansion at `at`.
fn expand(target: &BetaTarget, at: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, bool) {
    if target.w.is_empty() {
        return (target.p0.clone(), target.b0.clone(), false);
    }
    let (g, h) = target.log_det_derivs(at);
    let q = target.q;
    let precision = &target.p0 - &h;
    if linalg::cholesky(&precision).is_ok() {
        let linear = &target.b0 + &g - &h * at;
        return (precision, linear, false);
    }
    let ridged = &precision + DMatrix::identity(q, q) * RIDGE;
    if linalg::cholesky(&ridged).is_ok() {
        let linear = &target.b0 + &g - &h * at + at * RIDGE;
        return (ridged, linear, true);
    }
    (target.p0.clone(), &target.b0 + g, true)
}

fn build_target(problem: &Problem, params: &Parameters, state: &LatentState, cache: &MCache, i: usize) -> Result<BetaTarget> {
    let (n, p, q) = (problem.t(), params.p(), params.q());
    let prior_prec = linalg::inv_spd(&problem.priors.s_beta[i])?;
    let mut p0 = prior_prec.clone();
    let mut b0 = &prior_prec * &problem.priors.m_beta[i];
    for t in 0..n {
        let w = (-state.h[(t, i)]).exp();
        let f = state.f.row(t).transpose();
        p0 += &f * f.transpose() * w;
        b0 += &f * (w * problem.data.y[(t, i)]);
    }
    let mut n_inv = Vec::new();
    let mut ws = Vec::new();
    if let Some(rcov) = &problem.rcov {
        let k0 = params.k0();
        n_inv = vec![0.0; n * q * q];
        ws = vec![0.0; n];
        let bi: Vec<f64> = params.beta.row(i).iter().copied().collect();
        let mut buf = vec![0.0; q * q];
        for t in 0..n {
            let v2 = DVector::from_fn(q, |k, _| state.h[(t, p + k)].exp());
            let wi = &rcov.w_inv[t];
            let mut cross = DVector::zeros(q);
            for j in (0..p).filter(|&j| j != i) {
                cross += params.beta.row(j).transpose() * wi[(j, i)];
            }
            for k in 0..q {
                p0[(k, k)] += k0 * wi[(i, i)] * v2[k];
                b0[k] -= k0 * v2[k] * cross[k];
            }
            let w = (-state.h[(t, i)]).exp();
            buf.copy_from_slice(cache.at(t));
            for a in 0..q {
                for c in 0..q {
                    buf[a * q + c] -= w * bi[a] * bi[c];
                }
            }
            if !small::chol(&mut buf, q) {
                return Err(Error::numeric(format!("M_t without asset {} is singular at t = {}", i + 1, t + 1)));
            }
            small::chol_inverse(&buf, q, &mut n_inv[t * q * q..(t + 1) * q * q]);
            ws[t] = w;
        }
    }
    Ok(BetaTarget { q, s0: params.s0(), p0: linalg::symmetrize(&p0), b0, n_inv, w: ws })
}

/// Updates every row of the loading matrix.
pub fn sample_beta<R: Rng + ?Sized>(
    problem: &Problem,
    params: &mut Parameters,
    state: &LatentState,
    tuning: &McmcTuning,
    rng: &mut R,
) -> Result<Tally> {
    let p = params.p();
    let mut tally = Tally::default();
    let mut cache = MCache::build(params, &state.h);
    for i in 0..p {
        let prop = BetaProposal::with_cache(problem, params, state, &cache, i, tuning.mode_iters)?;
        tally.fallbacks += u64::from(prop.fallback);
        let (draw, _) = linalg::sample_canonical(rng, &prop.precision, &prop.linear)?;
        let current = params.beta.row(i).transpose();
        let accept = if problem.rcov.is_none() {
            true
        } else {
            let log_ratio = prop.log_target(&draw) - prop.log_target(&current) - prop.log_proposal(&draw)
                + prop.log_proposal(&current);
            mh_accept(rng, log_ratio)
        };
        tally.record(accept);
        if accept {
            for t in 0..problem.t() {
                let w = (-state.h[(t, i)]).exp();
                cache.rank_one(t, -w, current.as_slice());
                cache.rank_one(t, w, draw.as_slice());
            }
            params.beta.row_mut(i).copy_from(&draw.transpose());
        }
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::log_joint;
    use crate::simulate::generate;
    use crate::types::{ModelConfig, PriorSpec, Variant};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: Variant) -> (Problem, Parameters, LatentState) {
        let cfg = ModelConfig::new(4, 2, 25, variant).unwrap();
        let mut params = Parameters::simulation_truth(4, 2);
        params.beta[(1, 1)] = -0.4;
        let (data, state) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
        (Problem::new(cfg, PriorSpec::vague(4, 2), data).unwrap(), params, state)
    }

    #[test]
    fn target_tracks_log_joint() {
        let (problem, params, state) = setup(Variant::Fmrsv);
        let base = log_joint(&problem, &params, &state).unwrap();
        for i in [0, 2] {
            let prop = BetaProposal::new(&problem, &params, &state, i, 5).unwrap();
            let cur = params.beta.row(i).transpose();
            let moved = &cur + DVector::from_vec(vec![0.3, -0.2]);
            let mut p2 = params.clone();
            p2.beta.row_mut(i).copy_from(&moved.transpose());
            let want = log_joint(&problem, &p2, &state).unwrap() - base;
            assert_relative_eq!(prop.log_target(&moved) - prop.log_target(&cur), want, epsilon = 1e-8);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (problem, params, state) = setup(Variant::Fmrsv);
        let prop = BetaProposal::new(&problem, &params, &state, 1, 0).unwrap();
        let at = DVector::from_vec(vec![0.7, -0.1]);
        let (g, h) = prop.target.log_det_derivs(&at);
        let eps = 1e-5;
        for a in 0..2 {
            let mut up = at.clone();
            let mut dn = at.clone();
            up[a] += eps;
            dn[a] -= eps;
            let fd = (prop.target.log_det_part(&up) - prop.target.log_det_part(&dn)) / (2.0 * eps);
            assert_relative_eq!(g[a], fd, max_relative = 1e-6);
            let (gu, _) = prop.target.log_det_derivs(&up);
            let (gd, _) = prop.target.log_det_derivs(&dn);
            for c in 0..2 {
                assert_relative_eq!(h[(c, a)], (gu[c] - gd[c]) / (2.0 * eps), max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn newton_mode_is_stationary() {
        let (problem, params, state) = setup(Variant::Fmrsv);
        let prop = BetaProposal::new(&problem, &params, &state, 3, 50).unwrap();
        let eps = 1e-6;
        for a in 0..2 {
            let mut up = prop.mode.clone();
            let mut dn = prop.mode.clone();
            up[a] += eps;
            dn[a] -= eps;
            let g = (prop.log_target(&up) - prop.log_target(&dn)) / (2.0 * eps);
            assert!(g.abs() < 1e-4, "gradient {g}");
        }
    }

    #[test]
    fn gaussian_case_is_exact() {
        let (problem, mut params, state) = setup(Variant::Fmsv);
        let tuning = McmcTuning::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tally = sample_beta(&problem, &mut params, &state, &tuning, &mut rng).unwrap();
        assert_eq!(tally.accepted, tally.proposed);
        let prop = BetaProposal::new(&problem, &params, &state, 0, 5).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.9]);
        let y = DVector::from_vec(vec![-1.0, 0.4]);
        assert_relative_eq!(
            prop.log_target(&x) - prop.log_target(&y),
            prop.log_proposal(&x) - prop.log_proposal(&y),
            epsilon = 1e-9
        );
    }

    #[test]
    fn rcov_sampler_mostly_accepts() {
        let (problem, mut params, state) = setup(Variant::Fmrsv);
        let tuning = McmcTuning::default();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut tally = Tally::default();
        for _ in 0..100 {
            tally.add(sample_beta(&problem, &mut params, &state, &tuning, &mut rng).unwrap());
        }
        assert!(tally.rate() > 0.7, "acceptance {}", tally.rate());
    }
}
