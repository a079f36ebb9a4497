//! Joint draw of the factor path given the log-volatilities.
//!
//! The returns and realized factors load on `f_t` through the stacked matrix
//! `[A; B]` with diagonal noise. Their generalized least-squares combination
//! is a sufficient `q`-dimensional observation of `f_t`, so the smoother runs
//! on a model whose observation dimension is `q` instead of `p + q`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::Tally;
use crate::density::{factor_cond_var, factor_drift, Problem};
use crate::error::Result;
use crate::linalg;
use crate::state_space::StateSpace;
use crate::types::{LatentState, Parameters};

/// State-space form of the factor path given `h`, with the collapsed
/// observations it is run on.
pub fn factor_state_space(
    problem: &Problem,
    params: &Parameters,
    state: &LatentState,
) -> Result<(StateSpace, Vec<DVector<f64>>)> {
    let (n, p, q) = (problem.t(), params.p(), params.q());
    let a = params.a_matrix();
    let h = &state.h;
    let nu_prec = DVector::from_fn(q, |j, _| params.sigma_nu[j].powi(-2));
    let a_info = a.transpose() * DMatrix::from_diagonal(&nu_prec) * &a;
    let psi = DMatrix::from_diagonal(&params.psi);
    let drift0 = (DMatrix::identity(q, q) - &psi) * &params.gamma;
    let cond_sd = |t: usize| DVector::from_fn(q, |k, _| factor_cond_var(params, h, t, k).sqrt());
    let drift = |t: usize| DVector::from_fn(q, |k, _| factor_drift(params, h, t, k));

    let mut ss = StateSpace {
        z: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        tt: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        hh: Vec::with_capacity(n),
        a1: &params.gamma + drift(0),
        p1: DMatrix::from_diagonal(&cond_sd(0).map(|v| v * v)),
    };
    let mut obs = Vec::with_capacity(n);
    for t in 0..n {
        let mut info = a_info.clone();
        let mut score = a.transpose() * problem.data.x.row(t).transpose().component_mul(&nu_prec);
        for i in 0..p {
            let w = (-h[(t, i)]).exp();
            let b = params.beta.row(i);
            for r in 0..q {
                score[r] += w * b[r] * problem.data.y[(t, i)];
                for c in 0..q {
                    info[(r, c)] += w * b[r] * b[c];
                }
            }
        }
        let chol = linalg::cholesky(&info)?;
        obs.push(chol.solve(&score));
        let noise = linalg::cholesky(&chol.inverse())?.l();
        let mut g = DMatrix::zeros(q, 2 * q);
        g.view_mut((0, 0), (q, q)).copy_from(&noise);
        let mut hh = DMatrix::zeros(q, 2 * q);
        let mut c = drift0.clone();
        if t + 1 < n {
            hh.view_mut((0, q), (q, q)).set_diagonal(&cond_sd(t + 1));
            c += drift(t + 1);
        }
        ss.z.push(DMatrix::identity(q, q));
        ss.d.push(DVector::zeros(q));
        ss.g.push(g);
        ss.tt.push(psi.clone());
        ss.c.push(c);
        ss.hh.push(hh);
    }
    Ok((ss, obs))
}

/// Draws the whole factor path from its full conditional.
pub fn sample_f<R: Rng + ?Sized>(problem: &Problem, params: &Parameters, state: &mut LatentState, rng: &mut R) -> Result<Tally> {
    let (ss, obs) = factor_state_space(problem, params, state)?;
    let draw = ss.simulation_smoother(&obs, rng)?;
    for (t, f) in draw.iter().enumerate() {
        state.f.row_mut(t).copy_from(&f.transpose());
    }
    Ok(Tally::gibbs(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::log_joint;
    use crate::simulate::generate;
    use crate::types::{ModelConfig, PriorSpec, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: Variant) -> (Problem, Parameters, LatentState) {
        let cfg = ModelConfig::new(4, 2, 10, variant).unwrap();
        let mut params = Parameters::simulation_truth(4, 2);
        params.rho[0] = -0.6;
        params.rho[1] = 0.4;
        params.alpha[0] = 0.8;
        if variant == Variant::FmrsvNl {
            params.rho.fill(0.0);
        }
        let (data, state) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        (Problem::new(cfg, PriorSpec::vague(4, 2), data).unwrap(), params, state)
    }

    /// The log joint is quadratic in `f`, so the smoothed path must be where
    /// its gradient in `f` vanishes.
    #[test]
    fn smoothed_path_is_the_conditional_mode() {
        for variant in [Variant::Fmrsv, Variant::FmrsvNl] {
            let (problem, params, state) = setup(variant);
            let (ss, obs) = factor_state_space(&problem, &params, &state).unwrap();
            let sm = ss.smooth(&obs).unwrap();
            let mut at_mean = state.clone();
            for t in 0..10 {
                at_mean.f.row_mut(t).copy_from(&sm.states[t].transpose());
            }
            let eps = 1e-4;
            for t in 0..10 {
                for k in 0..2 {
                    let mut up = at_mean.clone();
                    let mut dn = at_mean.clone();
                    up.f[(t, k)] += eps;
                    dn.f[(t, k)] -= eps;
                    let g = (log_joint(&problem, &params, &up).unwrap() - log_joint(&problem, &params, &dn).unwrap())
                        / (2.0 * eps);
                    assert!(g.abs() < 1e-6, "gradient {g} at ({t}, {k})");
                }
            }
        }
    }

    #[test]
    fn draws_center_on_the_mean() {
        let (problem, params, state) = setup(Variant::Fmrsv);
        let (ss, obs) = factor_state_space(&problem, &params, &state).unwrap();
        let mean = ss.smooth(&obs).unwrap().states;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let mut acc = vec![0.0; 2];
        let mut acc2 = vec![0.0; 2];
        let mut s = state.clone();
        for _ in 0..n {
            sample_f(&problem, &params, &mut s, &mut rng).unwrap();
            for k in 0..2 {
                let d = s.f[(4, k)] - mean[4][k];
                acc[k] += d;
                acc2[k] += d * d;
            }
        }
        for k in 0..2 {
            let m = acc[k] / n as f64;
            let se = (acc2[k] / n as f64 / n as f64).sqrt();
            assert!(m.abs() < 4.0 * se, "bias {m} vs se {se}");
        }
    }
}
