//! Forward simulation of the full model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::density::x_matrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::types::{Dataset, LatentState, ModelConfig, Parameters};

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws from the inverse Wishart with `nu` degrees of freedom and scale
/// `psi` (mean `psi / (nu - p - 1)`), through the Bartlett factor of the
/// matching Wishart.
pub fn sample_inv_wishart<R: Rng + ?Sized>(rng: &mut R, nu: f64, psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = psi.nrows();
    if !(nu > p as f64 - 1.0) {
        return Err(Error::validation(format!("inverse Wishart needs nu > p - 1, got {nu}")));
    }
    let c = linalg::cholesky(psi)?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::numeric(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    // M = C A'^{-1}, i.e. M' = A^{-1} C'
    let mt = a
        .solve_lower_triangular(&c.transpose())
        .ok_or_else(|| Error::numeric("singular Bartlett factor"))?;
    Ok(linalg::symmetrize(&(mt.transpose() * mt)))
}

/// Simulates `(Dataset, LatentState)` of length `config.t`. Realized
/// covariances are always generated so that any variant can be scored on
/// them.
pub fn generate<R: Rng + ?Sized>(config: &ModelConfig, params: &Parameters, rng: &mut R) -> Result<(Dataset, LatentState)> {
    config.validate()?;
    params.validate(config)?;
    let (p, q, n) = (config.p, config.q, config.t);
    let nv = p + q;
    let a = params.a_matrix();
    let (s0, k0) = (params.s0(), params.k0());

    let mut h = DMatrix::zeros(n, nv);
    let mut f = DMatrix::zeros(n, q);
    let mut y = DMatrix::zeros(n, p);
    let mut x = DMatrix::zeros(n, q);
    let mut w = Vec::with_capacity(n);

    for j in 0..nv {
        let (mu, phi, s) = (params.mu[j], params.phi[j], params.sigma_eta[j]);
        h[(0, j)] = mu + s / (1.0 - phi * phi).sqrt() * std_normal(rng);
    }
    for t in 0..n {
        let mut eps2 = DVector::zeros(q);
        for k in 0..q {
            eps2[k] = std_normal(rng);
            let prev = if t == 0 { 0.0 } else { f[(t - 1, k)] - params.gamma[k] };
            f[(t, k)] = params.gamma[k] + params.psi[k] * prev + (0.5 * h[(t, p + k)]).exp() * eps2[k];
        }
        let ft = f.row(t).transpose();
        let bf = &params.beta * &ft;
        for i in 0..p {
            y[(t, i)] = bf[i] + (0.5 * h[(t, i)]).exp() * std_normal(rng);
        }
        let af = &a * &ft;
        for k in 0..q {
            x[(t, k)] = af[k] + params.sigma_nu[k] * std_normal(rng);
        }
        let row: Vec<f64> = h.row(t).iter().copied().collect();
        w.push(sample_inv_wishart(rng, s0, &(x_matrix(&params.beta, &row) * k0))?);
        if t + 1 < n {
            for j in 0..nv {
                let (mu, phi, s) = (params.mu[j], params.phi[j], params.sigma_eta[j]);
                let eta = if j < p {
                    s * std_normal(rng)
                } else {
                    let rho = params.rho[j - p];
                    s * (rho * eps2[j - p] + (1.0 - rho * rho).sqrt() * std_normal(rng))
                };
                h[(t + 1, j)] = mu + phi * (h[(t, j)] - mu) + eta;
            }
        }
    }
    Ok((Dataset::new(y, x, Some(w)), LatentState { h, f }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_vol_of_vol_pins_h() {
        let cfg = ModelConfig::new(2, 1, 50, crate::Variant::Fmrsv).unwrap();
        let mut params = Parameters::simulation_truth(2, 1);
        params.sigma_eta.fill(1e-300);
        let (_, state) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for t in 0..50 {
            for j in 0..3 {
                assert!((state.h[(t, j)] - params.mu[j]).abs() < 1e-200);
            }
        }
    }

    #[test]
    fn generated_data_validate() {
        let cfg = ModelConfig::new(4, 2, 30, crate::Variant::Fmrsv).unwrap();
        let params = Parameters::simulation_truth(4, 2);
        let (data, state) = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(data.validate(&cfg).is_ok());
        assert!(state.validate(&cfg).is_ok());
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = ModelConfig::new(3, 1, 20, crate::Variant::Fmrsv).unwrap();
        let params = Parameters::simulation_truth(3, 1);
        let a = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = generate(&cfg, &params, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
