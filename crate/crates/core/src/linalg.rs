//! Small dense linear-algebra helpers on top of nalgebra.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Columns are the matching unit eigenvectors.
    pub vectors: DMatrix<f64>,
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Chol> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::numeric("matrix is not positive definite"))
}

pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(Error::numeric("eigen-decomposition of a non-square matrix"));
    }
    let eig = nalgebra::SymmetricEigen::try_new(symmetrize(m), 1e-15, 10_000)
        .ok_or_else(|| Error::numeric("symmetric eigen-decomposition did not converge"))?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// `V diag(g(lambda)) V'` for a symmetric matrix.
pub fn sym_apply(m: &DMatrix<f64>, g: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m)?;
    let d = eig.values.map(g);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("matrix function produced non-finite eigenvalues"));
    }
    let scaled = &eig.vectors * DMatrix::from_diagonal(&d);
    Ok(symmetrize(&(scaled * eig.vectors.transpose())))
}

/// Matrix logarithm of a symmetric positive-definite matrix.
pub fn sym_log(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m)?;
    if eig.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::numeric("matrix logarithm of a non-positive-definite matrix"));
    }
    sym_apply(m, f64::ln)
}

pub fn sym_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_apply(m, f64::exp)
}

pub fn log_det_chol(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    Ok(log_det_chol(&cholesky(m)?))
}

pub fn inv_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m)?.inverse()))
}

/// Log multivariate gamma `log Gamma_p(a)`.
pub fn ln_mvgamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * PI.ln() + (0..p).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// Inverse-Wishart log density with `nu` degrees of freedom and scale `psi`
/// (mean `psi / (nu - p - 1)`).
pub fn inv_wishart_logpdf(w: &DMatrix<f64>, nu: f64, psi: &DMatrix<f64>) -> Result<f64> {
    let p = w.nrows();
    let pf = p as f64;
    let cw = cholesky(w)?;
    let cpsi = cholesky(psi)?;
    let tr = (cw.solve(psi)).trace();
    Ok(nu / 2.0 * log_det_chol(&cpsi) - nu * pf / 2.0 * 2f64.ln() - ln_mvgamma(p, nu / 2.0)
        - (nu + pf + 1.0) / 2.0 * log_det_chol(&cw)
        - 0.5 * tr)
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = cholesky(cov)?;
    let d = x - mean;
    let sol = c.solve(&d);
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_det_chol(&c) + d.dot(&sol)))
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

pub fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws from `N(Q^{-1} b, Q^{-1})` given the precision `Q` and linear term `b`.
/// Returns the draw and the mean.
pub fn sample_canonical<R: Rng + ?Sized>(
    rng: &mut R,
    precision: &DMatrix<f64>,
    linear: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let c = cholesky(precision)?;
    let mean = c.solve(linear);
    let z = std_normal_vec(rng, linear.len());
    let l_t = c.l().transpose();
    let dev = l_t
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::numeric("singular Cholesky factor"))?;
    Ok((mean.clone() + dev, mean))
}

/// Log density of `x` under `N(Q^{-1} b, Q^{-1})`.
pub fn canonical_logpdf(x: &DVector<f64>, precision: &DMatrix<f64>, linear: &DVector<f64>) -> Result<f64> {
    let c = cholesky(precision)?;
    let mean = c.solve(linear);
    let d = x - mean;
    let quad = d.dot(&(precision * &d));
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() - log_det_chol(&c) + quad))
}

/// Allocation-free kernels on small row-major square matrices stored in
/// slices, for the per-period `q x q` work inside the samplers.
pub mod small {
    /// In-place lower Cholesky factor; the strict upper triangle is left
    /// untouched. Returns `false` if the matrix is not positive definite.
    pub fn chol(a: &mut [f64], n: usize) -> bool {
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if !(d > 0.0) {
                return false;
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        true
    }

    /// Solves `L L' x = b` in place given the factor from [`chol`].
    pub fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }

    pub fn chol_logdet(l: &[f64], n: usize) -> f64 {
        2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
    }

    /// Inverse of a symmetric positive-definite matrix from its factor.
    pub fn chol_inverse(l: &[f64], n: usize, out: &mut [f64]) {
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            chol_solve(l, n, &mut col);
            for i in 0..n {
                out[i * n + j] = col[i];
            }
        }
    }

    /// `x' A y` for a full square `A`.
    pub fn quad(a: &[f64], n: usize, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let mut r = 0.0;
            for j in 0..n {
                r += a[i * n + j] * y[j];
            }
            s += x[i] * r;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn small_kernels_match_nalgebra() {
        let m = spd(3, 11);
        let mut a: Vec<f64> = (0..9).map(|k| m[(k / 3, k % 3)]).collect();
        assert!(small::chol(&mut a, 3));
        assert_relative_eq!(small::chol_logdet(&a, 3), log_det_spd(&m).unwrap(), epsilon = 1e-12);
        let mut b = vec![1.0, -2.0, 0.5];
        small::chol_solve(&a, 3, &mut b);
        let want = cholesky(&m).unwrap().solve(&DVector::from_vec(vec![1.0, -2.0, 0.5]));
        for i in 0..3 {
            assert_relative_eq!(b[i], want[i], epsilon = 1e-12);
        }
        let mut inv = vec![0.0; 9];
        small::chol_inverse(&a, 3, &mut inv);
        let full = inv_spd(&m).unwrap();
        for k in 0..9 {
            assert_relative_eq!(inv[k], full[(k / 3, k % 3)], epsilon = 1e-12);
        }
        let mut neg = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!small::chol(&mut neg, 2));
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(n, n) * n as f64
    }

    #[test]
    fn log_exp_roundtrip() {
        let m = spd(4, 1);
        let back = sym_exp(&sym_log(&m).unwrap()).unwrap();
        assert_relative_eq!(back, m, epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let m = spd(5, 2);
        let e = sym_eigen(&m).unwrap();
        for k in 1..5 {
            assert!(e.values[k - 1] >= e.values[k]);
        }
        let rebuilt = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert_relative_eq!(rebuilt, m, epsilon = 1e-10);
    }

    #[test]
    fn mvgamma_reduces_to_gamma() {
        assert_relative_eq!(ln_mvgamma(1, 3.7), ln_gamma(3.7), epsilon = 1e-14);
        // Gamma_2(a) = sqrt(pi) Gamma(a) Gamma(a - 1/2)
        let a = 4.2;
        let want = 0.5 * PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5);
        assert_relative_eq!(ln_mvgamma(2, a), want, epsilon = 1e-12);
    }

    #[test]
    fn inv_wishart_scalar_matches_inverse_gamma() {
        // For p = 1, IW(nu, psi) is IG(nu/2, psi/2).
        let (nu, psi, w) = (7.0, 3.0, 0.8);
        let got = inv_wishart_logpdf(
            &DMatrix::from_element(1, 1, w),
            nu,
            &DMatrix::from_element(1, 1, psi),
        )
        .unwrap();
        let (a, b) = (nu / 2.0, psi / 2.0);
        let want = a * b.ln() - ln_gamma(a) - (a + 1.0) * w.ln() - b / w;
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn canonical_density_matches_moment_form() {
        let q = spd(3, 3);
        let b = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let x = DVector::from_vec(vec![0.1, 0.2, -0.4]);
        let cov = inv_spd(&q).unwrap();
        let mean = &cov * &b;
        assert_relative_eq!(
            canonical_logpdf(&x, &q, &b).unwrap(),
            mvn_logpdf(&x, &mean, &cov).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn canonical_sampler_moments() {
        let q = spd(2, 4);
        let b = DVector::from_vec(vec![1.0, -0.5]);
        let cov = inv_spd(&q).unwrap();
        let mean = &cov * &b;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let mut s = DVector::zeros(2);
        let mut ss = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let (x, _) = sample_canonical(&mut rng, &q, &b).unwrap();
            s += &x;
            ss += &x * x.transpose();
        }
        let m = s / n as f64;
        let c = ss / n as f64 - &m * m.transpose();
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((m[i] - mean[i]).abs() < 4.0 * se);
        }
        assert_relative_eq!(c, cov, max_relative = 0.05, epsilon = 0.01);
    }
}
