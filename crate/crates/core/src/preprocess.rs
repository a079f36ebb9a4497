//! Bias correction of raw realized covariances.
//!
//! Realized variances are rescaled so that their time average equals the
//! sample variance of daily returns. Realized correlations are shifted in
//! matrix-log space so that their average log matrix equals the log of the
//! daily sample correlation matrix, then mapped back to valid correlation
//! matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Floor applied to eigenvalues of a singular correlation matrix before the log.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Convergence threshold of the diagonal iteration.
pub const RECON_TOL: f64 = 1e-12;
pub const RECON_MAX_ITER: usize = 100;

/// Divisor used for the daily sample variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceDivisor {
    /// `1 / T`.
    #[default]
    Population,
    /// `1 / (T - 1)`.
    Unbiased,
}

/// Estimated corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrection {
    /// Volatility scale factors, one per asset.
    pub c: Vec<f64>,
    /// Additive correction in log-correlation space (row-major `p x p`).
    pub log_corr_shift: Vec<Vec<f64>>,
    /// Log of the daily-return sample correlation matrix (row-major).
    pub log_daily_corr: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Column means and variances of `y`.
pub fn sample_moments(y: &DMatrix<f64>, divisor: VarianceDivisor) -> Result<(DVector<f64>, DVector<f64>)> {
    let t = y.nrows();
    if t < 2 {
        return Err(Error::validation("at least two periods are needed for sample moments"));
    }
    let denom = match divisor {
        VarianceDivisor::Population => t as f64,
        VarianceDivisor::Unbiased => (t - 1) as f64,
    };
    let mean = DVector::from_fn(y.ncols(), |i, _| y.column(i).mean());
    let var = DVector::from_fn(y.ncols(), |i, _| {
        y.column(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / denom
    });
    Ok((mean, var))
}

pub fn sample_correlation(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (mean, var) = sample_moments(y, VarianceDivisor::Population)?;
    let (t, p) = y.shape();
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::validation("a return series has zero variance"));
    }
    let mut r = DMatrix::identity(p, p);
    for i in 0..p {
        for j in 0..i {
            let cov = (0..t).map(|s| (y[(s, i)] - mean[i]) * (y[(s, j)] - mean[j])).sum::<f64>() / t as f64;
            let v = cov / (var[i] * var[j]).sqrt();
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Rescales each realized-variance column so its mean equals the daily sample
/// variance. Returns the scale factors and the corrected series.
pub fn correct_volatilities(
    y: &DMatrix<f64>,
    raw_rv: &DMatrix<f64>,
    divisor: VarianceDivisor,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if raw_rv.shape() != y.shape() {
        return Err(Error::validation("realized variances and returns differ in shape"));
    }
    if raw_rv.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::validation("realized variances must be strictly positive"));
    }
    let (_, s2) = sample_moments(y, divisor)?;
    let c = DVector::from_fn(y.ncols(), |i, _| s2[i] / raw_rv.column(i).mean());
    let mut out = raw_rv.clone();
    for i in 0..y.ncols() {
        out.column_mut(i).scale_mut(c[i]);
    }
    Ok((c, out))
}

fn check_correlation(r: &DMatrix<f64>) -> Result<()> {
    if !linalg::is_symmetric(r, 1e-10) {
        return Err(Error::validation("correlation matrix is not symmetric"));
    }
    if r.diagonal().iter().any(|d| (d - 1.0).abs() > 1e-8) {
        return Err(Error::validation("correlation matrix must have a unit diagonal"));
    }
    Ok(())
}

/// Matrix log of a correlation matrix, flooring tiny eigenvalues.
pub fn log_correlation(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_correlation(r)?;
    let eig = linalg::sym_eigen(r)?;
    let min = eig.values[eig.values.len() - 1];
    if min < -1e-10 {
        return Err(Error::validation(format!("correlation matrix is not positive semi-definite (min eigenvalue {min:e})")));
    }
    if min < EIGEN_FLOOR {
        log::warn!("correlation matrix is near singular (min eigenvalue {min:e}); flooring at {EIGEN_FLOOR:e}");
    }
    linalg::sym_apply(r, |v| v.max(EIGEN_FLOOR).ln())
}

/// Maps a symmetric matrix to the correlation matrix whose log agrees with it
/// off the diagonal, by iterating on the diagonal.
pub fn reconstruct_correlation(lr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !linalg::is_symmetric(lr, 1e-10) {
        return Err(Error::validation("log-correlation matrix is not symmetric"));
    }
    let p = lr.nrows();
    let mut a = linalg::symmetrize(lr);
    for _ in 0..RECON_MAX_ITER {
        let e = linalg::sym_exp(&a)?;
        let delta = DVector::from_fn(p, |i, _| e[(i, i)].ln());
        for i in 0..p {
            a[(i, i)] -= delta[i];
        }
        if delta.amax() < RECON_TOL {
            let mut r = linalg::sym_exp(&a)?;
            r.fill_diagonal(1.0);
            return Ok(r);
        }
    }
    Err(Error::numeric(format!(
        "correlation reconstruction did not converge in {RECON_MAX_ITER} iterations"
    )))
}

/// Shifts every raw correlation in log space by `log(daily) - mean_t log(raw_t)`
/// and reconstructs. Returns the shift and the corrected matrices.
pub fn correct_correlations(
    daily_corr: &DMatrix<f64>,
    raw_corrs: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    if raw_corrs.is_empty() {
        return Err(Error::validation("no realized correlation matrices"));
    }
    let lr_daily = log_correlation(daily_corr)?;
    let logs = raw_corrs.iter().map(log_correlation).collect::<Result<Vec<_>>>()?;
    let mut mean = DMatrix::zeros(lr_daily.nrows(), lr_daily.ncols());
    for l in &logs {
        mean += l;
    }
    mean /= logs.len() as f64;
    let shift = &lr_daily - mean;
    let corrected = logs
        .iter()
        .map(|l| reconstruct_correlation(&(l + &shift)))
        .collect::<Result<Vec<_>>>()?;
    Ok((shift, corrected))
}

/// `W_t = D_t^{1/2} R_t D_t^{1/2}` with `D_t` the corrected variances.
pub fn assemble_rcov(rv: &DMatrix<f64>, corrs: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    if rv.nrows() != corrs.len() {
        return Err(Error::validation("variance rows and correlation matrices differ in number"));
    }
    let mut out = Vec::with_capacity(corrs.len());
    for (t, r) in corrs.iter().enumerate() {
        if rv.row(t).iter().any(|&v| !(v > 0.0)) {
            return Err(Error::validation(format!("non-positive variance at period {}", t + 1)));
        }
        let sd: Vec<f64> = rv.row(t).iter().map(|v| v.sqrt()).collect();
        let w = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| {
            if i == j {
                rv[(t, i)]
            } else {
                r[(i, j)] * sd[i] * sd[j]
            }
        });
        out.push(w);
    }
    Ok(out)
}

/// Splits a covariance matrix into its variances and correlation matrix.
pub fn split_covariance(w: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = w.diagonal();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::validation("covariance has a non-positive variance"));
    }
    let sd = d.map(f64::sqrt);
    let mut r = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)] / (sd[i] * sd[j]));
    r.fill_diagonal(1.0);
    Ok((d, linalg::symmetrize(&r)))
}

/// Full pipeline on raw realized covariances.
pub fn correct_rcov(
    y: &DMatrix<f64>,
    raw_w: &[DMatrix<f64>],
    divisor: VarianceDivisor,
) -> Result<(BiasCorrection, Vec<DMatrix<f64>>)> {
    let (t, p) = y.shape();
    if raw_w.len() != t {
        return Err(Error::validation(format!("{} covariance matrices for {t} return rows", raw_w.len())));
    }
    let mut raw_rv = DMatrix::zeros(t, p);
    let mut raw_corr = Vec::with_capacity(t);
    for (s, w) in raw_w.iter().enumerate() {
        if w.shape() != (p, p) {
            return Err(Error::validation(format!("covariance {} is not {p}x{p}", s + 1)));
        }
        let (d, r) = split_covariance(w)?;
        raw_rv.set_row(s, &d.transpose());
        raw_corr.push(r);
    }
    let (c, rv) = correct_volatilities(y, &raw_rv, divisor)?;
    let daily = sample_correlation(y)?;
    let lr_daily = log_correlation(&daily)?;
    let (shift, corrs) = correct_correlations(&daily, &raw_corr)?;
    let w = assemble_rcov(&rv, &corrs)?;
    let correction = BiasCorrection {
        c: c.iter().copied().collect(),
        log_corr_shift: to_rows(&shift),
        log_daily_corr: to_rows(&lr_daily),
    };
    Ok((correction, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn corr2(r: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0])
    }

    #[test]
    fn two_by_two_recovers_target() {
        let lr = linalg::sym_log(&corr2(0.8)).unwrap();
        let mut off = lr.clone();
        off.fill_diagonal(0.0);
        let r = reconstruct_correlation(&off).unwrap();
        assert_relative_eq!(r[(0, 1)], 0.8, epsilon = 1e-8);
    }

    #[test]
    fn zero_off_diagonal_gives_identity() {
        let r = reconstruct_correlation(&DMatrix::from_diagonal_element(3, 3, 0.7)).unwrap();
        assert_relative_eq!(r, DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn two_by_two_shift_hits_daily_correlation() {
        let raw = vec![corr2(0.3); 4];
        let (_, corrected) = correct_correlations(&corr2(0.5), &raw).unwrap();
        for r in corrected {
            assert_relative_eq!(r[(0, 1)], 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn identical_inputs_need_no_shift() {
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.1, 0.2, 1.0, 0.4, -0.1, 0.4, 1.0]);
        let (shift, corrected) = correct_correlations(&r, &[r.clone(), r.clone()]).unwrap();
        assert!(shift.amax() < 1e-12);
        assert_relative_eq!(corrected[1], r, epsilon = 1e-10);
    }

    #[test]
    fn volatility_scale_invariance() {
        let y = DMatrix::from_row_slice(4, 1, &[0.1, -0.3, 0.2, 0.05]);
        let rv = DMatrix::from_row_slice(4, 1, &[0.01, 0.02, 0.03, 0.04]);
        let (c1, out1) = correct_volatilities(&y, &rv, VarianceDivisor::Population).unwrap();
        let (c2, out2) = correct_volatilities(&y, &(rv * 2.0), VarianceDivisor::Population).unwrap();
        assert_relative_eq!(c2[0], c1[0] / 2.0, epsilon = 1e-15);
        assert_relative_eq!(out1, out2, epsilon = 1e-15);
    }

    #[test]
    fn assembled_matches_elementwise() {
        let rv = DMatrix::from_row_slice(1, 2, &[0.04, 0.09]);
        let w = assemble_rcov(&rv, &[corr2(-0.25)]).unwrap();
        assert_eq!(w[0][(0, 0)], 0.04);
        assert_eq!(w[0][(1, 1)], 0.09);
        assert_relative_eq!(w[0][(0, 1)], -0.25 * (0.04f64 * 0.09).sqrt(), epsilon = 1e-16);
    }
}
