//! Linear Gaussian state-space models in the single-disturbance form
//!
//! ```text
//! y_t       = Z_t a_t + d_t + G_t u_t
//! a_{t+1}   = T_t a_t + c_t + H_t u_t,     u_t ~ N(0, I)
//! a_1       ~ N(a1, P1)
//! ```
//!
//! Sharing one disturbance vector between the two equations lets
//! measurement and transition noise be correlated, which the leverage
//! samplers need. Provides the Kalman filter, the disturbance smoother and a
//! mean-correction simulation smoother, plus a scalar-state fast path.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Innovation variances below this are treated as a degenerate model.
pub const INNOVATION_FLOOR: f64 = 1e-30;

/// General time-varying model. Each per-period vector has length `T`; the
/// transition entries at the last period are never used.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub z: Vec<DMatrix<f64>>,
    pub d: Vec<DVector<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub tt: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub hh: Vec<DMatrix<f64>>,
    pub a1: DVector<f64>,
    pub p1: DMatrix<f64>,
}

/// Kalman filter output.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub v: Vec<DVector<f64>>,
    pub f_inv: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Smoothed disturbances and states.
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub states: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
}

impl StateSpace {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.a1.len()
    }

    /// Time-invariant model replicated over `n` periods.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        n: usize,
        z: DMatrix<f64>,
        d: DVector<f64>,
        g: DMatrix<f64>,
        tt: DMatrix<f64>,
        c: DVector<f64>,
        hh: DMatrix<f64>,
        a1: DVector<f64>,
        p1: DMatrix<f64>,
    ) -> Self {
        StateSpace {
            z: vec![z; n],
            d: vec![d; n],
            g: vec![g; n],
            tt: vec![tt; n],
            c: vec![c; n],
            hh: vec![hh; n],
            a1,
            p1,
        }
    }

    fn check(&self, y: &[DVector<f64>]) -> Result<()> {
        let n = self.len();
        let lens = [self.d.len(), self.g.len(), self.tt.len(), self.c.len(), self.hh.len(), y.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::validation("state-space system arrays have inconsistent lengths"));
        }
        Ok(())
    }

    pub fn filter(&self, y: &[DVector<f64>]) -> Result<Filtered> {
        self.filter_impl(y, true)
    }

    fn filter_impl(&self, y: &[DVector<f64>], with_intercepts: bool) -> Result<Filtered> {
        self.check(y)?;
        let n = self.len();
        let mut a = if with_intercepts { self.a1.clone() } else { DVector::zeros(self.state_dim()) };
        let mut p = self.p1.clone();
        let mut out = Filtered {
            v: Vec::with_capacity(n),
            f_inv: Vec::with_capacity(n),
            k: Vec::with_capacity(n),
            loglik: 0.0,
        };
        for t in 0..n {
            let (z, g, tt, hh) = (&self.z[t], &self.g[t], &self.tt[t], &self.hh[t]);
            let mut v = &y[t] - z * &a;
            if with_intercepts {
                v -= &self.d[t];
            }
            let pz = &p * z.transpose();
            let f = linalg::symmetrize(&(z * &pz + g * g.transpose()));
            let chol = linalg::cholesky(&f)
                .map_err(|_| Error::numeric(format!("innovation variance not positive definite at t = {}", t + 1)))?;
            let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
            if !(min_pivot > INNOVATION_FLOOR) {
                return Err(Error::numeric(format!("innovation variance below floor at t = {}", t + 1)));
            }
            let f_inv = linalg::symmetrize(&chol.inverse());
            let k = (tt * &pz + hh * g.transpose()) * &f_inv;
            out.loglik -= 0.5
                * (v.len() as f64 * (2.0 * std::f64::consts::PI).ln()
                    + linalg::log_det_chol(&chol)
                    + v.dot(&(&f_inv * &v)));
            a = tt * &a + &k * &v;
            if with_intercepts {
                a += &self.c[t];
            }
            let l = tt - &k * z;
            let j = hh - &k * g;
            p = linalg::symmetrize(&(tt * &p * l.transpose() + hh * j.transpose()));
            out.v.push(v);
            out.f_inv.push(f_inv);
            out.k.push(k);
        }
        Ok(out)
    }

    pub fn smooth(&self, y: &[DVector<f64>]) -> Result<Smoothed> {
        self.smooth_impl(y, true)
    }

    fn smooth_impl(&self, y: &[DVector<f64>], with_intercepts: bool) -> Result<Smoothed> {
        let filt = self.filter_impl(y, with_intercepts)?;
        let n = self.len();
        let m = self.state_dim();
        let mut r = DVector::zeros(m);
        let mut dist = vec![DVector::zeros(0); n];
        for t in (0..n).rev() {
            let (z, g, tt, hh, k) = (&self.z[t], &self.g[t], &self.tt[t], &self.hh[t], &filt.k[t]);
            let fv = &filt.f_inv[t] * &filt.v[t];
            let j = hh - k * g;
            let l = tt - k * z;
            dist[t] = g.transpose() * &fv + j.transpose() * &r;
            r = z.transpose() * &fv + l.transpose() * &r;
        }
        let mut states = Vec::with_capacity(n);
        let mut a = &self.p1 * &r;
        if with_intercepts {
            a += &self.a1;
        }
        for t in 0..n {
            let next = &self.tt[t] * &a + &self.hh[t] * &dist[t];
            let next = if with_intercepts { next + &self.c[t] } else { next };
            states.push(std::mem::replace(&mut a, next));
        }
        Ok(Smoothed { states, disturbances: dist })
    }

    /// Unconditional draw of states and observations.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let n = self.len();
        let m = self.state_dim();
        let p1_root = psd_root(&self.p1)?;
        let mut a = &self.a1 + p1_root * linalg::std_normal_vec(rng, m);
        let mut states = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n);
        for t in 0..n {
            let u = linalg::std_normal_vec(rng, self.g[t].ncols());
            obs.push(&self.z[t] * &a + &self.d[t] + &self.g[t] * &u);
            let next = &self.tt[t] * &a + &self.c[t] + &self.hh[t] * &u;
            states.push(std::mem::replace(&mut a, next));
        }
        Ok((states, obs))
    }

    /// Draw of the states from their conditional distribution given `y`.
    pub fn simulation_smoother<R: Rng + ?Sized>(&self, y: &[DVector<f64>], rng: &mut R) -> Result<Vec<DVector<f64>>> {
        self.check(y)?;
        let (sim_states, sim_obs) = self.simulate(rng)?;
        let diff: Vec<DVector<f64>> = y.iter().zip(&sim_obs).map(|(a, b)| a - b).collect();
        let correction = self.smooth_impl(&diff, false)?;
        Ok(sim_states.into_iter().zip(correction.states).map(|(s, c)| s + c).collect())
    }
}

/// Any `L` with `L L' = m` for a positive semi-definite `m`.
pub fn psd_root(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Ok(c) = linalg::cholesky(m) {
        return Ok(c.l());
    }
    let e = linalg::sym_eigen(m)?;
    let scale = e.values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if e.values.iter().any(|&v| v < -1e-10 * scale) {
        return Err(Error::numeric("initial state covariance is not positive semi-definite"));
    }
    let d = e.values.map(|v| v.max(0.0).sqrt());
    Ok(&e.vectors * DMatrix::from_diagonal(&d))
}

/// Scalar-state model with a two-dimensional disturbance:
///
/// ```text
/// y_t     = z_t a_t + d_t + g_t . u_t
/// a_{t+1} = T_t a_t + c_t + h_t . u_t,     u_t ~ N(0, I_2)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarStateSpace {
    pub z: Vec<f64>,
    pub d: Vec<f64>,
    pub g: Vec<[f64; 2]>,
    pub tt: Vec<f64>,
    pub c: Vec<f64>,
    pub hh: Vec<[f64; 2]>,
    pub a1: f64,
    pub p1: f64,
}

#[derive(Debug, Clone)]
struct ScalarGains {
    f_inv: Vec<f64>,
    k: Vec<f64>,
}

fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl ScalarStateSpace {
    pub fn with_len(n: usize) -> Self {
        ScalarStateSpace {
            z: vec![1.0; n],
            d: vec![0.0; n],
            g: vec![[0.0; 2]; n],
            tt: vec![1.0; n],
            c: vec![0.0; n],
            hh: vec![[0.0; 2]; n],
            a1: 0.0,
            p1: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn gains(&self) -> Result<ScalarGains> {
        let n = self.len();
        let mut p = self.p1;
        let mut gains = ScalarGains { f_inv: Vec::with_capacity(n), k: Vec::with_capacity(n) };
        for t in 0..n {
            let (z, g, tt, hh) = (self.z[t], self.g[t], self.tt[t], self.hh[t]);
            let f = z * z * p + dot2(g, g);
            if !(f > INNOVATION_FLOOR) {
                return Err(Error::numeric(format!("innovation variance below floor at t = {}", t + 1)));
            }
            let k = (tt * p * z + dot2(hh, g)) / f;
            let l = tt - k * z;
            let j = [hh[0] - k * g[0], hh[1] - k * g[1]];
            p = tt * p * l + dot2(hh, j);
            gains.f_inv.push(1.0 / f);
            gains.k.push(k);
        }
        Ok(gains)
    }

    fn smooth_with(&self, gains: &ScalarGains, y: &[f64], with_intercepts: bool) -> (Vec<f64>, Vec<[f64; 2]>) {
        let n = self.len();
        let mut v = vec![0.0; n];
        let mut a = if with_intercepts { self.a1 } else { 0.0 };
        for t in 0..n {
            let d = if with_intercepts { self.d[t] } else { 0.0 };
            let c = if with_intercepts { self.c[t] } else { 0.0 };
            v[t] = y[t] - self.z[t] * a - d;
            a = self.tt[t] * a + c + gains.k[t] * v[t];
        }
        let mut r = 0.0;
        let mut dist = vec![[0.0; 2]; n];
        for t in (0..n).rev() {
            let (z, g, tt, hh, k) = (self.z[t], self.g[t], self.tt[t], self.hh[t], gains.k[t]);
            let fv = gains.f_inv[t] * v[t];
            dist[t] = [g[0] * fv + (hh[0] - k * g[0]) * r, g[1] * fv + (hh[1] - k * g[1]) * r];
            r = z * fv + (tt - k * z) * r;
        }
        let mut states = Vec::with_capacity(n);
        let mut a = self.p1 * r + if with_intercepts { self.a1 } else { 0.0 };
        for t in 0..n {
            states.push(a);
            let c = if with_intercepts { self.c[t] } else { 0.0 };
            a = self.tt[t] * a + c + dot2(self.hh[t], dist[t]);
        }
        (states, dist)
    }

    /// Smoothed state means.
    pub fn smooth(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let gains = self.gains()?;
        Ok(self.smooth_with(&gains, y, true).0)
    }

    /// Smoothed state means and disturbances.
    pub fn smooth_full(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        self.check(y)?;
        let gains = self.gains()?;
        Ok(self.smooth_with(&gains, y, true))
    }

    pub fn loglik(&self, y: &[f64]) -> Result<f64> {
        self.check(y)?;
        let gains = self.gains()?;
        let mut a = self.a1;
        let mut ll = 0.0;
        for t in 0..self.len() {
            let v = y[t] - self.z[t] * a - self.d[t];
            ll -= 0.5 * ((2.0 * std::f64::consts::PI).ln() - gains.f_inv[t].ln() + v * v * gains.f_inv[t]);
            a = self.tt[t] * a + self.c[t] + gains.k[t] * v;
        }
        Ok(ll)
    }

    pub fn simulation_smoother<R: Rng + ?Sized>(&self, y: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check(y)?;
        let gains = self.gains()?;
        let n = self.len();
        let mut a = self.a1 + self.p1.max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
        let mut sim_states = Vec::with_capacity(n);
        let mut diff = Vec::with_capacity(n);
        for t in 0..n {
            let u = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let y_sim = self.z[t] * a + self.d[t] + dot2(self.g[t], u);
            diff.push(y[t] - y_sim);
            sim_states.push(a);
            a = self.tt[t] * a + self.c[t] + dot2(self.hh[t], u);
        }
        let (corr, _) = self.smooth_with(&gains, &diff, false);
        Ok(sim_states.iter().zip(corr).map(|(s, c)| s + c).collect())
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        let n = self.len();
        let lens = [self.d.len(), self.g.len(), self.tt.len(), self.c.len(), self.hh.len(), y.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::validation("state-space system arrays have inconsistent lengths"));
        }
        Ok(())
    }

    /// The same model in the general representation.
    pub fn to_general(&self) -> StateSpace {
        let m1 = |v: f64| DMatrix::from_element(1, 1, v);
        let row = |v: [f64; 2]| DMatrix::from_row_slice(1, 2, &v);
        StateSpace {
            z: self.z.iter().map(|&v| m1(v)).collect(),
            d: self.d.iter().map(|&v| DVector::from_element(1, v)).collect(),
            g: self.g.iter().map(|&v| row(v)).collect(),
            tt: self.tt.iter().map(|&v| m1(v)).collect(),
            c: self.c.iter().map(|&v| DVector::from_element(1, v)).collect(),
            hh: self.hh.iter().map(|&v| row(v)).collect(),
            a1: DVector::from_element(1, self.a1),
            p1: m1(self.p1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(n: usize) -> ScalarStateSpace {
        let mut m = ScalarStateSpace::with_len(n);
        for t in 0..n {
            let s = t as f64;
            m.z[t] = 1.0 + 0.1 * s;
            m.d[t] = 0.2 - 0.05 * s;
            m.g[t] = [0.7, 0.1 * (s + 1.0)];
            m.tt[t] = 0.9;
            m.c[t] = -0.1;
            m.hh[t] = [0.0, 0.3];
        }
        m.a1 = -1.0;
        m.p1 = 0.4;
        m
    }

    #[test]
    fn scalar_path_matches_general() {
        let m = scalar_model(6);
        let y = vec![0.3, -0.2, 1.1, 0.0, -0.7, 0.4];
        let yv: Vec<DVector<f64>> = y.iter().map(|&v| DVector::from_element(1, v)).collect();
        let general = m.to_general();
        let (s_fast, d_fast) = m.smooth_full(&y).unwrap();
        let slow = general.smooth(&yv).unwrap();
        for t in 0..6 {
            assert_relative_eq!(s_fast[t], slow.states[t][0], epsilon = 1e-12);
            assert_relative_eq!(d_fast[t][0], slow.disturbances[t][0], epsilon = 1e-12);
            assert_relative_eq!(d_fast[t][1], slow.disturbances[t][1], epsilon = 1e-12);
        }
        assert_relative_eq!(m.loglik(&y).unwrap(), general.filter(&yv).unwrap().loglik, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_innovation_is_an_error() {
        let mut m = ScalarStateSpace::with_len(3);
        m.p1 = 0.0;
        m.z = vec![0.0; 3];
        assert!(m.smooth(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn simulation_smoother_mean() {
        let m = scalar_model(4);
        let y = vec![0.5, 0.1, -0.3, 0.9];
        let mean = m.smooth(&y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(m.simulation_smoother(&y, &mut rng).unwrap()) {
                *a += v / n as f64;
            }
        }
        for t in 0..4 {
            assert!((acc[t] - mean[t]).abs() < 0.02, "t={t}: {} vs {}", acc[t], mean[t]);
        }
    }
}
