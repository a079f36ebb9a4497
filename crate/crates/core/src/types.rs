//! Shared domain types: model variant, static parameters, priors, observed
//! data and latent paths, plus the invariant checks every other module
//! relies on.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Which measurement equations are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Returns and realized factors only; no realized covariance equation.
    Fmsv,
    /// Realized covariance equation plus factor leverage.
    Fmrsv,
    /// Realized covariance equation with leverage switched off (`rho = 0`).
    FmrsvNl,
}

impl Variant {
    pub fn uses_rcov(self) -> bool {
        !matches!(self, Variant::Fmsv)
    }

    pub fn has_leverage(self) -> bool {
        !matches!(self, Variant::FmrsvNl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fmsv => "fmsv",
            Variant::Fmrsv => "fmrsv",
            Variant::FmrsvNl => "fmrsv-nl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fmsv" => Ok(Variant::Fmsv),
            "fmrsv" => Ok(Variant::Fmrsv),
            "fmrsv-nl" | "fmrsvnl" => Ok(Variant::FmrsvNl),
            other => Err(Error::Parse(format!("unknown variant `{other}`"))),
        }
    }
}

/// Problem dimensions and the active model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of assets.
    pub p: usize,
    /// Number of factors.
    pub q: usize,
    /// Number of time periods.
    pub t: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(p: usize, q: usize, t: usize, variant: Variant) -> Result<Self> {
        let cfg = ModelConfig { p, q, t, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::validation("p must be at least 1"));
        }
        if self.q < 1 {
            return Err(Error::validation("q must be at least 1"));
        }
        if self.q > self.p {
            return Err(Error::validation(format!("q ({}) exceeds p ({})", self.q, self.p)));
        }
        if self.t < 2 {
            return Err(Error::validation(format!("T must be at least 2, got {}", self.t)));
        }
        Ok(())
    }

    /// Number of log-volatility series (`p + q`).
    pub fn n_vol(&self) -> usize {
        self.p + self.q
    }
}

/// Static model parameters.
///
/// Vectors indexed over log-volatility series have length `p + q`: entries
/// `0..p` belong to the idiosyncratic components and `p..p+q` to the factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// Strictly lower-triangular entries of the unit lower-triangular loading
    /// matrix `A`, row-major: `a21, a31, a32, a41, ...`.
    pub alpha: Vec<f64>,
    /// `p x q` factor loadings.
    pub beta: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub gamma: DVector<f64>,
    pub phi: DVector<f64>,
    pub psi: DVector<f64>,
    /// Factor leverage correlations (length `q`).
    pub rho: DVector<f64>,
    pub sigma_eta: DVector<f64>,
    pub sigma_nu: DVector<f64>,
    /// Realized-covariance precision.
    pub delta: f64,
}

/// Number of free entries in a `q x q` unit lower-triangular matrix.
pub fn n_alpha(q: usize) -> usize {
    q * q.saturating_sub(1) / 2
}

/// Position of `a_{jk}` (0-based, `k < j`) in [`Parameters::alpha`].
pub fn alpha_index(j: usize, k: usize) -> usize {
    debug_assert!(k < j);
    j * (j - 1) / 2 + k
}

impl Parameters {
    /// All-zero loadings with neutral dynamics; mostly useful as a template.
    pub fn zeros(p: usize, q: usize) -> Self {
        Parameters {
            alpha: vec![0.0; n_alpha(q)],
            beta: DMatrix::zeros(p, q),
            mu: DVector::zeros(p + q),
            gamma: DVector::zeros(q),
            phi: DVector::zeros(p + q),
            psi: DVector::zeros(q),
            rho: DVector::zeros(q),
            sigma_eta: DVector::from_element(p + q, 0.1),
            sigma_nu: DVector::from_element(q, 0.1),
            delta: 10.0,
        }
    }

    /// True values of the artificial-data study, generalised to any `(p, q)`:
    /// `mu = -1` except the last factor at `-0.5`, `phi = 0.9`,
    /// `sigma_eta = 0.1`, `beta = 1`, `alpha = 0.5`, `psi = 0.3`,
    /// `gamma = 0.05`, `rho = -0.2` for the first factor and `0` otherwise,
    /// `sigma_nu = 0.1`, `delta = 8`.
    pub fn simulation_truth(p: usize, q: usize) -> Self {
        let mut mu = DVector::from_element(p + q, -1.0);
        mu[p + q - 1] = -0.5;
        let mut rho = DVector::zeros(q);
        rho[0] = -0.2;
        Parameters {
            alpha: vec![0.5; n_alpha(q)],
            beta: DMatrix::from_element(p, q, 1.0),
            mu,
            gamma: DVector::from_element(q, 0.05),
            phi: DVector::from_element(p + q, 0.9),
            psi: DVector::from_element(q, 0.3),
            rho,
            sigma_eta: DVector::from_element(p + q, 0.1),
            sigma_nu: DVector::from_element(q, 0.1),
            delta: 8.0,
        }
    }

    pub fn p(&self) -> usize {
        self.beta.nrows()
    }

    pub fn q(&self) -> usize {
        self.beta.ncols()
    }

    /// Unit lower-triangular `q x q` loading matrix of the realized factors.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut a = DMatrix::identity(q, q);
        for j in 1..q {
            for k in 0..j {
                a[(j, k)] = self.alpha[alpha_index(j, k)];
            }
        }
        a
    }

    /// Wishart degrees of freedom `delta + p + 3`.
    pub fn s0(&self) -> f64 {
        self.delta + self.p() as f64 + 3.0
    }

    /// Wishart scale multiplier `delta + 2`.
    pub fn k0(&self) -> f64 {
        self.delta + 2.0
    }

    /// Leverage correlation of log-volatility series `j` (zero for `j < p`).
    pub fn rho_of(&self, j: usize) -> f64 {
        let p = self.p();
        if j < p {
            0.0
        } else {
            self.rho[j - p]
        }
    }

    /// Checks ranges and dimensions against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (p, q) = (config.p, config.q);
        if self.beta.nrows() != p || self.beta.ncols() != q {
            return Err(Error::validation(format!(
                "beta is {}x{}, expected {p}x{q}",
                self.beta.nrows(),
                self.beta.ncols()
            )));
        }
        let checks: [(&str, usize, usize); 8] = [
            ("alpha", self.alpha.len(), n_alpha(q)),
            ("mu", self.mu.len(), p + q),
            ("gamma", self.gamma.len(), q),
            ("phi", self.phi.len(), p + q),
            ("psi", self.psi.len(), q),
            ("rho", self.rho.len(), q),
            ("sigma_eta", self.sigma_eta.len(), p + q),
            ("sigma_nu", self.sigma_nu.len(), q),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::validation(format!("{name} has length {got}, expected {want}")));
            }
        }
        let all_finite = self.alpha.iter().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.mu.iter().all(|v| v.is_finite())
            && self.gamma.iter().all(|v| v.is_finite())
            && self.delta.is_finite();
        if !all_finite {
            return Err(Error::validation("parameters contain non-finite values"));
        }
        for (i, v) in self.phi.iter().enumerate() {
            if !(v.abs() < 1.0) {
                return Err(Error::validation(format!("phi out of (-1,1): phi_{} = {v}", i + 1)));
            }
        }
        for (i, v) in self.psi.iter().enumerate() {
            if !(v.abs() < 1.0) {
                return Err(Error::validation(format!("psi out of (-1,1): psi_{} = {v}", i + 1)));
            }
        }
        for (i, v) in self.rho.iter().enumerate() {
            if !(v.abs() < 1.0) {
                return Err(Error::validation(format!("rho out of (-1,1): rho_{} = {v}", i + 1)));
            }
            if config.variant == Variant::FmrsvNl && *v != 0.0 {
                return Err(Error::validation("rho must be zero under the no-leverage variant"));
            }
        }
        for (i, v) in self.sigma_eta.iter().enumerate() {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("sigma_eta_{} must be positive, got {v}", i + 1)));
            }
        }
        for (i, v) in self.sigma_nu.iter().enumerate() {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("sigma_nu_{} must be positive, got {v}", i + 1)));
            }
        }
        if !(self.delta > 0.0) {
            return Err(Error::validation(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Prior hyperparameters.
///
/// Normal priors for `mu`, `gamma`, each row of `B` and each row of `A`;
/// beta priors on `(1+x)/2` for `phi`, `psi`, `rho`; inverse-gamma
/// `IG(n/2, d/2)` priors on the variances `sigma_eta^2` and `sigma_nu^2`.
/// `delta` has the improper flat prior on `(0, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub m_mu: DVector<f64>,
    pub s_mu: DMatrix<f64>,
    pub m_gamma: DVector<f64>,
    pub s_gamma: DMatrix<f64>,
    /// One mean per asset row (length `q`).
    pub m_beta: Vec<DVector<f64>>,
    pub s_beta: Vec<DMatrix<f64>>,
    /// One mean per row `j = 2..q` of `A` (length `j - 1`).
    pub m_alpha: Vec<DVector<f64>>,
    pub s_alpha: Vec<DMatrix<f64>>,
    pub a_phi: f64,
    pub b_phi: f64,
    pub a_psi: f64,
    pub b_psi: f64,
    pub a_rho: f64,
    pub b_rho: f64,
    pub n_eta: f64,
    pub d_eta: f64,
    pub n_nu: f64,
    pub d_nu: f64,
}

impl PriorSpec {
    /// Vague priors: `N(0, 10000)` for every location, `Beta(1, 1)` for the
    /// persistence and leverage parameters and `IG(0.05, 0.05)` for variances.
    pub fn vague(p: usize, q: usize) -> Self {
        let var = 10_000.0;
        PriorSpec {
            m_mu: DVector::zeros(p + q),
            s_mu: DMatrix::identity(p + q, p + q) * var,
            m_gamma: DVector::zeros(q),
            s_gamma: DMatrix::identity(q, q) * var,
            m_beta: vec![DVector::zeros(q); p],
            s_beta: vec![DMatrix::identity(q, q) * var; p],
            m_alpha: (1..q).map(DVector::zeros).collect(),
            s_alpha: (1..q).map(|j| DMatrix::identity(j, j) * var).collect(),
            a_phi: 1.0,
            b_phi: 1.0,
            a_psi: 1.0,
            b_psi: 1.0,
            a_rho: 1.0,
            b_rho: 1.0,
            n_eta: 0.1,
            d_eta: 0.1,
            n_nu: 0.1,
            d_nu: 0.1,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (p, q) = (config.p, config.q);
        let dims_ok = self.m_mu.len() == p + q
            && self.s_mu.shape() == (p + q, p + q)
            && self.m_gamma.len() == q
            && self.s_gamma.shape() == (q, q)
            && self.m_beta.len() == p
            && self.s_beta.len() == p
            && self.m_beta.iter().all(|m| m.len() == q)
            && self.s_beta.iter().all(|s| s.shape() == (q, q))
            && self.m_alpha.len() == q - 1
            && self.s_alpha.len() == q - 1
            && self.m_alpha.iter().enumerate().all(|(j, m)| m.len() == j + 1)
            && self.s_alpha.iter().enumerate().all(|(j, s)| s.shape() == (j + 1, j + 1));
        if !dims_ok {
            return Err(Error::validation("prior dimensions do not match (p, q)"));
        }
        let mut covs: Vec<(&str, &DMatrix<f64>)> = vec![("s_mu", &self.s_mu), ("s_gamma", &self.s_gamma)];
        covs.extend(self.s_beta.iter().map(|s| ("s_beta", s)));
        covs.extend(self.s_alpha.iter().map(|s| ("s_alpha", s)));
        for (name, s) in covs {
            if !linalg::is_symmetric(s, 1e-12) || linalg::cholesky(s).is_err() {
                return Err(Error::validation(format!("{name} is not symmetric positive definite")));
            }
        }
        let shapes = [
            ("a_phi", self.a_phi),
            ("b_phi", self.b_phi),
            ("a_psi", self.a_psi),
            ("b_psi", self.b_psi),
            ("a_rho", self.a_rho),
            ("b_rho", self.b_rho),
            ("n_eta", self.n_eta),
            ("d_eta", self.d_eta),
            ("n_nu", self.n_nu),
            ("d_nu", self.d_nu),
        ];
        for (name, v) in shapes {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `T x p` daily returns.
    pub y: DMatrix<f64>,
    /// `T x q` realized factors.
    pub x: DMatrix<f64>,
    /// `T` realized covariance matrices (`p x p`), absent when not loaded.
    pub w: Option<Vec<DMatrix<f64>>>,
    pub tickers: Vec<String>,
    pub factor_names: Vec<String>,
    /// One label per period.
    pub dates: Vec<String>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, w: Option<Vec<DMatrix<f64>>>) -> Self {
        let tickers = (1..=y.ncols()).map(|i| format!("y{i}")).collect();
        let factor_names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let dates = (1..=y.nrows()).map(|t| t.to_string()).collect();
        Dataset { y, x, w, tickers, factor_names, dates }
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `start..start + len` of every series.
    pub fn window(&self, start: usize, len: usize) -> Dataset {
        Dataset {
            y: self.y.rows(start, len).into_owned(),
            x: self.x.rows(start, len).into_owned(),
            w: self.w.as_ref().map(|w| w[start..start + len].to_vec()),
            tickers: self.tickers.clone(),
            factor_names: self.factor_names.clone(),
            dates: self.dates[start..start + len].to_vec(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (p, q, t) = (config.p, config.q, config.t);
        if self.y.shape() != (t, p) {
            return Err(Error::validation(format!(
                "returns are {}x{}, expected {t}x{p}",
                self.y.nrows(),
                self.y.ncols()
            )));
        }
        if self.x.shape() != (t, q) {
            return Err(Error::validation(format!(
                "realized factors are {}x{}, expected {t}x{q}",
                self.x.nrows(),
                self.x.ncols()
            )));
        }
        if self.y.iter().chain(self.x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("returns or realized factors contain non-finite values"));
        }
        match &self.w {
            None if config.variant.uses_rcov() => {
                Err(Error::validation("realized covariance matrices are required by this variant"))
            }
            None => Ok(()),
            Some(w) => {
                if w.len() != t {
                    return Err(Error::validation(format!("{} realized covariances for T = {t}", w.len())));
                }
                for (k, wt) in w.iter().enumerate() {
                    check_rcov(wt, p).map_err(|e| match e {
                        Error::Validation(msg) => Error::validation(format!("W_{}: {msg}", k + 1)),
                        other => other,
                    })?;
                }
                Ok(())
            }
        }
    }
}

/// Symmetry and scale-relative positive-definiteness check for one realized
/// covariance: the smallest eigenvalue must exceed `1e-10 * trace / p`.
pub fn check_rcov(w: &DMatrix<f64>, p: usize) -> Result<()> {
    if w.shape() != (p, p) {
        return Err(Error::validation(format!("shape {}x{}, expected {p}x{p}", w.nrows(), w.ncols())));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite entry"));
    }
    if !linalg::is_symmetric(w, 1e-10 * w.amax().max(1e-300)) {
        return Err(Error::validation("W not symmetric"));
    }
    let floor = 1e-10 * w.trace() / p as f64;
    let eig = linalg::sym_eigen(w)?;
    let min = eig.values[eig.values.len() - 1];
    if !(min > floor) {
        return Err(Error::validation(format!("W not PD (min eigenvalue {min:e})")));
    }
    Ok(())
}

/// Latent log-volatilities and factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `T x (p + q)`: idiosyncratic columns first, factor columns last.
    pub h: DMatrix<f64>,
    /// `T x q`.
    pub f: DMatrix<f64>,
}

impl LatentState {
    pub fn t(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.h.shape() != (config.t, config.n_vol()) || self.f.shape() != (config.t, config.q) {
            return Err(Error::validation("latent state dimensions do not match the model"));
        }
        if self.h.iter().chain(self.f.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("latent state contains non-finite values"));
        }
        Ok(())
    }
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub passed: bool,
    /// First violated invariant, if any.
    pub violation: Option<String>,
}

/// Checks every invariant of the inputs, stopping at the first violation.
pub fn validate(config: &ModelConfig, params: &Parameters, priors: &PriorSpec, data: &Dataset) -> ValidationReport {
    let outcome = config
        .validate()
        .and_then(|_| params.validate(config))
        .and_then(|_| priors.validate(config))
        .and_then(|_| data.validate(config));
    match outcome {
        Ok(()) => ValidationReport { passed: true, violation: None },
        Err(Error::Validation(msg)) => ValidationReport { passed: false, violation: Some(msg) },
        Err(other) => ValidationReport { passed: false, violation: Some(other.to_string()) },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(p: usize, q: usize, t: usize) -> Dataset {
        let w = (0..t).map(|_| DMatrix::identity(p, p)).collect();
        Dataset::new(DMatrix::zeros(t, p), DMatrix::zeros(t, q), Some(w))
    }

    #[test]
    fn truth_values_pass() {
        let cfg = ModelConfig::new(9, 2, 20, Variant::Fmrsv).unwrap();
        let report = validate(&cfg, &Parameters::simulation_truth(9, 2), &PriorSpec::vague(9, 2), &toy_data(9, 2, 20));
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn phi_on_boundary_fails() {
        let cfg = ModelConfig::new(9, 2, 20, Variant::Fmrsv).unwrap();
        let mut params = Parameters::simulation_truth(9, 2);
        params.phi[0] = 1.0;
        let report = validate(&cfg, &params, &PriorSpec::vague(9, 2), &toy_data(9, 2, 20));
        assert!(!report.passed);
        assert!(report.violation.unwrap().contains("phi out of (-1,1)"));
    }

    #[test]
    fn slightly_indefinite_rcov_fails() {
        // Three orthogonal directions; the third gets a tiny negative eigenvalue.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let mut w3 = &v * v.transpose();
        let e = DVector::from_vec(vec![2.0, -1.0, 0.0]).normalize();
        w3 -= &e * e.transpose() * 1e-6;
        let u = DVector::from_vec(vec![1.0, 2.0, 5.0]).normalize();
        w3 += &u * u.transpose() * 3.0;
        let cfg = ModelConfig::new(3, 1, 4, Variant::Fmrsv).unwrap();
        let mut data = toy_data(3, 1, 4);
        data.w.as_mut().unwrap()[2] = w3;
        let report = validate(&cfg, &Parameters::simulation_truth(3, 1), &PriorSpec::vague(3, 1), &data);
        let msg = report.violation.expect("must fail");
        assert!(msg.contains("W_3") && msg.contains("not PD"), "{msg}");
    }

    #[test]
    fn dimension_rules() {
        assert!(ModelConfig::new(2, 3, 10, Variant::Fmsv).is_err());
        assert!(ModelConfig::new(2, 1, 1, Variant::Fmsv).is_err());
        assert!(ModelConfig::new(1, 1, 2, Variant::Fmsv).is_ok());
    }

    #[test]
    fn derived_hyperparameters() {
        let params = Parameters::simulation_truth(9, 2);
        assert_eq!(params.s0(), 20.0);
        assert_eq!(params.k0(), 10.0);
        let a = params.a_matrix();
        assert_eq!(a[(1, 0)], 0.5);
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 1)], 1.0);
    }

    #[test]
    fn no_leverage_variant_requires_zero_rho() {
        let cfg = ModelConfig::new(9, 2, 20, Variant::FmrsvNl).unwrap();
        let params = Parameters::simulation_truth(9, 2);
        assert!(params.validate(&cfg).is_err());
    }

    #[test]
    fn fmsv_does_not_need_rcov() {
        let cfg = ModelConfig::new(2, 1, 5, Variant::Fmsv).unwrap();
        let mut data = toy_data(2, 1, 5);
        data.w = None;
        assert!(data.validate(&cfg).is_ok());
        let cfg = ModelConfig::new(2, 1, 5, Variant::Fmrsv).unwrap();
        assert!(data.validate(&cfg).is_err());
    }
}
