//! Small distribution helpers: inverse-gamma and inverse-Wishart priors,
//! Gaussian factors for PSD matrices, and a few log-densities.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inverse-gamma distribution IG(shape, scale) with density
/// `scale^shape / Γ(shape) · x^(-shape-1) · exp(-scale / x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidPrior(format!(
                "inverse-gamma needs positive finite shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(Self { shape, scale })
    }

    /// Mean `scale / (shape - 1)`, infinite when `shape <= 1`.
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln() - self.scale / x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.scale).expect("shape and scale validated at construction");
        1.0 / g.sample(rng)
    }
}

/// Inverse-Wishart IW(dof, scale) over m×m covariance matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishart {
    pub dof: f64,
    pub scale: DMatrix<f64>,
}

impl InverseWishart {
    pub fn new(dof: f64, scale: DMatrix<f64>) -> Result<Self> {
        let m = scale.nrows();
        if scale.ncols() != m {
            return Err(Error::InvalidPrior("inverse-Wishart scale must be square".into()));
        }
        if !(dof > m as f64 - 1.0) {
            return Err(Error::InvalidPrior(format!(
                "inverse-Wishart needs dof > m - 1 = {}, got {dof}",
                m as f64 - 1.0
            )));
        }
        if scale.clone().cholesky().is_none() || !is_symmetric(&scale, 1e-10) {
            return Err(Error::InvalidPrior("inverse-Wishart scale must be symmetric PD".into()));
        }
        Ok(Self { dof, scale })
    }

    /// Bartlett decomposition of the Wishart draw for the precision,
    /// inverted.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<f64>> {
        let m = self.scale.nrows();
        let precision_scale = self
            .scale
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular inverse-Wishart scale".into()))?;
        let l = precision_scale
            .cholesky()
            .ok_or_else(|| Error::Numerical("inverse-Wishart scale lost definiteness".into()))?
            .l();
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            let chi2 =
                Gamma::new((self.dof - i as f64) / 2.0, 2.0).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng);
            a[(i, i)] = chi2.sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let la = l * a;
        let wishart = &la * la.transpose();
        let mut inv = wishart.try_inverse().ok_or_else(|| Error::Numerical("singular Wishart draw".into()))?;
        symmetrize(&mut inv);
        Ok(inv)
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * (1.0 + m[(i, j)].abs())))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Returns `L` with `L Lᵀ = cov` for a symmetric PSD matrix. Cholesky when
/// possible, otherwise a clipped eigen factor (singular covariances such as
/// a zero matrix are allowed).
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::Dimension { expected: n, actual: cov.ncols() });
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameters("covariance has non-finite entries".into()));
    }
    if !is_symmetric(cov, 1e-9) {
        return Err(Error::InvalidParameters("covariance is not symmetric".into()));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::InvalidParameters("covariance is not positive semi-definite".into()));
    }
    let sqrt = DVector::from_iterator(n, eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// Draws from N(mean, L Lᵀ) given the factor `L`.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample(StandardNormal)));
    mean + factor * z
}

pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Log-density of N(mean, cov); `None` when `cov` is not positive definite.
pub fn mvn_ln_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let ch = cov.clone().cholesky()?;
    let r = x - mean;
    let sol = ch.solve(&r);
    let log_det: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Some(-0.5 * (x.len() as f64 * LN_2PI + log_det + r.dot(&sol)))
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function in branchwise form.
#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn ln_factorial(k: f64) -> f64 {
    ln_gamma(k + 1.0)
}
