//! Closed-form kernel instrumental variable regression.
//!
//! Given Gram matrices `K_XX`, `K_ZZ` and ridge parameters `λ, μ > 0`, the
//! estimator is
//!
//! ```text
//! K  = K_ZZ (K_ZZ + nμI)⁻¹          first-stage projector
//! A  = (K K_XX + nλI)⁻¹
//! α̂  = A K Y                        dual coefficients
//! ĥ(x) = K_xX α̂
//! ```
//!
//! The residuals `ε̂ = Y − K_XX α̂` and the matrices `K`, `A` are cached in
//! [`FitState`] so the bootstrap can reuse them without further inversions.
//!
//! With linear kernels the estimator coincides with ridge-regularized 2SLS
//! ([`regularized_2sls`]); with `K = I` it is kernel ridge regression
//! ([`fit_krr`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, gram_self, KernelSpec, Point};
use crate::linalg::{lu_inverse, ridge_solve, SymMatrix};

/// `n` observations of (instrument, covariate, outcome).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    z: Vec<Point>,
    x: Vec<Point>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(z: Vec<Point>, x: Vec<Point>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
        if z.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: z.len() });
        }
        if n < 2 {
            return Err(Error::Input(format!("need at least 2 observations, got {n}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcomes"));
        }
        Ok(Dataset { z, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn z(&self) -> &[Point] {
        &self.z
    }

    pub fn x(&self) -> &[Point] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Same covariates and instruments with a replaced outcome vector.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        Dataset::new(self.z.clone(), self.x.clone(), y)
    }
}

/// Second-stage (`lambda`) and first-stage (`mu`) ridge parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegPair {
    pub lambda: f64,
    pub mu: f64,
}

impl RegPair {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("mu", mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(RegPair { lambda, mu })
    }

    /// Whether `μ ≤ λ ≤ 1`, the ordering the coverage theory assumes.
    pub fn within_policy(&self) -> bool {
        self.mu <= self.lambda && self.lambda <= 1.0
    }

    /// Exponent `ι` with `λ = μ^ι`, i.e. `ln λ / ln μ`; `None` when `μ = 1`.
    pub fn iota(&self) -> Option<f64> {
        let lm = self.mu.ln();
        (lm != 0.0).then(|| self.lambda.ln() / lm)
    }
}

/// Everything the fit computes, kept for prediction and bootstrap reuse.
#[derive(Debug, Clone)]
pub struct FitState {
    data: Dataset,
    kx: KernelSpec,
    kz: KernelSpec,
    reg: RegPair,
    kxx: SymMatrix,
    kzz: SymMatrix,
    projector: SymMatrix,
    a: DMatrix<f64>,
    alpha: DVector<f64>,
    residuals: DVector<f64>,
}

/// Fits KIV in closed form.
pub fn fit_kiv(data: &Dataset, kx: &KernelSpec, kz: &KernelSpec, reg: RegPair) -> Result<FitState> {
    let reg = RegPair::new(reg.lambda, reg.mu)?;
    if !reg.within_policy() {
        log::warn!("regularization (lambda={}, mu={}) violates mu <= lambda <= 1; fitting anyway", reg.lambda, reg.mu);
    }
    let kxx = SymMatrix::new(gram_self(kx, data.x())?)?;
    let kzz = SymMatrix::new(gram_self(kz, data.z())?)?;
    FitState::from_grams(data.clone(), *kx, *kz, reg, kxx, kzz)
}

impl FitState {
    /// Runs the closed form on precomputed Gram matrices.
    pub fn from_grams(
        data: Dataset,
        kx: KernelSpec,
        kz: KernelSpec,
        reg: RegPair,
        kxx: SymMatrix,
        kzz: SymMatrix,
    ) -> Result<Self> {
        let n = data.len();
        if kxx.order() != n || kzz.order() != n {
            return Err(Error::DimensionMismatch { expected: n, got: kxx.order().min(kzz.order()) });
        }
        let nf = n as f64;
        // (K_ZZ + nμI)⁻¹ K_ZZ = K_ZZ (K_ZZ + nμI)⁻¹ since the factors commute.
        let projector = SymMatrix::new(ridge_solve(&kzz, nf * reg.mu, kzz.as_matrix())?)?;
        let mut system = projector.as_matrix() * kxx.as_matrix();
        for i in 0..n {
            system[(i, i)] += nf * reg.lambda;
        }
        let a = lu_inverse(&system)?;
        let y = DVector::from_column_slice(data.y());
        let ky = projector.as_matrix() * &y;
        let alpha = &a * &ky;
        let resid = (&system * &alpha - &ky).norm();
        if resid > 1e-8 * ky.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::Factorization(format!("dual system residual {resid:e} exceeds tolerance")));
        }
        let residuals = &y - kxx.as_matrix() * &alpha;
        Ok(FitState { data, kx, kz, reg, kxx, kzz, projector, a, alpha, residuals })
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn kernel_x(&self) -> &KernelSpec {
        &self.kx
    }

    pub fn kernel_z(&self) -> &KernelSpec {
        &self.kz
    }

    pub fn reg(&self) -> RegPair {
        self.reg
    }

    pub fn kxx(&self) -> &SymMatrix {
        &self.kxx
    }

    pub fn kzz(&self) -> &SymMatrix {
        &self.kzz
    }

    /// First-stage projector `K = K_ZZ (K_ZZ + nμI)⁻¹`.
    pub fn projector(&self) -> &SymMatrix {
        &self.projector
    }

    /// `A = (K K_XX + nλI)⁻¹`.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    /// `ĥ(x*) = K_{x*X} α̂`.
    pub fn predict(&self, x_star: &Point) -> Result<f64> {
        Ok(self.predict_many(std::slice::from_ref(x_star))?[0])
    }

    pub fn predict_many(&self, points: &[Point]) -> Result<Vec<f64>> {
        let kx_star = gram_matrix(&self.kx, points, self.data.x())?;
        Ok((kx_star * &self.alpha).iter().copied().collect())
    }

    /// Dual objective `(1/n)(Y−K_XXα)ᵀK(Y−K_XXα) + λαᵀK_XXα`, minimized by `α̂`.
    pub fn dual_objective(&self, alpha: &DVector<f64>) -> f64 {
        let y = DVector::from_column_slice(self.data.y());
        let r = y - self.kxx.as_matrix() * alpha;
        let fit = r.dot(&(self.projector.as_matrix() * &r)) / self.n() as f64;
        fit + self.reg.lambda * alpha.dot(&(self.kxx.as_matrix() * alpha))
    }
}

/// Convenience wrapper for [`FitState::predict`].
pub fn predict(fit: &FitState, x_star: &Point) -> Result<f64> {
    fit.predict(x_star)
}

/// Kernel ridge regression dual coefficients `(K_XX + nλI)⁻¹ Y`.
pub fn fit_krr(x: &[Point], y: &[f64], kx: &KernelSpec, lambda: f64) -> Result<DVector<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: x.len() });
    }
    if y.len() < 2 {
        return Err(Error::Input(format!("need at least 2 observations, got {}", y.len())));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be finite and > 0, got {lambda}")));
    }
    let kxx = SymMatrix::new(gram_self(kx, x)?)?;
    let rhs = DMatrix::from_column_slice(y.len(), 1, y);
    let sol = ridge_solve(&kxx, y.len() as f64 * lambda, &rhs)?;
    Ok(sol.column(0).into_owned())
}

fn design_matrix(points: &[Point], what: &str) -> Result<DMatrix<f64>> {
    let rows = points
        .iter()
        .map(|p| p.as_vector().ok_or_else(|| Error::Input(format!("{what} must be real vectors"))))
        .collect::<Result<Vec<_>>>()?;
    let cols = rows.first().map(|r| r.len()).ok_or(Error::EmptyInput("design matrix"))?;
    if cols == 0 {
        return Err(Error::Input(format!("{what} has zero columns")));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch { expected: cols, got: bad.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Ridge-regularized 2SLS coefficients in primal form:
///
/// `γ̂ = [XᵀZ(ZᵀZ+nμI)⁻¹ZᵀX + nλI]⁻¹ XᵀZ(ZᵀZ+nμI)⁻¹ZᵀY`.
pub fn regularized_2sls(data: &Dataset, reg: RegPair) -> Result<DVector<f64>> {
    let reg = RegPair::new(reg.lambda, reg.mu)?;
    let x = design_matrix(data.x(), "covariates")?;
    let z = design_matrix(data.z(), "instruments")?;
    let n = data.len() as f64;
    let y = DMatrix::from_column_slice(data.len(), 1, data.y());
    let ztz = SymMatrix::new(z.transpose() * &z)?;
    // (ZᵀZ + nμI)⁻¹ [ZᵀX | ZᵀY]
    let zx = z.transpose() * &x;
    let zy = z.transpose() * &y;
    let proj_x = ridge_solve(&ztz, n * reg.mu, &zx)?;
    let proj_y = ridge_solve(&ztz, n * reg.mu, &zy)?;
    let lhs = SymMatrix::new(zx.transpose() * &proj_x)?;
    let rhs = zx.transpose() * proj_y;
    let gamma = ridge_solve(&lhs, n * reg.lambda, &rhs)?;
    Ok(gamma.column(0).into_owned())
}
