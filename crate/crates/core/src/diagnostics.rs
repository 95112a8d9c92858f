//! Spectral diagnostics and parameter-regime checks.
//!
//! The nonzero spectrum of the empirical operator `T̂_μ = Ŝ*(Ŝ_z+μ)⁻¹Ŝ`
//! coincides with the spectrum of the `n×n` matrix `(1/n)·K·K_XX`, so the
//! effective dimension `𝔪(λ,μ) = tr{(T̂_μ+λ)⁻²T̂_μ}` can be computed from Gram
//! matrices alone. `𝔪̃(λ,μ)` needs explicit features and is only available
//! for linear and polynomial kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitState;
use crate::kernels::feature_matrix;
use crate::linalg::{product_spectrum, ridge_solve, sym_eigvals, SymMatrix};

/// Sum of the eigenvalues beyond the first `m`.
pub fn local_width(eigs: &[f64], m: usize) -> Result<f64> {
    check_descending(eigs)?;
    Ok(eigs.iter().skip(m).sum())
}

fn check_descending(eigs: &[f64]) -> Result<()> {
    if eigs.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Unsorted);
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
    }
    Ok(())
}

/// `Σ s/(s+r)²` over a spectrum, the shared form of `𝔫_z` and `𝔪`.
fn weighted_trace(eigs: &[f64], ridge: f64) -> f64 {
    eigs.iter()
        .map(|&s| {
            let s = s.max(0.0);
            s / ((s + ridge) * (s + ridge))
        })
        .sum()
}

/// `𝔫_z(μ) = tr{(Ŝ_z+μ)⁻²Ŝ_z}` from the eigenvalues of `(1/n)K_ZZ`.
pub fn effective_dim_z(eigs_z: &[f64], mu: f64) -> Result<f64> {
    check_positive("mu", mu)?;
    Ok(weighted_trace(eigs_z, mu))
}

/// Descending eigenvalues of `(1/n)·K·K_XX` for a projector `K` and Gram `K_XX`.
pub fn operator_spectrum(projector: &SymMatrix, kxx: &SymMatrix) -> Result<Vec<f64>> {
    let n = kxx.order() as f64;
    let scaled = SymMatrix::new(kxx.as_matrix() / n)?;
    let mut eigs = product_spectrum(projector, &scaled)?;
    for e in eigs.iter_mut() {
        *e = e.max(0.0);
    }
    Ok(eigs)
}

/// `𝔪 = Σ ν/(ν+λ)²` over eigenvalues `ν` of `(1/n)·K·K_XX`.
pub fn effective_dim_t_from_parts(projector: &SymMatrix, kxx: &SymMatrix, lambda: f64) -> Result<f64> {
    check_positive("lambda", lambda)?;
    Ok(weighted_trace(&operator_spectrum(projector, kxx)?, lambda))
}

/// `𝔪(λ, μ)` for a fitted model, with `μ` taken from the fit.
pub fn effective_dim_t(fit: &FitState, lambda: f64) -> Result<f64> {
    effective_dim_t_from_parts(fit.projector(), fit.kxx(), lambda)
}

/// Empirical covariance operators in explicit feature space.
#[derive(Debug, Clone)]
pub struct FeatureOperators {
    /// `Ŝ = (1/n)ΦᵀΨ`, of size `M_z × M_x`.
    pub cross: DMatrix<f64>,
    /// `Ŝ_z = (1/n)ΦᵀΦ`.
    pub cov_z: SymMatrix,
}

impl FeatureOperators {
    pub fn from_fit(fit: &FitState) -> Result<Self> {
        for spec in [fit.kernel_x(), fit.kernel_z()] {
            if !spec.has_explicit_features() {
                return Err(Error::Unsupported(format!(
                    "{spec} kernel has no explicit feature map; feature-space traces need linear or polynomial kernels"
                )));
            }
        }
        let psi = feature_matrix(fit.kernel_x(), fit.data().x())?;
        let phi = feature_matrix(fit.kernel_z(), fit.data().z())?;
        let n = fit.n() as f64;
        Ok(FeatureOperators { cross: phi.transpose() * &psi / n, cov_z: SymMatrix::new(phi.transpose() * &phi / n)? })
    }

    /// `T̂_μ = Ŝ*(Ŝ_z+μ)⁻¹Ŝ`.
    pub fn t_mu(&self, mu: f64) -> Result<SymMatrix> {
        let inner = ridge_solve(&self.cov_z, mu, &self.cross)?;
        SymMatrix::new(self.cross.transpose() * inner)
    }
}

/// `𝔪̃(λ,μ) = tr T̂_{μλ}⁻¹ Ŝ*(Ŝ_z+μ)⁻¹Ŝ_z(Ŝ_z+μ)⁻¹Ŝ T̂_{μλ}⁻¹` in explicit feature space.
pub fn effective_dim_tilde(fit: &FitState, lambda: f64, mu: f64) -> Result<f64> {
    check_positive("lambda", lambda)?;
    check_positive("mu", mu)?;
    let ops = FeatureOperators::from_fit(fit)?;
    let t_mu = ops.t_mu(mu)?;
    // (Ŝ_z+μ)⁻¹Ŝ, then Ŝ*(Ŝ_z+μ)⁻¹Ŝ_z(Ŝ_z+μ)⁻¹Ŝ = Rᵀ Ŝ_z R.
    let r = ridge_solve(&ops.cov_z, mu, &ops.cross)?;
    let middle = SymMatrix::new(r.transpose() * ops.cov_z.as_matrix() * &r)?;
    // T̂_{μλ}⁻¹ · middle, then the trace of T̂_{μλ}⁻¹ · middle · T̂_{μλ}⁻¹.
    let left = ridge_solve(&t_mu, lambda, middle.as_matrix())?;
    let both = ridge_solve(&t_mu, lambda, &left.transpose())?;
    Ok(both.trace())
}

/// Least-squares fit of `ν_s ≈ ω·s^{-1/(ρ-1)}`; returns `(ρ̂, ω̂)`.
///
/// Uses the leading `min(len/2, #{ν > 1e-12·ν_max})` eigenvalues, but never
/// fewer than 5 when 5 positive eigenvalues exist.
pub fn fit_decay(eigs: &[f64]) -> Result<(f64, f64)> {
    check_descending(eigs)?;
    let max = eigs.first().copied().unwrap_or(0.0);
    let positive = eigs.iter().take_while(|&&v| v > 1e-12 * max && v > 0.0).count();
    if positive < 5 {
        return Err(Error::Input(format!("decay fit needs at least 5 positive eigenvalues, got {positive}")));
    }
    let used = (eigs.len() / 2).min(positive).max(5);
    let pts: Vec<(f64, f64)> = eigs[..used].iter().enumerate().map(|(i, v)| (((i + 1) as f64).ln(), v.ln())).collect();
    let m = used as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok((1.0 + 1.0 / slope.abs(), intercept.exp()))
}

/// Spectra and effective dimensions of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub n: usize,
    pub lambda: f64,
    pub mu: f64,
    /// Eigenvalues of `(1/n)K_XX`, descending.
    pub eigs_x: Vec<f64>,
    /// Eigenvalues of `(1/n)K_ZZ`, descending.
    pub eigs_z: Vec<f64>,
    /// Eigenvalues of `(1/n)K·K_XX`, descending.
    pub eigs_t: Vec<f64>,
    pub n_z_mu: f64,
    pub m_lam_mu: f64,
    /// Only for kernels with explicit features.
    pub m_tilde: Option<f64>,
    pub rho_hat_x: Option<f64>,
    pub omega_hat_x: Option<f64>,
    pub rho_hat_z: Option<f64>,
    pub omega_hat_z: Option<f64>,
    /// `𝔪̃·λ^{ρ̂_x}`, descriptive only.
    pub m_tilde_scaled: Option<f64>,
    /// Decay fits that fell outside `(1, 2]` or could not be computed.
    pub flags: Vec<String>,
}

fn clamp_nonneg(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|e| e.max(0.0)).collect()
}

/// Builds the full spectral report for a fit.
pub fn spectral_report(fit: &FitState) -> Result<SpectralReport> {
    let n = fit.n() as f64;
    let reg = fit.reg();
    let eigs_x = clamp_nonneg(sym_eigvals(&SymMatrix::new(fit.kxx().as_matrix() / n)?)?);
    let eigs_z = clamp_nonneg(sym_eigvals(&SymMatrix::new(fit.kzz().as_matrix() / n)?)?);
    let eigs_t = operator_spectrum(fit.projector(), fit.kxx())?;
    let n_z_mu = effective_dim_z(&eigs_z, reg.mu)?;
    let m_lam_mu = weighted_trace(&eigs_t, reg.lambda);
    let m_tilde = match effective_dim_tilde(fit, reg.lambda, reg.mu) {
        Ok(v) => Some(v),
        Err(Error::Unsupported(_)) => None,
        Err(e) => return Err(e),
    };
    let mut flags = Vec::new();
    let mut decay = |name: &str, eigs: &[f64]| match fit_decay(eigs) {
        Ok((rho, _)) if !rho.is_finite() => {
            flags.push(format!("rho_hat_{name} unavailable: flat spectrum"));
            (None, None)
        }
        Ok((rho, omega)) => {
            if !(rho > 1.0 && rho <= 2.0) {
                flags.push(format!("rho_hat_{name} = {rho:.4} outside (1, 2]"));
            }
            (Some(rho), Some(omega))
        }
        Err(e) => {
            flags.push(format!("rho_hat_{name} unavailable: {e}"));
            (None, None)
        }
    };
    let (rho_hat_x, omega_hat_x) = decay("x", &eigs_x);
    let (rho_hat_z, omega_hat_z) = decay("z", &eigs_z);
    let m_tilde_scaled = match (m_tilde, rho_hat_x) {
        (Some(m), Some(r)) if r.is_finite() => Some(m * reg.lambda.powf(r)),
        _ => None,
    };
    Ok(SpectralReport {
        n: fit.n(),
        lambda: reg.lambda,
        mu: reg.mu,
        eigs_x,
        eigs_z,
        eigs_t,
        n_z_mu,
        m_lam_mu,
        m_tilde,
        rho_hat_x,
        omega_hat_x,
        rho_hat_z,
        omega_hat_z,
        m_tilde_scaled,
        flags,
    })
}

/// Smoothness, link, decay, and `λ = μ^ι` exponents for the regime check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho_x: f64,
    pub rho_z: f64,
    pub iota: f64,
}

impl RegimeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidParameter(format!("{what}, got {v}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]", self.alpha);
        }
        if !(0.5..=1.0).contains(&self.beta) {
            return bad("beta must lie in [1/2, 1]", self.beta);
        }
        if !(self.rho_x > 1.0 && self.rho_x <= 2.0) {
            return bad("rho_x must lie in (1, 2]", self.rho_x);
        }
        if !(self.rho_z > 1.0 && self.rho_z <= 2.0) {
            return bad("rho_z must lie in (1, 2]", self.rho_z);
        }
        if !(self.iota > 0.0 && self.iota <= 1.0) {
            return bad("iota must lie in (0, 1]", self.iota);
        }
        Ok(())
    }
}

/// One strict inequality `lhs < rhs` (or `lhs > rhs`) and its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub row: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl RegimeRow {
    fn less(row: &str, lhs: f64, rhs: f64) -> Self {
        RegimeRow { row: row.into(), lhs, rhs, pass: lhs < rhs }
    }

    fn greater(row: &str, lhs: f64, rhs: f64) -> Self {
        RegimeRow { row: row.into(), lhs, rhs, pass: lhs > rhs }
    }
}

/// Per-row verdicts and their conjunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub rows: Vec<RegimeRow>,
    pub all_pass: bool,
}

impl RegimeVerdict {
    fn from_rows(rows: Vec<RegimeRow>) -> Self {
        let all_pass = rows.iter().all(|r| r.pass);
        RegimeVerdict { rows, all_pass }
    }

    pub fn row(&self, name: &str) -> Option<&RegimeRow> {
        self.rows.iter().find(|r| r.row == name)
    }
}

/// The ten exponent restrictions under which the coupling error stays below
/// the bootstrap's anti-concentration scale while the bias stays negligible.
///
/// Each row is a strict inequality compared without tolerance.
pub fn check_regime(params: &RegimeParams) -> Result<RegimeVerdict> {
    params.validate()?;
    let RegimeParams { alpha: a, rho_x: rx, rho_z: rz, iota: i, .. } = *params;
    let rows = vec![
        RegimeRow::less("Q_bullet", 2.0 * rx, 3.0 + 2.0 * a - 1.0 / i),
        RegimeRow::greater("R_bullet", rx + 2.0 * a, 1.0 / i),
        RegimeRow::less("Q_res1", rz + 1.0, i * (3.0 * a + 1.5 * rx - 1.0)),
        RegimeRow::less("Q_res2", rz + 1.0 / 3.0, i * (2.0 * a + 4.0 / 3.0 * rx - 1.0)),
        RegimeRow::less("Q_res3", rz + 2.0, i * (4.0 * a + 3.0 * rx - 2.0)),
        RegimeRow::greater("R_res1", i * (4.0 * a + 2.0 * rx - 2.0), 4.0),
        RegimeRow::greater("R_res2", i * (2.0 * a + 2.0 * rx - 2.0), 3.0),
        RegimeRow::less("R_res3", 2.0 * rz + 4.0, i * (6.0 * a + 3.0 * rx - 3.0)),
        RegimeRow::less("R_res4", 3.0 * rz + 3.0, i * (6.0 * a + 4.0 * rx - 4.0)),
        RegimeRow::less("R_res5", rz + 4.0, i * (4.0 * a + 3.0 * rx - 3.0)),
    ];
    Ok(RegimeVerdict::from_rows(rows))
}

/// Sample-size restrictions for a concrete `(n, λ, μ)`.
///
/// Rows compare `n` against the stated power of `λ, μ`; the bias row is an
/// upper bound (`n < rhs`), all others lower bounds (`n > rhs`). The
/// asymptotic `≪` is read as a plain strict inequality.
pub fn check_sample_size(params: &RegimeParams, n: usize, lambda: f64, mu: f64) -> Result<RegimeVerdict> {
    params.validate()?;
    check_positive("lambda", lambda)?;
    check_positive("mu", mu)?;
    let RegimeParams { alpha: a, rho_x: rx, rho_z: rz, .. } = *params;
    let nf = n as f64;
    let (l, m) = (lambda, mu);
    let rows = vec![
        RegimeRow::less("B", nf, l.powf(-(rx + 2.0 * a))),
        RegimeRow::greater("Q_bullet", nf, m.powi(-1) * l.powf(-(3.0 * rx - 3.0))),
        RegimeRow::greater("R_bullet", nf, m.powi(-1)),
        RegimeRow::greater("Q_res1", nf, l.powf(a - 1.0 + rx / 2.0) * m.powf(-(1.0 + rz))),
        RegimeRow::greater("Q_res2", nf, l.powf(-1.0 + rx / 3.0) * m.powf(-(1.0 / 3.0) - rz)),
        RegimeRow::greater("Q_res3", nf, l.powf(-1.0 + rx / 2.0) * m.powf(-(1.0 + rz / 2.0))),
        RegimeRow::greater("R_res1", nf, m.powi(-4) * l.powf(2.0 * a - 2.0 + rx)),
        RegimeRow::greater("R_res2", nf, m.powi(-3) * l.powf(-2.0 + rx)),
        RegimeRow::greater("R_res3", nf, m.powf(-(2.0 + rz)) * l.powf(a - 1.5 + rx / 2.0)),
        RegimeRow::greater("R_res4", nf, m.powf(-(1.0 + rz)) * l.powf(-4.0 / 3.0 + rx / 3.0)),
        RegimeRow::greater("R_res5", nf, m.powf(-(2.0 + rz / 2.0)) * l.powf(-1.5 + rx / 2.0)),
    ];
    Ok(RegimeVerdict::from_rows(rows))
}
