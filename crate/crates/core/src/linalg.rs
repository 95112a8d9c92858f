//! Dense symmetric solves and eigenvalue routines.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// A dense symmetric matrix.
///
/// Construction rejects inputs whose asymmetry exceeds `1e-12·max|entry|` and
/// otherwise stores the symmetrized `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        let scale = m.amax();
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidParameter(format!(
                "matrix is not symmetric (max asymmetry {asym:e}, scale {scale:e})"
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix(sym))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)))
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Solves `(M + ρI) S = rhs` by Cholesky factorization.
///
/// If the factorization fails, a jitter of `1e-12·trace/n` is added and grown
/// tenfold on each of at most three retries before giving up.
pub fn ridge_solve(m: &SymMatrix, rho: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("ridge must be positive, got {rho}")));
    }
    let n = m.order();
    if rhs.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rhs.nrows() });
    }
    let base_jitter = 1e-12 * m.0.trace().abs().max(f64::MIN_POSITIVE) / n.max(1) as f64;
    let mut jitter = 0.0;
    for attempt in 0..4 {
        let mut shifted = m.0.clone();
        for i in 0..n {
            shifted[(i, i)] += rho + jitter;
        }
        if let Some(chol) = Cholesky::new(shifted.clone()) {
            let sol = chol.solve(rhs);
            let resid = (&shifted * &sol - rhs).norm();
            if resid <= 1e-8 * rhs.norm().max(f64::MIN_POSITIVE) {
                return Ok(sol);
            }
            log::debug!("ridge_solve residual {resid:e} too large on attempt {attempt}");
        }
        jitter = if jitter == 0.0 { base_jitter } else { jitter * 10.0 };
    }
    Err(Error::Factorization(format!("Cholesky of M + {rho}·I failed after jitter escalation")))
}

/// Inverse of a general square matrix by LU with partial pivoting.
///
/// The result is accepted only if `‖M·M⁻¹ − I‖_F ≤ 1e-8·√n`.
pub fn lu_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
    }
    let n = m.nrows();
    let inv =
        m.clone().lu().try_inverse().ok_or_else(|| Error::Factorization("LU inverse of singular matrix".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);
    let resid = (m * &inv - &eye).norm();
    if resid.is_nan() || resid > 1e-8 * eye.norm() {
        return Err(Error::Factorization(format!("LU inverse residual {resid:e} exceeds tolerance")));
    }
    Ok(inv)
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Eigenvalues of a symmetric matrix, in descending order.
pub fn sym_eigvals(m: &SymMatrix) -> Result<Vec<f64>> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input"));
    }
    let eig = SymmetricEigen::new(m.0.clone());
    Ok(sorted_desc(eig.eigenvalues.iter().copied().collect()))
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clamped to 0.
pub fn psd_sqrt(m: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.0.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -1e-10 * max.max(f64::MIN_POSITIVE) {
        return Err(Error::Indefinite(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Spectrum of the product `K·G` of two PSD matrices, descending.
///
/// Computed as the eigenvalues of `K^{1/2} G K^{1/2}`, which is similar to `KG`.
pub fn product_spectrum(k: &SymMatrix, g: &SymMatrix) -> Result<Vec<f64>> {
    if k.order() != g.order() {
        return Err(Error::DimensionMismatch { expected: k.order(), got: g.order() });
    }
    let g_eig = SymmetricEigen::new(g.0.clone()).eigenvalues;
    if g_eig.min() < -1e-10 * g_eig.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::Indefinite(g_eig.min()));
    }
    let root = psd_sqrt(k)?;
    let inner = &root * &g.0 * &root;
    let sym = (&inner + inner.transpose()) * 0.5;
    sym_eigvals(&SymMatrix(sym))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> SymMatrix {
        let b = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0));
        SymMatrix::new(&b * b.transpose()).unwrap()
    }

    #[test]
    fn construction_checks_symmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 1.0]);
        assert!(SymMatrix::new(m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-14, 1.0]);
        let s = SymMatrix::new(m).unwrap();
        assert_eq!(s.as_matrix(), &s.as_matrix().transpose());
        assert!(SymMatrix::new(DMatrix::from_element(2, 2, f64::NAN)).is_err());
    }

    #[test]
    fn ridge_solve_trivial() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, -4.0, 6.0]);
        let zero = SymMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        assert!((ridge_solve(&zero, 2.0, &b).unwrap() - &b / 2.0).amax() < 1e-15);
        assert!((ridge_solve(&SymMatrix::identity(3), 1.0, &b).unwrap() - &b / 2.0).amax() < 1e-15);
        assert!(ridge_solve(&zero, 0.0, &b).is_err());
        assert!(ridge_solve(&zero, 1.0, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn ridge_solve_residual_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.gen_range(2..30);
            let rank = rng.gen_range(1..=n);
            let m = random_psd(&mut rng, n, rank);
            let rhs = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
            let rho = 10f64.powf(rng.gen_range(-6.0..1.0));
            let s = ridge_solve(&m, rho, &rhs).unwrap();
            let mut shifted = m.as_matrix().clone();
            shifted += DMatrix::identity(n, n) * rho;
            assert!((shifted * s - &rhs).norm() <= 1e-8 * rhs.norm());
        }
    }

    #[test]
    fn ridge_solve_duplicated_rows() {
        // Exactly singular Gram from duplicated points.
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0]);
        let g = SymMatrix::new(&x * x.transpose()).unwrap();
        let rhs = DMatrix::from_element(4, 1, 1.0);
        assert!(ridge_solve(&g, 1e-6, &rhs).is_ok());
    }

    #[test]
    fn lu_inverse_checks() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]);
        let inv = lu_inverse(&m).unwrap();
        assert!((&m * inv - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert!(lu_inverse(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn eigvals_examples() {
        assert_eq!(sym_eigvals(&SymMatrix::from_diagonal(&[1.0, 2.0, 3.0])).unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(sym_eigvals(&SymMatrix::identity(4)).unwrap(), vec![1.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..25);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let m = SymMatrix::new(&a + a.transpose()).unwrap();
            let e = sym_eigvals(&m).unwrap();
            assert!(e.windows(2).all(|w| w[0] >= w[1]));
            let tr = m.as_matrix().trace();
            assert!((e.iter().sum::<f64>() - tr).abs() <= 1e-8 * tr.abs().max(1.0));
        }
    }

    #[test]
    fn product_spectrum_examples() {
        let g = SymMatrix::from_diagonal(&[3.0, 4.0]);
        let e = product_spectrum(&SymMatrix::identity(2), &g).unwrap();
        assert!((e[0] - 4.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
        let e = product_spectrum(&SymMatrix::from_diagonal(&[1.0, 2.0]), &g).unwrap();
        assert!((e[0] - 8.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
        let neg = SymMatrix::from_diagonal(&[1.0, -1.0]);
        assert!(matches!(product_spectrum(&neg, &g), Err(Error::Indefinite(_))));
    }

    #[test]
    fn product_spectrum_matches_general_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..15);
            let k = random_psd(&mut rng, n, n);
            let g = random_psd(&mut rng, n, n);
            let ours = product_spectrum(&k, &g).unwrap();
            // Independent route: Schur decomposition of the nonsymmetric product.
            let kg = k.as_matrix() * g.as_matrix();
            let complex = kg.complex_eigenvalues();
            let mut theirs: Vec<f64> = complex.iter().map(|c| c.re).collect();
            theirs.sort_by(|a, b| b.total_cmp(a));
            assert!(complex.iter().all(|c| c.im.abs() <= 1e-8 * ours[0]));
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() <= 1e-8 * ours[0], "{a} vs {b}");
            }
            let swapped = product_spectrum(&g, &k).unwrap();
            for (a, b) in ours.iter().zip(&swapped) {
                assert!((a - b).abs() <= 1e-8 * ours[0]);
            }
        }
    }

    proptest! {
        #[test]
        fn ridge_solve_is_linear(seed in 0u64..1000, rho in 1e-3f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let m = random_psd(&mut rng, n, 4);
            let a = DMatrix::from_column_slice(n, 1, DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).as_slice());
            let b = DMatrix::from_column_slice(n, 1, DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).as_slice());
            let sum = ridge_solve(&m, rho, &(&a + &b)).unwrap();
            let parts = ridge_solve(&m, rho, &a).unwrap() + ridge_solve(&m, rho, &b).unwrap();
            prop_assert!((&sum - &parts).norm() <= 1e-10 * sum.norm().max(1e-300));
        }
    }
}
