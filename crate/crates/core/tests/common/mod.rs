//! Explicit-feature oracles shared by the integration tests.
//!
//! Everything here works in primal (feature) space with hand-written
//! feature maps, independent of the library's Gram-matrix code paths.

#![allow(dead_code)]

use kiv::{Dataset, Point};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_point<R: Rng>(rng: &mut R, dim: usize) -> Point {
    Point::Vector((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random dataset with a nonlinear outcome and correlated X, Z.
pub fn random_dataset(seed: u64, n: usize, p: usize, q: usize) -> Dataset {
    let mut r = rng(seed);
    let mut zs = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..q).map(|_| r.sample(StandardNormal)).collect();
        let u: f64 = r.sample(StandardNormal);
        let x: Vec<f64> = (0..p).map(|j| z[j % q] * 0.9 + 0.5 * u + 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
        let y =
            x.iter().enumerate().map(|(j, v)| v * (j as f64 + 1.0).recip()).sum::<f64>() + 0.3 * x[0] * x[0] + 0.5 * u;
        zs.push(Point::Vector(z));
        xs.push(Point::Vector(x));
        ys.push(y);
    }
    Dataset::new(zs, xs, ys).unwrap()
}

pub fn vector(p: &Point) -> &[f64] {
    p.as_vector().expect("vector point")
}

/// Linear kernel features: the point itself.
pub fn linear_features(points: &[Point]) -> DMatrix<f64> {
    let p = vector(&points[0]).len();
    DMatrix::from_fn(points.len(), p, |i, j| vector(&points[i])[j])
}

/// Features of `(aᵀb + c)²` on ℝ²:
/// `(c, √(2c)a₁, √(2c)a₂, a₁², a₂², √2 a₁a₂)`.
pub fn quadratic_features_2d(points: &[Point], c: f64) -> DMatrix<f64> {
    let s2c = (2.0 * c).sqrt();
    let rows: Vec<[f64; 6]> = points
        .iter()
        .map(|pt| {
            let v = vector(pt);
            assert_eq!(v.len(), 2, "quadratic oracle is written for p = 2");
            let (a, b) = (v[0], v[1]);
            [c, s2c * a, s2c * b, a * a, b * b, std::f64::consts::SQRT_2 * a * b]
        })
        .collect();
    DMatrix::from_fn(points.len(), 6, |i, j| rows[i][j])
}

/// Feature-space operators built from the covariate features `Φ` (n×D)
/// and instrument features `Ψ` (n×E).
pub struct Primal {
    pub n: f64,
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    /// `Ŝ = (1/n) Ψᵀ Φ`, mapping covariate features to instrument features.
    pub s: DMatrix<f64>,
    /// `Ŝ_z = (1/n) Ψᵀ Ψ`.
    pub s_z: DMatrix<f64>,
}

impl Primal {
    pub fn new(phi: DMatrix<f64>, psi: DMatrix<f64>) -> Self {
        let n = phi.nrows() as f64;
        let s = psi.transpose() * &phi / n;
        let s_z = psi.transpose() * &psi / n;
        Primal { n, phi, psi, s, s_z }
    }

    /// `(Ŝ_z + μ)⁻¹`.
    pub fn resolvent_z(&self, mu: f64) -> DMatrix<f64> {
        let e = self.s_z.nrows();
        (&self.s_z + DMatrix::identity(e, e) * mu).try_inverse().expect("Ŝ_z + μ is invertible")
    }

    /// `T̂_μ = Ŝ*(Ŝ_z + μ)⁻¹Ŝ`.
    pub fn t_mu(&self, mu: f64) -> DMatrix<f64> {
        self.s.transpose() * self.resolvent_z(mu) * &self.s
    }

    /// `(T̂_μ + λ)⁻¹`.
    pub fn t_inv(&self, lambda: f64, mu: f64) -> DMatrix<f64> {
        let d = self.phi.ncols();
        (self.t_mu(mu) + DMatrix::identity(d, d) * lambda).try_inverse().expect("T̂ + λ is invertible")
    }

    /// Primal solution `ŵ = (T̂_μ + λ)⁻¹ Ŝ*(Ŝ_z + μ)⁻¹ (1/n) Ψᵀ Y`.
    pub fn w_hat(&self, y: &[f64], lambda: f64, mu: f64) -> DVector<f64> {
        let y = DVector::from_column_slice(y);
        let rhs = self.s.transpose() * self.resolvent_z(mu) * (self.psi.transpose() * y / self.n);
        self.t_inv(lambda, mu) * rhs
    }

    /// Bootstrap process coefficients from the three closed-form terms:
    /// `A = B = T̂⁻¹Ŝ*(Ŝ_z+μ)⁻¹(1/n)Ψᵀβ`,
    /// `C = T̂⁻¹Ŝ*(Ŝ_z+μ)⁻¹Ŝ_z(Ŝ_z+μ)⁻¹(1/n)Ψᵀβ`, result `A + B − C`,
    /// where `β = diag(ε̂)(h − hᵀ)1/√2`.
    pub fn bootstrap_terms(&self, residuals: &[f64], h: &DMatrix<f64>, lambda: f64, mu: f64) -> DVector<f64> {
        let n = residuals.len();
        let ones = DVector::from_element(n, 1.0);
        let anti = (h - h.transpose()) * ones / std::f64::consts::SQRT_2;
        let beta = DVector::from_fn(n, |i, _| residuals[i] * anti[i]);
        let t_inv = self.t_inv(lambda, mu);
        let r = self.resolvent_z(mu);
        let base = self.psi.transpose() * beta / self.n;
        let a = &t_inv * self.s.transpose() * &r * &base;
        let c = &t_inv * self.s.transpose() * &r * &self.s_z * &r * &base;
        &a + &a - c
    }
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut v: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}
