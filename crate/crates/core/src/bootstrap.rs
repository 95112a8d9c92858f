//! Anti-symmetric Gaussian multiplier bootstrap and uniform confidence bands.
//!
//! Each bootstrap iteration draws centered multipliers `q ~ N(0, I − 11ᵀ/n)`,
//! forms the dual coefficients `γ̂ = √n·A·C·diag(ε̂)·q` with `C = 2K − K²`,
//! and records `M = ‖𝔅‖ = (γ̂ᵀ K_XX γ̂)^{1/2}`, the RKHS norm of the bootstrap
//! function `𝔅 = Σᵢ γ̂ᵢ k_x(·, Xᵢ)`. The band half-width is the upper
//! `χ`-quantile of `M` scaled by `n^{-1/2}·(1 + 1/ln n)`, and by `κ_x` for
//! the sup-norm band.
//!
//! Draw `b` uses its own ChaCha stream keyed by `(seed, b)`, so the draw set
//! does not depend on how draws are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitState;
use crate::kernels::{gram_matrix, Point};

/// Default number of bootstrap iterations.
pub const DEFAULT_DRAWS: usize = 1000;

/// Which quadratic form turns bootstrap coefficients into the scalar `M`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// `M² = γ̂ᵀ K_XX γ̂`, the RKHS norm of the bootstrap function.
    #[default]
    RkhsNorm,
    /// `M² = γ̂ᵀ K γ̂` with the first-stage projector `K`; kept for comparison.
    ProjectorForm,
}

/// Sampled values of `M` with the metadata needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    /// `values[b]` was produced by stream `b`.
    pub values: Vec<f64>,
    pub seed: u64,
    pub statistic: Statistic,
}

impl BootstrapDraws {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// RNG for draw `index` under `seed`.
pub fn draw_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Multipliers with law `N(0, I − 11ᵀ/n)`: i.i.d. standard normals minus their mean.
pub fn draw_multipliers<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mean = g.mean();
    g.map(|v| v - mean)
}

/// Cached `√n·A·C·diag(ε̂)` and the Gram used for the norm of each draw.
#[derive(Debug, Clone)]
pub struct BootstrapOperator {
    map: DMatrix<f64>,
    norm_gram: DMatrix<f64>,
    statistic: Statistic,
}

/// `C = 2K − K²`.
pub fn correction_matrix(fit: &FitState) -> DMatrix<f64> {
    let k = fit.projector().as_matrix();
    k * 2.0 - k * k
}

impl BootstrapOperator {
    pub fn new(fit: &FitState, statistic: Statistic) -> Self {
        let n = fit.n();
        let c = correction_matrix(fit);
        let mut map = fit.a() * c;
        for (j, e) in fit.residuals().iter().enumerate() {
            map.column_mut(j).scale_mut(*e);
        }
        map *= (n as f64).sqrt();
        let norm_gram = match statistic {
            Statistic::RkhsNorm => fit.kxx().as_matrix().clone(),
            Statistic::ProjectorForm => fit.projector().as_matrix().clone(),
        };
        BootstrapOperator { map, norm_gram, statistic }
    }

    pub fn statistic(&self) -> Statistic {
        self.statistic
    }

    /// Dual coefficients `γ̂` of the bootstrap function for multipliers `q`.
    pub fn coefficients(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.map.ncols() {
            return Err(Error::DimensionMismatch { expected: self.map.ncols(), got: q.len() });
        }
        Ok(&self.map * q)
    }

    pub fn draw(&self, q: &DVector<f64>) -> Result<f64> {
        let gamma = self.coefficients(q)?;
        Ok(gamma.dot(&(&self.norm_gram * &gamma)).max(0.0).sqrt())
    }
}

/// One bootstrap statistic `M` for a given multiplier vector.
pub fn bootstrap_draw(fit: &FitState, q: &DVector<f64>) -> Result<f64> {
    BootstrapOperator::new(fit, Statistic::RkhsNorm).draw(q)
}

/// Dual coefficients of `𝔅` in the double-sum form, with
/// `β = diag(ε̂)·(h − hᵀ)·1/√2` for an `n×n` Gaussian matrix `h`.
pub fn bootstrap_reference_coefficients(fit: &FitState, h: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = fit.n();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: h.nrows().max(h.ncols()) });
    }
    let anti = h - h.transpose();
    let row_sums = DVector::from_fn(n, |i, _| anti.row(i).sum() / std::f64::consts::SQRT_2);
    let beta = row_sums.component_mul(fit.residuals());
    Ok(fit.a() * (correction_matrix(fit) * beta))
}

/// `𝔅(x) = K_xX (K K_XX + nλI)⁻¹ (2K − K²) β` at each evaluation point.
pub fn bootstrap_reference(fit: &FitState, h: &DMatrix<f64>, eval_points: &[Point]) -> Result<Vec<f64>> {
    let coef = bootstrap_reference_coefficients(fit, h)?;
    let kx = gram_matrix(fit.kernel_x(), eval_points, fit.data().x())?;
    Ok((kx * coef).iter().copied().collect())
}

fn check_level(chi: f64) -> Result<()> {
    if !(chi > 0.0 && chi < 1.0) {
        return Err(Error::InvalidParameter(format!("chi must lie in (0, 1), got {chi}")));
    }
    Ok(())
}

/// Upper `χ`-quantile: the `⌈B(1−χ)⌉`-th smallest draw, without interpolation.
pub fn bootstrap_quantile(draws: &BootstrapDraws, chi: f64) -> Result<f64> {
    check_level(chi)?;
    if draws.values.is_empty() {
        return Err(Error::EmptyInput("bootstrap draws"));
    }
    let b = draws.values.len();
    let target = b as f64 * (1.0 - chi);
    // Snap products such as 10·0.8 that land a rounding error above an integer.
    let rank = if (target - target.round()).abs() <= 1e-9 * b as f64 { target.round() } else { target.ceil() } as usize;
    let rank = rank.clamp(1, b);
    let mut sorted = draws.values.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[rank - 1])
}

/// Runs `b` draws from independent per-draw streams and returns them with `t̂_χ`.
pub fn run_bootstrap(
    fit: &FitState,
    b: usize,
    chi: f64,
    seed: u64,
    statistic: Statistic,
) -> Result<(BootstrapDraws, f64)> {
    check_level(chi)?;
    if b == 0 {
        return Err(Error::InvalidParameter("number of bootstrap draws must be >= 1".into()));
    }
    if b < 100 {
        log::warn!("only {b} bootstrap draws; at least 100 are recommended");
    }
    let op = BootstrapOperator::new(fit, statistic);
    let n = fit.n();
    let values = (0..b as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = draw_stream(seed, i);
            op.draw(&draw_multipliers(n, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = BootstrapDraws { values, seed, statistic };
    let t_hat = bootstrap_quantile(&draws, chi)?;
    Ok((draws, t_hat))
}

/// Radii and metadata of a uniform confidence band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub n: usize,
    pub chi: f64,
    pub t_hat: f64,
    pub kappa_x: f64,
    /// `1 + 1/ln n`.
    pub inflation: f64,
    /// Half-width of the sup-norm band, `radius_rkhs · κ_x`.
    pub radius_sup: f64,
    /// Radius of the RKHS-norm ball, `t̂·n^{-1/2}·(1 + 1/ln n)`.
    pub radius_rkhs: f64,
}

/// Band value at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub h_hat: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceBand {
    pub fn new(n: usize, chi: f64, t_hat: f64, kappa_x: f64) -> Result<Self> {
        check_level(chi)?;
        if n < 3 {
            return Err(Error::Input(format!("a confidence band needs n >= 3, got {n}")));
        }
        if !(t_hat >= 0.0 && t_hat.is_finite()) {
            return Err(Error::InvalidParameter(format!("t_hat must be finite and >= 0, got {t_hat}")));
        }
        if !(kappa_x > 0.0 && kappa_x.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa_x must be finite and > 0, got {kappa_x}")));
        }
        let inflation = 1.0 + 1.0 / (n as f64).ln();
        let radius_rkhs = t_hat / (n as f64).sqrt() * inflation;
        Ok(ConfidenceBand { n, chi, t_hat, kappa_x, inflation, radius_sup: radius_rkhs * kappa_x, radius_rkhs })
    }

    pub fn interval(&self, h_hat: f64) -> BandPoint {
        BandPoint { h_hat, lower: h_hat - self.radius_sup, upper: h_hat + self.radius_sup }
    }
}

/// Uniform band `ĥ(x) ± t̂·n^{-1/2}·κ_x·(1 + 1/ln n)` at each evaluation point.
pub fn confidence_band(
    fit: &FitState,
    t_hat: f64,
    chi: f64,
    kappa_x: f64,
    eval_points: &[Point],
) -> Result<(ConfidenceBand, Vec<BandPoint>)> {
    let band = ConfidenceBand::new(fit.n(), chi, t_hat, kappa_x)?;
    let preds = fit.predict_many(eval_points)?;
    let points = preds.into_iter().map(|h| band.interval(h)).collect();
    Ok((band, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit_kiv, Dataset, RegPair};
    use crate::kernels::KernelSpec;
    use crate::linalg::{sym_eigvals, SymMatrix};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_fit(seed: u64, n: usize, scale: f64) -> FitState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pt = |d: usize| Point::Vector((0..d).map(|_| rng.sample(StandardNormal)).collect());
        let z: Vec<Point> = (0..n).map(|_| pt(2)).collect();
        let x: Vec<Point> = (0..n).map(|_| pt(2)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|p| {
                let v = p.as_vector().unwrap();
                scale * (v[0].sin() + 0.3 * v[1])
            })
            .collect();
        let data = Dataset::new(z, x, y).unwrap();
        let k = KernelSpec::Gaussian { lengthscale: 1.0 };
        fit_kiv(&data, &k, &k, RegPair::new(0.05, 0.02).unwrap()).unwrap()
    }

    fn hand_fit() -> FitState {
        let p = |v: f64| Point::Vector(vec![v]);
        let data = Dataset::new(vec![p(0.0), p(1.0)], vec![p(0.0), p(1.0)], vec![1.0, -1.0]).unwrap();
        let kxx = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0])).unwrap();
        let kzz = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0])).unwrap();
        FitState::from_grams(data, KernelSpec::Linear, KernelSpec::Linear, RegPair::new(0.1, 0.2).unwrap(), kxx, kzz)
            .unwrap()
    }

    #[test]
    fn multipliers_center() {
        let mut rng = draw_stream(1, 0);
        assert_eq!(draw_multipliers(1, &mut rng)[0], 0.0);
        for n in [2, 5, 50] {
            let q = draw_multipliers(n, &mut rng);
            assert!(q.sum().abs() <= 1e-12 * q.norm());
        }
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = draw_multipliers(4, &mut draw_stream(9, 3));
        let b = draw_multipliers(4, &mut draw_stream(9, 3));
        let c = draw_multipliers(4, &mut draw_stream(9, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn hand_case_n2() {
        // Frozen from an independent dense evaluation of the closed form.
        let fit = hand_fit();
        let q = DVector::from_column_slice(&[0.7, -0.7]);
        let m = bootstrap_draw(&fit, &q).unwrap();
        assert!((m - 0.15882272614322487).abs() <= 1e-12 * m);
        let lit = BootstrapOperator::new(&fit, Statistic::ProjectorForm).draw(&q).unwrap();
        assert!((lit - 0.08836887238120064).abs() <= 1e-12 * lit);
        assert!(bootstrap_draw(&fit, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn zero_residuals_give_zero_draws() {
        let fit = random_fit(2, 12, 0.0);
        assert!(fit.residuals().iter().all(|&e| e == 0.0));
        let (draws, t_hat) = run_bootstrap(&fit, 1000, 0.05, 3, Statistic::RkhsNorm).unwrap();
        assert!(draws.values.iter().all(|&m| m == 0.0));
        assert_eq!(t_hat, 0.0);
        let h = DMatrix::from_fn(12, 12, |i, j| (i * 12 + j) as f64);
        assert!(bootstrap_reference(&fit, &h, fit.data().x()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn draws_scale_with_residuals() {
        let f1 = random_fit(4, 15, 1.0);
        let f2 = random_fit(4, 15, 2.0);
        let q = draw_multipliers(15, &mut draw_stream(0, 0));
        assert_eq!(2.0 * bootstrap_draw(&f1, &q).unwrap(), bootstrap_draw(&f2, &q).unwrap());
    }

    #[test]
    fn scale_equivariance_of_band() {
        for (c, tol) in [(2.0, 0.0), (3.0, 1e-12)] {
            let f1 = random_fit(6, 20, 1.0);
            let fc = random_fit(6, 20, c);
            let (d1, t1) = run_bootstrap(&f1, 200, 0.1, 17, Statistic::RkhsNorm).unwrap();
            let (dc, tc) = run_bootstrap(&fc, 200, 0.1, 17, Statistic::RkhsNorm).unwrap();
            for (a, b) in d1.values.iter().zip(&dc.values) {
                assert!((c * a - b).abs() <= tol * b.abs());
            }
            assert!((c * t1 - tc).abs() <= tol * tc);
            let b1 = ConfidenceBand::new(20, 0.1, t1, 1.0).unwrap();
            let bc = ConfidenceBand::new(20, 0.1, tc, 1.0).unwrap();
            assert!((c * b1.radius_sup - bc.radius_sup).abs() <= tol * bc.radius_sup);
            assert!((c * b1.radius_rkhs - bc.radius_rkhs).abs() <= tol * bc.radius_rkhs);
        }
    }

    #[test]
    fn symmetric_h_is_annihilated() {
        let fit = random_fit(5, 10, 1.0);
        let mut rng = draw_stream(2, 0);
        let g = DMatrix::from_fn(10, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sym = &g + g.transpose();
        let vals = bootstrap_reference(&fit, &sym, fit.data().x()).unwrap();
        assert!(vals.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transposed_h_flips_sign() {
        let fit = random_fit(8, 10, 1.0);
        let mut rng = draw_stream(3, 0);
        let h = DMatrix::from_fn(10, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = bootstrap_reference(&fit, &h, fit.data().x()).unwrap();
        let b = bootstrap_reference(&fit, &h.transpose(), fit.data().x()).unwrap();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() <= 1e-12 * scale);
        }
        assert!(bootstrap_reference(&fit, &DMatrix::zeros(3, 3), fit.data().x()).is_err());
    }

    #[test]
    fn reference_and_draw_agree_on_linked_multipliers() {
        let fit = random_fit(10, 16, 1.0);
        let n = 16;
        let mut rng = draw_stream(4, 0);
        let h = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let anti = &h - h.transpose();
        let q = DVector::from_fn(n, |i, _| anti.row(i).sum() / (2.0f64.sqrt() * (n as f64).sqrt()));
        let op = BootstrapOperator::new(&fit, Statistic::RkhsNorm);
        let gamma = op.coefficients(&q).unwrap();
        let reference = bootstrap_reference_coefficients(&fit, &h).unwrap();
        assert!((&gamma - &reference).norm() <= 1e-10 * reference.norm());
    }

    #[test]
    fn correction_spectrum_in_unit_interval() {
        for seed in 0..5 {
            let fit = random_fit(seed, 20, 1.0);
            let c = correction_matrix(&fit);
            let eig = sym_eigvals(&SymMatrix::new(c).unwrap()).unwrap();
            assert!(eig[0] <= 1.0 + 1e-10);
            assert!(*eig.last().unwrap() >= -1e-10);
        }
    }

    #[test]
    fn quantile_examples() {
        let d = |v: Vec<f64>| BootstrapDraws { values: v, seed: 0, statistic: Statistic::RkhsNorm };
        let ten = d((1..=10).map(f64::from).collect());
        assert_eq!(bootstrap_quantile(&ten, 0.2).unwrap(), 8.0);
        assert_eq!(bootstrap_quantile(&ten, 0.05).unwrap(), 10.0);
        assert_eq!(bootstrap_quantile(&ten, 0.5).unwrap(), 5.0);
        assert_eq!(bootstrap_quantile(&d(vec![2.5; 7]), 0.3).unwrap(), 2.5);
        assert_eq!(bootstrap_quantile(&d(vec![5.0]), 0.9).unwrap(), 5.0);
        assert!(bootstrap_quantile(&d(vec![]), 0.5).is_err());
        assert!(bootstrap_quantile(&ten, 0.0).is_err());
        assert!(bootstrap_quantile(&ten, 1.0).is_err());
    }

    #[test]
    fn band_arithmetic() {
        let band = ConfidenceBand::new(100, 0.05, 2.0, 1.0).unwrap();
        assert!((band.radius_sup - 0.2 * (1.0 + 1.0 / 100f64.ln())).abs() < 1e-15);
        assert!((band.radius_sup - 0.243430).abs() < 1e-6);
        let wide = ConfidenceBand::new(100, 0.05, 2.0, 2.0).unwrap();
        assert_eq!(wide.radius_sup, 2.0 * band.radius_sup);
        assert_eq!(wide.radius_rkhs, band.radius_rkhs);
        assert!(ConfidenceBand::new(2, 0.05, 1.0, 1.0).is_err());
        assert!(ConfidenceBand::new(10, 0.05, -1.0, 1.0).is_err());
        let fit = random_fit(1, 10, 1.0);
        let (b, pts) = confidence_band(&fit, 0.0, 0.05, 1.0, fit.data().x()).unwrap();
        assert_eq!(b.radius_sup, 0.0);
        assert!(pts.iter().all(|p| p.lower == p.h_hat && p.upper == p.h_hat));
    }

    #[test]
    fn run_is_deterministic_and_monotone_in_level() {
        let fit = random_fit(12, 25, 1.0);
        let (a, _) = run_bootstrap(&fit, 300, 0.05, 99, Statistic::RkhsNorm).unwrap();
        let (b, _) = run_bootstrap(&fit, 300, 0.05, 99, Statistic::RkhsNorm).unwrap();
        assert_eq!(a, b);
        // Sequential evaluation reproduces the parallel draw set.
        let op = BootstrapOperator::new(&fit, Statistic::RkhsNorm);
        let seq: Vec<f64> =
            (0..300).map(|i| op.draw(&draw_multipliers(25, &mut draw_stream(99, i))).unwrap()).collect();
        assert_eq!(seq, a.values);
        assert!(bootstrap_quantile(&a, 0.05).unwrap() >= bootstrap_quantile(&a, 0.5).unwrap());
        assert!(run_bootstrap(&fit, 0, 0.05, 1, Statistic::RkhsNorm).is_err());
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_chi(values in proptest::collection::vec(0.0f64..100.0, 1..200),
                                    c1 in 0.01f64..0.99, c2 in 0.01f64..0.99) {
            let d = BootstrapDraws { values, seed: 0, statistic: Statistic::RkhsNorm };
            let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
            let t_lo = bootstrap_quantile(&d, lo).unwrap();
            prop_assert!(t_lo >= bootstrap_quantile(&d, hi).unwrap());
            let exceed = d.values.iter().filter(|&&v| v > t_lo).count() as f64 / d.len() as f64;
            prop_assert!(exceed <= lo + 1e-9);
        }
    }
}
