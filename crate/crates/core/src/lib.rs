//! Kernel instrumental variable regression with bootstrap uniform confidence bands.
//!
//! The estimator solves a two-stage kernel ridge problem in closed form
//! from the Gram matrices of the covariates `X` and instruments `Z`:
//!
//! ```text
//! K = K_ZZ (K_ZZ + nμI)⁻¹
//! α̂ = (K K_XX + nλI)⁻¹ K Y,    ĥ(x) = Σ_i α̂_i k(x, X_i)
//! ```
//!
//! A multiplier bootstrap of the estimator's RKHS-norm error gives a critical
//! value `t̂`, which turns into a uniform band `ĥ(x) ± κ_x t̂ (1 + 1/ln n)/√n`.
//!
//! ```
//! use kiv::{fit_kiv, run_bootstrap, confidence_band, simulate_iv};
//! use kiv::{DgpSpec, KernelSpec, RegPair, Statistic};
//!
//! let sim = simulate_iv(&DgpSpec::linear(100, 2, 3, 0.5, 1.0, 7)).unwrap();
//! let reg = RegPair::new(0.1, 0.1).unwrap();
//! let fit = fit_kiv(&sim.data, &KernelSpec::Linear, &KernelSpec::Linear, reg).unwrap();
//! let (_, t_hat) = run_bootstrap(&fit, 200, 0.05, 1, Statistic::RkhsNorm).unwrap();
//! let (band, rows) = confidence_band(&fit, t_hat, 0.05, 3.0, &sim.data.x()[..5]).unwrap();
//! assert!(rows.iter().all(|r| r.upper - r.lower == 2.0 * band.radius_sup));
//! ```

pub mod bootstrap;
pub mod cli;
pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod kernels;
pub mod linalg;

pub use bootstrap::{
    bootstrap_draw, bootstrap_quantile, bootstrap_reference, confidence_band, draw_multipliers, run_bootstrap,
    BandPoint, BootstrapDraws, BootstrapOperator, ConfidenceBand, Statistic,
};
pub use dgp::{simulate_iv, DgpKind, DgpSpec, Simulation, StructuralFunction};
pub use diagnostics::{
    check_regime, check_sample_size, effective_dim_t, effective_dim_tilde, effective_dim_z, fit_decay, local_width,
    spectral_report, RegimeParams, RegimeRow, RegimeVerdict, SpectralReport,
};
pub use error::{Error, Result};
pub use estimator::{fit_kiv, fit_krr, predict, regularized_2sls, Dataset, FitState, RegPair};
pub use kernels::{eval_kernel, feature_map, gram_matrix, gram_self, kernel_bound, KernelSpec, Point, Ranking};
pub use linalg::{product_spectrum, ridge_solve, sym_eigvals, SymMatrix};

// Guide chapters are compiled here so their snippets run with `cargo test`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
