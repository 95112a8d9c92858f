//! Synthetic instrumental-variable designs with a known structural function.
//!
//! ```text
//! Z ~ N(0, I_q),  u, w ~ N(0, 1),  v ~ N(0, I_p)
//! X = Z·Π + √(1−ρ)·v + √ρ·u·1_p
//! ε = σ̄·tanh(ρ·u + √(1−ρ²)·w)
//! Y = h₀(X) + ε
//! ```
//!
//! The confounder `u` enters both `X` and `ε`, so `X` is endogenous for
//! `ρ > 0`, while `ε` is a function of `(u, w)` only and therefore
//! independent of `Z`. The tanh keeps `|ε| ≤ σ̄`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Dataset;
use crate::kernels::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// `h₀(x) = xᵀγ*`.
    Linear,
    /// `h₀(x) = sin(xᵀγ*) + 0.5·tanh(x₁)`.
    Nonlinear,
}

/// Parameters of a synthetic IV design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Endogeneity `ρ ∈ [0, 1)`.
    pub rho_e: f64,
    /// Noise bound `σ̄ > 0`.
    pub sigma_bar: f64,
    /// First-stage matrix `Π` as `q` rows of length `p`; `None` uses [`default_first_stage`].
    #[serde(default)]
    pub first_stage: Option<Vec<Vec<f64>>>,
    /// Structural coefficients `γ*`; `None` uses [`default_coefficients`].
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    /// Use the covariates themselves as instruments (`Z = X`, `q` ignored).
    #[serde(default)]
    pub z_equals_x: bool,
    pub seed: u64,
}

impl DgpSpec {
    /// Linear design with default first stage and coefficients.
    pub fn linear(n: usize, p: usize, q: usize, rho_e: f64, sigma_bar: f64, seed: u64) -> Self {
        DgpSpec {
            kind: DgpKind::Linear,
            n,
            p,
            q,
            rho_e,
            sigma_bar,
            first_stage: None,
            gamma: None,
            z_equals_x: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter(format!("dgp needs n >= 2, got {}", self.n)));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::InvalidParameter("dgp needs p >= 1 and q >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho_e) {
            return Err(Error::InvalidParameter(format!("rho_e must lie in [0, 1), got {}", self.rho_e)));
        }
        if !(self.sigma_bar > 0.0 && self.sigma_bar.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_bar must be > 0, got {}", self.sigma_bar)));
        }
        if let Some(pi) = &self.first_stage {
            if pi.len() != self.q {
                return Err(Error::DimensionMismatch { expected: self.q, got: pi.len() });
            }
            if let Some(row) = pi.iter().find(|r| r.len() != self.p) {
                return Err(Error::DimensionMismatch { expected: self.p, got: row.len() });
            }
        }
        if let Some(g) = &self.gamma {
            if g.len() != self.p {
                return Err(Error::DimensionMismatch { expected: self.p, got: g.len() });
            }
        }
        Ok(())
    }

    pub fn first_stage_matrix(&self) -> Vec<Vec<f64>> {
        self.first_stage.clone().unwrap_or_else(|| default_first_stage(self.q, self.p))
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.gamma.clone().unwrap_or_else(|| default_coefficients(self.p))
    }
}

/// `q×p` first stage with diagonal entries spaced evenly in `[0.8, 1.2]`.
pub fn default_first_stage(q: usize, p: usize) -> Vec<Vec<f64>> {
    let r = q.min(p);
    let mut pi = vec![vec![0.0; p]; q];
    for (j, row) in pi.iter_mut().enumerate().take(r) {
        row[j] = if r == 1 {
            1.0
        } else {
            let t = j as f64 / (r - 1) as f64;
            0.8 * (1.0 - t) + 1.2 * t
        };
    }
    pi
}

/// `γ*_j = 2^{-(j+1)}`, i.e. `(0.5, 0.25, ...)`.
pub fn default_coefficients(p: usize) -> Vec<f64> {
    (0..p).map(|j| 0.5f64.powi(j as i32 + 1)).collect()
}

/// Known structural function of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralFunction {
    pub kind: DgpKind,
    pub gamma: Vec<f64>,
}

impl StructuralFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let index: f64 = x.iter().zip(&self.gamma).map(|(a, b)| a * b).sum();
        match self.kind {
            DgpKind::Linear => index,
            DgpKind::Nonlinear => index.sin() + 0.5 * x[0].tanh(),
        }
    }

    pub fn eval_point(&self, x: &Point) -> Result<f64> {
        let v = x.as_vector().ok_or_else(|| Error::Input("structural function needs vector inputs".into()))?;
        if v.len() != self.gamma.len() {
            return Err(Error::DimensionMismatch { expected: self.gamma.len(), got: v.len() });
        }
        Ok(self.eval(v))
    }
}

/// A simulated sample with its structural errors kept for diagnostics.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub h0: StructuralFunction,
    pub errors: Vec<f64>,
}

/// Draws a dataset from the design. Identical specs give identical samples.
pub fn simulate_iv(spec: &DgpSpec) -> Result<Simulation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pi = spec.first_stage_matrix();
    let h0 = StructuralFunction { kind: spec.kind, gamma: spec.coefficients() };
    let (p, q) = (spec.p, spec.q);
    let rho = spec.rho_e;
    let (sx_v, sx_u) = ((1.0 - rho).sqrt(), rho.sqrt());
    let (a, b) = (rho, (1.0 - rho * rho).sqrt());

    let mut zs = Vec::with_capacity(spec.n);
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    let mut errors = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let z: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let u: f64 = rng.sample(StandardNormal);
        let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let w: f64 = rng.sample(StandardNormal);
        let x: Vec<f64> = (0..p)
            .map(|j| {
                let first: f64 = (0..q).map(|i| z[i] * pi[i][j]).sum();
                first + sx_v * v[j] + sx_u * u
            })
            .collect();
        let eps = spec.sigma_bar * (a * u + b * w).tanh();
        ys.push(h0.eval(&x) + eps);
        errors.push(eps);
        zs.push(Point::Vector(if spec.z_equals_x { x.clone() } else { z }));
        xs.push(Point::Vector(x));
    }
    Ok(Simulation { data: Dataset::new(zs, xs, ys)?, h0, errors })
}
