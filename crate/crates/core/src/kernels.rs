//! Kernel families, Gram matrices, and kernel bounds.
//!
//! Four families are supported: linear, polynomial `(a·b + c)^d`, Gaussian
//! `exp(-|a-b|² / 2ℓ²)`, and the Kendall preference kernel `exp(-N(a,b))`
//! on rankings, where `N` counts discordant item pairs.
//!
//! Linear and polynomial kernels also expose their explicit finite-dimensional
//! feature maps ([`feature_map`]), which the diagnostics module uses for
//! feature-space traces.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A ranking of `m` items: position `i` holds the rank of item `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ranking(Vec<u32>);

impl Ranking {
    pub fn new(perm: Vec<u32>) -> Result<Self> {
        let m = perm.len();
        if m < 2 {
            return Err(Error::InvalidParameter(format!("a ranking needs at least 2 items, got {m}")));
        }
        let mut seen = vec![false; m];
        for &r in &perm {
            let idx = r as usize;
            if idx == 0 || idx > m || seen[idx - 1] {
                return Err(Error::NotAPermutation(m));
            }
            seen[idx - 1] = true;
        }
        Ok(Ranking(perm))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ranks(&self) -> &[u32] {
        &self.0
    }
}

impl FromStr for Ranking {
    type Err = Error;

    /// Parses a pipe-delimited rank string such as `"3|1|2"`.
    fn from_str(s: &str) -> Result<Self> {
        let perm = s
            .split('|')
            .map(|t| t.trim().parse::<u32>().map_err(|_| Error::Input(format!("bad ranking entry {t:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ranking::new(perm)
    }
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        f.write_str(&parts.join("|"))
    }
}

/// An input point: a real vector or a ranking.
#[derive(Debug, Clone, PartialEq)]
pub enum Point {
    Vector(Vec<f64>),
    Ranking(Ranking),
}

impl Point {
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Point::Vector(v) => Some(v),
            Point::Ranking(_) => None,
        }
    }

    fn dim(&self) -> usize {
        match self {
            Point::Vector(v) => v.len(),
            Point::Ranking(r) => r.len(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Point::Vector(_) => "vector",
            Point::Ranking(_) => "ranking",
        }
    }
}

impl From<Vec<f64>> for Point {
    fn from(v: Vec<f64>) -> Self {
        Point::Vector(v)
    }
}

impl From<Ranking> for Point {
    fn from(r: Ranking) -> Self {
        Point::Ranking(r)
    }
}

/// A positive-definite kernel family with its parameters.
///
/// Serialized as a compact string: `linear`, `poly:<degree>:<offset>`,
/// `gaussian:<lengthscale>`, or `kendall`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelSpec {
    Linear,
    Polynomial { degree: u32, offset: f64 },
    Gaussian { lengthscale: f64 },
    Kendall,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(Error::InvalidParameter("polynomial degree must be >= 1".into()));
                }
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "polynomial offset must be finite and >= 0, got {offset}"
                    )));
                }
            }
            KernelSpec::Gaussian { lengthscale } => {
                if !(lengthscale > 0.0 && lengthscale.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian lengthscale must be finite and > 0, got {lengthscale}"
                    )));
                }
            }
            KernelSpec::Linear | KernelSpec::Kendall => {}
        }
        Ok(())
    }

    /// Whether the family has a global bound on `k(x,x)` (gaussian, kendall).
    pub fn is_bounded(&self) -> bool {
        matches!(self, KernelSpec::Gaussian { .. } | KernelSpec::Kendall)
    }

    /// Whether the family has an explicit finite-dimensional feature map.
    pub fn has_explicit_features(&self) -> bool {
        matches!(self, KernelSpec::Linear | KernelSpec::Polynomial { .. })
    }

    fn expects_ranking(&self) -> bool {
        matches!(self, KernelSpec::Kendall)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Polynomial { degree, offset } => write!(f, "poly:{degree}:{offset}"),
            KernelSpec::Gaussian { lengthscale } => write!(f, "gaussian:{lengthscale}"),
            KernelSpec::Kendall => write!(f, "kendall"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |t: &str| -> Result<f64> {
            t.parse::<f64>().map_err(|_| Error::Config(format!("bad kernel parameter {t:?} in {s:?}")))
        };
        let spec = match parts.as_slice() {
            ["linear"] => KernelSpec::Linear,
            ["kendall"] => KernelSpec::Kendall,
            ["poly" | "polynomial", d] => KernelSpec::Polynomial {
                degree: d.parse().map_err(|_| Error::Config(format!("bad polynomial degree in {s:?}")))?,
                offset: 0.0,
            },
            ["poly" | "polynomial", d, c] => KernelSpec::Polynomial {
                degree: d.parse().map_err(|_| Error::Config(format!("bad polynomial degree in {s:?}")))?,
                offset: num(c)?,
            },
            ["gaussian" | "rbf", l] => KernelSpec::Gaussian { lengthscale: num(l)? },
            _ => return Err(Error::Config(format!("unknown kernel spec {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for KernelSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelSpec> for String {
    fn from(k: KernelSpec) -> String {
        k.to_string()
    }
}

/// Number of item pairs ordered oppositely by two rankings.
pub fn kendall_disagreements(a: &Ranking, b: &Ranking) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (ra, rb) = (a.ranks(), b.ranks());
    let m = ra.len();
    let mut count = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            let da = ra[i] as i64 - ra[j] as i64;
            let db = rb[i] as i64 - rb[j] as i64;
            if da * db < 0 {
                count += 1;
            }
        }
    }
    Ok(count)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates `k(a, b)`.
pub fn eval_kernel(spec: &KernelSpec, a: &Point, b: &Point) -> Result<f64> {
    spec.validate()?;
    match (spec, a, b) {
        (KernelSpec::Kendall, Point::Ranking(ra), Point::Ranking(rb)) => {
            Ok((-(kendall_disagreements(ra, rb)? as f64)).exp())
        }
        (KernelSpec::Kendall, _, _) => Err(Error::Heterogeneous("kendall kernel accepts only ranking inputs".into())),
        (_, Point::Vector(va), Point::Vector(vb)) => {
            if va.len() != vb.len() {
                return Err(Error::DimensionMismatch { expected: va.len(), got: vb.len() });
            }
            Ok(match *spec {
                KernelSpec::Linear => dot(va, vb),
                KernelSpec::Polynomial { degree, offset } => (dot(va, vb) + offset).powi(degree as i32),
                KernelSpec::Gaussian { lengthscale } => {
                    let sq: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
                    (-sq / (2.0 * lengthscale * lengthscale)).exp()
                }
                KernelSpec::Kendall => unreachable!(),
            })
        }
        _ => Err(Error::Heterogeneous(format!("{spec} kernel accepts only vector inputs"))),
    }
}

fn check_homogeneous(spec: &KernelSpec, points: &[Point], what: &'static str) -> Result<()> {
    let first = points.first().ok_or(Error::EmptyInput(what))?;
    for p in points {
        if spec.expects_ranking() != matches!(p, Point::Ranking(_)) {
            return Err(Error::Heterogeneous(format!("{spec} kernel cannot evaluate {} inputs", p.kind())));
        }
        if p.dim() != first.dim() {
            return Err(Error::DimensionMismatch { expected: first.dim(), got: p.dim() });
        }
    }
    Ok(())
}

/// Gram matrix with entry `(i, j) = k(rows_a[i], rows_b[j])`.
pub fn gram_matrix(spec: &KernelSpec, rows_a: &[Point], rows_b: &[Point]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_homogeneous(spec, rows_a, "gram rows")?;
    check_homogeneous(spec, rows_b, "gram columns")?;
    if rows_a[0].dim() != rows_b[0].dim() {
        return Err(Error::DimensionMismatch { expected: rows_a[0].dim(), got: rows_b[0].dim() });
    }
    let rows: Vec<Vec<f64>> = rows_a
        .par_iter()
        .map(|a| rows_b.iter().map(|b| eval_kernel(spec, a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows_a.len(), rows_b.len(), |i, j| rows[i][j]))
}

/// Symmetric Gram matrix of a point set against itself.
///
/// Only the upper triangle is evaluated; the lower triangle is mirrored so the
/// result is bit-exactly symmetric.
pub fn gram_self(spec: &KernelSpec, points: &[Point]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_homogeneous(spec, points, "gram rows")?;
    let n = points.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| eval_kernel(spec, &points[i], &points[j])).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for (off, &v) in upper[i].iter().enumerate() {
            let j = i + off;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Empirical kernel bound `max √k(x,x)` over the supplied points.
///
/// Gaussian and Kendall kernels have `k(x,x) = 1` everywhere, so the bound is
/// exactly 1. For linear and polynomial kernels the value depends on the data.
pub fn kernel_bound(spec: &KernelSpec, eval_points: &[Point]) -> Result<f64> {
    spec.validate()?;
    check_homogeneous(spec, eval_points, "kernel bound points")?;
    if spec.is_bounded() {
        return Ok(1.0);
    }
    eval_points.iter().try_fold(0.0_f64, |acc, p| {
        let kxx = eval_kernel(spec, p, p)?;
        Ok(acc.max(kxx.max(0.0).sqrt()))
    })
}

/// Multi-indices `(k_0, k_1, .., k_p)` summing to `d`, in a fixed order.
fn multi_indices(parts: usize, total: u32) -> Vec<Vec<u32>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in multi_indices(parts - 1, total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Dimension of the explicit feature space for a `p`-dimensional input.
pub fn feature_dim(spec: &KernelSpec, p: usize) -> Result<usize> {
    match *spec {
        KernelSpec::Linear => Ok(p),
        KernelSpec::Polynomial { degree, .. } => Ok(multi_indices(p + 1, degree).len()),
        _ => Err(Error::Unsupported(format!("{spec} kernel has no finite feature map"))),
    }
}

/// Explicit feature vector `ψ(x)` with `⟨ψ(a), ψ(b)⟩ = k(a, b)`.
///
/// For the polynomial kernel this is the scaled monomial basis from the
/// multinomial expansion of `(a·b + c)^d`, with `C(p+d, d)` coordinates.
pub fn feature_map(spec: &KernelSpec, x: &Point) -> Result<Vec<f64>> {
    spec.validate()?;
    let v = match x {
        Point::Vector(v) => v,
        Point::Ranking(_) => return Err(Error::Unsupported("rankings have no explicit feature map".into())),
    };
    match *spec {
        KernelSpec::Linear => Ok(v.clone()),
        KernelSpec::Polynomial { degree, offset } => {
            let d_fact = factorial(degree);
            Ok(multi_indices(v.len() + 1, degree)
                .into_iter()
                .map(|idx| {
                    let coef = d_fact / idx.iter().map(|&k| factorial(k)).product::<f64>();
                    let mono: f64 = v.iter().zip(&idx[1..]).map(|(xi, &k)| xi.powi(k as i32)).product();
                    (coef * offset.powi(idx[0] as i32)).sqrt() * mono
                })
                .collect())
        }
        _ => Err(Error::Unsupported(format!("{spec} kernel has no finite feature map"))),
    }
}

/// Feature design matrix with row `i` equal to `ψ(points[i])`.
pub fn feature_matrix(spec: &KernelSpec, points: &[Point]) -> Result<DMatrix<f64>> {
    check_homogeneous(spec, points, "feature points")?;
    let rows = points.iter().map(|p| feature_map(spec, p)).collect::<Result<Vec<_>>>()?;
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}
