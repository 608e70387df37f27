//! Statistics of element-wise activations applied to Gaussian inputs.
//!
//! For `y ~ N(μ, σ²)` and `z = g(y)` this module provides `E[z]`, `Var(z)`
//! and the scaled derivative terms `σᵏ ∂ᵏE[z]/∂μᵏ`. The covariance of two
//! outputs whose inputs are jointly Gaussian with correlation ρ is the power
//! series
//!
//! ```text
//! Cov(zᵢ, zⱼ) = Σ_{k≥1} ρᵏ/k! · termᵢ(k) · termⱼ(k)
//! ```
//!
//! truncated at the configured order. With ρ = 1 and i = j the same series
//! gives the variance; Heaviside and ReLU use their closed-form variances
//! instead.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{psd_repair, relative_asymmetry, GaussianMoments, PsdPolicy, SYMMETRY_TOLERANCE};
use crate::special::{norm_cdf, norm_pdf, HermiteSequence};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-8;
/// Highest truncation order accepted for the Hermite-form activations.
pub const MAX_ORDER: usize = 30;
/// Only five sigmoid derivative terms have explicit forms.
pub const MAX_SIGMOID_ORDER: usize = 5;

/// Element-wise activation function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Heaviside,
    Relu,
    Gelu,
    /// Logistic sigmoid; moments use `E[z] ≈ s(μ/√(1+ασ²))`.
    SigmoidApprox {
        alpha: f64,
    },
    Identity,
}

impl ActivationKind {
    pub const SIGMOID_ALPHA: f64 = 0.368;
    /// Alternative fit derived from `tanh(y) ≈ erf(√π/2·y)`.
    pub const SIGMOID_ALPHA_PI_OVER_8: f64 = PI / 8.0;

    pub fn sigmoid() -> Self {
        ActivationKind::SigmoidApprox {
            alpha: Self::SIGMOID_ALPHA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Heaviside => "heaviside",
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::SigmoidApprox { .. } => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }

    /// The activation function itself.
    pub fn apply(&self, y: f64) -> f64 {
        match self {
            ActivationKind::Heaviside => {
                if y >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Relu => y.max(0.0),
            ActivationKind::Gelu => y * norm_cdf(y),
            ActivationKind::SigmoidApprox { .. } => logistic(y),
            ActivationKind::Identity => y,
        }
    }

    pub fn max_order(&self) -> usize {
        match self {
            ActivationKind::SigmoidApprox { .. } => MAX_SIGMOID_ORDER,
            _ => MAX_ORDER,
        }
    }

    /// Point where the function is not smooth, if any.
    pub fn breakpoint(&self) -> Option<f64> {
        match self {
            ActivationKind::Heaviside | ActivationKind::Relu => Some(0.0),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ActivationKind::SigmoidApprox { alpha } = self {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(Error::domain(format!("sigmoid alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::SigmoidApprox { alpha } if *alpha != Self::SIGMOID_ALPHA => {
                write!(f, "sigmoid:{alpha}")
            }
            _ => f.write_str(self.name()),
        }
    }
}

/// Accepts `heaviside`, `relu`, `gelu`, `identity`, `sigmoid` and
/// `sigmoid:<alpha>`.
impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let kind = match lower.as_str() {
            "heaviside" | "step" => ActivationKind::Heaviside,
            "relu" => ActivationKind::Relu,
            "gelu" => ActivationKind::Gelu,
            "identity" | "linear" => ActivationKind::Identity,
            "sigmoid" => ActivationKind::sigmoid(),
            other => match other.strip_prefix("sigmoid:") {
                Some("pi/8") => ActivationKind::SigmoidApprox {
                    alpha: Self::SIGMOID_ALPHA_PI_OVER_8,
                },
                Some(a) => ActivationKind::SigmoidApprox {
                    alpha: a
                        .parse()
                        .map_err(|_| Error::domain(format!("bad sigmoid alpha {a:?}")))?,
                },
                None => return Err(Error::domain(format!("unknown activation {s:?}"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Numerically stable logistic function.
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateGaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl UnivariateGaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::domain("gaussian parameters must be finite"));
        }
        if sigma < 0.0 {
            return Err(Error::domain(format!("sigma must be nonnegative, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

/// `σᵏ·∂ᵏE[z]/∂μᵏ` at one order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeTerm {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub order: usize,
    pub sigma_floor: f64,
    pub psd_policy: PsdPolicy,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            psd_policy: PsdPolicy::Symmetrize,
        }
    }
}

impl SeriesConfig {
    pub fn with_order(order: usize) -> Self {
        Self {
            order,
            ..Self::default()
        }
    }

    pub fn validate_for(&self, kind: &ActivationKind) -> Result<()> {
        kind.validate()?;
        if self.order == 0 {
            return Err(Error::domain("series order must be at least 1"));
        }
        if !(self.sigma_floor >= 0.0) {
            return Err(Error::domain("sigma floor must be nonnegative"));
        }
        if self.order > kind.max_order() {
            return Err(Error::UnsupportedOrder {
                kind: kind.to_string(),
                order: self.order,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelatedPair {
    pub a: UnivariateGaussian,
    pub b: UnivariateGaussian,
    pub rho: f64,
}

impl CorrelatedPair {
    pub fn new(a: UnivariateGaussian, b: UnivariateGaussian, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self { a, b, rho })
    }

    pub fn swapped(&self) -> Self {
        Self {
            a: self.b,
            b: self.a,
            rho: self.rho,
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.abs() <= 1.0) {
        return Err(Error::domain(format!("correlation must lie in [-1, 1], got {rho}")));
    }
    Ok(())
}

fn is_deterministic(g: &UnivariateGaussian, floor: f64) -> bool {
    g.sigma <= floor
}

pub(crate) fn mean_with_floor(kind: &ActivationKind, g: &UnivariateGaussian, floor: f64) -> f64 {
    if is_deterministic(g, floor) {
        return kind.apply(g.mu);
    }
    let (mu, sigma) = (g.mu, g.sigma);
    match *kind {
        ActivationKind::Heaviside => norm_cdf(mu / sigma),
        ActivationKind::Relu => {
            let x = mu / sigma;
            mu * norm_cdf(x) + sigma * norm_pdf(x)
        }
        ActivationKind::Gelu => {
            let s = (1.0 + sigma * sigma).sqrt();
            let x = mu / s;
            mu * norm_cdf(x) + sigma * sigma / s * norm_pdf(x)
        }
        ActivationKind::SigmoidApprox { alpha } => logistic(mu / (1.0 + alpha * sigma * sigma).sqrt()),
        ActivationKind::Identity => mu,
    }
}

/// `E[g(y)]` for `y ~ g`. Inputs with `σ ≤ 1e-8` are treated as
/// deterministic and return `g(μ)`.
pub fn activation_mean(kind: &ActivationKind, g: &UnivariateGaussian) -> Result<f64> {
    kind.validate()?;
    check_sigma(g)?;
    Ok(mean_with_floor(kind, g, DEFAULT_SIGMA_FLOOR))
}

fn check_sigma(g: &UnivariateGaussian) -> Result<()> {
    if !(g.sigma >= 0.0) || !g.mu.is_finite() || !g.sigma.is_finite() {
        return Err(Error::domain(format!(
            "invalid gaussian (mu {}, sigma {})",
            g.mu, g.sigma
        )));
    }
    Ok(())
}

/// Variance before clamping; may dip below zero by rounding.
pub(crate) fn raw_variance(kind: &ActivationKind, g: &UnivariateGaussian, order: usize, floor: f64) -> f64 {
    if is_deterministic(g, floor) {
        return 0.0;
    }
    let (mu, sigma) = (g.mu, g.sigma);
    match *kind {
        ActivationKind::Heaviside => {
            let x = mu / sigma;
            norm_cdf(x) * norm_cdf(-x)
        }
        ActivationKind::Relu => {
            let x = mu / sigma;
            let m = mu * norm_cdf(x) + sigma * norm_pdf(x);
            (mu * mu + sigma * sigma) * norm_cdf(x) + mu * sigma * norm_pdf(x) - m * m
        }
        ActivationKind::Identity => sigma * sigma,
        ActivationKind::Gelu | ActivationKind::SigmoidApprox { .. } => {
            let terms = terms_unchecked(kind, g, order);
            let mut coeff = 1.0;
            let mut sum = 0.0;
            for (i, t) in terms.iter().enumerate() {
                coeff /= (i + 1) as f64;
                sum += coeff * t * t;
            }
            sum
        }
    }
}

/// `Var(g(y))`: closed forms for Heaviside, ReLU and identity, the truncated
/// series for GELU and the sigmoid. Small negative values from rounding are
/// clamped to zero.
pub fn activation_variance(kind: &ActivationKind, g: &UnivariateGaussian, cfg: &SeriesConfig) -> Result<f64> {
    cfg.validate_for(kind)?;
    check_sigma(g)?;
    Ok(raw_variance(kind, g, cfg.order, cfg.sigma_floor).max(0.0))
}

/// `σᵏ·∂ᵏE[z]/∂μᵏ` for a single order `k ≥ 1`.
pub fn derivative_term(kind: &ActivationKind, g: &UnivariateGaussian, k: usize) -> Result<DerivativeTerm> {
    kind.validate()?;
    check_sigma(g)?;
    if k == 0 || k > kind.max_order() {
        return Err(Error::UnsupportedOrder {
            kind: kind.to_string(),
            order: k,
        });
    }
    let value = terms_unchecked(kind, g, k)[k - 1];
    Ok(DerivativeTerm { k, value })
}

/// All terms for orders `1..=order`.
pub fn derivative_terms(kind: &ActivationKind, g: &UnivariateGaussian, order: usize) -> Result<Vec<f64>> {
    kind.validate()?;
    check_sigma(g)?;
    if order == 0 || order > kind.max_order() {
        return Err(Error::UnsupportedOrder {
            kind: kind.to_string(),
            order,
        });
    }
    Ok(terms_unchecked(kind, g, order))
}

fn terms_unchecked(kind: &ActivationKind, g: &UnivariateGaussian, order: usize) -> Vec<f64> {
    let (mu, sigma) = (g.mu, g.sigma);
    if sigma == 0.0 {
        return vec![0.0; order];
    }
    let sign = |k: usize| if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    match *kind {
        ActivationKind::Heaviside => {
            let x = mu / sigma;
            let pdf = norm_pdf(x);
            let he = HermiteSequence::new(order - 1, x);
            (1..=order).map(|k| sign(k - 1) * he.get(k - 1) * pdf).collect()
        }
        ActivationKind::Relu => {
            let x = mu / sigma;
            let pdf = norm_pdf(x);
            let he = HermiteSequence::new(order.saturating_sub(2), x);
            (1..=order)
                .map(|k| {
                    if k == 1 {
                        sigma * norm_cdf(x)
                    } else {
                        sigma * sign(k) * he.get(k - 2) * pdf
                    }
                })
                .collect()
        }
        ActivationKind::Gelu => {
            let s2 = 1.0 + sigma * sigma;
            let alpha = sigma / s2.sqrt();
            let one_minus_a2 = 1.0 / s2;
            let x = mu / s2.sqrt();
            let pdf = norm_pdf(x);
            let he = HermiteSequence::new(order, x);
            let mut alpha_pow = 1.0;
            (1..=order)
                .map(|k| {
                    if k == 1 {
                        sigma * norm_cdf(x) + alpha * one_minus_a2 * mu * pdf
                    } else {
                        alpha_pow *= alpha;
                        alpha_pow * sigma * sign(k) * (he.get(k - 2) - one_minus_a2 * he.get(k)) * pdf
                    }
                })
                .collect()
        }
        ActivationKind::SigmoidApprox { alpha } => {
            let beta = (1.0 + alpha * sigma * sigma).sqrt();
            let u = mu / beta;
            let s = logistic(u);
            let sc = logistic(-u);
            let ds = s * sc;
            let c = sigma / beta;
            let derivs = [
                ds,
                ds * (sc - s),
                ds * (1.0 - 6.0 * s * sc),
                ds * (sc - s) * (1.0 - 12.0 * s * sc),
                ds * (1.0 - 30.0 * s + 150.0 * s * s - 240.0 * s * s * s + 120.0 * s * s * s * s),
            ];
            let mut cpow = 1.0;
            derivs[..order]
                .iter()
                .map(|d| {
                    cpow *= c;
                    cpow * d
                })
                .collect()
        }
        ActivationKind::Identity => {
            let mut v = vec![0.0; order];
            v[0] = sigma;
            v
        }
    }
}

fn series_sum(rho: f64, ta: &[f64], tb: &[f64]) -> f64 {
    let mut coeff = 1.0;
    let mut sum = 0.0;
    for (k, (a, b)) in ta.iter().zip(tb).enumerate() {
        coeff *= rho / (k + 1) as f64;
        sum += coeff * (a * b);
    }
    sum
}

/// Truncated series for `Cov(g_a(y_a), g_b(y_b))`.
///
/// The two activations may differ; the series factors are per element.
/// Returns 0 when either input is deterministic (σ at or below the floor).
pub fn pair_covariance(
    kind_a: &ActivationKind,
    kind_b: &ActivationKind,
    pair: &CorrelatedPair,
    cfg: &SeriesConfig,
) -> Result<f64> {
    check_rho(pair.rho)?;
    cfg.validate_for(kind_a)?;
    cfg.validate_for(kind_b)?;
    check_sigma(&pair.a)?;
    check_sigma(&pair.b)?;
    if is_deterministic(&pair.a, cfg.sigma_floor) || is_deterministic(&pair.b, cfg.sigma_floor) {
        return Ok(0.0);
    }
    let ta = terms_unchecked(kind_a, &pair.a, cfg.order);
    let tb = terms_unchecked(kind_b, &pair.b, cfg.order);
    Ok(series_sum(pair.rho, &ta, &tb))
}

/// Bookkeeping from one activation layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationDiagnostics {
    pub series_order: usize,
    pub clamped_variances: usize,
    pub deterministic_units: usize,
    pub psd_adjustment: f64,
    pub clipped_eigenvalues: usize,
}

/// Tolerance for correlations that overshoot ±1 by rounding.
const RHO_SLACK: f64 = 1e-9;

/// Pushes `y ~ N(μ, Σ)` through `g` applied element-wise.
pub fn layer_output_moments(
    kind: &ActivationKind,
    input: &GaussianMoments,
    cfg: &SeriesConfig,
) -> Result<(GaussianMoments, ActivationDiagnostics)> {
    cfg.validate_for(kind)?;
    let asymmetry = relative_asymmetry(input.cov());
    if asymmetry > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric { asymmetry });
    }
    if *kind == ActivationKind::Identity {
        let diag = ActivationDiagnostics {
            series_order: cfg.order,
            ..Default::default()
        };
        return Ok((input.clone(), diag));
    }
    let n = input.dim();
    let mu = input.mean();
    let sigma: Vec<f64> = (0..n).map(|i| input.cov()[(i, i)].max(0.0).sqrt()).collect();
    let units: Vec<UnivariateGaussian> = (0..n)
        .map(|i| UnivariateGaussian {
            mu: mu[i],
            sigma: sigma[i],
        })
        .collect();
    let deterministic: Vec<bool> = units.iter().map(|g| is_deterministic(g, cfg.sigma_floor)).collect();

    let mut diag = ActivationDiagnostics {
        series_order: cfg.order,
        deterministic_units: deterministic.iter().filter(|d| **d).count(),
        ..Default::default()
    };

    let out_mean = DVector::from_iterator(n, units.iter().map(|g| mean_with_floor(kind, g, cfg.sigma_floor)));
    let terms: Vec<Vec<f64>> = units
        .iter()
        .zip(&deterministic)
        .map(|(g, &det)| {
            if det {
                vec![0.0; cfg.order]
            } else {
                terms_unchecked(kind, g, cfg.order)
            }
        })
        .collect();

    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(n - i);
            if deterministic[i] {
                row.resize(n - i - 1, 0.0);
                return Ok(row);
            }
            for j in (i + 1)..n {
                if deterministic[j] {
                    row.push(0.0);
                    continue;
                }
                let mut rho = input.cov()[(i, j)] / (sigma[i] * sigma[j]);
                if rho.abs() > 1.0 {
                    if rho.abs() > 1.0 + RHO_SLACK {
                        return Err(Error::domain(format!(
                            "correlation {rho} between units {i} and {j} exceeds 1; input covariance is not PSD"
                        )));
                    }
                    rho = rho.signum();
                }
                row.push(series_sum(rho, &terms[i], &terms[j]));
            }
            Ok(row)
        })
        .collect();

    let mut cov = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (offset, v) in row.into_iter().enumerate() {
            let j = i + 1 + offset;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        let var = raw_variance(kind, &units[i], cfg.order, cfg.sigma_floor);
        if var < 0.0 {
            diag.clamped_variances += 1;
        }
        cov[(i, i)] = var.max(0.0);
    }

    if cfg.psd_policy != PsdPolicy::None {
        let repair = psd_repair(&cov, cfg.psd_policy);
        diag.psd_adjustment = repair.adjustment;
        diag.clipped_eigenvalues = repair.clipped_eigenvalues;
        cov = repair.matrix;
    }
    Ok((GaussianMoments::from_parts(out_mean, cov), diag))
}
