//! Numerical integration of activation moments under (bi)variate Gaussians.
//!
//! Two rules are available. Gauss–Hermite uses the whitening substitution
//! `y = μ + √2·σ·t` (tensor product in two dimensions) and converges
//! spectrally for activations that are smooth on the scale of σ. Piecewise
//! Gauss–Legendre truncates the standardized variable to `[-10, 10]`, splits
//! it where the activation bends (at 0 for every kind but the identity) and,
//! in two dimensions, integrates the conditional expectation of the second
//! output along the first. Kinks and wide inputs need the second rule to
//! reach 1e-8.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationKind, CorrelatedPair, UnivariateGaussian};
use crate::error::{Error, Result};
use crate::special::FRAC_1_SQRT_2PI;

const TRUNCATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureScheme {
    GaussHermite,
    #[default]
    BreakpointLegendre,
}

impl FromStr for QuadratureScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gauss_hermite" | "gauss-hermite" | "hermite" => Ok(Self::GaussHermite),
            "breakpoint_legendre" | "breakpoint-legendre" | "legendre" => Ok(Self::BreakpointLegendre),
            _ => Err(Error::domain(format!("unknown quadrature scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Gauss–Hermite nodes per axis, or Gauss–Legendre nodes per panel.
    pub nodes_per_axis: usize,
    pub scheme: QuadratureScheme,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            nodes_per_axis: 60,
            scheme: QuadratureScheme::BreakpointLegendre,
        }
    }
}

impl QuadratureConfig {
    pub fn with_nodes(nodes_per_axis: usize) -> Self {
        Self {
            nodes_per_axis,
            ..Self::default()
        }
    }
}

/// Nodes and weights of an n-point rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Physicists' Gauss–Hermite rule for `∫ e^{-x²} f(x) dx`.
///
/// Newton iteration on the orthonormal Hermite recurrence, starting from
/// the asymptotic root estimates.
pub fn gauss_hermite(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let pim4 = PI.powf(-0.25);
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    Rule { nodes, weights }
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    Rule { nodes, weights }
}

/// Where the activation changes shape; panels are split there.
fn kink(kind: &ActivationKind) -> Option<f64> {
    match kind {
        ActivationKind::Identity => None,
        _ => Some(0.0),
    }
}

/// Reusable integrator; building one precomputes the node tables.
#[derive(Debug, Clone)]
pub struct Quadrature {
    cfg: QuadratureConfig,
    hermite: Rule,
    legendre: Rule,
}

impl Quadrature {
    pub fn new(cfg: QuadratureConfig) -> Result<Self> {
        if cfg.nodes_per_axis < 2 {
            return Err(Error::domain("quadrature needs at least two nodes per axis"));
        }
        Ok(Self {
            cfg,
            hermite: gauss_hermite(cfg.nodes_per_axis),
            legendre: gauss_legendre(cfg.nodes_per_axis),
        })
    }

    pub fn config(&self) -> &QuadratureConfig {
        &self.cfg
    }

    fn use_legendre(&self) -> bool {
        self.cfg.scheme == QuadratureScheme::BreakpointLegendre
    }

    /// `∫ φ(t) f(t) dt` over `[-10, 10]`, split at `cuts`.
    fn legendre_std<F: FnMut(f64) -> f64>(&self, cuts: &[f64], mut f: F) -> f64 {
        let mut edges = vec![-TRUNCATION];
        let mut inner: Vec<f64> = cuts
            .iter()
            .copied()
            .filter(|c| c.is_finite() && c.abs() < TRUNCATION)
            .collect();
        inner.sort_by(f64::total_cmp);
        edges.extend(inner);
        edges.push(TRUNCATION);
        let mut total = 0.0;
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            let mut panel = 0.0;
            for (x, wt) in self.legendre.nodes.iter().zip(&self.legendre.weights) {
                let t = mid + half * x;
                panel += wt * FRAC_1_SQRT_2PI * (-0.5 * t * t).exp() * f(t);
            }
            total += half * panel;
        }
        total
    }

    /// `E[f(Z)]`, `Z ~ N(0, 1)`, by Gauss–Hermite.
    fn hermite_std<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let norm = 1.0 / PI.sqrt();
        self.hermite
            .nodes
            .iter()
            .zip(&self.hermite.weights)
            .map(|(x, w)| w * norm * f(SQRT_2 * x))
            .sum()
    }

    /// `E[h(y)]` for `y ~ N(μ, σ²)` with optional kink location of `h`.
    fn expect_1d<F: FnMut(f64) -> f64>(
        &self,
        mu: f64,
        sigma: f64,
        kink_at: Option<f64>,
        legendre: bool,
        mut h: F,
    ) -> f64 {
        if sigma == 0.0 {
            return h(mu);
        }
        if legendre {
            let cuts: Vec<f64> = kink_at.map(|k| (k - mu) / sigma).into_iter().collect();
            self.legendre_std(&cuts, |t| h(mu + sigma * t))
        } else {
            self.hermite_std(|t| h(mu + sigma * t))
        }
    }

    /// `E[g(y)]`.
    pub fn mean(&self, kind: &ActivationKind, g: &UnivariateGaussian) -> Result<f64> {
        check(g)?;
        let legendre = self.use_legendre();
        Ok(self.expect_1d(g.mu, g.sigma, kink(kind), legendre, |y| kind.apply(y)))
    }

    pub fn second_moment(&self, kind: &ActivationKind, g: &UnivariateGaussian) -> Result<f64> {
        check(g)?;
        let legendre = self.use_legendre();
        Ok(self.expect_1d(g.mu, g.sigma, kink(kind), legendre, |y| {
            let z = kind.apply(y);
            z * z
        }))
    }

    pub fn variance(&self, kind: &ActivationKind, g: &UnivariateGaussian) -> Result<f64> {
        let m = self.mean(kind, g)?;
        Ok(self.second_moment(kind, g)? - m * m)
    }

    /// `E[g_a(y_a)·g_b(y_b)]` for a correlated pair.
    pub fn cross_moment(&self, kind_a: &ActivationKind, kind_b: &ActivationKind, pair: &CorrelatedPair) -> Result<f64> {
        check(&pair.a)?;
        check(&pair.b)?;
        if !(pair.rho.abs() <= 1.0) {
            return Err(Error::domain(format!(
                "correlation must lie in [-1, 1], got {}",
                pair.rho
            )));
        }
        let (a, b, rho) = (pair.a, pair.b, pair.rho);
        let legendre = self.use_legendre();
        let ga = |y: f64| kind_a.apply(y);
        let gb = |y: f64| kind_b.apply(y);

        // One input fixed: the pair factorizes.
        if a.sigma == 0.0 || b.sigma == 0.0 {
            return Ok(if a.sigma == 0.0 {
                ga(a.mu) * self.expect_1d(b.mu, b.sigma, kink(kind_b), legendre, gb)
            } else {
                gb(b.mu) * self.expect_1d(a.mu, a.sigma, kink(kind_a), legendre, ga)
            });
        }

        let cond_sd = b.sigma * (1.0 - rho * rho).max(0.0).sqrt();
        if cond_sd == 0.0 || rho.abs() == 1.0 {
            // Perfect correlation: y_b is an affine function of t.
            let f = |t: f64| ga(a.mu + a.sigma * t) * gb(b.mu + b.sigma * rho * t);
            if !legendre {
                return Ok(self.hermite_std(f));
            }
            let mut cuts = Vec::new();
            if let Some(k) = kink(kind_a) {
                cuts.push((k - a.mu) / a.sigma);
            }
            if let Some(k) = kink(kind_b) {
                cuts.push((k - b.mu) / (b.sigma * rho));
            }
            return Ok(self.legendre_std(&cuts, f));
        }

        if legendre {
            let cuts: Vec<f64> = kink(kind_a).map(|k| (k - a.mu) / a.sigma).into_iter().collect();
            Ok(self.legendre_std(&cuts, |t| {
                let outer = ga(a.mu + a.sigma * t);
                if outer == 0.0 {
                    return 0.0;
                }
                let cond_mu = b.mu + b.sigma * rho * t;
                outer * self.expect_1d(cond_mu, cond_sd, kink(kind_b), true, gb)
            }))
        } else {
            let s = (1.0 - rho * rho).sqrt();
            let norm = 1.0 / PI;
            let h = &self.hermite;
            let mut total = 0.0;
            for (xi, wi) in h.nodes.iter().zip(&h.weights) {
                let ya = a.mu + SQRT_2 * a.sigma * xi;
                let outer = ga(ya);
                if outer == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for (xj, wj) in h.nodes.iter().zip(&h.weights) {
                    inner += wj * gb(b.mu + SQRT_2 * b.sigma * (rho * xi + s * xj));
                }
                total += wi * outer * inner;
            }
            Ok(total * norm)
        }
    }

    /// `Cov(g_a(y_a), g_b(y_b))` as cross moment minus the product of means.
    pub fn covariance(&self, kind_a: &ActivationKind, kind_b: &ActivationKind, pair: &CorrelatedPair) -> Result<f64> {
        let cross = self.cross_moment(kind_a, kind_b, pair)?;
        Ok(cross - self.mean(kind_a, &pair.a)? * self.mean(kind_b, &pair.b)?)
    }
}

fn check(g: &UnivariateGaussian) -> Result<()> {
    if !g.mu.is_finite() || !(g.sigma >= 0.0) || !g.sigma.is_finite() {
        return Err(Error::domain(format!(
            "invalid gaussian (mu {}, sigma {})",
            g.mu, g.sigma
        )));
    }
    Ok(())
}

pub fn quad_mean(kind: &ActivationKind, g: &UnivariateGaussian, q: &QuadratureConfig) -> Result<f64> {
    Quadrature::new(*q)?.mean(kind, g)
}

pub fn quad_variance(kind: &ActivationKind, g: &UnivariateGaussian, q: &QuadratureConfig) -> Result<f64> {
    Quadrature::new(*q)?.variance(kind, g)
}

pub fn quad_cross_moment(
    kind_a: &ActivationKind,
    kind_b: &ActivationKind,
    pair: &CorrelatedPair,
    q: &QuadratureConfig,
) -> Result<f64> {
    Quadrature::new(*q)?.cross_moment(kind_a, kind_b, pair)
}

pub fn quad_covariance(
    kind_a: &ActivationKind,
    kind_b: &ActivationKind,
    pair: &CorrelatedPair,
    q: &QuadratureConfig,
) -> Result<f64> {
    Quadrature::new(*q)?.covariance(kind_a, kind_b, pair)
}

/// One evaluated pair, as exported to CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub kind_a: ActivationKind,
    pub kind_b: ActivationKind,
    pub mu_i: f64,
    pub mu_j: f64,
    pub sigma_i: f64,
    pub sigma_j: f64,
    pub rho: f64,
    pub cross_moment: f64,
    pub covariance: f64,
}

impl OracleRecord {
    pub fn evaluate(
        quad: &Quadrature,
        kind_a: ActivationKind,
        kind_b: ActivationKind,
        pair: &CorrelatedPair,
    ) -> Result<Self> {
        let cross_moment = quad.cross_moment(&kind_a, &kind_b, pair)?;
        let covariance = cross_moment - quad.mean(&kind_a, &pair.a)? * quad.mean(&kind_b, &pair.b)?;
        Ok(Self {
            kind_a,
            kind_b,
            mu_i: pair.a.mu,
            mu_j: pair.b.mu,
            sigma_i: pair.a.sigma,
            sigma_j: pair.b.sigma,
            rho: pair.rho,
            cross_moment,
            covariance,
        })
    }
}

pub const ORACLE_CSV_HEADER: &str = "kind_a,kind_b,mu_i,mu_j,sigma_i,sigma_j,rho,cross_moment,covariance";

pub fn oracle_csv(records: &[OracleRecord]) -> String {
    let mut out = String::from(ORACLE_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.kind_a, r.kind_b, r.mu_i, r.mu_j, r.sigma_i, r.sigma_j, r.rho, r.cross_moment, r.covariance
        );
    }
    out
}
