//! Series truncation error over a grid of input means.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{pair_covariance, ActivationKind, CorrelatedPair, SeriesConfig, UnivariateGaussian};
use crate::error::{Error, Result};
use crate::oracle::{Quadrature, QuadratureConfig};

pub const ERROR_GRID_SCHEMA: &str = "momentflow-error-grid/1";

/// Both means sweep `mu_min..=mu_max` in steps of `step`; σ and ρ are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorGridSpec {
    pub kind: ActivationKind,
    pub mu_min: f64,
    pub mu_max: f64,
    pub step: f64,
    pub sigma_i: f64,
    pub sigma_j: f64,
    pub rho: f64,
    pub orders: Vec<usize>,
    pub quadrature: QuadratureConfig,
}

impl ErrorGridSpec {
    pub fn new(kind: ActivationKind, orders: Vec<usize>) -> Self {
        Self {
            kind,
            mu_min: -5.0,
            mu_max: 5.0,
            step: 0.1,
            sigma_i: 1.0,
            sigma_j: 1.0,
            rho: 0.5,
            orders,
            quadrature: QuadratureConfig::default(),
        }
    }

    /// Grid points; `mu_min + i·step` snapped so the end point is included.
    pub fn mus(&self) -> Vec<f64> {
        let count = ((self.mu_max - self.mu_min) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.mu_min + i as f64 * self.step).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if !(self.step > 0.0) || !(self.mu_max >= self.mu_min) || !self.mu_min.is_finite() || !self.mu_max.is_finite() {
            return Err(Error::domain(
                "grid needs finite bounds with mu_max ≥ mu_min and a positive step",
            ));
        }
        if !(self.sigma_i > 0.0 && self.sigma_j > 0.0) || !self.sigma_i.is_finite() || !self.sigma_j.is_finite() {
            return Err(Error::domain("grid sigmas must be positive"));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::domain(format!(
                "correlation must lie in [-1, 1], got {}",
                self.rho
            )));
        }
        if self.orders.is_empty() {
            return Err(Error::domain("at least one series order is required"));
        }
        if self.orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("orders must be strictly ascending"));
        }
        for &k in &self.orders {
            SeriesConfig::with_order(k).validate_for(&self.kind)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderError {
    pub order: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// `(mu_i, mu_j)` where the maximum occurs.
    pub argmax: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorGridReport {
    pub schema: String,
    pub spec: ErrorGridSpec,
    pub mus: Vec<f64>,
    pub orders: Vec<OrderError>,
    /// Per order, `cells[k][i][j]` is the absolute error at `(mus[i], mus[j])`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<Vec<Vec<f64>>>>,
}

impl ErrorGridReport {
    /// Error matrix for one order as CSV: first row and column hold the means.
    pub fn cells_csv(&self, order: usize) -> Option<String> {
        let idx = self.orders.iter().position(|o| o.order == order)?;
        let cells = &self.cells.as_ref()?[idx];
        let mut out = String::from("mu_i\\mu_j");
        for m in &self.mus {
            let _ = write!(out, ",{m:.6}");
        }
        out.push('\n');
        for (m, row) in self.mus.iter().zip(cells) {
            let _ = write!(out, "{m:.6}");
            for v in row {
                let _ = write!(out, ",{v:.6e}");
            }
            out.push('\n');
        }
        Some(out)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("order,max_abs_error,mean_abs_error,argmax_mu_i,argmax_mu_j\n");
        for o in &self.orders {
            let _ = writeln!(
                out,
                "{},{:.6e},{:.6e},{},{}",
                o.order, o.max_abs_error, o.mean_abs_error, o.argmax.0, o.argmax.1
            );
        }
        out
    }
}

/// Oracle covariance on the full grid, row-major over `(mu_i, mu_j)`.
pub fn oracle_grid(spec: &ErrorGridSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let quad = Quadrature::new(spec.quadrature)?;
    let mus = spec.mus();
    let means: Vec<(f64, f64)> = mus
        .iter()
        .map(|&m| {
            let a = quad.mean(
                &spec.kind,
                &UnivariateGaussian {
                    mu: m,
                    sigma: spec.sigma_i,
                },
            )?;
            let b = quad.mean(
                &spec.kind,
                &UnivariateGaussian {
                    mu: m,
                    sigma: spec.sigma_j,
                },
            )?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    mus.par_iter()
        .enumerate()
        .map(|(i, &mi)| {
            mus.iter()
                .enumerate()
                .map(|(j, &mj)| {
                    let pair = CorrelatedPair {
                        a: UnivariateGaussian {
                            mu: mi,
                            sigma: spec.sigma_i,
                        },
                        b: UnivariateGaussian {
                            mu: mj,
                            sigma: spec.sigma_j,
                        },
                        rho: spec.rho,
                    };
                    Ok(quad.cross_moment(&spec.kind, &spec.kind, &pair)? - means[i].0 * means[j].1)
                })
                .collect()
        })
        .collect()
}

/// Compares the truncated series with the quadrature oracle at every grid
/// point and order.
pub fn error_grid(spec: &ErrorGridSpec, keep_cells: bool) -> Result<ErrorGridReport> {
    let oracle = oracle_grid(spec)?;
    let mus = spec.mus();
    let cells_per_order: Vec<Vec<Vec<f64>>> = spec
        .orders
        .iter()
        .map(|&k| {
            let cfg = SeriesConfig::with_order(k);
            mus.par_iter()
                .enumerate()
                .map(|(i, &mi)| {
                    mus.iter()
                        .enumerate()
                        .map(|(j, &mj)| {
                            let pair = CorrelatedPair {
                                a: UnivariateGaussian {
                                    mu: mi,
                                    sigma: spec.sigma_i,
                                },
                                b: UnivariateGaussian {
                                    mu: mj,
                                    sigma: spec.sigma_j,
                                },
                                rho: spec.rho,
                            };
                            Ok((pair_covariance(&spec.kind, &spec.kind, &pair, &cfg)? - oracle[i][j]).abs())
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let orders = spec
        .orders
        .iter()
        .zip(&cells_per_order)
        .map(|(&order, cells)| {
            let mut max = 0.0;
            let mut argmax = (mus[0], mus[0]);
            let mut sum = 0.0;
            for (i, row) in cells.iter().enumerate() {
                for (j, &e) in row.iter().enumerate() {
                    sum += e;
                    if e > max {
                        max = e;
                        argmax = (mus[i], mus[j]);
                    }
                }
            }
            OrderError {
                order,
                max_abs_error: max,
                mean_abs_error: sum / (mus.len() * mus.len()) as f64,
                argmax,
            }
        })
        .collect();
    Ok(ErrorGridReport {
        schema: ERROR_GRID_SCHEMA.to_string(),
        spec: spec.clone(),
        mus,
        orders,
        cells: keep_cells.then_some(cells_per_order),
    })
}
