//! Reference computations used to check the series engine.

mod monte_carlo;
mod quadrature;

pub use monte_carlo::{mc_propagate, mc_propagate_serial, sampling_factor, McConfig, MomentEstimate};
pub use quadrature::{
    gauss_hermite, gauss_legendre, oracle_csv, quad_covariance, quad_cross_moment, quad_mean, quad_variance,
    OracleRecord, Quadrature, QuadratureConfig, QuadratureScheme, Rule, ORACLE_CSV_HEADER,
};
