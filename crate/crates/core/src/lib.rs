//! Sample-free propagation of Gaussian means and covariances through
//! feedforward neural networks.
//!
//! Affine layers (dense and lowered convolutions) map moments exactly.
//! Element-wise activations use a Hermite-type power series in the input
//! correlation for every output covariance. Quadrature and Monte Carlo
//! oracles are included to check both.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod analysis;
mod error;
pub mod linear;
pub mod moments;
pub mod network;
pub mod oracle;
pub mod propagation;
pub mod random;
pub mod special;

pub use activation::{ActivationKind, CorrelatedPair, SeriesConfig, UnivariateGaussian};
pub use error::{Error, ErrorClass, Result};
pub use moments::{GaussianMoments, PsdPolicy};
pub use network::{LayerSpec, NetworkSpec};
pub use propagation::{propagate, PropagationTrace, TightnessReport};
