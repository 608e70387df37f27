//! Sampling estimate of a network's output moments.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{min_eigenvalue, psd_repair, GaussianMoments, PsdPolicy};
use crate::network::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    /// Samples per chunk. Chunk `c` draws from ChaCha8 stream `c` of `seed`,
    /// so results depend on the chunk size but not on the thread count.
    pub chunk: usize,
    /// Repair applied to the input covariance before factorization.
    #[serde(default = "default_repair")]
    pub repair: PsdPolicy,
}

fn default_repair() -> PsdPolicy {
    PsdPolicy::ClipEigenvalues
}

impl McConfig {
    pub const DEFAULT_CHUNK: usize = 1000;

    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            chunk: Self::DEFAULT_CHUNK,
            repair: default_repair(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.chunk == 0 {
            return Err(Error::domain("sample count and chunk size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// Unbiased (n − 1) estimator.
    pub cov: DMatrix<f64>,
    pub samples: usize,
    /// Standard error of each mean component.
    pub std_error: DVector<f64>,
}

/// Sample count, mean and centered scatter matrix of one chunk.
struct Summary {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Summary {
    fn of(samples: &DMatrix<f64>) -> Self {
        let n = samples.ncols();
        let mean = samples.column_mean();
        let mut centered = samples.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let m2 = &centered * centered.transpose();
        Self { n, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    fn merge(self, other: Summary) -> Summary {
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        let wb = other.n as f64 / n as f64;
        let mean = &self.mean + &delta * wb;
        let m2 = self.m2 + other.m2 + &delta * delta.transpose() * (self.n as f64 * wb);
        Summary { n, mean, m2 }
    }
}

/// Factor `L` with `L·Lᵀ = Σ` after the configured repair.
///
/// With eigenvalue clipping a singular (semidefinite) result falls back to
/// `Q·√Λ`; otherwise a failed Cholesky is an error.
pub fn sampling_factor(cov: &DMatrix<f64>, repair: PsdPolicy) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.unpack());
    }
    let repaired = psd_repair(cov, repair).matrix;
    if let Some(ch) = Cholesky::new(repaired.clone()) {
        return Ok(ch.unpack());
    }
    if repair == PsdPolicy::ClipEigenvalues {
        let eig = SymmetricEigen::new(repaired);
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        if factor.iter().all(|v| v.is_finite()) {
            return Ok(factor);
        }
    }
    Err(Error::Cholesky {
        min_eigenvalue: min_eigenvalue(cov),
    })
}

fn chunk_summary(
    net: &NetworkSpec,
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    cfg: &McConfig,
    index: usize,
) -> Result<Summary> {
    let start = index * cfg.chunk;
    let count = cfg.chunk.min(cfg.samples - start);
    let n = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let xi = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = factor * xi;
    for mut col in x.column_iter_mut() {
        col += mean;
    }
    Ok(Summary::of(&net.forward_batch(x)?))
}

fn finish(total: Summary) -> MomentEstimate {
    let n = total.n;
    let denom = if n > 1 { (n - 1) as f64 } else { f64::NAN };
    let cov = total.m2 / denom;
    let variance = cov.diagonal();
    let std_error = variance.map(|v| (v / n as f64).sqrt());
    MomentEstimate {
        mean: total.mean,
        variance,
        cov,
        samples: n,
        std_error,
    }
}

fn prepare(net: &NetworkSpec, input: &GaussianMoments, mc: &McConfig) -> Result<(DMatrix<f64>, usize)> {
    mc.validate()?;
    net.ensure_valid()?;
    if input.dim() != net.input_dim {
        return Err(Error::dims("network input", net.input_dim, input.dim()));
    }
    let factor = sampling_factor(input.cov(), mc.repair)?;
    Ok((factor, mc.samples.div_ceil(mc.chunk)))
}

/// Draws `μ + L·ξ`, runs every sample through the network and estimates the
/// output mean and covariance. Chunks run in parallel and are merged in
/// chunk order.
pub fn mc_propagate(net: &NetworkSpec, input: &GaussianMoments, mc: &McConfig) -> Result<MomentEstimate> {
    let (factor, chunks) = prepare(net, input, mc)?;
    let parts: Vec<Summary> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk_summary(net, input.mean(), &factor, mc, c))
        .collect::<Result<_>>()?;
    let total = parts.into_iter().reduce(Summary::merge).expect("at least one chunk");
    Ok(finish(total))
}

/// Single-threaded [`mc_propagate`]; produces identical bits.
pub fn mc_propagate_serial(net: &NetworkSpec, input: &GaussianMoments, mc: &McConfig) -> Result<MomentEstimate> {
    let (factor, chunks) = prepare(net, input, mc)?;
    let mut total: Option<Summary> = None;
    for c in 0..chunks {
        let s = chunk_summary(net, input.mean(), &factor, mc, c)?;
        total = Some(match total {
            None => s,
            Some(t) => t.merge(s),
        });
    }
    Ok(finish(total.expect("at least one chunk")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::linear::AffineLayer;
    use crate::network::{LayerSpec, NetworkMeta};

    fn relu_neuron() -> NetworkSpec {
        NetworkSpec::new(
            1,
            vec![LayerSpec::Activation(ActivationKind::Relu)],
            NetworkMeta::default(),
        )
    }

    #[test]
    fn chan_merge_matches_direct_estimate() {
        let data = DMatrix::from_fn(2, 9, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5 * i as f64);
        let direct = Summary::of(&data);
        let merged = Summary::of(&data.columns(0, 4).into_owned()).merge(Summary::of(&data.columns(4, 5).into_owned()));
        assert!((direct.mean - merged.mean).amax() < 1e-14);
        assert!((direct.m2 - merged.m2).amax() < 1e-12);
    }

    #[test]
    fn relu_neuron_mean() {
        let est = mc_propagate(
            &relu_neuron(),
            &GaussianMoments::standard(1),
            &McConfig::new(200_000, 3),
        )
        .unwrap();
        let exact = 0.398_942_280_401_432_7;
        assert!((est.mean[0] - exact).abs() < 4.0 * est.std_error[0]);
        assert_eq!(est.samples, 200_000);
    }

    #[test]
    fn serial_and_parallel_are_bit_identical() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let net = NetworkSpec::new(
            2,
            vec![
                LayerSpec::Dense(AffineLayer::new(w, DVector::from_vec(vec![0.1, -0.2])).unwrap()),
                LayerSpec::Activation(ActivationKind::Gelu),
            ],
            NetworkMeta::default(),
        );
        let cfg = McConfig {
            samples: 5_003,
            seed: 11,
            chunk: 256,
            repair: PsdPolicy::ClipEigenvalues,
        };
        let input = GaussianMoments::standard(2);
        let a = mc_propagate(&net, &input, &cfg).unwrap();
        let b = mc_propagate_serial(&net, &input, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn semidefinite_input_is_sampled() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let input = GaussianMoments::new(DVector::zeros(2), cov).unwrap();
        let net = NetworkSpec::new(
            2,
            vec![LayerSpec::Activation(ActivationKind::Identity)],
            NetworkMeta::default(),
        );
        let est = mc_propagate(&net, &input, &McConfig::new(1000, 0)).unwrap();
        assert!((est.cov[(0, 1)] - est.cov[(0, 0)]).abs() < 1e-9);
    }

    #[test]
    fn indefinite_input_without_repair_fails() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.1, 1.1, 1.0]);
        let input = GaussianMoments::new(DVector::zeros(2), cov).unwrap();
        let net = NetworkSpec::new(
            2,
            vec![LayerSpec::Activation(ActivationKind::Identity)],
            NetworkMeta::default(),
        );
        let cfg = McConfig {
            repair: PsdPolicy::None,
            ..McConfig::new(100, 0)
        };
        match mc_propagate(&net, &input, &cfg) {
            Err(Error::Cholesky { min_eigenvalue }) => assert!((min_eigenvalue + 0.1).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(mc_propagate(&net, &input, &McConfig::new(100, 0)).is_ok());
    }
}
