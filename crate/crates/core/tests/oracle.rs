use std::f64::consts::PI;

use momentflow::activation::{activation_mean, ActivationKind, CorrelatedPair, UnivariateGaussian};
use momentflow::network::{LayerSpec, NetworkMeta, NetworkSpec};
use momentflow::oracle::{mc_propagate, McConfig, Quadrature, QuadratureConfig, QuadratureScheme};
use momentflow::GaussianMoments;
use nalgebra::{DMatrix, DVector};

fn kinds() -> [ActivationKind; 5] {
    [
        ActivationKind::Heaviside,
        ActivationKind::Relu,
        ActivationKind::Gelu,
        ActivationKind::sigmoid(),
        ActivationKind::Identity,
    ]
}

fn g(mu: f64, sigma: f64) -> UnivariateGaussian {
    UnivariateGaussian::new(mu, sigma).unwrap()
}

#[test]
fn doubling_nodes_changes_cross_moment_by_at_most_1e8() {
    let q40 = Quadrature::new(QuadratureConfig::with_nodes(40)).unwrap();
    let q80 = Quadrature::new(QuadratureConfig::with_nodes(80)).unwrap();
    let mus: Vec<f64> = (0..=20).map(|i| -5.0 + 0.5 * i as f64).collect();
    for kind in [ActivationKind::Relu, ActivationKind::Heaviside, ActivationKind::Gelu] {
        let mut worst: f64 = 0.0;
        for &a in &mus {
            for &b in &mus {
                let p = CorrelatedPair::new(g(a, 1.0), g(b, 1.0), 0.5).unwrap();
                let x = q40.cross_moment(&kind, &kind, &p).unwrap();
                let y = q80.cross_moment(&kind, &kind, &p).unwrap();
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst <= 1e-8, "{kind}: {worst:e}");
    }
}

#[test]
fn gelu_mean_matches_closed_form() {
    let q = Quadrature::new(QuadratureConfig::default()).unwrap();
    for &(mu, sigma) in &[(1.0, 1.0), (-2.0, 0.5), (0.3, 3.0)] {
        let exact = activation_mean(&ActivationKind::Gelu, &g(mu, sigma)).unwrap();
        let quad = q.mean(&ActivationKind::Gelu, &g(mu, sigma)).unwrap();
        assert!((exact - quad).abs() < 1e-8, "{mu} {sigma}: {exact} vs {quad}");
    }
}

#[test]
fn closed_form_pair_covariances() {
    let q = Quadrature::new(QuadratureConfig::default()).unwrap();
    for &rho in &[-0.9, -0.5, 0.1, 0.5, 0.95] {
        let p = CorrelatedPair::new(g(0.0, 1.0), g(0.0, 1.0), rho).unwrap();
        let h = q
            .covariance(&ActivationKind::Heaviside, &ActivationKind::Heaviside, &p)
            .unwrap();
        assert!((h - f64::asin(rho) / (2.0 * PI)).abs() < 1e-6, "rho {rho}: {h}");
        let r = q.covariance(&ActivationKind::Relu, &ActivationKind::Relu, &p).unwrap();
        let exact = ((1.0 - rho * rho).sqrt() + rho * (PI - f64::acos(rho)) - 1.0) / (2.0 * PI);
        assert!((r - exact).abs() < 1e-8, "rho {rho}: {r} vs {exact}");
    }
}

#[test]
fn cauchy_schwarz_on_grid() {
    let q = Quadrature::new(QuadratureConfig::default()).unwrap();
    for kind in kinds() {
        for &a in &[-3.0, -0.5, 0.0, 2.0] {
            for &b in &[-1.0, 0.0, 1.5] {
                for &rho in &[-0.99, -0.4, 0.0, 0.6, 1.0] {
                    let p = CorrelatedPair::new(g(a, 1.0), g(b, 0.8), rho).unwrap();
                    let c = q.covariance(&kind, &kind, &p).unwrap();
                    let va = q.variance(&kind, &p.a).unwrap();
                    let vb = q.variance(&kind, &p.b).unwrap();
                    assert!(c * c <= va * vb * (1.0 + 1e-9) + 1e-15, "{kind} {a} {b} {rho}");
                }
            }
        }
    }
}

#[test]
fn pure_hermite_is_available() {
    let q = Quadrature::new(QuadratureConfig {
        nodes_per_axis: 60,
        scheme: QuadratureScheme::GaussHermite,
    })
    .unwrap();
    let p = CorrelatedPair::new(g(0.0, 1.0), g(0.0, 1.0), 0.5).unwrap();
    let h = q
        .covariance(&ActivationKind::Heaviside, &ActivationKind::Heaviside, &p)
        .unwrap();
    assert!((h - 1.0 / 12.0).abs() < 1e-2);
}

fn neuron(kind: ActivationKind) -> NetworkSpec {
    NetworkSpec::new(1, vec![LayerSpec::Activation(kind)], NetworkMeta::default())
}

#[test]
fn monte_carlo_neuron_agrees_with_quadrature() {
    let q = Quadrature::new(QuadratureConfig::default()).unwrap();
    for (k, kind) in kinds().into_iter().enumerate() {
        for (i, mu) in (-4..=4).map(f64::from).enumerate() {
            let input = GaussianMoments::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, 1.44)).unwrap();
            let est = mc_propagate(&neuron(kind), &input, &McConfig::new(20_000, (k * 10 + i) as u64)).unwrap();
            let exact = q.mean(&kind, &g(mu, 1.2)).unwrap();
            assert!(
                (est.mean[0] - exact).abs() <= 4.0 * est.std_error[0] + 1e-12,
                "{kind} mu {mu}: {} vs {exact} (se {})",
                est.mean[0],
                est.std_error[0]
            );
        }
    }
}

#[test]
fn relu_neuron_million_samples() {
    let est = mc_propagate(
        &neuron(ActivationKind::Relu),
        &GaussianMoments::standard(1),
        &McConfig::new(1_000_000, 2024),
    )
    .unwrap();
    assert!((est.mean[0] - 0.398_942_280_4).abs() <= 4.0 * est.std_error[0]);
}

#[test]
fn identity_network_recovers_input_moments() {
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 0.5]);
    let input = GaussianMoments::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), cov.clone()).unwrap();
    let net = NetworkSpec::new(
        3,
        vec![LayerSpec::Activation(ActivationKind::Identity)],
        NetworkMeta::default(),
    );
    let est = mc_propagate(&net, &input, &McConfig::new(100_000, 9)).unwrap();
    for i in 0..3 {
        assert!((est.mean[i] - input.mean()[i]).abs() <= 4.0 * est.std_error[i]);
        let se_var = cov[(i, i)] * (2.0 / est.samples as f64).sqrt();
        assert!((est.variance[i] - cov[(i, i)]).abs() <= 4.0 * se_var);
    }
    assert!(est.std_error.iter().all(|s| *s > 0.0));
}

#[test]
fn fixed_seed_is_reproducible() {
    let net = neuron(ActivationKind::Gelu);
    let cfg = McConfig::new(30_000, 77);
    let a = mc_propagate(&net, &GaussianMoments::standard(1), &cfg).unwrap();
    let b = mc_propagate(&net, &GaussianMoments::standard(1), &cfg).unwrap();
    assert_eq!(a.mean[0].to_bits(), b.mean[0].to_bits());
    assert_eq!(a.cov[(0, 0)].to_bits(), b.cov[(0, 0)].to_bits());
}
