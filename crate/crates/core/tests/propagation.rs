use momentflow::activation::{ActivationKind, SeriesConfig};
use momentflow::linear::{AffineLayer, Conv2d, FeatureShape, Padding};
use momentflow::network::{
    load_moments, load_network, load_trace, read_network, save_moments, save_network, save_trace, synthesize,
    write_network, Family, LayerSpec, NetworkMeta, NetworkSpec, SynthConfig,
};
use momentflow::oracle::{mc_propagate, McConfig};
use momentflow::propagation::{propagate, propagate_with_budget, trial_input};
use momentflow::random::{standard_normal_vector, CovFactory};
use momentflow::{Error, GaussianMoments};
use nalgebra::{DMatrix, DVector};

fn max_diff(a: &GaussianMoments, b: &GaussianMoments) -> f64 {
    (a.mean() - b.mean()).amax().max((a.cov() - b.cov()).amax())
}

#[test]
fn identity_network_returns_input() {
    let n = 4;
    let eye = || LayerSpec::Dense(AffineLayer::new(DMatrix::identity(n, n), DVector::zeros(n)).unwrap());
    let net = NetworkSpec::new(
        n,
        vec![eye(), LayerSpec::Activation(ActivationKind::Identity), eye()],
        NetworkMeta::default(),
    );
    let input = trial_input(&CovFactory::new(3, n), 0);
    let (out, _) = propagate(&net, &input, &SeriesConfig::default(), false).unwrap();
    assert_eq!(out, input);
}

#[test]
fn suffix_from_any_snapshot_reproduces_output() {
    let net = synthesize(&SynthConfig::fc(4, 12, 8)).unwrap();
    let input = trial_input(&CovFactory::new(1, 12), 0);
    let cfg = SeriesConfig::default();
    let (out, trace) = propagate(&net, &input, &cfg, true).unwrap();
    let trace = trace.unwrap();
    assert_eq!(trace.snapshots.len(), net.layers.len() + 1);
    for start in 0..net.layers.len() {
        let suffix = net.suffix(start).unwrap();
        let (again, _) = propagate(&suffix, &trace.snapshots[start], &cfg, false).unwrap();
        assert!(max_diff(&again, &out) <= 1e-12, "start {start}");
    }
}

#[test]
fn affine_chains_scale_quadratically() {
    let layers = (0..3)
        .map(|i| {
            let w = DMatrix::from_column_slice(5, 5, standard_normal_vector(i, 25).as_slice());
            LayerSpec::Dense(AffineLayer::new(w, standard_normal_vector(i + 10, 5)).unwrap())
        })
        .collect();
    let net = NetworkSpec::new(5, layers, NetworkMeta::default());
    let input = trial_input(&CovFactory::new(4, 5), 0);
    let cfg = SeriesConfig::default();
    let (base, _) = propagate(&net, &input, &cfg, false).unwrap();
    for c in [0.5f64, 2.0, 4.0] {
        let (scaled, _) = propagate(&net, &input.scale_cov(c * c), &cfg, false).unwrap();
        assert_eq!(scaled.mean(), base.mean());
        let expect = base.cov() * (c * c);
        assert!((scaled.cov() - expect).amax() <= 1e-12 * base.cov().amax());
    }
}

#[test]
fn convolution_layers_propagate() {
    let mut cfg = SynthConfig::cnn(2, 6);
    cfg.input_shape = FeatureShape::new(8, 8, 1);
    cfg.width = 3;
    let net = synthesize(&cfg).unwrap();
    let input = trial_input(&CovFactory::new(0, 64), 0);
    let (out, trace) = propagate(&net, &input, &SeriesConfig::default(), true).unwrap();
    assert_eq!(out.dim(), 1);
    assert_eq!(trace.unwrap().snapshots[1].dim(), 8 * 8 * 3);
    let mc = mc_propagate(&net, &input, &McConfig::new(40_000, 1)).unwrap();
    assert!((mc.mean[0] - out.mean()[0]).abs() <= 5.0 * mc.std_error[0] + 0.05 * out.mean()[0].abs());
}

#[test]
fn element_budget_stops_large_convolutions() {
    let conv = Conv2d {
        out_channels: 4,
        in_channels: 1,
        kernel_height: 3,
        kernel_width: 3,
        kernel: vec![0.1; 36],
        bias: vec![0.0; 4],
        stride: 1,
        padding: Padding::Same,
        input_shape: FeatureShape::new(10, 10, 1),
    };
    let net = NetworkSpec::new(100, vec![LayerSpec::Conv2d(conv)], NetworkMeta::default());
    let input = GaussianMoments::standard(100);
    let err = propagate_with_budget(&net, &input, &SeriesConfig::default(), 1000, false).unwrap_err();
    assert!(matches!(
        err,
        Error::ElementBudget {
            elements: 40_000,
            budget: 1000
        }
    ));
}

#[test]
fn invalid_networks_are_rejected_before_propagation() {
    let net = NetworkSpec::new(4, vec![LayerSpec::Softmax { dim: 4 }], NetworkMeta::default());
    let err = propagate(&net, &GaussianMoments::standard(4), &SeriesConfig::default(), false).unwrap_err();
    assert!(matches!(err, Error::InvalidNetwork(_)));
    let net = synthesize(&SynthConfig::fc(2, 3, 0)).unwrap();
    let err = propagate(&net, &GaussianMoments::standard(5), &SeriesConfig::default(), false).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
}

#[test]
fn synthesized_families_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = vec![
        SynthConfig::fc(1, 3, 0),
        SynthConfig::fc(4, 10, 1),
        SynthConfig::fc(8, 5, 2),
    ];
    for (depth, act) in [(2, ActivationKind::Gelu), (4, ActivationKind::Heaviside)] {
        let mut c = SynthConfig::cnn(depth, 3);
        c.activation = act;
        configs.push(c);
    }
    let mut sig = SynthConfig::fc(3, 4, 9);
    sig.activation = ActivationKind::sigmoid();
    configs.push(sig);
    for (i, cfg) in configs.iter().enumerate() {
        let net = synthesize(cfg).unwrap();
        let path = dir.path().join(format!("net{i}.mfn"));
        save_network(&net, &path).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(read_network(&write_network(&back).unwrap()).unwrap(), net);
        assert_eq!(
            cfg.family == Family::Cnn,
            net.layers.iter().any(|l| matches!(l, LayerSpec::Conv2d(_)))
        );
    }
}

#[test]
fn moments_and_trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = synthesize(&SynthConfig::fc(3, 4, 2)).unwrap();
    let input = trial_input(&CovFactory::new(7, 4), 0);
    let (out, trace) = propagate(&net, &input, &SeriesConfig::default(), true).unwrap();
    let trace = trace.unwrap();
    save_moments(&out, dir.path().join("out.mfm")).unwrap();
    assert_eq!(load_moments(dir.path().join("out.mfm")).unwrap(), out);
    save_trace(&trace, dir.path().join("trace.mft")).unwrap();
    assert_eq!(load_trace(dir.path().join("trace.mft")).unwrap(), trace);
    assert!(matches!(
        load_moments(dir.path().join("trace.mft")),
        Err(Error::Version { .. })
    ));
    assert!(matches!(
        load_network(dir.path().join("missing.mfn")),
        Err(Error::Io(_))
    ));
}
