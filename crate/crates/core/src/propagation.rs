//! Layer-by-layer moment propagation through a whole network.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{layer_output_moments, ActivationDiagnostics, SeriesConfig};
use crate::error::{Error, Result};
use crate::linear::{affine_propagate, conv2d_as_matrix, DEFAULT_ELEMENT_BUDGET};
use crate::moments::GaussianMoments;
use crate::network::{LayerSpec, NetworkSpec};
use crate::oracle::{mc_propagate, McConfig};
use crate::random::{derive_seed, random_covariance, standard_normal_vector, CovFactory, COVARIANCE_RECIPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub layer_type: String,
    pub output_dim: usize,
    /// Present for activation layers only.
    pub activation: Option<ActivationDiagnostics>,
}

/// Moments entering every layer plus the final output.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationTrace {
    pub snapshots: Vec<GaussianMoments>,
    pub diagnostics: Vec<LayerDiagnostics>,
}

fn step(
    layer: &LayerSpec,
    index: usize,
    x: GaussianMoments,
    cfg: &SeriesConfig,
    budget: usize,
) -> Result<(GaussianMoments, LayerDiagnostics)> {
    let mut activation = None;
    let out = match layer {
        LayerSpec::Dense(a) => affine_propagate(a, &x)?,
        LayerSpec::Conv2d(c) => affine_propagate(&conv2d_as_matrix(c, budget)?, &x)?,
        LayerSpec::Activation(kind) => {
            let (m, d) = layer_output_moments(kind, &x, cfg)?;
            activation = Some(d);
            m
        }
        LayerSpec::Flatten { .. } => x,
        LayerSpec::Pooling { .. } | LayerSpec::Softmax { .. } => {
            return Err(Error::InvalidNetwork(format!(
                "layer {index}: {} has no moment propagation rule",
                layer.type_name()
            )))
        }
    };
    let diag = LayerDiagnostics {
        layer: index,
        layer_type: layer.type_name().to_string(),
        output_dim: out.dim(),
        activation,
    };
    Ok((out, diag))
}

/// [`propagate`] with an explicit element budget for lowered convolutions.
pub fn propagate_with_budget(
    net: &NetworkSpec,
    input: &GaussianMoments,
    cfg: &SeriesConfig,
    element_budget: usize,
    keep_trace: bool,
) -> Result<(GaussianMoments, Option<PropagationTrace>)> {
    net.ensure_valid()?;
    if input.dim() != net.input_dim {
        return Err(Error::dims("network input", net.input_dim, input.dim()));
    }
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::with_capacity(net.layers.len());
    let mut cur = input.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        if keep_trace {
            snapshots.push(cur.clone());
        }
        let (next, diag) = step(layer, i, cur, cfg, element_budget)?;
        diagnostics.push(diag);
        cur = next;
    }
    let trace = keep_trace.then(|| {
        snapshots.push(cur.clone());
        PropagationTrace { snapshots, diagnostics }
    });
    Ok((cur, trace))
}

/// Pushes Gaussian input moments through every layer in order, treating each
/// activation input as Gaussian.
pub fn propagate(
    net: &NetworkSpec,
    input: &GaussianMoments,
    cfg: &SeriesConfig,
    keep_trace: bool,
) -> Result<(GaussianMoments, Option<PropagationTrace>)> {
    propagate_with_budget(net, input, cfg, DEFAULT_ELEMENT_BUDGET, keep_trace)
}

/// Output mean and variance of a network for given input moments.
pub trait ReferenceEstimator: Sync {
    fn estimate(
        &self,
        net: &NetworkSpec,
        input: &GaussianMoments,
        trial: usize,
    ) -> Result<(DVector<f64>, DVector<f64>)>;
}

/// Monte Carlo reference; trial `t` samples with seed `derive_seed(seed, t)`.
impl ReferenceEstimator for McConfig {
    fn estimate(
        &self,
        net: &NetworkSpec,
        input: &GaussianMoments,
        trial: usize,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let cfg = McConfig {
            seed: derive_seed(self.seed, trial as u64),
            ..*self
        };
        let est = mc_propagate(net, input, &cfg)?;
        Ok((est.mean, est.variance))
    }
}

/// The analytic propagation itself, useful as a degenerate reference.
impl ReferenceEstimator for SeriesConfig {
    fn estimate(
        &self,
        net: &NetworkSpec,
        input: &GaussianMoments,
        _trial: usize,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let (out, _) = propagate(net, input, self, false)?;
        Ok((out.mean().clone(), out.variances()))
    }
}

pub const TIGHTNESS_SCHEMA: &str = "momentflow-tightness/1";

/// Denominators with smaller magnitude make a ratio undefined.
pub const RATIO_DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessMeta {
    pub network: String,
    pub trials: usize,
    pub samples: Option<usize>,
    pub chunk: Option<usize>,
    pub mc_seed: Option<u64>,
    pub input_seed: u64,
    pub max_variance: f64,
    pub covariance_recipe: String,
    pub mean_recipe: String,
    pub series_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub output_index: usize,
    pub q_mu_mean: f64,
    pub q_mu_std: f64,
    pub q_var_mean: f64,
    pub q_var_std: f64,
    pub excluded_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub schema: String,
    pub meta: TightnessMeta,
    pub rows: Vec<TightnessRow>,
}

pub const TIGHTNESS_CSV_HEADER: &str = "output_index,q_mu_mean,q_mu_std,q_var_mean,q_var_std,excluded_trials";

impl TightnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TIGHTNESS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                r.output_index, r.q_mu_mean, r.q_mu_std, r.q_var_mean, r.q_var_std, r.excluded_trials
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean and sample standard deviation; NaN when undefined.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Input moments for trial `t`: standard normal mean entries and a random
/// covariance, both seeded from `derive_seed(factory.seed, t)`.
pub fn trial_input(factory: &CovFactory, trial: usize) -> GaussianMoments {
    let base = derive_seed(factory.seed, trial as u64);
    let mean = standard_normal_vector(derive_seed(base, 0), factory.n);
    let cov = random_covariance(&CovFactory {
        seed: derive_seed(base, 1),
        ..*factory
    });
    GaussianMoments::from_parts(mean, cov)
}

/// Ratios `Qμ = μ_ref/μ_A` and `Qσ² = σ²_ref/σ²_A` across random inputs.
///
/// Each output's statistics skip trials whose analytic mean or variance is
/// within [`RATIO_DENOMINATOR_FLOOR`] of zero and count them instead.
pub fn tightness_with<R: ReferenceEstimator>(
    net: &NetworkSpec,
    trials: usize,
    reference: &R,
    cfg: &SeriesConfig,
    input_factory: &CovFactory,
) -> Result<Vec<TightnessRow>> {
    if trials < 2 {
        return Err(Error::domain("tightness needs at least two trials"));
    }
    net.ensure_valid()?;
    if input_factory.n != net.input_dim {
        return Err(Error::dims("tightness input factory", net.input_dim, input_factory.n));
    }
    let outputs = net.output_dim()?;
    let per_trial: Vec<(DVector<f64>, DVector<f64>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let input = trial_input(input_factory, t);
            let (analytic, _) = propagate(net, &input, cfg, false)?;
            let (ref_mean, ref_var) = reference.estimate(net, &input, t)?;
            let a_var = analytic.variances();
            let q_mu = DVector::from_fn(outputs, |i, _| ratio(ref_mean[i], analytic.mean()[i]));
            let q_var = DVector::from_fn(outputs, |i, _| ratio(ref_var[i], a_var[i]));
            Ok((q_mu, q_var))
        })
        .collect::<Result<_>>()?;
    Ok((0..outputs)
        .map(|i| {
            let mut qm = Vec::with_capacity(trials);
            let mut qv = Vec::with_capacity(trials);
            let mut excluded = 0;
            for (m, v) in &per_trial {
                if m[i].is_nan() || v[i].is_nan() {
                    excluded += 1;
                } else {
                    qm.push(m[i]);
                    qv.push(v[i]);
                }
            }
            let (q_mu_mean, q_mu_std) = mean_std(&qm);
            let (q_var_mean, q_var_std) = mean_std(&qv);
            TightnessRow {
                output_index: i,
                q_mu_mean,
                q_mu_std,
                q_var_mean,
                q_var_std,
                excluded_trials: excluded,
            }
        })
        .collect())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den.abs() < RATIO_DENOMINATOR_FLOOR {
        f64::NAN
    } else {
        num / den
    }
}

/// Monte Carlo tightness experiment with report metadata.
pub fn tightness(
    net: &NetworkSpec,
    trials: usize,
    mc: &McConfig,
    cfg: &SeriesConfig,
    input_factory: &CovFactory,
) -> Result<TightnessReport> {
    let rows = tightness_with(net, trials, mc, cfg, input_factory)?;
    Ok(TightnessReport {
        schema: TIGHTNESS_SCHEMA.to_string(),
        meta: TightnessMeta {
            network: net.meta.name.clone(),
            trials,
            samples: Some(mc.samples),
            chunk: Some(mc.chunk),
            mc_seed: Some(mc.seed),
            input_seed: input_factory.seed,
            max_variance: input_factory.max_variance,
            covariance_recipe: COVARIANCE_RECIPE.to_string(),
            mean_recipe: "standard normal entries".to_string(),
            series_order: cfg.order,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::linear::AffineLayer;
    use crate::network::{synthesize, NetworkMeta, SynthConfig};
    use nalgebra::DMatrix;

    #[test]
    fn affine_then_relu() {
        let layer = AffineLayer::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, 1.0)).unwrap();
        let net = NetworkSpec::new(
            1,
            vec![LayerSpec::Dense(layer), LayerSpec::Activation(ActivationKind::Relu)],
            NetworkMeta::default(),
        );
        let (out, trace) = propagate(&net, &GaussianMoments::standard(1), &SeriesConfig::default(), true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.snapshots.len(), 3);
        assert_eq!(trace.snapshots[1].mean()[0], 1.0);
        assert_eq!(trace.snapshots[1].cov()[(0, 0)], 4.0);
        assert!((out.mean()[0] - 1.3956).abs() < 1e-3);
        assert!(trace.diagnostics[0].activation.is_none());
        assert_eq!(trace.diagnostics[1].activation.as_ref().unwrap().series_order, 4);
    }

    #[test]
    fn trace_flag_does_not_change_output() {
        let net = synthesize(&SynthConfig::fc(3, 6, 2)).unwrap();
        let input = trial_input(&CovFactory::new(5, 6), 0);
        let cfg = SeriesConfig::default();
        let (a, _) = propagate(&net, &input, &cfg, false).unwrap();
        let (b, _) = propagate(&net, &input, &cfg, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_reference_gives_unit_ratios() {
        let net = synthesize(&SynthConfig::fc(3, 8, 4)).unwrap();
        let cfg = SeriesConfig::default();
        let rows = tightness_with(&net, 4, &cfg, &cfg, &CovFactory::new(1, 8)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].q_mu_mean, 1.0);
        assert_eq!(rows[0].q_mu_std, 0.0);
        assert_eq!(rows[0].q_var_mean, 1.0);
        assert_eq!(rows[0].q_var_std, 0.0);
    }

    #[test]
    fn single_trial_is_rejected() {
        let net = synthesize(&SynthConfig::fc(2, 3, 0)).unwrap();
        let cfg = SeriesConfig::default();
        assert!(tightness_with(&net, 1, &cfg, &cfg, &CovFactory::new(0, 3)).is_err());
    }

    #[test]
    fn zero_denominators_are_excluded() {
        let net = NetworkSpec::new(
            1,
            vec![LayerSpec::Dense(
                AffineLayer::new(DMatrix::zeros(1, 1), DVector::zeros(1)).unwrap(),
            )],
            NetworkMeta::default(),
        );
        let cfg = SeriesConfig::default();
        let rows = tightness_with(&net, 3, &cfg, &cfg, &CovFactory::new(0, 1)).unwrap();
        assert_eq!(rows[0].excluded_trials, 3);
        assert!(rows[0].q_mu_mean.is_nan());
    }
}
