use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LayerSpec, NetworkMeta, NetworkSpec};
use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::linear::{AffineLayer, Conv2d, FeatureShape, Padding};
use crate::random::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fc,
    Cnn,
}

/// Random network recipe.
///
/// `depth` counts affine layers (dense or conv). FC networks have
/// `depth − 1` hidden dense layers of `width` units; CNNs have `depth − 1`
/// 3×3 same-padded conv layers of `width` channels followed by a flatten and
/// a dense head. Both end in a single scalar output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub input_shape: FeatureShape,
    pub activation: ActivationKind,
    pub seed: u64,
}

impl SynthConfig {
    /// Fully connected: input and hidden layers both `width` wide.
    pub fn fc(depth: usize, width: usize, seed: u64) -> Self {
        Self {
            family: Family::Fc,
            depth,
            width,
            input_shape: FeatureShape::new(1, 1, width),
            activation: ActivationKind::Relu,
            seed,
        }
    }

    /// 20×20 single-channel input, 10-channel 3×3 convolutions.
    pub fn cnn(depth: usize, seed: u64) -> Self {
        Self {
            family: Family::Cnn,
            depth,
            width: 10,
            input_shape: FeatureShape::new(20, 20, 1),
            activation: ActivationKind::Relu,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::domain("depth must be at least 1"));
        }
        if self.width == 0 || self.input_shape.is_empty() {
            return Err(Error::domain("width and input shape must be nonzero"));
        }
        self.activation.validate()
    }
}

/// Draws `N(0, 2/fan_in)` weights in row-major order.
fn kaiming<R: Rng>(rng: &mut R, count: usize, fan_in: usize) -> Vec<f64> {
    let scale = (2.0 / fan_in as f64).sqrt();
    (0..count)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dense<R: Rng>(rng: &mut R, out: usize, inp: usize) -> LayerSpec {
    let w = DMatrix::from_row_slice(out, inp, &kaiming(rng, out * inp, inp));
    LayerSpec::Dense(AffineLayer::new(w, DVector::zeros(out)).expect("bias length matches"))
}

/// Kaiming-initialized network with zero biases, deterministic per seed.
pub fn synthesize(cfg: &SynthConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut layers = Vec::new();
    match cfg.family {
        Family::Fc => {
            let mut cur = cfg.input_dim();
            for _ in 1..cfg.depth {
                layers.push(dense(&mut rng, cfg.width, cur));
                layers.push(LayerSpec::Activation(cfg.activation));
                cur = cfg.width;
            }
            layers.push(dense(&mut rng, 1, cur));
        }
        Family::Cnn => {
            let mut shape = cfg.input_shape;
            for _ in 1..cfg.depth {
                let fan_in = shape.channels * 9;
                let conv = Conv2d {
                    out_channels: cfg.width,
                    in_channels: shape.channels,
                    kernel_height: 3,
                    kernel_width: 3,
                    kernel: kaiming(&mut rng, cfg.width * fan_in, fan_in),
                    bias: vec![0.0; cfg.width],
                    stride: 1,
                    padding: Padding::Same,
                    input_shape: shape,
                };
                shape = conv.output_shape()?;
                layers.push(LayerSpec::Conv2d(conv));
                layers.push(LayerSpec::Activation(cfg.activation));
            }
            layers.push(LayerSpec::Flatten { input_shape: shape });
            layers.push(dense(&mut rng, 1, shape.len()));
        }
    }
    let family = match cfg.family {
        Family::Fc => "fc",
        Family::Cnn => "cnn",
    };
    let mut meta = NetworkMeta {
        name: format!("{family}{}", cfg.depth),
        seed: Some(cfg.seed),
        ..Default::default()
    };
    meta.params.insert("family".into(), family.into());
    meta.params.insert("depth".into(), cfg.depth.to_string());
    meta.params.insert("width".into(), cfg.width.to_string());
    meta.params.insert(
        "input_shape".into(),
        format!(
            "{}x{}x{}",
            cfg.input_shape.height, cfg.input_shape.width, cfg.input_shape.channels
        ),
    );
    meta.params.insert("activation".into(), cfg.activation.to_string());
    meta.params
        .insert("init".into(), "kaiming_normal(2/fan_in), zero bias".into());
    Ok(NetworkSpec::new(cfg.input_dim(), layers, meta))
}
