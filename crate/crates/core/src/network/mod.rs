//! Feedforward network description.

mod format;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::linear::{AffineLayer, Conv2d, FeatureShape};

pub use format::{
    load_moments, load_network, load_trace, read_moments, read_network, save_moments, save_network, save_trace,
    write_moments, write_network, write_trace, MOMENTS_SCHEMA, NETWORK_SCHEMA, TRACE_SCHEMA,
};
pub use synth::{synthesize, Family, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolOp {
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(AffineLayer),
    Conv2d(Conv2d),
    Activation(ActivationKind),
    /// Reinterprets a feature map as a vector; storage is already row-major.
    Flatten {
        input_shape: FeatureShape,
    },
    /// Representable so it can be loaded and diagnosed, never propagated.
    Pooling {
        op: PoolOp,
        window: usize,
        stride: usize,
        input_shape: FeatureShape,
    },
    /// Representable so it can be loaded and diagnosed, never propagated.
    Softmax {
        dim: usize,
    },
}

impl LayerSpec {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Flatten { .. } => "flatten",
            LayerSpec::Pooling { op: PoolOp::Max, .. } => "max_pool2d",
            LayerSpec::Pooling {
                op: PoolOp::Average, ..
            } => "avg_pool2d",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }

    /// Input length the layer requires; `None` for shape-agnostic layers.
    pub fn in_dim(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense(a) => Some(a.in_dim()),
            LayerSpec::Conv2d(c) => Some(c.input_shape.len()),
            LayerSpec::Activation(_) => None,
            LayerSpec::Flatten { input_shape } | LayerSpec::Pooling { input_shape, .. } => Some(input_shape.len()),
            LayerSpec::Softmax { dim } => Some(*dim),
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> Result<usize> {
        Ok(match self {
            LayerSpec::Dense(a) => a.out_dim(),
            LayerSpec::Conv2d(c) => c.output_shape()?.len(),
            LayerSpec::Activation(_) | LayerSpec::Flatten { .. } | LayerSpec::Softmax { .. } => in_dim,
            LayerSpec::Pooling {
                window,
                stride,
                input_shape,
                ..
            } => {
                if *window == 0 || *stride == 0 || *window > input_shape.height || *window > input_shape.width {
                    return Err(Error::Shape("pooling window does not fit its input".into()));
                }
                let oh = (input_shape.height - window) / stride + 1;
                let ow = (input_shape.width - window) / stride + 1;
                oh * ow * input_shape.channels
            }
        })
    }

    fn parameters(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            LayerSpec::Dense(a) => Box::new(a.weight().iter().chain(a.bias().iter()).copied()),
            LayerSpec::Conv2d(c) => Box::new(c.kernel.iter().chain(c.bias.iter()).copied()),
            _ => Box::new(std::iter::empty()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub meta: NetworkMeta,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>, meta: NetworkMeta) -> Self {
        Self {
            input_dim,
            layers,
            meta,
        }
    }

    /// Fails with [`Error::InvalidNetwork`] listing every diagnostic.
    pub fn ensure_valid(&self) -> Result<()> {
        let diags = validate(self);
        if diags.is_empty() {
            Ok(())
        } else {
            let joined: Vec<String> = diags.iter().map(ToString::to_string).collect();
            Err(Error::InvalidNetwork(joined.join("; ")))
        }
    }

    /// Vector length entering each layer, plus the final output length.
    pub fn dims(&self) -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_dim;
        dims.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(need) = layer.in_dim() {
                if need != cur {
                    return Err(Error::dims(format!("layer {i} ({})", layer.type_name()), need, cur));
                }
            }
            cur = layer.out_dim(cur)?;
            dims.push(cur);
        }
        Ok(dims)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(*self.dims()?.last().unwrap_or(&self.input_dim))
    }

    /// The network made of layers `start..`.
    pub fn suffix(&self, start: usize) -> Result<NetworkSpec> {
        let dims = self.dims()?;
        if start > self.layers.len() {
            return Err(Error::domain(format!(
                "suffix start {start} beyond {} layers",
                self.layers.len()
            )));
        }
        Ok(NetworkSpec {
            input_dim: dims[start],
            layers: self.layers[start..].to_vec(),
            meta: self.meta.clone(),
        })
    }

    /// Exact evaluation on a batch whose columns are inputs.
    pub fn forward_batch(&self, mut x: DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim {
            return Err(Error::dims("network input", self.input_dim, x.nrows()));
        }
        for layer in &self.layers {
            x = match layer {
                LayerSpec::Dense(a) => {
                    let mut y = a.weight() * &x;
                    for mut col in y.column_iter_mut() {
                        col += a.bias();
                    }
                    y
                }
                LayerSpec::Conv2d(c) => {
                    let out_len = c.output_shape()?.len();
                    let mut y = DMatrix::zeros(out_len, x.ncols());
                    for (j, col) in x.column_iter().enumerate() {
                        let input: Vec<f64> = col.iter().copied().collect();
                        let out = c.apply(&input)?;
                        y.column_mut(j).copy_from_slice(&out);
                    }
                    y
                }
                LayerSpec::Activation(kind) => {
                    x.apply(|v| *v = kind.apply(*v));
                    x
                }
                LayerSpec::Flatten { .. } => x,
                LayerSpec::Pooling { .. } | LayerSpec::Softmax { .. } => {
                    return Err(Error::InvalidNetwork(format!(
                        "{} layers cannot be evaluated",
                        layer.type_name()
                    )))
                }
            };
        }
        Ok(x)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Empty,
    DimensionMismatch,
    NonFinite,
    UnsupportedLayer,
    InvalidParameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub layer: Option<usize>,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Structural checks; returns every problem found rather than stopping at
/// the first.
pub fn validate(net: &NetworkSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push =
        |layer: Option<usize>, kind: DiagnosticKind, message: String| out.push(Diagnostic { layer, kind, message });
    if net.layers.is_empty() {
        push(None, DiagnosticKind::Empty, "network has no layers".into());
    }
    if net.input_dim == 0 {
        push(None, DiagnosticKind::InvalidParameter, "input dimension is zero".into());
    }
    let mut cur = net.input_dim;
    for (i, layer) in net.layers.iter().enumerate() {
        let at = Some(i);
        if let Some(need) = layer.in_dim() {
            if need != cur {
                push(
                    at,
                    DiagnosticKind::DimensionMismatch,
                    format!("{} expects input of length {need}, receives {cur}", layer.type_name()),
                );
            }
        }
        if let Some(bad) = layer.parameters().position(|v| !v.is_finite()) {
            push(
                at,
                DiagnosticKind::NonFinite,
                format!("{} has a non-finite parameter at flat index {bad}", layer.type_name()),
            );
        }
        match layer {
            LayerSpec::Conv2d(c) => {
                if let Err(e) = c.validate() {
                    push(at, DiagnosticKind::InvalidParameter, format!("conv2d: {e}"));
                }
            }
            LayerSpec::Activation(kind) => {
                if let Err(e) = kind.validate() {
                    push(at, DiagnosticKind::InvalidParameter, e.to_string());
                }
            }
            LayerSpec::Pooling { .. } => push(
                at,
                DiagnosticKind::UnsupportedLayer,
                format!(
                    "{} has no moment propagation rule; replace it with a strided conv2d without activation",
                    layer.type_name()
                ),
            ),
            LayerSpec::Softmax { .. } => push(
                at,
                DiagnosticKind::UnsupportedLayer,
                "softmax is not element-wise; propagate the logits and drop the softmax layer".into(),
            ),
            _ => {}
        }
        match layer.in_dim() {
            // Continue from the layer's own output to avoid cascading reports.
            Some(need) => cur = layer.out_dim(need).unwrap_or(need),
            None => cur = layer.out_dim(cur).unwrap_or(cur),
        }
    }
    out
}
