//! Moment propagation through linear maps.
//!
//! For `y = Wx + b` the output moments are `Wμ + b` and `WΣWᵀ`. Strided
//! convolutions are lowered to explicit matrices acting on row-major
//! `(h, w, c)` flattened inputs so that the same formulas apply.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{symmetrize, GaussianMoments};

/// Largest lowered convolution matrix, in elements.
pub const DEFAULT_ELEMENT_BUDGET: usize = 1 << 26;

/// Below this fraction of nonzeros `WΣWᵀ` is formed row-sparse.
const SPARSE_DENSITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl AffineLayer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::dims("affine bias", weight.nrows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }
}

/// `W·Σ·Wᵀ`, symmetric by construction.
pub(crate) fn sandwich(w: &DMatrix<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = w.shape();
    let nnz = w.iter().filter(|v| **v != 0.0).count();
    if m * n > 0 && (nnz as f64) < SPARSE_DENSITY * (m * n) as f64 {
        return sparse_sandwich(w, cov);
    }
    let mut out = w * cov * w.transpose();
    symmetrize(&mut out);
    out
}

fn sparse_sandwich(w: &DMatrix<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = w.shape();
    let rows: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|i| (0..n).filter(|&j| w[(i, j)] != 0.0).map(|j| (j, w[(i, j)])).collect())
        .collect();
    // Row i of WΣ, using the symmetry of Σ to read contiguous columns.
    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut ws = vec![0.0; n];
            for &(j, v) in &rows[i] {
                for (acc, c) in ws.iter_mut().zip(cov.column(j).iter()) {
                    *acc += v * c;
                }
            }
            (i..m).map(|k| rows[k].iter().map(|&(l, v)| v * ws[l]).sum()).collect()
        })
        .collect();
    let mut out = DMatrix::zeros(m, m);
    for (i, row) in upper.into_iter().enumerate() {
        for (offset, v) in row.into_iter().enumerate() {
            out[(i, i + offset)] = v;
            out[(i + offset, i)] = v;
        }
    }
    out
}

pub fn affine_propagate(layer: &AffineLayer, input: &GaussianMoments) -> Result<GaussianMoments> {
    if layer.in_dim() != input.dim() {
        return Err(Error::dims("affine input", layer.in_dim(), input.dim()));
    }
    let mean = layer.apply(input.mean());
    let cov = sandwich(&layer.weight, input.cov());
    Ok(GaussianMoments::from_parts(mean, cov))
}

/// Affine layer whose weights and biases are independent Gaussians with
/// elementwise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedGaussianAffine {
    pub weight_mean: DMatrix<f64>,
    pub weight_var: DMatrix<f64>,
    pub bias_mean: DVector<f64>,
    pub bias_var: DVector<f64>,
}

impl FactorizedGaussianAffine {
    pub fn new(
        weight_mean: DMatrix<f64>,
        weight_var: DMatrix<f64>,
        bias_mean: DVector<f64>,
        bias_var: DVector<f64>,
    ) -> Result<Self> {
        let layer = Self {
            weight_mean,
            weight_var,
            bias_mean,
            bias_var,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Deterministic weights: all variances zero.
    pub fn deterministic(layer: &AffineLayer) -> Self {
        let (m, n) = layer.weight.shape();
        Self {
            weight_mean: layer.weight.clone(),
            weight_var: DMatrix::zeros(m, n),
            bias_mean: layer.bias.clone(),
            bias_var: DVector::zeros(m),
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = self.weight_mean.shape();
        if self.weight_var.shape() != (m, n) {
            return Err(Error::Shape(format!(
                "weight variance shape {:?} differs from weight mean {:?}",
                self.weight_var.shape(),
                (m, n)
            )));
        }
        if self.bias_mean.len() != m {
            return Err(Error::dims("bias mean", m, self.bias_mean.len()));
        }
        if self.bias_var.len() != m {
            return Err(Error::dims("bias variance", m, self.bias_var.len()));
        }
        if self.weight_var.iter().chain(self.bias_var.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::domain("parameter variances must be nonnegative"));
        }
        Ok(())
    }
}

/// Output moments of `y = Wx + b` with `x`, `W` and `b` mutually independent
/// and `W`, `b` fully factorized:
///
/// ```text
/// Cov(yᵢ, yₖ) = δᵢₖ·(Var bᵢ + Σⱼ E[xⱼ²]·Var Wᵢⱼ) + (E[W] Σ E[W]ᵀ)ᵢₖ
/// ```
pub fn dvi_affine_propagate(layer: &FactorizedGaussianAffine, input: &GaussianMoments) -> Result<GaussianMoments> {
    layer.validate()?;
    let n = layer.weight_mean.ncols();
    if n != input.dim() {
        return Err(Error::dims("dvi affine input", n, input.dim()));
    }
    let mu = input.mean();
    let mean = &layer.weight_mean * mu + &layer.bias_mean;
    let mut cov = sandwich(&layer.weight_mean, input.cov());
    let second: DVector<f64> = DVector::from_iterator(n, (0..n).map(|j| input.cov()[(j, j)] + mu[j] * mu[j]));
    let extra = &layer.weight_var * &second + &layer.bias_var;
    for (i, e) in extra.iter().enumerate() {
        cov[(i, i)] += e;
    }
    Ok(GaussianMoments::from_parts(mean, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::domain(format!("unknown padding {other:?}"))),
        }
    }
}

/// Spatial shape `(height, width, channels)` of a row-major feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

/// 2-D cross-correlation with a `out × in × kh × kw` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    /// Row-major `out × in × kh × kw`.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: Padding,
    pub input_shape: FeatureShape,
}

impl Conv2d {
    pub fn kernel_at(&self, o: usize, i: usize, r: usize, s: usize) -> f64 {
        self.kernel[((o * self.in_channels + i) * self.kernel_height + r) * self.kernel_width + s]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.out_channels * self.in_channels * self.kernel_height * self.kernel_width;
        if self.kernel.len() != expected {
            return Err(Error::Shape(format!(
                "kernel has {} values, shape implies {expected}",
                self.kernel.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::dims("conv bias", self.out_channels, self.bias.len()));
        }
        if self.input_shape.channels != self.in_channels {
            return Err(Error::dims(
                "conv input channels",
                self.in_channels,
                self.input_shape.channels,
            ));
        }
        if self.stride == 0 {
            return Err(Error::domain("stride must be positive"));
        }
        self.output_shape().map(|_| ())
    }

    fn padding_offsets(&self, out: &FeatureShape) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = |o: usize, k: usize, i: usize| ((o - 1) * self.stride + k).saturating_sub(i);
                (
                    total(out.height, self.kernel_height, self.input_shape.height) / 2,
                    total(out.width, self.kernel_width, self.input_shape.width) / 2,
                )
            }
        }
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        let FeatureShape { height, width, .. } = self.input_shape;
        let s = self.stride.max(1);
        let (oh, ow) = match self.padding {
            Padding::Same => (height.div_ceil(s), width.div_ceil(s)),
            Padding::Valid => {
                if height < self.kernel_height || width < self.kernel_width {
                    (0, 0)
                } else {
                    (
                        (height - self.kernel_height) / s + 1,
                        (width - self.kernel_width) / s + 1,
                    )
                }
            }
        };
        if oh == 0 || ow == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!(
                "convolution output is empty for input {height}×{width}"
            )));
        }
        Ok(FeatureShape::new(oh, ow, self.out_channels))
    }

    /// Visits `(output index, input index, kernel value)` for every tap that
    /// lands inside the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) -> Result<()> {
        let out = self.output_shape()?;
        let (pad_top, pad_left) = self.padding_offsets(&out);
        let inp = self.input_shape;
        for oy in 0..out.height {
            for ox in 0..out.width {
                for o in 0..self.out_channels {
                    let row = out.index(oy, ox, o);
                    for r in 0..self.kernel_height {
                        let iy = (oy * self.stride + r) as isize - pad_top as isize;
                        if iy < 0 || iy >= inp.height as isize {
                            continue;
                        }
                        for s in 0..self.kernel_width {
                            let ix = (ox * self.stride + s) as isize - pad_left as isize;
                            if ix < 0 || ix >= inp.width as isize {
                                continue;
                            }
                            for c in 0..self.in_channels {
                                let col = inp.index(iy as usize, ix as usize, c);
                                f(row, col, self.kernel_at(o, c, r, s));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Direct sliding-window evaluation on a flattened input.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.len() != self.input_shape.len() {
            return Err(Error::dims("conv input", self.input_shape.len(), x.len()));
        }
        let out = self.output_shape()?;
        let mut y: Vec<f64> = (0..out.len()).map(|i| self.bias[i % self.out_channels]).collect();
        self.for_each_tap(|row, col, k| y[row] += k * x[col])?;
        Ok(y)
    }

    pub fn to_affine(&self, element_budget: usize) -> Result<AffineLayer> {
        conv2d_as_matrix(self, element_budget)
    }
}

/// Materializes the convolution as a dense affine layer.
pub fn conv2d_as_matrix(conv: &Conv2d, element_budget: usize) -> Result<AffineLayer> {
    conv.validate()?;
    let out = conv.output_shape()?;
    let rows = out.len();
    let cols = conv.input_shape.len();
    let elements = rows.saturating_mul(cols);
    if elements > element_budget {
        return Err(Error::ElementBudget {
            elements,
            budget: element_budget,
        });
    }
    let mut weight = DMatrix::zeros(rows, cols);
    conv.for_each_tap(|r, c, k| weight[(r, c)] += k)?;
    let bias = DVector::from_iterator(rows, (0..rows).map(|i| conv.bias[i % conv.out_channels]));
    AffineLayer::new(weight, bias)
}
