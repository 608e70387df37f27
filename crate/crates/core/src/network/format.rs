//! On-disk container shared by networks, moment files and traces.
//!
//! ```text
//! offset 0   8 bytes   magic "MFLOWC1\n"
//! offset 8   u64 LE    manifest length L
//! offset 16  L bytes   UTF-8 JSON manifest
//! offset 16+L          blob: little-endian IEEE-754 f64 values
//! ```
//!
//! Every manifest carries `schema`, `dtype` ("f64-le"), `blob_bytes` and
//! `crc64` (CRC-64/XZ of the blob, 16 lowercase hex digits). Tensors are
//! referenced by byte offset into the blob and a row-major shape.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{LayerSpec, NetworkMeta, NetworkSpec, PoolOp};
use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::linear::{AffineLayer, Conv2d, FeatureShape, Padding};
use crate::moments::GaussianMoments;
use crate::propagation::{LayerDiagnostics, PropagationTrace};

pub const NETWORK_SCHEMA: &str = "momentflow-net/1";
pub const MOMENTS_SCHEMA: &str = "momentflow-moments/1";
pub const TRACE_SCHEMA: &str = "momentflow-trace/1";

const MAGIC: &[u8; 8] = b"MFLOWC1\n";
const DTYPE: &str = "f64-le";
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TensorRef {
    offset: usize,
    shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum Shape {
    D1([usize; 1]),
    D2([usize; 2]),
    D4([usize; 4]),
}

impl Shape {
    fn dims(&self) -> &[usize] {
        match self {
            Shape::D1(d) => d,
            Shape::D2(d) => d,
            Shape::D4(d) => d,
        }
    }

    fn len(&self) -> usize {
        self.dims().iter().product()
    }
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, values: impl IntoIterator<Item = f64>, shape: Shape) -> TensorRef {
        let offset = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(self.bytes.len() - offset, shape.len() * 8);
        TensorRef { offset, shape }
    }

    fn push_matrix(&mut self, m: &DMatrix<f64>) -> TensorRef {
        let (r, c) = m.shape();
        let row_major = (0..r).flat_map(move |i| (0..c).map(move |j| m[(i, j)]));
        self.push(row_major, Shape::D2([r, c]))
    }

    fn push_vector(&mut self, v: &DVector<f64>) -> TensorRef {
        self.push(v.iter().copied(), Shape::D1([v.len()]))
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn read(&self, t: &TensorRef) -> Result<Vec<f64>> {
        let len = t.shape.len();
        let end = len
            .checked_mul(8)
            .and_then(|b| b.checked_add(t.offset))
            .ok_or_else(|| Error::Shape("tensor extent overflows".into()))?;
        if !t.offset.is_multiple_of(8) || end > self.bytes.len() {
            return Err(Error::Shape(format!(
                "tensor at offset {} with shape {:?} exceeds blob of {} bytes",
                t.offset,
                t.shape.dims(),
                self.bytes.len()
            )));
        }
        Ok(self.bytes[t.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn matrix(&self, t: &TensorRef) -> Result<DMatrix<f64>> {
        match t.shape {
            Shape::D2([r, c]) => Ok(DMatrix::from_row_slice(r, c, &self.read(t)?)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, found shape {:?}",
                t.shape.dims()
            ))),
        }
    }

    fn vector(&self, t: &TensorRef) -> Result<DVector<f64>> {
        match t.shape {
            Shape::D1([_]) => Ok(DVector::from_vec(self.read(t)?)),
            _ => Err(Error::Shape(format!(
                "expected a vector, found shape {:?}",
                t.shape.dims()
            ))),
        }
    }
}

fn encode(schema: &str, mut manifest: serde_json::Map<String, Value>, blob: BlobWriter) -> Result<Vec<u8>> {
    let mut head = serde_json::Map::new();
    head.insert("schema".into(), schema.into());
    head.insert("dtype".into(), DTYPE.into());
    head.insert("blob_bytes".into(), blob.bytes.len().into());
    head.insert("crc64".into(), format!("{:016x}", CRC64.checksum(&blob.bytes)).into());
    head.append(&mut manifest);
    let json = serde_json::to_vec(&Value::Object(head)).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

fn decode<'a>(bytes: &'a [u8], schema: &str) -> Result<(Value, BlobReader<'a>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Manifest("missing container header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(Error::Manifest(format!(
            "manifest length {len} exceeds file body of {} bytes",
            body.len()
        )));
    }
    let manifest: Value = serde_json::from_slice(&body[..len]).map_err(|e| Error::Manifest(e.to_string()))?;
    let found = manifest
        .get("schema")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Manifest("manifest has no schema field".into()))?;
    if found != schema {
        return Err(Error::Version {
            found: found.to_string(),
            expected: schema.to_string(),
        });
    }
    if manifest.get("dtype").and_then(Value::as_str) != Some(DTYPE) {
        return Err(Error::Manifest(format!("dtype must be {DTYPE:?}")));
    }
    let blob = &body[len..];
    let expected_len = manifest
        .get("blob_bytes")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Manifest("manifest has no blob_bytes field".into()))? as usize;
    if blob.len() != expected_len {
        return Err(Error::Checksum(format!(
            "blob has {} bytes, manifest records {expected_len}",
            blob.len()
        )));
    }
    let recorded = manifest
        .get("crc64")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Manifest("manifest has no crc64 field".into()))?;
    let actual = format!("{:016x}", CRC64.checksum(blob));
    if recorded != actual {
        return Err(Error::Checksum(format!(
            "blob crc64 {actual} does not match recorded {recorded}"
        )));
    }
    Ok((manifest, BlobReader { bytes: blob }))
}

fn field<T: for<'de> Deserialize<'de>>(v: &Value, name: &str) -> Result<T> {
    let raw = v
        .get(name)
        .ok_or_else(|| Error::Manifest(format!("missing field {name:?}")))?;
    serde_json::from_value(raw.clone()).map_err(|e| Error::Manifest(format!("field {name:?}: {e}")))
}

fn shape3(s: [usize; 3]) -> FeatureShape {
    FeatureShape::new(s[0], s[1], s[2])
}

fn shape3_out(s: &FeatureShape) -> [usize; 3] {
    [s.height, s.width, s.channels]
}

fn encode_layer(layer: &LayerSpec, blob: &mut BlobWriter) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("type".into(), layer.type_name().into());
    match layer {
        LayerSpec::Dense(a) => {
            obj.insert(
                "weight".into(),
                serde_json::to_value(blob.push_matrix(a.weight())).unwrap(),
            );
            obj.insert("bias".into(), serde_json::to_value(blob.push_vector(a.bias())).unwrap());
        }
        LayerSpec::Conv2d(c) => {
            let shape = Shape::D4([c.out_channels, c.in_channels, c.kernel_height, c.kernel_width]);
            obj.insert(
                "kernel".into(),
                serde_json::to_value(blob.push(c.kernel.iter().copied(), shape)).unwrap(),
            );
            let bias = blob.push(c.bias.iter().copied(), Shape::D1([c.bias.len()]));
            obj.insert("bias".into(), serde_json::to_value(bias).unwrap());
            obj.insert("stride".into(), c.stride.into());
            obj.insert("padding".into(), serde_json::to_value(c.padding).unwrap());
            obj.insert(
                "input_shape".into(),
                serde_json::to_value(shape3_out(&c.input_shape)).unwrap(),
            );
        }
        LayerSpec::Activation(kind) => {
            obj.insert("activation".into(), serde_json::to_value(kind).unwrap());
        }
        LayerSpec::Flatten { input_shape } => {
            obj.insert(
                "input_shape".into(),
                serde_json::to_value(shape3_out(input_shape)).unwrap(),
            );
        }
        LayerSpec::Pooling {
            window,
            stride,
            input_shape,
            ..
        } => {
            obj.insert("window".into(), (*window).into());
            obj.insert("stride".into(), (*stride).into());
            obj.insert(
                "input_shape".into(),
                serde_json::to_value(shape3_out(input_shape)).unwrap(),
            );
        }
        LayerSpec::Softmax { dim } => {
            obj.insert("dim".into(), (*dim).into());
        }
    }
    Value::Object(obj)
}

fn decode_layer(v: &Value, blob: &BlobReader) -> Result<LayerSpec> {
    let ty = v
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Manifest("layer without a type".into()))?;
    Ok(match ty {
        "dense" => {
            let w = blob.matrix(&field(v, "weight")?)?;
            let b = blob.vector(&field(v, "bias")?)?;
            if b.len() != w.nrows() {
                return Err(Error::Shape(format!(
                    "dense bias length {} does not match {} weight rows",
                    b.len(),
                    w.nrows()
                )));
            }
            LayerSpec::Dense(AffineLayer::new(w, b)?)
        }
        "conv2d" => {
            let kref: TensorRef = field(v, "kernel")?;
            let Shape::D4([oc, ic, kh, kw]) = kref.shape else {
                return Err(Error::Shape("conv2d kernel must be 4-dimensional".into()));
            };
            let conv = Conv2d {
                out_channels: oc,
                in_channels: ic,
                kernel_height: kh,
                kernel_width: kw,
                kernel: blob.read(&kref)?,
                bias: blob.vector(&field(v, "bias")?)?.as_slice().to_vec(),
                stride: field(v, "stride")?,
                padding: field::<Padding>(v, "padding")?,
                input_shape: shape3(field(v, "input_shape")?),
            };
            conv.validate().map_err(|e| Error::Shape(format!("conv2d: {e}")))?;
            LayerSpec::Conv2d(conv)
        }
        "activation" => LayerSpec::Activation(field::<ActivationKind>(v, "activation")?),
        "flatten" => LayerSpec::Flatten {
            input_shape: shape3(field(v, "input_shape")?),
        },
        "max_pool2d" | "avg_pool2d" => LayerSpec::Pooling {
            op: if ty == "max_pool2d" {
                PoolOp::Max
            } else {
                PoolOp::Average
            },
            window: field(v, "window")?,
            stride: field(v, "stride")?,
            input_shape: shape3(field(v, "input_shape")?),
        },
        "softmax" => LayerSpec::Softmax { dim: field(v, "dim")? },
        other => return Err(Error::UnsupportedLayer(other.to_string())),
    })
}

pub fn write_network(net: &NetworkSpec) -> Result<Vec<u8>> {
    let mut blob = BlobWriter::default();
    let layers: Vec<Value> = net.layers.iter().map(|l| encode_layer(l, &mut blob)).collect();
    let mut m = serde_json::Map::new();
    m.insert("input_dim".into(), net.input_dim.into());
    if let Ok(out) = net.output_dim() {
        m.insert("output_dim".into(), out.into());
    }
    m.insert(
        "meta".into(),
        serde_json::to_value(&net.meta).map_err(|e| Error::Manifest(e.to_string()))?,
    );
    m.insert("layers".into(), Value::Array(layers));
    encode(NETWORK_SCHEMA, m, blob)
}

pub fn read_network(bytes: &[u8]) -> Result<NetworkSpec> {
    let (manifest, blob) = decode(bytes, NETWORK_SCHEMA)?;
    let input_dim: usize = field(&manifest, "input_dim")?;
    let meta: NetworkMeta = field(&manifest, "meta")?;
    let layers = manifest
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Manifest("missing layer list".into()))?
        .iter()
        .map(|l| decode_layer(l, &blob))
        .collect::<Result<Vec<_>>>()?;
    let net = NetworkSpec::new(input_dim, layers, meta);
    if let Some(recorded) = manifest.get("output_dim").and_then(Value::as_u64) {
        if let Ok(actual) = net.output_dim() {
            if actual as u64 != recorded {
                return Err(Error::Shape(format!(
                    "manifest output_dim {recorded} but layers produce {actual}"
                )));
            }
        }
    }
    Ok(net)
}

pub fn save_network(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_network(net)?)?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    read_network(&fs::read(path)?)
}

fn push_moments(m: &GaussianMoments, blob: &mut BlobWriter) -> Value {
    serde_json::json!({
        "dim": m.dim(),
        "mean": blob.push_vector(m.mean()),
        "cov": blob.push_matrix(m.cov()),
    })
}

fn read_moments_entry(v: &Value, blob: &BlobReader) -> Result<GaussianMoments> {
    let dim: usize = field(v, "dim")?;
    let mean = blob.vector(&field(v, "mean")?)?;
    let cov = blob.matrix(&field(v, "cov")?)?;
    if mean.len() != dim || cov.shape() != (dim, dim) {
        return Err(Error::Shape(format!(
            "moments of dimension {dim} stored with mean {} and cov {:?}",
            mean.len(),
            cov.shape()
        )));
    }
    GaussianMoments::new(mean, cov)
}

pub fn write_moments(m: &GaussianMoments) -> Result<Vec<u8>> {
    let mut blob = BlobWriter::default();
    let entry = push_moments(m, &mut blob);
    let Value::Object(map) = entry else { unreachable!() };
    encode(MOMENTS_SCHEMA, map, blob)
}

pub fn read_moments(bytes: &[u8]) -> Result<GaussianMoments> {
    let (manifest, blob) = decode(bytes, MOMENTS_SCHEMA)?;
    read_moments_entry(&manifest, &blob)
}

pub fn save_moments(m: &GaussianMoments, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_moments(m)?)?;
    Ok(())
}

pub fn load_moments(path: impl AsRef<Path>) -> Result<GaussianMoments> {
    read_moments(&fs::read(path)?)
}

pub fn write_trace(trace: &PropagationTrace) -> Result<Vec<u8>> {
    let mut blob = BlobWriter::default();
    let snaps: Vec<Value> = trace.snapshots.iter().map(|s| push_moments(s, &mut blob)).collect();
    let mut m = serde_json::Map::new();
    m.insert("snapshots".into(), Value::Array(snaps));
    m.insert(
        "diagnostics".into(),
        serde_json::to_value(&trace.diagnostics).map_err(|e| Error::Manifest(e.to_string()))?,
    );
    encode(TRACE_SCHEMA, m, blob)
}

pub fn save_trace(trace: &PropagationTrace, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_trace(trace)?)?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<PropagationTrace> {
    let bytes = fs::read(path)?;
    let (manifest, blob) = decode(&bytes, TRACE_SCHEMA)?;
    let snapshots = manifest
        .get("snapshots")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Manifest("missing snapshots".into()))?
        .iter()
        .map(|s| read_moments_entry(s, &blob))
        .collect::<Result<Vec<_>>>()?;
    let diagnostics: Vec<LayerDiagnostics> = field(&manifest, "diagnostics")?;
    Ok(PropagationTrace { snapshots, diagnostics })
}
