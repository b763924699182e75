//! The `FQNT` model file.
//!
//! Layout: the magic `FQNT`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a UTF-8 JSON header, then every tensor
//! as little-endian `f64` values in the order the header lists them.
//! Encoding is canonical, so write→read→write reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compile::{CompileMode, FreqAffine, FreqLayer, FreqLinear, FreqModel};
use crate::error::{Error, Result};
use crate::freqreg::{FreqParam, MaskStrategy, ZigzagMask};
use crate::nn::{Activation, BatchNorm, Layer, Linear, SpatialModel};

pub const MAGIC: &[u8; 4] = b"FQNT";
pub const FORMAT_VERSION: u32 = 1;
const PRECISION: &str = "f64";
const PREFIX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Spatial,
    Freq,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    input_dim: usize,
    precision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<CompileMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_masked: Option<bool>,
    provenance: String,
    layers: Vec<LayerDesc>,
    tensors: Vec<TensorDesc>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
enum LayerDesc {
    Linear {
        in_dim: usize,
        out_dim: usize,
        mask: MaskStrategy,
    },
    FreqRelu,
    FreqLeakyRelu {
        slope: f64,
    },
    FreqBatchnorm {
        width: usize,
        momentum: f64,
        epsilon: f64,
    },
    FreqLinear {
        in_dim: usize,
        out_dim: usize,
        in_keep: usize,
        out_keep: usize,
        out_width: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Affine {
        width: usize,
    },
}

const LAYER_TYPES: [&str; 8] = [
    "linear",
    "freq-relu",
    "freq-leaky-relu",
    "freq-batchnorm",
    "freq-linear",
    "relu",
    "leaky-relu",
    "affine",
];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Spatial(SpatialModel),
    Freq(FreqModel),
}

impl ModelFile {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelFile::Spatial(_) => ModelKind::Spatial,
            ModelFile::Freq(_) => ModelKind::Freq,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            ModelFile::Spatial(m) => encode_spatial(m, &spatial_digest(m)),
            ModelFile::Freq(m) => encode_freq(m),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split(bytes)?;
        let mut tensors = TensorReader::new(&header.tensors, payload)?;
        let file = match header.kind {
            ModelKind::Spatial => ModelFile::Spatial(decode_spatial(&header, &mut tensors)?),
            ModelKind::Freq => ModelFile::Freq(decode_freq(&header, &mut tensors)?),
        };
        tensors.finish()?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// SHA-256 of the model's canonical encoding with an empty provenance
/// field, as lowercase hex.
pub fn spatial_digest(model: &SpatialModel) -> String {
    let bytes = encode_spatial(model, "").expect("in-memory encoding");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct TensorWriter {
    descs: Vec<TensorDesc>,
    payload: Vec<u8>,
}

impl TensorWriter {
    fn new() -> Self {
        Self {
            descs: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push<'a>(&mut self, name: String, shape: &[usize], values: impl IntoIterator<Item = &'a f64>) {
        let offset = self.payload.len() as u64;
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.descs.push(TensorDesc {
            name,
            shape: shape.to_vec(),
            offset,
            bytes: self.payload.len() as u64 - offset,
        });
    }
}

fn assemble(mut header: Header, tensors: TensorWriter) -> Result<Vec<u8>> {
    header.payload_bytes = tensors.payload.len() as u64;
    header.tensors = tensors.descs;
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + tensors.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&tensors.payload);
    Ok(out)
}

fn encode_spatial(model: &SpatialModel, provenance: &str) -> Result<Vec<u8>> {
    let mut t = TensorWriter::new();
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        layers.push(match layer {
            Layer::Linear(l) => {
                let freq = l.weight.freq();
                t.push(format!("layers.{i}.weight_freq"), freq.shape(), freq.iter());
                t.push(format!("layers.{i}.bias"), &[l.bias.len()], l.bias.iter());
                LayerDesc::Linear {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    mask: l.weight.mask().strategy().clone(),
                }
            }
            Layer::FreqRelu => LayerDesc::FreqRelu,
            Layer::FreqLeakyRelu { slope } => LayerDesc::FreqLeakyRelu { slope: *slope },
            Layer::FreqBatchNorm(bn) => {
                let w = bn.width();
                for (name, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    t.push(format!("layers.{i}.{name}"), &[w], v.iter());
                }
                LayerDesc::FreqBatchnorm {
                    width: w,
                    momentum: bn.momentum,
                    epsilon: bn.epsilon,
                }
            }
        });
    }
    let header = Header {
        kind: ModelKind::Spatial,
        input_dim: model.input_dim(),
        precision: PRECISION.into(),
        mode: None,
        bias_masked: Some(model.bias_masked()),
        provenance: provenance.into(),
        layers,
        tensors: Vec::new(),
        payload_bytes: 0,
    };
    assemble(header, t)
}

fn encode_freq(model: &FreqModel) -> Result<Vec<u8>> {
    let mut t = TensorWriter::new();
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        layers.push(match layer {
            FreqLayer::Linear(l) => {
                t.push(format!("layers.{i}.a_block"), &[l.in_keep(), l.out_keep()], l.a_block.iter());
                t.push(format!("layers.{i}.b_freq"), &[l.out_width()], l.b_freq.iter());
                LayerDesc::FreqLinear {
                    in_dim: l.full_dims.0,
                    out_dim: l.full_dims.1,
                    in_keep: l.in_keep(),
                    out_keep: l.out_keep(),
                    out_width: l.out_width(),
                }
            }
            FreqLayer::Activation(Activation::Relu) => LayerDesc::Relu,
            FreqLayer::Activation(Activation::Leaky { slope }) => LayerDesc::LeakyRelu { slope: *slope },
            FreqLayer::Affine(a) => {
                t.push(format!("layers.{i}.scale"), &[a.width()], a.scale.iter());
                t.push(format!("layers.{i}.shift"), &[a.width()], a.shift.iter());
                LayerDesc::Affine { width: a.width() }
            }
        });
    }
    let header = Header {
        kind: ModelKind::Freq,
        input_dim: model.input_dim(),
        precision: PRECISION.into(),
        mode: Some(model.mode()),
        bias_masked: None,
        provenance: model.provenance().into(),
        layers,
        tensors: Vec::new(),
        payload_bytes: 0,
    };
    assemble(header, t)
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Length {
            expected: PREFIX_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"FQNT\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREFIX_LEN + header_len;
    if bytes.len() < end {
        return Err(Error::Length {
            expected: end,
            found: bytes.len(),
        });
    }
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[PREFIX_LEN..end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if let Some(layers) = value.get("layers").and_then(|l| l.as_array()) {
        for layer in layers {
            if let Some(ty) = layer.get("type").and_then(|t| t.as_str()) {
                if !LAYER_TYPES.contains(&ty) {
                    return Err(Error::UnsupportedLayer(ty.to_string()));
                }
            }
        }
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.precision != PRECISION {
        return Err(Error::Format(format!("unsupported precision {:?}", header.precision)));
    }
    let payload = &bytes[end..];
    let declared = usize::try_from(header.payload_bytes).map_err(|_| Error::Format("payload too large".into()))?;
    if payload.len() != declared {
        return Err(Error::Length {
            expected: end.saturating_add(declared),
            found: bytes.len(),
        });
    }
    Ok((header, payload))
}

struct TensorReader<'a> {
    tensors: BTreeMap<&'a str, (&'a [usize], &'a [u8])>,
}

impl<'a> TensorReader<'a> {
    /// Checks that the declared tensors tile the payload exactly, in order.
    fn new(descs: &'a [TensorDesc], payload: &'a [u8]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        let mut cursor = 0u64;
        for d in descs {
            let count = d
                .shape
                .iter()
                .try_fold(1u64, |acc, &n| acc.checked_mul(n as u64))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor {} shape overflows", d.name)))?;
            if d.offset != cursor || d.bytes != count {
                return Err(Error::Format(format!(
                    "tensor {} declares offset {} and {} bytes; expected offset {cursor} and {count} bytes",
                    d.name, d.offset, d.bytes
                )));
            }
            let end = cursor
                .checked_add(count)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", d.name)))?;
            let slice = &payload[cursor as usize..end as usize];
            if tensors.insert(d.name.as_str(), (d.shape.as_slice(), slice)).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", d.name)));
            }
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Format("tensors do not cover the payload".into()));
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (declared, bytes) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if declared != shape {
            return Err(Error::Format(format!("tensor {name} has shape {declared:?}, expected {shape:?}")));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn vector(&mut self, name: String, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.take(&name, &[len])?))
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.take(&name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("shape checked"))
    }

    fn finish(self) -> Result<()> {
        match self.tensors.keys().next() {
            Some(name) => Err(Error::Format(format!("unexpected tensor {name}"))),
            None => Ok(()),
        }
    }
}

fn wrong_kind(kind: ModelKind, layer: &LayerDesc) -> Error {
    Error::Format(format!("{kind:?} model cannot contain {layer:?}"))
}

fn decode_spatial(h: &Header, t: &mut TensorReader<'_>) -> Result<SpatialModel> {
    if h.mode.is_some() {
        return Err(Error::Format("spatial models carry no compile mode".into()));
    }
    let mut layers = Vec::with_capacity(h.layers.len());
    for (i, desc) in h.layers.iter().enumerate() {
        layers.push(match desc {
            LayerDesc::Linear { in_dim, out_dim, mask } => {
                let dims = [*in_dim, *out_dim];
                let freq = ArrayD::from_shape_vec(IxDyn(&dims), t.take(&format!("layers.{i}.weight_freq"), &dims)?)
                    .expect("shape checked");
                let mask = ZigzagMask::new(&dims, mask.clone())?;
                Layer::Linear(Linear {
                    weight: FreqParam::new(freq, mask)?,
                    bias: t.vector(format!("layers.{i}.bias"), *out_dim)?,
                })
            }
            LayerDesc::FreqRelu => Layer::FreqRelu,
            LayerDesc::FreqLeakyRelu { slope } => Layer::FreqLeakyRelu { slope: *slope },
            LayerDesc::FreqBatchnorm {
                width,
                momentum,
                epsilon,
            } => Layer::FreqBatchNorm(BatchNorm {
                gamma: t.vector(format!("layers.{i}.gamma"), *width)?,
                beta: t.vector(format!("layers.{i}.beta"), *width)?,
                running_mean: t.vector(format!("layers.{i}.running_mean"), *width)?,
                running_var: t.vector(format!("layers.{i}.running_var"), *width)?,
                momentum: *momentum,
                epsilon: *epsilon,
            }),
            other => return Err(wrong_kind(h.kind, other)),
        });
    }
    let bias_masked = h
        .bias_masked
        .ok_or_else(|| Error::Format("spatial header lacks bias_masked".into()))?;
    let model = SpatialModel::new(h.input_dim, layers, bias_masked)?;
    let digest = spatial_digest(&model);
    if h.provenance != digest {
        return Err(Error::Format("provenance hash does not match the stored weights".into()));
    }
    Ok(model)
}

fn decode_freq(h: &Header, t: &mut TensorReader<'_>) -> Result<FreqModel> {
    let mode = h.mode.ok_or_else(|| Error::Format("freq header lacks a compile mode".into()))?;
    if h.bias_masked.is_some() {
        return Err(Error::Format("freq models carry no bias_masked flag".into()));
    }
    let mut layers = Vec::with_capacity(h.layers.len());
    for (i, desc) in h.layers.iter().enumerate() {
        layers.push(match desc {
            LayerDesc::FreqLinear {
                in_dim,
                out_dim,
                in_keep,
                out_keep,
                out_width,
            } => FreqLayer::Linear(FreqLinear {
                a_block: t.matrix(format!("layers.{i}.a_block"), *in_keep, *out_keep)?,
                b_freq: t.vector(format!("layers.{i}.b_freq"), *out_width)?,
                full_dims: (*in_dim, *out_dim),
            }),
            LayerDesc::Relu => FreqLayer::Activation(Activation::Relu),
            LayerDesc::LeakyRelu { slope } => FreqLayer::Activation(Activation::Leaky { slope: *slope }),
            LayerDesc::Affine { width } => FreqLayer::Affine(FreqAffine {
                scale: t.vector(format!("layers.{i}.scale"), *width)?,
                shift: t.vector(format!("layers.{i}.shift"), *width)?,
            }),
            other => return Err(wrong_kind(h.kind, other)),
        });
    }
    FreqModel::new(h.input_dim, mode, layers, h.provenance.clone())
}
