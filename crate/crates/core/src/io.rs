//! On-disk formats.
//!
//! Binary files share one container: an 8-byte magic, a little-endian
//! `u32` header length, a JSON header and a little-endian payload. JSON
//! files carry a top-level `version`. Every reader rejects an unknown
//! major version.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dct::{ChannelSource, DctConfig, FrequencyTensor, NormalizationStats};
use crate::error::{Error, Result};
use crate::network::{NetworkGraph, WeightSet, WeightTensor};
use crate::quant::{Calibration, QuantizedModel};
use crate::tensor::{FloatTensor, Shape};

pub const FORMAT_VERSION: u32 = 1;

const TENSOR_MAGIC: &[u8; 8] = b"FQHETNSR";
const WEIGHTS_MAGIC: &[u8; 8] = b"FQHEWGHT";
const MODEL_MAGIC: &[u8; 8] = b"FQHEMODL";

/// True when `bytes` start like a tensor file.
pub fn is_tensor_file(bytes: &[u8]) -> bool {
    bytes.starts_with(TENSOR_MAGIC)
}

fn check_version(what: &'static str, header: &serde_json::Value) -> Result<()> {
    let v = header
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format(format!("{what} has no version field")))?;
    if v != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            what,
            found: v.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn write_container(magic: &[u8; 8], header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let len = u32::try_from(h.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + h.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    Ok(out)
}

fn read_container<'a>(what: &'static str, magic: &[u8; 8], bytes: &'a [u8]) -> Result<(serde_json::Value, &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..end])?;
    check_version(what, &header)?;
    Ok((header, &bytes[end..]))
}

fn f32_payload(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn f32_slice(what: &str, payload: &[u8], offset: usize, len: usize) -> Result<Vec<f64>> {
    let bytes = offset
        .checked_add(len)
        .and_then(|e| e.checked_mul(4))
        .filter(|&e| e <= payload.len())
        .map(|e| &payload[offset * 4..e])
        .ok_or_else(|| Error::Format(format!("{what} payload is truncated")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// One or more same-shaped input tensors plus how they were produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<FloatTensor>,
    pub channel_map: Option<Vec<ChannelSource>>,
    pub config: Option<DctConfig>,
    pub normalization: Option<NormalizationStats>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    version: u32,
    dims: Shape,
    count: usize,
    dtype: String,
    #[serde(default)]
    channel_map: Option<Vec<ChannelSource>>,
    #[serde(default)]
    config: Option<DctConfig>,
    #[serde(default)]
    normalization: Option<NormalizationStats>,
}

impl TensorFile {
    pub fn plain(tensors: Vec<FloatTensor>) -> Self {
        Self {
            tensors,
            channel_map: None,
            config: None,
            normalization: None,
        }
    }

    /// Batch of frequency tensors sharing one configuration.
    pub fn from_frequency(batch: &[FrequencyTensor]) -> Result<Self> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidConfig("no tensors to write".into()))?;
        Ok(Self {
            tensors: batch.iter().map(|f| f.data.clone()).collect(),
            channel_map: Some(first.channel_map.clone()),
            config: Some(first.config),
            normalization: first.normalization.clone(),
        })
    }

    pub fn dims(&self) -> Option<Shape> {
        self.tensors.first().map(|t| t.shape)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dims = self
            .dims()
            .ok_or_else(|| Error::InvalidConfig("tensor file needs at least one tensor".into()))?;
        if self.tensors.iter().any(|t| t.shape != dims) {
            return Err(Error::DimensionMismatch("tensors in one file must share a shape".into()));
        }
        let header = TensorHeader {
            version: FORMAT_VERSION,
            dims,
            count: self.tensors.len(),
            dtype: "f32".into(),
            channel_map: self.channel_map.clone(),
            config: self.config,
            normalization: self.normalization.clone(),
        };
        let payload = f32_payload(self.tensors.iter().flat_map(|t| t.data.iter().copied()));
        write_container(TENSOR_MAGIC, &header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = read_container("tensor", TENSOR_MAGIC, bytes)?;
        let h: TensorHeader = serde_json::from_value(h)?;
        if h.dtype != "f32" {
            return Err(Error::Format(format!("unsupported tensor dtype `{}`", h.dtype)));
        }
        let n = h.dims.len();
        if payload.len() != n * h.count * 4 {
            return Err(Error::Format(format!(
                "tensor payload has {} bytes, header implies {}",
                payload.len(),
                n * h.count * 4
            )));
        }
        let tensors = (0..h.count)
            .map(|i| FloatTensor::from_vec(h.dims, f32_slice("tensor", payload, i * n, n)?))
            .collect::<Result<_>>()?;
        Ok(Self {
            tensors,
            channel_map: h.channel_map,
            config: h.config,
            normalization: h.normalization,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    version: u32,
    tensors: Vec<WeightEntry>,
}

pub fn encode_weights(ws: &WeightSet) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in &ws.tensors {
        entries.push(WeightEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
        });
        offset += t.data.len();
    }
    let payload = f32_payload(ws.tensors.values().flat_map(|t| t.data.iter().copied()));
    write_container(
        WEIGHTS_MAGIC,
        &WeightsHeader {
            version: FORMAT_VERSION,
            tensors: entries,
        },
        &payload,
    )
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightSet> {
    let (h, payload) = read_container("weights", WEIGHTS_MAGIC, bytes)?;
    let h: WeightsHeader = serde_json::from_value(h)?;
    let mut ws = WeightSet::new();
    for e in h.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("unsupported weight dtype `{}`", e.dtype)));
        }
        let len = e.shape.iter().product();
        let data = f32_slice("weights", payload, e.offset, len)?;
        ws.insert(e.name, WeightTensor::new(e.shape, data).map_err(|err| Error::Format(err.to_string()))?);
    }
    Ok(ws)
}

pub fn write_weights(path: impl AsRef<Path>, ws: &WeightSet) -> Result<()> {
    write_file(path.as_ref(), &encode_weights(ws)?)
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightSet> {
    decode_weights(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    node: usize,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    model: QuantizedModel,
    weights: Vec<BlobEntry>,
}

pub fn encode_model(m: &QuantizedModel) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (i, nq) in m.nodes.iter().enumerate() {
        if let Some(w) = &nq.weights {
            for &q in &w.data {
                let q = i32::try_from(q).map_err(|_| Error::Format(format!("weight {q} exceeds 32 bits")))?;
                payload.extend_from_slice(&q.to_le_bytes());
            }
            entries.push(BlobEntry {
                node: i,
                offset,
                len: w.data.len(),
            });
            offset += w.data.len();
        }
    }
    let header = ModelHeader {
        version: FORMAT_VERSION,
        model: m.clone(),
        weights: entries,
    };
    write_container(MODEL_MAGIC, &header, &payload)
}

pub fn decode_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let (h, payload) = read_container("model", MODEL_MAGIC, bytes)?;
    let h: ModelHeader = serde_json::from_value(h)?;
    let mut m = h.model;
    for e in h.weights {
        let bytes = e
            .offset
            .checked_add(e.len)
            .and_then(|end| end.checked_mul(4))
            .filter(|&end| end <= payload.len())
            .map(|end| &payload[e.offset * 4..end])
            .ok_or_else(|| Error::Format("model weight payload is truncated".into()))?;
        let w = m
            .nodes
            .get_mut(e.node)
            .and_then(|n| n.weights.as_mut())
            .ok_or_else(|| Error::Format(format!("weight blob for node {} without weights", e.node)))?;
        w.data = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
            .collect();
    }
    m.validate().map_err(|e| Error::Format(format!("inconsistent model file: {e}")))?;
    Ok(m)
}

pub fn write_model(path: impl AsRef<Path>, m: &QuantizedModel) -> Result<()> {
    write_file(path.as_ref(), &encode_model(m)?)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    decode_model(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    version: u32,
    #[serde(flatten)]
    body: T,
}

/// Pretty JSON with a top-level `version`.
pub fn to_versioned_json<T: Serialize>(body: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Versioned {
        version: FORMAT_VERSION,
        body,
    })?)
}

pub fn from_versioned_json<T: DeserializeOwned>(what: &'static str, s: &str) -> Result<T> {
    let v: serde_json::Value = serde_json::from_str(s)?;
    check_version(what, &v)?;
    let w: Versioned<T> = serde_json::from_value(v)?;
    Ok(w.body)
}

pub fn write_graph(path: impl AsRef<Path>, g: &NetworkGraph) -> Result<()> {
    write_file(path.as_ref(), to_versioned_json(g)?.as_bytes())
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let g: NetworkGraph = from_versioned_json("graph", &fs::read_to_string(path)?)?;
    g.validate().map_err(|e| Error::Format(format!("invalid graph file: {e}")))?;
    Ok(g)
}

pub fn write_calibration(path: impl AsRef<Path>, c: &Calibration) -> Result<()> {
    write_file(path.as_ref(), to_versioned_json(c)?.as_bytes())
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<Calibration> {
    from_versioned_json("calibration", &fs::read_to_string(path)?)
}
