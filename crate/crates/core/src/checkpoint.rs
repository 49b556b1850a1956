//! Binary checkpoint container and the naming conventions for storing
//! compressed layers in it.
//!
//! # On-disk format
//!
//! ```text
//! [ 8 bytes: little-endian u64 header length H ]
//! [ H bytes: UTF-8 JSON header                 ]
//! [ raw little-endian tensor payloads          ]
//! ```
//!
//! The header maps `"__metadata__"` to free-form string pairs and every
//! tensor name to `{"dtype", "shape", "data_offsets": [begin, end)}`, offsets
//! relative to the start of the payload section. Writers emit tensors in
//! sorted name order with contiguous ascending offsets and no padding, so a
//! checkpoint's bytes are a pure function of its contents: the same tensors
//! and metadata serialize to the same bytes no matter the insertion order.
//!
//! Payload dtypes are `"F64" | "F32" | "F16" | "I8"`. Packed 4-bit tensors
//! have no standalone dtype tag; they are stored as a `"U8"` byte blob of the
//! packed nibbles, with the logical shape recorded under the reserved
//! metadata key `__i4shape__.<name>` and restored transparently on read.

use crate::error::{Error, Result};
use crate::mpo::{IndexScheme, MpoLayer};
use crate::quant::{Granularity, QuantizedTensor};
use crate::tensor::{DenseTensor, Dtype};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// Reserved metadata-key prefix for packed-i4 shape records.
const I4_SHAPE_PREFIX: &str = "__i4shape__.";

/// An in-memory checkpoint: named tensors plus string metadata. Both maps
/// are ordered, which is what makes serialization canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, DenseTensor>,
    metadata: BTreeMap<String, String>,
}

fn validate_tensor_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::TensorName("tensor name is empty".into()));
    }
    if !name.is_ascii() || name.bytes().any(|b| b.is_ascii_control()) {
        return Err(Error::TensorName(format!(
            "tensor name {name:?} must be printable ASCII"
        )));
    }
    if name.starts_with("__") {
        return Err(Error::TensorName(format!(
            "tensor name {name:?} uses the reserved __ prefix"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    /// Insert a tensor. Names must be printable ASCII, must not start with
    /// `__`, and must be unique.
    pub fn insert(&mut self, name: &str, tensor: DenseTensor) -> Result<()> {
        validate_tensor_name(name)?;
        if self.tensors.contains_key(name) {
            return Err(Error::TensorName(format!(
                "tensor name collision: {name:?} already present"
            )));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&DenseTensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<DenseTensor> {
        self.tensors.remove(name)
    }

    /// Tensors in sorted name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    /// Set a metadata pair. Keys under the internal `__i4shape__.` namespace
    /// are reserved for the serializer.
    pub fn set_metadata(&mut self, key: &str, value: &str) -> Result<()> {
        if key.starts_with(I4_SHAPE_PREFIX) {
            return Err(Error::TensorName(format!(
                "metadata key {key:?} uses the reserved {I4_SHAPE_PREFIX} prefix"
            )));
        }
        self.metadata.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn remove_metadata(&mut self, key: &str) -> Option<String> {
        self.metadata.remove(key)
    }

    pub fn metadata_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    #[serde(rename = "__metadata__")]
    metadata: &'a BTreeMap<String, String>,
    #[serde(flatten)]
    tensors: BTreeMap<String, HeaderEntry>,
}

fn container_dtype(d: Dtype) -> &'static str {
    match d {
        Dtype::F64 => "F64",
        Dtype::F32 => "F32",
        Dtype::F16 => "F16",
        Dtype::I8 => "I8",
        Dtype::I4Packed => "U8",
    }
}

/// Serialize a checkpoint to its canonical byte form.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut metadata = ckpt.metadata.clone();
    let mut entries = BTreeMap::new();
    let mut payload = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in &ckpt.tensors {
        let bytes = tensor.payload_le_bytes();
        let (dtype, shape) = match tensor.dtype() {
            Dtype::I4Packed => {
                metadata.insert(
                    format!("{I4_SHAPE_PREFIX}{name}"),
                    serde_json::to_string(tensor.shape()).expect("shape serializes"),
                );
                ("U8".to_string(), vec![bytes.len()])
            }
            d => (container_dtype(d).to_string(), tensor.shape().to_vec()),
        };
        let end = offset + bytes.len() as u64;
        entries.insert(
            name.clone(),
            HeaderEntry {
                dtype,
                shape,
                data_offsets: [offset, end],
            },
        );
        payload.extend_from_slice(&bytes);
        offset = end;
    }
    let header = serde_json::to_vec(&HeaderOut {
        metadata: &metadata,
        tensors: entries,
    })
    .map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a checkpoint from bytes, validating the header and every payload
/// range before building tensors.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is too short for the 8-byte header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let rest = &bytes[8..];
    if header_len > rest.len() as u64 {
        return Err(Error::TruncatedFile(format!(
            "header claims {header_len} bytes but only {} remain",
            rest.len()
        )));
    }
    let header = &rest[..header_len as usize];
    let payload = &rest[header_len as usize..];

    let doc: serde_json::Value = serde_json::from_slice(header)
        .map_err(|e| Error::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    let serde_json::Value::Object(map) = doc else {
        return Err(Error::MalformedHeader("header is not a JSON object".into()));
    };

    let mut metadata = BTreeMap::new();
    let mut ranges: Vec<(u64, u64, String)> = Vec::new();
    let mut parsed: Vec<(String, HeaderEntry)> = Vec::new();
    for (key, value) in map {
        if key == "__metadata__" {
            let serde_json::Value::Object(meta) = value else {
                return Err(Error::MalformedHeader("__metadata__ is not an object".into()));
            };
            for (k, v) in meta {
                let serde_json::Value::String(s) = v else {
                    return Err(Error::MalformedHeader(format!(
                        "__metadata__[{k:?}] is not a string"
                    )));
                };
                metadata.insert(k, s);
            }
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("tensor entry {key:?}: {e}")))?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > payload.len() as u64 {
            return Err(Error::OffsetError(format!(
                "{key:?} claims bytes [{begin}, {end}) of a {}-byte payload",
                payload.len()
            )));
        }
        ranges.push((begin, end, key.clone()));
        parsed.push((key, entry));
    }

    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::OffsetError(format!(
                "payloads of {:?} and {:?} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }

    let mut ckpt = Checkpoint::new();
    for (name, entry) in parsed {
        let [begin, end] = entry.data_offsets;
        let data = &payload[begin as usize..end as usize];
        let tensor = match entry.dtype.as_str() {
            "F64" => DenseTensor::from_le_bytes(Dtype::F64, &entry.shape, data)?,
            "F32" => DenseTensor::from_le_bytes(Dtype::F32, &entry.shape, data)?,
            "F16" => DenseTensor::from_le_bytes(Dtype::F16, &entry.shape, data)?,
            "I8" => DenseTensor::from_le_bytes(Dtype::I8, &entry.shape, data)?,
            "U8" => {
                let shape_key = format!("{I4_SHAPE_PREFIX}{name}");
                let Some(shape_json) = metadata.remove(&shape_key) else {
                    return Err(Error::UnknownDtype(format!(
                        "{name:?} is a raw U8 blob without packed-i4 shape metadata"
                    )));
                };
                let shape: Vec<usize> = serde_json::from_str(&shape_json).map_err(|e| {
                    Error::MalformedHeader(format!("bad {shape_key:?} metadata: {e}"))
                })?;
                DenseTensor::from_le_bytes(Dtype::I4Packed, &shape, data)?
            }
            other => {
                return Err(Error::UnknownDtype(format!(
                    "{other:?} (tensor {name:?})"
                )))
            }
        };
        validate_tensor_name(&name)?;
        ckpt.tensors.insert(name, tensor);
    }
    ckpt.metadata = metadata;
    Ok(ckpt)
}

/// Write a file's bytes atomically: a sibling temp file is written, flushed,
/// and renamed over the destination, so readers never observe a partial
/// file. Writers are assumed to have exclusive ownership of the target path.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize and atomically write a checkpoint, returning the byte count.
pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<u64> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    write_bytes_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// Read and validate a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Summary of one tensor in a checkpoint file.
#[derive(Clone, Debug, Serialize)]
pub struct InspectEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub payload_bytes: usize,
}

/// What [`inspect_checkpoint`] reports: per-tensor summaries, metadata, and
/// section sizes.
#[derive(Clone, Debug, Serialize)]
pub struct InspectReport {
    pub tensors: Vec<InspectEntry>,
    pub metadata: BTreeMap<String, String>,
    pub header_bytes: u64,
    pub payload_bytes: u64,
    pub total_bytes: u64,
}

/// Validate a checkpoint file and summarize its contents (logical dtypes
/// and shapes, so packed-i4 tensors report their true geometry).
pub fn inspect_checkpoint(path: &Path) -> Result<InspectReport> {
    let bytes = std::fs::read(path)?;
    let ckpt = checkpoint_from_bytes(&bytes)?;
    let header_bytes = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let tensors = ckpt
        .tensors()
        .map(|(name, t)| InspectEntry {
            name: name.to_string(),
            dtype: t.dtype().name().to_string(),
            shape: t.shape().to_vec(),
            payload_bytes: t.dtype().payload_bytes(t.len()),
        })
        .collect();
    Ok(InspectReport {
        tensors,
        metadata: ckpt.metadata.clone(),
        header_bytes,
        payload_bytes: bytes.len() as u64 - 8 - header_bytes,
        total_bytes: bytes.len() as u64,
    })
}

/// Header-metadata record describing an MPO-compressed layer.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct MpoRecord {
    pub row_factors: Vec<usize>,
    pub col_factors: Vec<usize>,
    pub bond_dims: Vec<usize>,
    pub max_bond: usize,
    pub truncation_error: f64,
    pub dtype: String,
}

/// Store `layer` under the MPO naming convention: cores as
/// `<name>.mpo.core<i>` plus an [`MpoRecord`] under metadata key
/// `<name>.mpo`.
pub fn store_mpo_layer(ckpt: &mut Checkpoint, name: &str, layer: &MpoLayer) -> Result<()> {
    let record = MpoRecord {
        row_factors: layer.scheme().row_factors().to_vec(),
        col_factors: layer.scheme().col_factors().to_vec(),
        bond_dims: layer.bond_dims(),
        max_bond: layer.max_bond(),
        truncation_error: layer.truncation_error(),
        dtype: layer.dtype().name().to_string(),
    };
    for (i, core) in layer.cores().iter().enumerate() {
        ckpt.insert(&format!("{name}.mpo.core{i}"), core.tensor().clone())?;
    }
    ckpt.set_metadata(
        &format!("{name}.mpo"),
        &serde_json::to_string(&record).expect("record serializes"),
    )?;
    Ok(())
}

pub fn has_mpo_layer(ckpt: &Checkpoint, name: &str) -> bool {
    ckpt.metadata(&format!("{name}.mpo")).is_some()
}

/// Load a layer stored by [`store_mpo_layer`], revalidating the chain.
pub fn load_mpo_layer(ckpt: &Checkpoint, name: &str) -> Result<MpoLayer> {
    let meta_key = format!("{name}.mpo");
    let raw = ckpt
        .metadata(&meta_key)
        .ok_or_else(|| Error::MissingTensor(format!("no MPO record for layer {name:?}")))?;
    let record: MpoRecord = serde_json::from_str(raw)
        .map_err(|e| Error::MalformedHeader(format!("bad MPO record for {name:?}: {e}")))?;
    let scheme = IndexScheme::new(record.row_factors, record.col_factors)?;
    let mut cores = Vec::with_capacity(scheme.num_cores());
    for i in 0..scheme.num_cores() {
        let key = format!("{name}.mpo.core{i}");
        let tensor = ckpt
            .tensor(&key)
            .ok_or_else(|| Error::MissingTensor(key.clone()))?;
        cores.push(tensor.clone());
    }
    let layer = MpoLayer::from_parts(cores, scheme, record.max_bond, record.truncation_error)?;
    if layer.dtype().name() != record.dtype {
        return Err(Error::MalformedHeader(format!(
            "MPO record for {name:?} says dtype {} but cores are {}",
            record.dtype,
            layer.dtype().name()
        )));
    }
    if layer.bond_dims() != record.bond_dims {
        return Err(Error::MalformedHeader(format!(
            "MPO record for {name:?} says bond dims {:?} but cores have {:?}",
            record.bond_dims,
            layer.bond_dims()
        )));
    }
    Ok(layer)
}

/// Header-metadata record describing a quantized layer.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct QuantRecord {
    pub bits: u8,
    pub granularity: String,
    pub original_shape: (usize, usize),
}

/// Store a quantized tensor under the quantization naming convention:
/// payload as `<name>.q.data`, scales as `<name>.q.scales`, and a
/// [`QuantRecord`] under metadata key `<name>.q`.
pub fn store_quantized(ckpt: &mut Checkpoint, name: &str, q: &QuantizedTensor) -> Result<()> {
    let record = QuantRecord {
        bits: q.bits(),
        granularity: q.granularity().name().to_string(),
        original_shape: q.original_shape(),
    };
    ckpt.insert(&format!("{name}.q.data"), q.qdata().clone())?;
    ckpt.insert(
        &format!("{name}.q.scales"),
        DenseTensor::from_f32(&[q.scales().len()], q.scales().to_vec())?,
    )?;
    ckpt.set_metadata(
        &format!("{name}.q"),
        &serde_json::to_string(&record).expect("record serializes"),
    )?;
    Ok(())
}

pub fn has_quantized(ckpt: &Checkpoint, name: &str) -> bool {
    ckpt.metadata(&format!("{name}.q")).is_some()
}

/// Load a tensor stored by [`store_quantized`].
pub fn load_quantized(ckpt: &Checkpoint, name: &str) -> Result<QuantizedTensor> {
    let meta_key = format!("{name}.q");
    let raw = ckpt
        .metadata(&meta_key)
        .ok_or_else(|| Error::MissingTensor(format!("no quantization record for {name:?}")))?;
    let record: QuantRecord = serde_json::from_str(raw).map_err(|e| {
        Error::MalformedHeader(format!("bad quantization record for {name:?}: {e}"))
    })?;
    let data_key = format!("{name}.q.data");
    let qdata = ckpt
        .tensor(&data_key)
        .ok_or_else(|| Error::MissingTensor(data_key.clone()))?;
    let scales_key = format!("{name}.q.scales");
    let scales_t = ckpt
        .tensor(&scales_key)
        .ok_or_else(|| Error::MissingTensor(scales_key.clone()))?;
    let scales: Vec<f32> = scales_t.to_f64_vec().iter().map(|&x| x as f32).collect();
    let granularity = Granularity::parse(&record.granularity)?;
    let q = QuantizedTensor::from_parts(qdata.clone(), scales, record.bits, granularity)?;
    if q.original_shape() != record.original_shape {
        return Err(Error::MalformedHeader(format!(
            "quantization record for {name:?} says shape {:?} but payload is {:?}",
            record.original_shape,
            q.original_shape()
        )));
    }
    Ok(q)
}
