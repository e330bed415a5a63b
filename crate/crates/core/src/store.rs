//! On-disk model container: `<path>.manifest.json` plus `<path>.bin`.
//!
//! The manifest lists every record with its shape, dtype and byte offset into the
//! blob. Values are little-endian, row-major, concatenated in manifest order with
//! no padding. The manifest is written with sorted keys so identical models give
//! byte-identical files.
//!
//! Layer records are named `blocks.{b}.{kind}` with kinds ordered
//! `q, k, v, o, up, gate, down`; `layer_index = 7·b + kind_position`.
//! Quantized layers are int8 records pointing at an fp32 companion
//! `<name>.scales` through `scale_ref`. Records flagged `aux` (embeddings,
//! output head) sit outside the layer axis.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{Axis, GroupingScheme, QuantParams, QuantizedTensor};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const LAYERS_PER_BLOCK: usize = 7;
pub const SCALES_SUFFIX: &str = ".scales";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LayerKind {
    pub const ALL: [LayerKind; LAYERS_PER_BLOCK] = [
        LayerKind::Q,
        LayerKind::K,
        LayerKind::V,
        LayerKind::O,
        LayerKind::Up,
        LayerKind::Gate,
        LayerKind::Down,
    ];

    pub fn position(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Q => "q",
            LayerKind::K => "k",
            LayerKind::V => "v",
            LayerKind::O => "o",
            LayerKind::Up => "up",
            LayerKind::Gate => "gate",
            LayerKind::Down => "down",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown layer kind `{s}`")))
    }
}

/// A position on the layer axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }

    pub fn index(self) -> usize {
        LAYERS_PER_BLOCK * self.block + self.kind.position()
    }

    pub fn from_index(index: usize) -> Self {
        Self {
            block: index / LAYERS_PER_BLOCK,
            kind: LayerKind::ALL[index % LAYERS_PER_BLOCK],
        }
    }

    pub fn name(self) -> String {
        format!("blocks.{}.{}", self.block, self.kind)
    }

    /// Parses `blocks.{b}.{kind}`; anything else is `None`.
    pub fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("blocks.")?;
        let (block, kind) = rest.split_once('.')?;
        if block.is_empty() || !block.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if block.len() > 1 && block.starts_with('0') {
            return None;
        }
        Some(Self {
            block: block.parse().ok()?,
            kind: kind.parse().ok()?,
        })
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "fp32")]
    F32,
    #[serde(rename = "int8")]
    I8,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
    pub byte_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_ref: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub aux: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<GroupingScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<QuantParams>,
}

impl TensorRecord {
    pub fn byte_len(&self) -> Option<u64> {
        (self.shape[0] as u64)
            .checked_mul(self.shape[1] as u64)?
            .checked_mul(self.dtype.size())
    }

    pub fn layer_id(&self) -> Option<LayerId> {
        if self.aux {
            None
        } else {
            LayerId::parse(&self.name)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub blocks: usize,
    pub records: Vec<TensorRecord>,
}

/// Tensor payload as stored in the blob.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|x| *x as u8)),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|b| *b as i8).collect()),
        }
    }
}

/// A named record payload, fp32 or int8.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: TensorData,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        StoredTensor {
            name: t.name.clone(),
            shape: [t.rows, t.cols],
            data: TensorData::F32(t.data.clone()),
        }
    }
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.data {
            TensorData::F32(v) => Tensor::new(self.name.clone(), self.shape[0], self.shape[1], v.clone()),
            TensorData::I8(_) => Err(Error::validation(format!(
                "record `{}` is int8, expected fp32",
                self.name
            ))),
        }
    }
}

impl ModelManifest {
    /// Lays `tensors` out contiguously in the given order.
    pub fn layout(blocks: usize, tensors: &[StoredTensor]) -> Self {
        let mut offset = 0u64;
        let records = tensors
            .iter()
            .map(|t| {
                let rec = TensorRecord {
                    name: t.name.clone(),
                    shape: t.shape,
                    dtype: t.data.dtype(),
                    byte_offset: offset,
                    scale_ref: None,
                    aux: false,
                    grouping: None,
                    bits: None,
                };
                offset += rec.byte_len().unwrap_or(0);
                rec
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            blocks,
            records,
        }
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn record_mut(&mut self, name: &str) -> Option<&mut TensorRecord> {
        self.records.iter_mut().find(|r| r.name == name)
    }

    /// Sum of record byte spans.
    pub fn blob_len(&self) -> u64 {
        self.records.iter().filter_map(|r| r.byte_len()).sum()
    }

    /// Layer records sorted by layer index.
    pub fn layers(&self) -> Vec<(LayerId, &TensorRecord)> {
        let mut out: Vec<_> = self
            .records
            .iter()
            .filter_map(|r| r.layer_id().map(|id| (id, r)))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }

    /// Checks every structural invariant; with `blob_len`, also that each record
    /// fits inside the blob.
    pub fn validate(&self, blob_len: Option<u64>) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::validation(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.blocks == 0 {
            return Err(Error::validation("manifest must have at least one block"));
        }

        let mut names = BTreeSet::new();
        for r in &self.records {
            if !names.insert(r.name.as_str()) {
                return Err(Error::validation(format!("duplicate record name `{}`", r.name)));
            }
            if r.shape[0] == 0 || r.shape[1] == 0 {
                return Err(Error::validation(format!(
                    "record `{}` has empty shape {:?}",
                    r.name, r.shape
                )));
            }
        }

        let mut spans = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let end = r
                .byte_len()
                .and_then(|len| r.byte_offset.checked_add(len))
                .ok_or_else(|| Error::validation(format!("record `{}` size overflows", r.name)))?;
            if let Some(blob_len) = blob_len {
                if end > blob_len {
                    return Err(Error::BlobUnderrun {
                        record: r.name.clone(),
                        start: r.byte_offset,
                        end,
                        blob_len,
                    });
                }
            }
            spans.push((r.byte_offset, end, r.name.as_str()));
        }
        spans.sort();
        for pair in spans.windows(2) {
            let (_, prev_end, prev) = pair[0];
            let (start, _, next) = pair[1];
            if start < prev_end {
                return Err(Error::validation(format!(
                    "records `{prev}` and `{next}` overlap in the blob"
                )));
            }
        }

        self.validate_layers()
    }

    fn validate_layers(&self) -> Result<()> {
        let by_name: HashMap<&str, &TensorRecord> =
            self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut seen = vec![false; LAYERS_PER_BLOCK * self.blocks];
        let mut scale_records = BTreeSet::new();

        for r in &self.records {
            let Some(id) = r.layer_id() else { continue };
            if id.block >= self.blocks {
                return Err(Error::validation(format!(
                    "record `{}` is outside the manifest's {} blocks",
                    r.name, self.blocks
                )));
            }
            seen[id.index()] = true;

            match r.dtype {
                DType::F32 => {
                    if r.scale_ref.is_some() {
                        return Err(Error::validation(format!(
                            "fp32 record `{}` must not carry a scale_ref",
                            r.name
                        )));
                    }
                }
                DType::I8 => {
                    let (Some(scale_name), Some(grouping)) = (&r.scale_ref, r.grouping) else {
                        return Err(Error::validation(format!(
                            "int8 record `{}` needs scale_ref and grouping",
                            r.name
                        )));
                    };
                    grouping.validate(r.shape[1]).map_err(|e| {
                        Error::validation(format!("record `{}`: {e}", r.name))
                    })?;
                    let scales = by_name.get(scale_name.as_str()).ok_or_else(|| {
                        Error::validation(format!(
                            "record `{}` references missing scale record `{scale_name}`",
                            r.name
                        ))
                    })?;
                    let expected = [r.shape[0], grouping.groups_per_row(r.shape[1])];
                    if scales.dtype != DType::F32 || scales.shape != expected {
                        return Err(Error::validation(format!(
                            "scale record `{scale_name}` must be fp32 with shape {expected:?}"
                        )));
                    }
                    scale_records.insert(scale_name.as_str());
                }
            }
        }

        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!(
                "manifest with {} blocks is missing layer `{}` ({} of {} layers present)",
                self.blocks,
                LayerId::from_index(missing),
                seen.iter().filter(|s| **s).count(),
                seen.len()
            )));
        }

        for r in &self.records {
            let classified =
                r.aux || r.layer_id().is_some() || scale_records.contains(r.name.as_str());
            if !classified {
                return Err(Error::validation(format!(
                    "record `{}` is neither a layer, a referenced scale record, nor aux",
                    r.name
                )));
            }
        }
        Ok(())
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".manifest.json")
}

pub fn blob_path(path: &Path) -> PathBuf {
    with_suffix(path, ".bin")
}

/// Serializes any value as JSON with object keys sorted and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    // serde_json::Value stores objects in a BTreeMap, so routing through it sorts keys.
    let value = serde_json::to_value(value)
        .map_err(|e| Error::validation(format!("cannot serialize: {e}")))?;
    let mut out = serde_json::to_vec_pretty(&value)
        .map_err(|e| Error::validation(format!("cannot serialize: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes `bytes` to `path` through a temp file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes `<path>.manifest.json` and `<path>.bin`.
pub fn write_model(manifest: &ModelManifest, tensors: &[StoredTensor], path: &Path) -> Result<()> {
    let mut by_name: BTreeMap<&str, &StoredTensor> = BTreeMap::new();
    for t in tensors {
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(Error::validation(format!("duplicate input tensor `{}`", t.name)));
        }
    }
    let manifest_names: BTreeSet<&str> = manifest.records.iter().map(|r| r.name.as_str()).collect();
    if let Some(extra) = by_name.keys().find(|n| !manifest_names.contains(*n)) {
        return Err(Error::validation(format!(
            "input tensor `{extra}` has no manifest record"
        )));
    }

    manifest.validate(None)?;

    let mut blob = Vec::with_capacity(manifest.blob_len() as usize);
    for r in &manifest.records {
        let t = by_name.get(r.name.as_str()).ok_or_else(|| {
            Error::validation(format!("manifest names tensor `{}` absent from the input", r.name))
        })?;
        if t.shape != r.shape || t.data.dtype() != r.dtype {
            return Err(Error::validation(format!(
                "tensor `{}` is {:?} {:?} but its record says {:?} {:?}",
                r.name,
                t.data.dtype(),
                t.shape,
                r.dtype,
                r.shape
            )));
        }
        if t.data.len() != r.shape[0] * r.shape[1] {
            return Err(Error::validation(format!(
                "tensor `{}` holds {} values for shape {:?}",
                r.name,
                t.data.len(),
                r.shape
            )));
        }
        if r.byte_offset != blob.len() as u64 {
            return Err(Error::validation(format!(
                "record `{}` has byte_offset {} but manifest order places it at {}",
                r.name,
                r.byte_offset,
                blob.len()
            )));
        }
        t.data.write_le(&mut blob);
    }

    write_atomic(&blob_path(path), &blob)?;
    write_atomic(&manifest_path(path), &to_sorted_json(manifest)?)?;
    Ok(())
}

/// Reads a model written by [`write_model`], validating the manifest against the blob.
pub fn read_model(path: &Path) -> Result<(ModelManifest, Vec<StoredTensor>)> {
    let mpath = manifest_path(path);
    let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ModelManifest = serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    let bpath = blob_path(path);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    manifest.validate(Some(blob.len() as u64))?;

    let tensors = manifest
        .records
        .iter()
        .map(|r| {
            let start = r.byte_offset as usize;
            let end = start + r.byte_len().unwrap_or(0) as usize;
            StoredTensor {
                name: r.name.clone(),
                shape: r.shape,
                data: TensorData::read_le(r.dtype, &blob[start..end]),
            }
        })
        .collect();
    Ok((manifest, tensors))
}

/// An fp32 model: the `7·B` layer tensors in layer-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FpModel {
    pub blocks: usize,
    pub layers: Vec<Tensor>,
}

impl FpModel {
    /// Sorts `layers` by layer index and checks the set is exactly `7·blocks` layers.
    pub fn new(blocks: usize, mut layers: Vec<Tensor>) -> Result<Self> {
        let mut keyed = Vec::with_capacity(layers.len());
        for t in layers.drain(..) {
            let id = LayerId::parse(&t.name)
                .ok_or_else(|| Error::validation(format!("`{}` is not a layer name", t.name)))?;
            keyed.push((id.index(), t));
        }
        keyed.sort_by_key(|(i, _)| *i);
        let layers: Vec<Tensor> = keyed.into_iter().map(|(_, t)| t).collect();
        let model = Self { blocks, layers };
        let (manifest, _) = model.to_store();
        manifest.validate(None)?;
        Ok(model)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        (0..self.layers.len()).map(LayerId::from_index)
    }

    pub fn layer(&self, id: LayerId) -> Option<&Tensor> {
        self.layers.get(id.index())
    }

    pub fn to_store(&self) -> (ModelManifest, Vec<StoredTensor>) {
        let tensors: Vec<StoredTensor> = self.layers.iter().map(StoredTensor::from).collect();
        (ModelManifest::layout(self.blocks, &tensors), tensors)
    }

    /// Collects the fp32 layer records; aux records are skipped.
    pub fn from_store(manifest: &ModelManifest, tensors: &[StoredTensor]) -> Result<Self> {
        let by_name: HashMap<&str, &StoredTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let layers = manifest
            .layers()
            .into_iter()
            .map(|(_, r)| {
                by_name
                    .get(r.name.as_str())
                    .ok_or_else(|| Error::validation(format!("missing tensor `{}`", r.name)))?
                    .to_tensor()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.blocks, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest, tensors) = self.to_store();
        write_model(&manifest, &tensors, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = read_model(path)?;
        Self::from_store(&manifest, &tensors)
    }
}

/// A quantized model: one row-wise [`QuantizedTensor`] per layer, in layer-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub blocks: usize,
    pub layers: Vec<QuantizedTensor>,
}

impl QuantizedModel {
    /// Each layer becomes an int8 record followed by its fp32 `.scales` record.
    pub fn to_store(&self) -> (ModelManifest, Vec<StoredTensor>) {
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for q in &self.layers {
            tensors.push(StoredTensor {
                name: q.name.clone(),
                shape: [q.rows, q.cols],
                data: TensorData::I8(q.values.clone()),
            });
            tensors.push(StoredTensor {
                name: format!("{}{SCALES_SUFFIX}", q.name),
                shape: [q.rows, q.groups_per_row()],
                data: TensorData::F32(q.scales.clone()),
            });
        }
        let mut manifest = ModelManifest::layout(self.blocks, &tensors);
        for (rec, q) in manifest.records.chunks_exact_mut(2).zip(&self.layers) {
            rec[0].scale_ref = Some(rec[1].name.clone());
            rec[0].grouping = Some(q.grouping);
            rec[0].bits = Some(q.params);
        }
        (manifest, tensors)
    }

    pub fn from_store(manifest: &ModelManifest, tensors: &[StoredTensor]) -> Result<Self> {
        manifest.validate(None)?;
        let by_name: HashMap<&str, &StoredTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let get = |name: &str| {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::validation(format!("missing tensor `{name}`")))
        };
        let layers = manifest
            .layers()
            .into_iter()
            .map(|(_, r)| {
                let (TensorData::I8(values), Some(scale_ref), Some(grouping)) =
                    (&get(&r.name)?.data, &r.scale_ref, r.grouping)
                else {
                    return Err(Error::validation(format!(
                        "layer `{}` is not a quantized record",
                        r.name
                    )));
                };
                let TensorData::F32(scales) = &get(scale_ref)?.data else {
                    return Err(Error::validation(format!("`{scale_ref}` is not fp32")));
                };
                let q = QuantizedTensor {
                    name: r.name.clone(),
                    rows: r.shape[0],
                    cols: r.shape[1],
                    values: values.clone(),
                    scales: scales.clone(),
                    grouping,
                    params: r.bits.unwrap_or_default(),
                    axis: Axis::RowWise,
                };
                q.validate()?;
                Ok(q)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks: manifest.blocks,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest, tensors) = self.to_store();
        write_model(&manifest, &tensors, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = read_model(path)?;
        Self::from_store(&manifest, &tensors)
    }
}
