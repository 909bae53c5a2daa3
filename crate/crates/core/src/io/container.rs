//! Array container: a text header, a JSON manifest describing every array,
//! then the raw little-endian payloads in manifest order.
//!
//! ```text
//! DSXAI-CONTAINER 1\n
//! <manifest byte length>\n
//! <manifest JSON>\n
//! <payload bytes>
//! ```
//!
//! Array offsets are relative to the first payload byte. Arrays are
//! row-major; `f32` is the default element type, `f64` is used for fitted
//! parameters that must survive a round trip at full precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "DSXAI-CONTAINER";
pub const FORMAT_VERSION: u32 = 1;
/// Manifests larger than this are rejected before parsing.
const MAX_MANIFEST: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_type(&self) -> ElementType {
        match self {
            ArrayData::F32(_) => ElementType::F32,
            ArrayData::F64(_) => ElementType::F64,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: ElementType, bytes: &[u8]) -> Self {
        match dtype {
            ElementType::F32 => ArrayData::F32(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            ElementType::F64 => ArrayData::F64(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
        }
    }

    /// Bitwise equality (NaN payloads and signed zeros included).
    pub fn bits_eq(&self, other: &ArrayData) -> bool {
        match (self, other) {
            (ArrayData::F32(a), ArrayData::F32(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (ArrayData::F64(a), ArrayData::F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Input(format!("array {name}: shape {shape:?} holds {numel} values, data has {}", data.len())));
        }
        Ok(Self { name, shape, data })
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, ArrayData::F32(data))
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, ArrayData::F64(data))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: ElementType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// What the container holds, e.g. "predictors" or "model".
    pub kind: String,
    pub arrays: Vec<ArrayEntry>,
    /// Geometry, channels, time axis, mask, provenance and anything else a
    /// reader needs, keyed by name.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub arrays: Vec<NamedArray>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self { kind: kind.into(), arrays: Vec::new(), metadata: BTreeMap::new() }
    }

    pub fn push(&mut self, array: NamedArray) -> &mut Self {
        self.arrays.push(array);
        self
    }

    pub fn set_meta<V: Serialize>(&mut self, key: &str, value: &V) -> Result<&mut Self> {
        let v = serde_json::to_value(value).map_err(|e| Error::Internal(format!("metadata {key}: {e}")))?;
        self.metadata.insert(key.to_string(), v);
        Ok(self)
    }

    pub fn meta<V: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<V> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Input(format!("{} container has no '{key}' metadata", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Input(format!("{} container metadata '{key}': {e}", self.kind)))
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Input(format!("{} container has no array '{name}'", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Input(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names: Vec<&str> = self.arrays.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate array names in container".into()));
        }
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for a in &self.arrays {
            let numel: usize = a.shape.iter().product();
            if numel != a.data.len() {
                return Err(Error::Input(format!("array {}: shape does not match data", a.name)));
            }
            let nbytes = (a.data.len() * a.data.element_type().size()) as u64;
            entries.push(ArrayEntry { name: a.name.clone(), dtype: a.data.element_type(), shape: a.shape.clone(), offset, nbytes });
            offset += nbytes;
        }
        let manifest = Manifest { format_version: FORMAT_VERSION, kind: self.kind.clone(), arrays: entries, metadata: self.metadata.clone() };
        let json = serde_json::to_string(&manifest).map_err(|e| Error::Internal(format!("manifest: {e}")))?;
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n{json}\n", json.len()).into_bytes();
        out.reserve(offset as usize);
        for a in &self.arrays {
            a.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, pos) = line(bytes, 0)?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::format("not a container file (bad magic)", 0))?;
        let version: u32 = version.parse().map_err(|_| Error::format(format!("bad version '{version}'"), MAGIC.len() as u64 + 1))?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported format version {version} (reader supports {FORMAT_VERSION})"), MAGIC.len() as u64 + 1));
        }
        let (len_text, manifest_start) = line(bytes, pos)?;
        let len: usize = len_text.parse().map_err(|_| Error::format(format!("bad manifest length '{len_text}'"), pos as u64))?;
        if len > MAX_MANIFEST {
            return Err(Error::format(format!("manifest length {len} too large"), pos as u64));
        }
        let manifest_end = manifest_start
            .checked_add(len)
            .filter(|&e| e < bytes.len())
            .ok_or_else(|| Error::format(format!("manifest of {len} bytes runs past the end of the file"), bytes.len() as u64))?;
        if bytes[manifest_end] != b'\n' {
            return Err(Error::format("manifest not terminated by a newline", manifest_end as u64));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..manifest_end]).map_err(|e| {
            Error::format(format!("manifest JSON: {e}"), (manifest_start + e.column().saturating_sub(1)) as u64)
        })?;
        if manifest.format_version != version {
            return Err(Error::format("manifest version differs from the header", manifest_start as u64));
        }
        let payload_start = manifest_end + 1;
        let payload = &bytes[payload_start..];

        // validate every entry before reading any payload
        let mut expected = 0u64;
        for e in &manifest.arrays {
            let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let want = numel.and_then(|n| n.checked_mul(e.dtype.size() as u64));
            if want != Some(e.nbytes) {
                return Err(Error::format(format!("array {}: shape {:?} inconsistent with {} bytes", e.name, e.shape, e.nbytes), manifest_start as u64));
            }
            if e.offset != expected {
                return Err(Error::format(format!("array {}: offset {} where {expected} was expected", e.name, e.offset), manifest_start as u64));
            }
            expected += e.nbytes;
        }
        if (payload.len() as u64) < expected {
            return Err(Error::format(
                format!("payload truncated: manifest declares {expected} bytes, file holds {}", payload.len()),
                bytes.len() as u64,
            ));
        }
        if payload.len() as u64 > expected {
            return Err(Error::format(
                format!("{} trailing bytes after the declared payload", payload.len() as u64 - expected),
                payload_start as u64 + expected,
            ));
        }
        let arrays = manifest
            .arrays
            .iter()
            .map(|e| {
                let b = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
                NamedArray { name: e.name.clone(), shape: e.shape.clone(), data: ArrayData::read_le(e.dtype, b) }
            })
            .collect();
        Ok(Self { kind: manifest.kind, arrays, metadata: manifest.metadata })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Bitwise equality of arrays plus equal metadata.
    pub fn bits_eq(&self, other: &Container) -> bool {
        self.kind == other.kind
            && self.metadata == other.metadata
            && self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.bits_eq(&b.data))
    }
}

fn line(bytes: &[u8], start: usize) -> Result<(&str, usize)> {
    let rest = bytes.get(start..).unwrap_or_default();
    let end = rest
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header line missing or too long", start as u64))?;
    let text = std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("header is not UTF-8", start as u64))?;
    Ok((text, start + end + 1))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.partial", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::Input(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Input(format!("cannot move {} into place: {e}", path.display()))
    })
}
