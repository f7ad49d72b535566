//! Flat parameter storage with a shape manifest.
//!
//! Every forecaster's trainable weights live in one flat `f64` array plus an
//! ordered manifest of `(tensor name, shape)` entries. The manifest order is
//! fixed: LSTM input weights, LSTM recurrent weights, LSTM biases, then
//! weight/bias pairs for fc1, fc2, and the output layer. Keeping weights flat
//! makes averaging, checksumming, and serialization trivial.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("manifest expects {expected} values but {actual} were provided")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("tensor `{0}` not present in manifest")]
    UnknownTensor(String),
    #[error("manifests differ: `{left}` vs `{right}`")]
    ManifestMismatch { left: String, right: String },
    #[error("parameter vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One named tensor: its manifest entry and flat length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorShape {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self { name: name.into(), shape }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of tensor shapes describing one flat value array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest(Vec<TensorShape>);

impl Manifest {
    pub fn new(entries: Vec<TensorShape>) -> Self {
        Self(entries)
    }

    pub fn entries(&self) -> &[TensorShape] {
        &self.0
    }

    /// Total number of values the manifest describes.
    pub fn total_len(&self) -> usize {
        self.0.iter().map(TensorShape::len).sum()
    }

    /// Offset of a named tensor within the flat array.
    pub fn offset_of(&self, name: &str) -> Result<(usize, usize), ParamError> {
        let mut offset = 0;
        for entry in &self.0 {
            if entry.name == name {
                return Ok((offset, entry.len()));
            }
            offset += entry.len();
        }
        Err(ParamError::UnknownTensor(name.to_string()))
    }
}

/// Flat array of all trainable weights of one forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    manifest: Manifest,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, manifest: Manifest) -> Result<Self, ParamError> {
        let expected = manifest.total_len();
        if values.len() != expected {
            return Err(ParamError::LengthMismatch { expected, actual: values.len() });
        }
        Ok(Self { values, manifest })
    }

    pub fn zeros(manifest: Manifest) -> Self {
        let len = manifest.total_len();
        Self { values: vec![0.0; len], manifest }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.manifest.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Borrow one named tensor as a flat slice.
    pub fn tensor(&self, name: &str) -> Result<&[f64], ParamError> {
        let (offset, len) = self.manifest.offset_of(name)?;
        Ok(&self.values[offset..offset + len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [f64], ParamError> {
        let (offset, len) = self.manifest.offset_of(name)?;
        Ok(&mut self.values[offset..offset + len])
    }

    /// All tensors in manifest order.
    pub fn tensors(&self) -> Vec<(&TensorShape, &[f64])> {
        let mut out = Vec::with_capacity(self.manifest.entries().len());
        let mut offset = 0;
        for entry in self.manifest.entries() {
            out.push((entry, &self.values[offset..offset + entry.len()]));
            offset += entry.len();
        }
        out
    }

    /// Rebuild a vector from tensors in manifest order.
    pub fn from_tensors(parts: &[(TensorShape, Vec<f64>)]) -> Result<Self, ParamError> {
        let mut values = Vec::new();
        let mut entries = Vec::with_capacity(parts.len());
        for (entry, data) in parts {
            if entry.len() != data.len() {
                return Err(ParamError::LengthMismatch { expected: entry.len(), actual: data.len() });
            }
            entries.push(entry.clone());
            values.extend_from_slice(data);
        }
        Ok(Self { values, manifest: Manifest::new(entries) })
    }

    pub fn same_manifest(&self, other: &Self) -> bool {
        self.manifest == other.manifest
    }

    pub fn ensure_same_manifest(&self, other: &Self) -> Result<(), ParamError> {
        if self.same_manifest(other) {
            Ok(())
        } else {
            Err(ParamError::ManifestMismatch {
                left: manifest_summary(&self.manifest),
                right: manifest_summary(&other.manifest),
            })
        }
    }

    pub fn ensure_finite(&self) -> Result<(), ParamError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(idx) => Err(ParamError::NonFinite(idx)),
            None => Ok(()),
        }
    }

    /// SHA-256 over the little-endian byte image of the value array, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Checkpoint format: one JSON header line (manifest + value count,
    /// optionally free-form metadata), then the values as little-endian f64
    /// bytes.
    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), ParamError> {
        self.write_with_meta(writer, None)
    }

    pub fn write_with_meta<W: Write>(
        &self,
        mut writer: W,
        meta: Option<std::collections::BTreeMap<String, String>>,
    ) -> Result<(), ParamError> {
        let header =
            CheckpointHeader { manifest: self.manifest.clone(), count: self.values.len(), meta };
        let mut line = serde_json::to_string(&header)
            .map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        line.push('\n');
        writer.write_all(line.as_bytes())?;
        for v in &self.values {
            writer.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self, ParamError> {
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            reader.read_exact(&mut byte).map_err(|_| {
                ParamError::Checkpoint("truncated header line".to_string())
            })?;
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
        }
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        if header.manifest.total_len() != header.count {
            return Err(ParamError::Checkpoint(
                "header count disagrees with manifest".to_string(),
            ));
        }
        let mut buf = vec![0u8; header.count * 8];
        reader.read_exact(&mut buf).map_err(|_| {
            ParamError::Checkpoint("truncated value block".to_string())
        })?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(values, header.manifest)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ParamError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn save_with_meta(
        &self,
        path: &std::path::Path,
        meta: std::collections::BTreeMap<String, String>,
    ) -> Result<(), ParamError> {
        let file = std::fs::File::create(path)?;
        self.write_with_meta(std::io::BufWriter::new(file), Some(meta))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ParamError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    manifest: Manifest,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<std::collections::BTreeMap<String, String>>,
}

fn manifest_summary(m: &Manifest) -> String {
    m.entries()
        .iter()
        .map(|e| format!("{}{:?}", e.name, e.shape))
        .collect::<Vec<_>>()
        .join(",")
}
