//! Reading and writing safetensors-compatible checkpoint files.
//!
//! Layout: `[u64 little-endian N][N bytes of UTF-8 JSON][data region]`. The
//! JSON maps tensor names to `{"dtype", "shape", "data_offsets"}` and may carry
//! a `"__metadata__"` string table. Offsets are relative to the data region.
//!
//! The reader accepts any non-overlapping layout. The writer always emits the
//! canonical one: tensors sorted by name, contiguous, header space-padded to a
//! multiple of 8 bytes.

mod dtype;
mod header;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use dtype::{
    bf16_bits_to_f32, convert_scalar, decode_scalar, decode_slice, encode_slice,
    f16_bits_to_f32, f32_to_bf16_bits, f32_to_f16_bits, round_trip, DType, Encoded,
    BF16_QUIET_NAN, F16_QUIET_NAN,
};
pub use header::{encode_header, parse_header, read_header, Header, TensorMeta, METADATA_KEY};

#[derive(Debug, Error)]
pub enum TensorStoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated stream at byte {position}: need {needed} bytes, {available} available")]
    Truncated {
        position: u64,
        needed: u64,
        available: u64,
    },
    #[error("declared header length {header_len} exceeds the supported maximum")]
    HeaderTooLarge { header_len: u64 },
    #[error("header is not valid UTF-8 (byte {position})")]
    InvalidUtf8 { position: u64 },
    #[error("malformed header JSON at line {line}, column {column}: {message}")]
    MalformedJson {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("tensor {name:?}: unsupported dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {name:?}: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("duplicate tensor name {name:?}")]
    DuplicateName { name: String },
    #[error("tensor {name:?}: offsets [{begin}, {end}) outside data region of {data_len} bytes")]
    OffsetOutOfRange {
        name: String,
        begin: u64,
        end: u64,
        data_len: u64,
    },
    #[error("tensors {first:?} and {second:?} have overlapping data offsets")]
    OffsetOverlap { first: String, second: String },
    #[error("tensor {name:?}: byte length {actual} does not match shape and dtype ({expected})")]
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {name:?}: {values} values for shape {shape:?}")]
    ValueCount {
        name: String,
        values: usize,
        shape: Vec<u64>,
    },
}

impl TensorStoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TensorStoreError::Io {
            path: path.into(),
            source,
        }
    }
}

/// A tensor held at f32 working precision, remembering its stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub dtype: DType,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, dtype: DType, values: Vec<f32>) -> Self {
        Tensor {
            shape,
            dtype,
            values,
        }
    }

    /// A 1-D f32 tensor.
    pub fn from_vec(values: Vec<f32>) -> Self {
        Tensor {
            shape: vec![values.len() as u64],
            dtype: DType::F32,
            values,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.values.len()
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors with lexicographic iteration order, plus optional file metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightMap {
    tensors: BTreeMap<String, Tensor>,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, checking that its value count matches its shape.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorStoreError> {
        let name = name.into();
        let expected = tensor.shape.iter().product::<u64>();
        if name.is_empty() {
            return Err(TensorStoreError::InvalidEntry {
                name,
                reason: "empty tensor name".into(),
            });
        }
        if expected != tensor.values.len() as u64 {
            return Err(TensorStoreError::ValueCount {
                name,
                values: tensor.values.len(),
                shape: tensor.shape,
            });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::num_elements).sum()
    }

    /// Bitwise equality of every tensor (metadata ignored).
    pub fn bit_eq(&self, other: &WeightMap) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub(crate) fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        WeightMap {
            tensors,
            metadata: None,
        }
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl FromIterator<(String, Tensor)> for WeightMap {
    /// Collects without shape validation; callers guarantee consistent tensors.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        WeightMap::from_tensors(iter.into_iter().collect())
    }
}

/// Diagnostics gathered while loading a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Tensors containing at least one NaN.
    pub nan_tensors: Vec<String>,
}

/// How stored dtypes are chosen on write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DtypePolicy {
    /// Each tensor keeps the dtype recorded in its [`Tensor::dtype`].
    #[default]
    Preserve,
    /// Every tensor is written with this dtype.
    Force(DType),
}

impl DtypePolicy {
    pub fn target(self, original: DType) -> DType {
        match self {
            DtypePolicy::Preserve => original,
            DtypePolicy::Force(d) => d,
        }
    }

    /// Applies the store/load rounding this policy implies to every value.
    pub fn apply(self, weights: &WeightMap) -> WeightMap {
        let tensors = weights
            .iter()
            .map(|(name, t)| {
                let dtype = self.target(t.dtype);
                let values = t.values.iter().map(|&v| round_trip(v, dtype)).collect();
                (name.clone(), Tensor::new(t.shape.clone(), dtype, values))
            })
            .collect();
        WeightMap {
            tensors,
            metadata: weights.metadata.clone(),
        }
    }
}

/// Decodes a complete file image into a [`WeightMap`].
pub fn decode_weights(bytes: &[u8]) -> Result<(WeightMap, LoadReport), TensorStoreError> {
    let header = parse_header(bytes)?;
    let data = &bytes[header.data_start() as usize..];
    let decoded: Vec<(String, Tensor)> = header
        .tensors
        .par_iter()
        .map(|meta| {
            let (begin, end) = meta.data_offsets;
            let values = decode_slice(&data[begin as usize..end as usize], meta.dtype);
            (
                meta.name.clone(),
                Tensor::new(meta.shape.clone(), meta.dtype, values),
            )
        })
        .collect();
    let report = LoadReport {
        nan_tensors: decoded
            .iter()
            .filter(|(_, t)| t.has_nan())
            .map(|(n, _)| n.clone())
            .collect(),
    };
    let mut weights = WeightMap::from_tensors(decoded.into_iter().collect());
    weights.metadata = header.metadata;
    Ok((weights, report))
}

/// Loads a checkpoint, returning the NaN report alongside the weights.
pub fn load_weights_with_report(
    path: impl AsRef<Path>,
) -> Result<(WeightMap, LoadReport), TensorStoreError> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| TensorStoreError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| TensorStoreError::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads a checkpoint at f32 working precision. NaN-bearing tensors are logged, not rejected.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightMap, TensorStoreError> {
    let path = path.as_ref();
    let (weights, report) = load_weights_with_report(path)?;
    for name in &report.nan_tensors {
        log::warn!("{}: tensor {name:?} contains NaN values", path.display());
    }
    Ok(weights)
}

/// Serializes weights into the canonical file image.
pub fn encode_weights(weights: &WeightMap, policy: DtypePolicy) -> Vec<u8> {
    let encoded: Vec<(TensorMeta, Vec<u8>)> = weights
        .tensors
        .par_iter()
        .map(|(name, t)| {
            let dtype = policy.target(t.dtype);
            let bytes = encode_slice(&t.values, dtype);
            let meta = TensorMeta {
                name: name.clone(),
                dtype,
                shape: t.shape.clone(),
                data_offsets: (0, bytes.len() as u64),
            };
            (meta, bytes)
        })
        .collect();

    let mut offset = 0u64;
    let metas: Vec<TensorMeta> = encoded
        .iter()
        .map(|(meta, bytes)| {
            let mut m = meta.clone();
            m.data_offsets = (offset, offset + bytes.len() as u64);
            offset += bytes.len() as u64;
            m
        })
        .collect();

    let mut out = encode_header(&metas, weights.metadata.as_ref());
    out.reserve(offset as usize);
    for (_, bytes) in &encoded {
        out.extend_from_slice(bytes);
    }
    out
}

/// Writes weights to `path` in canonical layout.
pub fn store_weights(
    weights: &WeightMap,
    path: impl AsRef<Path>,
    policy: DtypePolicy,
) -> Result<(), TensorStoreError> {
    let path = path.as_ref();
    let bytes = encode_weights(weights, policy);
    let file = File::create(path).map_err(|e| TensorStoreError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&bytes)
        .and_then(|_| writer.flush())
        .map_err(|e| TensorStoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightMap {
        let mut w = WeightMap::new();
        w.insert("b.bias", Tensor::new(vec![3], DType::F32, vec![0.1, -0.0, 7.5]))
            .unwrap();
        w.insert(
            "a.weight",
            Tensor::new(vec![2, 2], DType::BF16, vec![1.0, 2.0, -3.0, 0.5]),
        )
        .unwrap();
        w.insert("c.half", Tensor::new(vec![1], DType::F16, vec![0.25]))
            .unwrap();
        w
    }

    #[test]
    fn f32_round_trip_is_bitwise() {
        let mut w = WeightMap::new();
        w.insert(
            "x",
            Tensor::new(vec![4], DType::F32, vec![f32::MIN_POSITIVE, -0.0, 1e-40, f32::MAX]),
        )
        .unwrap();
        let (back, report) = decode_weights(&encode_weights(&w, DtypePolicy::Preserve)).unwrap();
        assert!(back.bit_eq(&w));
        assert!(report.nan_tensors.is_empty());
    }

    #[test]
    fn canonical_layout_is_sorted_and_contiguous() {
        let bytes = encode_weights(&sample(), DtypePolicy::Preserve);
        let header = parse_header(&bytes).unwrap();
        let names: Vec<_> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["a.weight", "b.bias", "c.half"]);
        let mut expected = 0;
        for t in &header.tensors {
            assert_eq!(t.data_offsets.0, expected);
            expected = t.data_offsets.1;
        }
        assert_eq!(expected, header.data_len);
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let first = encode_weights(&sample(), DtypePolicy::Preserve);
        let (loaded, _) = decode_weights(&first).unwrap();
        assert_eq!(encode_weights(&loaded, DtypePolicy::Preserve), first);
    }

    #[test]
    fn forced_dtype_rounds_and_reloads_identically() {
        let mut w = WeightMap::new();
        w.insert("x", Tensor::from_vec(vec![1.000_976_6, 65520.0, 0.1]))
            .unwrap();
        for dtype in [DType::F16, DType::BF16] {
            let policy = DtypePolicy::Force(dtype);
            let (back, _) = decode_weights(&encode_weights(&w, policy)).unwrap();
            let expected = policy.apply(&w);
            assert!(back.bit_eq(&expected), "{dtype}");
            assert_eq!(back.get("x").unwrap().dtype, dtype);
        }
        let (back, _) = decode_weights(&encode_weights(&w, DtypePolicy::Force(DType::BF16))).unwrap();
        assert_eq!(back.get("x").unwrap().values[0], 1.0);
    }

    #[test]
    fn nan_tensors_load_with_report() {
        let mut w = WeightMap::new();
        w.insert("bad", Tensor::from_vec(vec![1.0, f32::NAN])).unwrap();
        w.insert("good", Tensor::from_vec(vec![1.0])).unwrap();
        let (back, report) = decode_weights(&encode_weights(&w, DtypePolicy::Preserve)).unwrap();
        assert_eq!(report.nan_tensors, vec!["bad".to_string()]);
        assert!(back.get("bad").unwrap().values[1].is_nan());
    }

    #[test]
    fn metadata_survives() {
        let mut w = sample();
        w.metadata = Some(BTreeMap::from([("format".to_string(), "pt".to_string())]));
        let (back, _) = decode_weights(&encode_weights(&w, DtypePolicy::Preserve)).unwrap();
        assert_eq!(back.metadata, w.metadata);
    }

    #[test]
    fn insert_rejects_bad_value_count() {
        let mut w = WeightMap::new();
        let err = w
            .insert("x", Tensor::new(vec![2, 2], DType::F32, vec![1.0]))
            .unwrap_err();
        assert!(matches!(err, TensorStoreError::ValueCount { .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        store_weights(&sample(), &path, DtypePolicy::Preserve).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert!(loaded.bit_eq(&DtypePolicy::Preserve.apply(&sample())));
        assert!(matches!(
            load_weights(dir.path().join("missing")),
            Err(TensorStoreError::Io { .. })
        ));
    }
}
