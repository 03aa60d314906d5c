//! Header parsing and validation for the `[u64 len][JSON][data]` container.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DType, TensorStoreError};

pub const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the declared JSON header size.
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// One tensor entry of a file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    /// `[begin, end)` relative to the start of the data region.
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn num_elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// Parsed and validated file header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    /// Length in bytes of the JSON header (the `N` of the length prefix).
    pub header_len: u64,
    /// Tensor entries sorted by name.
    pub tensors: Vec<TensorMeta>,
    pub metadata: Option<BTreeMap<String, String>>,
    /// Size of the data region following the header.
    pub data_len: u64,
}

impl Header {
    /// Byte position of the data region within the file.
    pub fn data_start(&self) -> u64 {
        8 + self.header_len
    }
}

/// JSON object that keeps every key, duplicates included, in document order.
struct RawEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// Parses the header of a complete file image.
pub fn parse_header(bytes: &[u8]) -> Result<Header, TensorStoreError> {
    let mut reader = bytes;
    read_header(&mut reader, bytes.len() as u64)
}

/// Parses the header from `reader`, positioned at byte 0 of a file of `total_len` bytes.
///
/// Leaves the reader positioned at the start of the data region.
pub fn read_header<R: Read>(reader: &mut R, total_len: u64) -> Result<Header, TensorStoreError> {
    if total_len < 8 {
        return Err(TensorStoreError::Truncated {
            position: 0,
            needed: 8,
            available: total_len,
        });
    }
    let mut prefix = [0u8; 8];
    reader
        .read_exact(&mut prefix)
        .map_err(|e| TensorStoreError::io("<stream>", e))?;
    let header_len = u64::from_le_bytes(prefix);
    if header_len > total_len - 8 {
        return Err(TensorStoreError::Truncated {
            position: 8,
            needed: header_len,
            available: total_len - 8,
        });
    }
    if header_len > MAX_HEADER_LEN {
        return Err(TensorStoreError::HeaderTooLarge { header_len });
    }
    let mut json = vec![0u8; header_len as usize];
    reader
        .read_exact(&mut json)
        .map_err(|e| TensorStoreError::io("<stream>", e))?;
    let data_len = total_len - 8 - header_len;
    parse_header_json(&json, header_len, data_len)
}

fn parse_header_json(
    json: &[u8],
    header_len: u64,
    data_len: u64,
) -> Result<Header, TensorStoreError> {
    let text = std::str::from_utf8(json).map_err(|e| TensorStoreError::InvalidUtf8 {
        position: 8 + e.valid_up_to() as u64,
    })?;
    let RawEntries(entries) =
        serde_json::from_str(text).map_err(|e| TensorStoreError::MalformedJson {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;

    let mut metadata = None;
    let mut tensors: Vec<TensorMeta> = Vec::with_capacity(entries.len());
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(TensorStoreError::DuplicateName { name });
        }
        if name == METADATA_KEY {
            metadata = Some(parse_metadata(value)?);
            continue;
        }
        tensors.push(parse_entry(name, &value)?);
    }

    for t in &tensors {
        let (begin, end) = t.data_offsets;
        if begin > end || end > data_len {
            return Err(TensorStoreError::OffsetOutOfRange {
                name: t.name.clone(),
                begin,
                end,
                data_len,
            });
        }
        let expected = t
            .shape
            .iter()
            .try_fold(t.dtype.element_size() as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorStoreError::InvalidEntry {
                name: t.name.clone(),
                reason: "shape product overflows".into(),
            })?;
        if expected != end - begin {
            return Err(TensorStoreError::SizeMismatch {
                name: t.name.clone(),
                expected,
                actual: end - begin,
            });
        }
    }

    // Overlap check on non-empty ranges, sorted by start offset.
    let mut ranges: Vec<&TensorMeta> = tensors.iter().filter(|t| t.byte_len() > 0).collect();
    ranges.sort_by_key(|t| (t.data_offsets.0, t.data_offsets.1));
    for pair in ranges.windows(2) {
        if pair[1].data_offsets.0 < pair[0].data_offsets.1 {
            return Err(TensorStoreError::OffsetOverlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }

    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Header {
        header_len,
        tensors,
        metadata,
        data_len,
    })
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>, TensorStoreError> {
    let invalid = |reason: &str| TensorStoreError::InvalidEntry {
        name: METADATA_KEY.to_string(),
        reason: reason.to_string(),
    };
    let Value::Object(map) = value else {
        return Err(invalid("expected an object of strings"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(invalid(&format!("value for key {k:?} is not a string"))),
        })
        .collect()
}

fn parse_entry(name: String, value: &Value) -> Result<TensorMeta, TensorStoreError> {
    let invalid = |reason: String| TensorStoreError::InvalidEntry {
        name: name.clone(),
        reason,
    };
    if name.is_empty() {
        return Err(invalid("empty tensor name".into()));
    }
    let Value::Object(obj) = value else {
        return Err(invalid("entry is not an object".into()));
    };
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid("missing string field \"dtype\"".into()))?;
    let dtype: DType = dtype_str
        .parse()
        .map_err(|d| TensorStoreError::UnknownDtype {
            name: name.clone(),
            dtype: d,
        })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing array field \"shape\"".into()))?
        .iter()
        .map(|d| {
            d.as_u64()
                .ok_or_else(|| invalid(format!("shape entry {d} is not a non-negative integer")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing array field \"data_offsets\"".into()))?;
    if offsets.len() != 2 {
        return Err(invalid(format!(
            "data_offsets has {} entries, expected 2",
            offsets.len()
        )));
    }
    let off = |i: usize| {
        offsets[i]
            .as_u64()
            .ok_or_else(|| invalid(format!("data_offsets[{i}] is not a non-negative integer")))
    };
    Ok(TensorMeta {
        dtype,
        shape,
        data_offsets: (off(0)?, off(1)?),
        name,
    })
}

/// Serializes a header in canonical form: sorted keys, padded with spaces to 8 bytes.
pub fn encode_header(
    tensors: &[TensorMeta],
    metadata: Option<&BTreeMap<String, String>>,
) -> Vec<u8> {
    let mut root = serde_json::Map::new();
    if let Some(meta) = metadata {
        let obj = meta
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        root.insert(METADATA_KEY.to_string(), Value::Object(obj));
    }
    for t in tensors {
        let mut entry = serde_json::Map::new();
        entry.insert("dtype".into(), Value::String(t.dtype.as_str().into()));
        entry.insert("shape".into(), t.shape.iter().copied().collect());
        entry.insert(
            "data_offsets".into(),
            Value::Array(vec![t.data_offsets.0.into(), t.data_offsets.1.into()]),
        );
        root.insert(t.name.clone(), Value::Object(entry));
    }
    let mut json = serde_json::to_vec(&Value::Object(root)).expect("header serializes");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}
