//! Tensor container file.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the blob of little-endian f32 values, row-major. The header looks like
//!
//! ```json
//! {"metadata":{"config":"..."},
//!  "tensors":{"blocks.0.attn.qkv.weight":{"shape":[384,1152],"offset":0,"length":1769472}}}
//! ```
//!
//! `offset`/`length` are in bytes relative to the start of the blob. Tensors
//! are written in name order, so writing the same contents always produces the
//! same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(deserialize_with = "unique_keys")]
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let length = t.len() * 4;
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses container bytes; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: String| Error::format(path, why);
        if bytes.len() < 8 {
            return Err(bad("shorter than the 8-byte header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let blob_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[8..blob_start])
            .map_err(|e| bad(format!("header JSON: {e}")))?;
        let blob = &bytes[blob_start..];

        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = BTreeMap::new();
        for (name, entry) in &header.tensors {
            let count: usize = entry.shape.iter().product();
            if entry.shape.is_empty() || count == 0 || entry.length != count * 4 {
                return Err(bad(format!(
                    "tensor '{name}': length {} does not match shape {:?}",
                    entry.length, entry.shape
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.length)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| {
                    bad(format!(
                        "tensor '{name}': bytes {}..{} run past the {}-byte blob (truncated?)",
                        entry.offset,
                        entry.offset.saturating_add(entry.length),
                        blob.len()
                    ))
                })?;
            spans.push((entry.offset, end, name));
            let data = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(bad(format!(
                    "tensors '{}' and '{}' overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Removes and returns a tensor, failing with its name if absent.
    pub fn take(&mut self, name: &str, path: &Path) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor '{name}'")))
    }
}

fn unique_keys<'de, D, V>(deserializer: D) -> std::result::Result<BTreeMap<String, V>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    struct UniqueVisitor<V>(PhantomData<V>);

    impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueVisitor<V> {
        type Value = BTreeMap<String, V>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map of tensor entries")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = map.next_entry::<String, V>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("tensor '{k}' listed twice")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(UniqueVisitor(PhantomData))
}
