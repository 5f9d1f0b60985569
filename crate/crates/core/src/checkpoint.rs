//! Checkpoint container: one line of JSON manifest, then raw little-endian
//! `f32` buffers. `byte_offset` is relative to the first byte after the
//! manifest's terminating newline.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "PGAN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub arrays: Vec<ArrayEntry>,
    /// Free-form metadata (model configuration, counters).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A named `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: "f32".into(),
                byte_offset: offset,
            });
            offset += 4 * n as u64;
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            arrays: entries,
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                manifest.format, manifest.version
            )));
        }
        let body = &bytes[nl + 1..];
        let arrays = manifest
            .arrays
            .iter()
            .map(|e| {
                if e.dtype != "f32" {
                    return Err(Error::Checkpoint(format!(
                        "{}: unsupported dtype {}",
                        e.name, e.dtype
                    )));
                }
                let n: usize = e.shape.iter().product();
                let start = e.byte_offset as usize;
                let end = start + 4 * n;
                let raw = body
                    .get(start..end)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: truncated buffer", e.name)))?;
                Ok(NamedArray {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            arrays,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn by_name(&self) -> BTreeMap<&str, &NamedArray> {
        self.arrays.iter().map(|a| (a.name.as_str(), a)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            arrays in proptest::collection::vec(
                (1usize..4, 1usize..5).prop_flat_map(|(a, b)| {
                    proptest::collection::vec(any::<u32>(), a * b)
                        .prop_map(move |bits| (vec![a, b], bits))
                }),
                0..5,
            )
        ) {
            let ck = Checkpoint {
                arrays: arrays
                    .into_iter()
                    .enumerate()
                    .map(|(i, (shape, bits))| NamedArray {
                        name: format!("a{i}"),
                        shape,
                        data: bits.into_iter().map(f32::from_bits).collect(),
                    })
                    .collect(),
                meta: serde_json::json!({"k": 1}),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.arrays.len(), ck.arrays.len());
            for (a, b) in back.arrays.iter().zip(&ck.arrays) {
                prop_assert_eq!(&a.shape, &b.shape);
                let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn manifest_layout() {
        let ck = Checkpoint {
            arrays: vec![
                NamedArray {
                    name: "x".into(),
                    shape: vec![2],
                    data: vec![1.0, 2.0],
                },
                NamedArray {
                    name: "y".into(),
                    shape: vec![1, 1],
                    data: vec![3.0],
                },
            ],
            meta: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let m: Manifest = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(m.format, "PGAN");
        assert_eq!(m.version, 1);
        assert_eq!(m.arrays[1].byte_offset, 8);
        assert_eq!(m.arrays[0].dtype, "f32");
        assert_eq!(bytes.len(), nl + 1 + 12);
        assert_eq!(&bytes[nl + 1 + 8..], &3.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        assert!(
            Checkpoint::from_bytes(b"{\"format\":\"XYZ\",\"version\":1,\"arrays\":[]}\n").is_err()
        );
        let truncated = b"{\"format\":\"PGAN\",\"version\":1,\"arrays\":[{\"name\":\"a\",\"shape\":[4],\"dtype\":\"f32\",\"byte_offset\":0}]}\n\0\0";
        assert!(Checkpoint::from_bytes(truncated).is_err());
    }
}
