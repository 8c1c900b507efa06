//! Binary checkpoint container.
//!
//! Layout: magic, `u32` format version, `u64` header length, a JSON header
//! listing every tensor (name, shape, offset) together with a config hash
//! and free-form metadata, the tensor data as little-endian `f64`, and a
//! trailing SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CERSECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors of all trainable values and optimizer state, tagged with
/// the hash of the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), message.into()))
}

impl ParameterSnapshot {
    pub fn new(config_hash: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            config_hash: config_hash.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    /// Adds every tensor of `params` under `prefix.`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for spec in params.specs() {
            self.push(
                format!("{prefix}.{}", spec.name),
                spec.shape.clone(),
                params.values()[spec.range()].to_vec(),
            );
        }
    }

    /// Adds a flat vector laid out like `params` (gradients, moments).
    pub fn push_flat(&mut self, prefix: &str, params: &ParamSet, flat: &[f64]) {
        for spec in params.specs() {
            self.push(
                format!("{prefix}.{}", spec.name),
                spec.shape.clone(),
                flat[spec.range()].to_vec(),
            );
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Reads a flat vector laid out like `params` from tensors under `prefix.`.
    pub fn read_flat(&self, prefix: &str, params: &ParamSet) -> Result<Vec<f64>> {
        let mut out = params.zeros();
        for spec in params.specs() {
            let t = self.get(&format!("{prefix}.{}", spec.name))?;
            if t.shape != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {prefix}.{} has shape {:?}, expected {:?}",
                    spec.name, t.shape, spec.shape
                )));
            }
            out[spec.range()].copy_from_slice(&t.data);
        }
        Ok(out)
    }

    pub fn restore_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let flat = self.read_flat(prefix, params)?;
        params.values_mut().copy_from_slice(&flat);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + offset * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&body[20..data_start]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let data = &body[data_start..];
        if data.len() % 8 != 0 {
            return Err(corrupt(path, "truncated tensor data"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let len: usize = e.shape.iter().product();
                let slice = values
                    .get(e.offset..e.offset + len)
                    .ok_or_else(|| corrupt(path, format!("tensor {} out of range", e.name)))?;
                Ok(NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data: slice.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config_hash: header.config_hash,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, refusing it when `expected_hash` is given and
    /// differs from the stored one.
    pub fn load(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let snap = Self::from_bytes(&bytes, path)?;
        if let Some(expected) = expected_hash {
            if snap.config_hash != expected {
                return Err(Error::ConfigHashMismatch {
                    expected: expected.to_string(),
                    found: snap.config_hash,
                });
            }
        }
        Ok(snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParameterSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.add_uniform("w", &[3, 4], 1.0, &mut rng);
        p.add("b", &[2], vec![f64::MIN_POSITIVE, -0.0]);
        let mut s = ParameterSnapshot::new(config_hash(&"cfg"), serde_json::json!({"epoch": 3}));
        s.push_params("se", &p);
        s.push("step", vec![], vec![7.0]);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let s = sample();
        s.save(&path).unwrap();
        let back = ParameterSnapshot::load(&path, Some(&s.config_hash)).unwrap();
        assert_eq!(back.meta, s.meta);
        for (a, b) in back.tensors.iter().zip(&s.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn altered_hash_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        let err = ParameterSnapshot::load(&path, Some("deadbeef")).unwrap_err();
        assert!(matches!(err, Error::ConfigHashMismatch { .. }));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ParameterSnapshot::load(&path, None),
            Err(Error::Checkpoint(_))
        ));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            ParameterSnapshot::load(&path, None),
            Err(Error::Checkpoint(_))
        ));
    }
}
