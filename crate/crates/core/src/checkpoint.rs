//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header,
//! raw little-endian `f64` tensor data in header order, and a trailing
//! SHA-256 digest of everything before it.

use std::path::Path;

use convrender_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"CVRCKPT\x01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
    seed: u64,
    config: Value,
    metadata: Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Named tensors plus JSON configuration and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config: Value,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, config: Value) -> Self {
        Self { kind: kind.to_string(), seed, config, metadata: Value::Null, tensors: Vec::new() }
    }

    /// Appends every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Collects the tensors whose names start with `prefix` (stripped).
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                s.insert(rest.to_string(), t.clone());
            }
        }
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_bytes_with_version(SCHEMA_VERSION)
    }

    #[doc(hidden)]
    pub fn to_bytes_with_version(&self, version: u32) -> Result<Vec<u8>> {
        let header = Header {
            schema_version: version,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * n_values + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic or truncated)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let json = body.get(12..12 + hlen).ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Version { found: header.schema_version, expected: SCHEMA_VERSION });
        }
        let mut data = &body[12 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Corrupt(format!("tensor {name} is truncated")));
            }
            let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[8 * n..];
            tensors.push((name, Tensor::new(&shape, values)));
        }
        if !data.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after tensor data", data.len())));
        }
        Ok(Self { kind: header.kind, seed: header.seed, config: header.config, metadata: header.metadata, tensors })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that the container holds the expected kind of model.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Corrupt(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::randn(&[3, 4], &mut rng));
        store.insert("a.bias", Tensor::randn(&[4], &mut rng));
        let mut c = Checkpoint::new("teacher", 42, serde_json::json!({"res": 32}));
        c.metadata = serde_json::json!({"note": "x"});
        c.push_store("param.", &store);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.store("param.").len(), 2);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = sample().to_bytes_with_version(SCHEMA_VERSION + 1).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found, .. }) if found == SCHEMA_VERSION + 1
        ));
    }

    #[test]
    fn single_byte_corruption_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() - 40;
        bytes[mid] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(b"garbage"), Err(Error::Corrupt(_))));
    }
}
