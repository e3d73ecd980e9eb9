//! Binary checkpoint container for model parameters.
//!
//! Layout: 8-byte magic `SLFTCKPT`, u32 version, u32 entry count, then per
//! entry a u32-length-prefixed UTF-8 name, u32 rank, rank u32 dims, and the
//! raw little-endian f64 values; finally a u32-length-prefixed UTF-8 JSON
//! metadata blob. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::tensor::DenseArray;

pub const MAGIC: &[u8; 8] = b"SLFTCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance recorded next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    /// Body-architecture identity; transfer requires an exact match.
    pub encoder_fingerprint: String,
    pub source_task: String,
    pub seed: u64,
    pub epochs: usize,
    pub loss: LossKind,
}

/// Versioned, named parameter arrays plus metadata. Round-trips through the
/// binary format bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub parameters: Vec<(String, DenseArray)>,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn new(parameters: Vec<(String, DenseArray)>, metadata: CheckpointMetadata) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            parameters,
            metadata,
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.parameters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.parameters.len() as u32).to_le_bytes());
        for (name, array) in &self.parameters {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.extend_from_slice(&(array.shape().len() as u32).to_le_bytes());
            for &dim in array.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &value in array.data() {
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
        let meta = serde_json::to_string(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Parse {
                field: "magic",
                message: format!("expected {MAGIC:?}, got {magic:?}"),
            });
        }
        let version = cursor.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                field: "version",
                message: format!("unsupported version {version}"),
            });
        }
        let count = cursor.u32("entry count")? as usize;
        let mut parameters = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cursor.u32("name length")? as usize;
            let name_bytes = cursor.take(name_len, "name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| Error::Parse {
                field: "name",
                message: e.to_string(),
            })?;
            let rank = cursor.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32("dims")? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = cursor.take(len * 8, "values")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            let array = DenseArray::new(shape, data).map_err(|e| Error::Parse {
                field: "values",
                message: e.to_string(),
            })?;
            parameters.push((name, array));
        }
        let meta_len = cursor.u32("metadata length")? as usize;
        let meta_bytes = cursor.take(meta_len, "metadata")?;
        let metadata: CheckpointMetadata =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::Parse {
                field: "metadata",
                message: e.to_string(),
            })?;
        Ok(Checkpoint {
            version,
            parameters,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Parse {
            field,
            message: "length overflow".into(),
        })?;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::Parse {
            field,
            message: format!("file truncated at byte {}", self.pos),
        })?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let s = self.take(4, field)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            vec![
                (
                    "layer0.weight".to_string(),
                    DenseArray::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.5e-300, 2.0f64.sqrt(), -7.0])
                        .unwrap(),
                ),
                (
                    "layer0.bias".to_string(),
                    DenseArray::vector(vec![0.0, -0.0, 42.0]).unwrap(),
                ),
            ],
            CheckpointMetadata {
                encoder_fingerprint: "mlp:2-3;hidden=Relu;output=None".into(),
                source_task: "blobs-source".into(),
                seed: 99,
                epochs: 30,
                loss: LossKind::CrossEntropy,
            },
        )
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let ckpt = sample();
        let restored = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(restored.version, ckpt.version);
        assert_eq!(restored.metadata, ckpt.metadata);
        for ((na, aa), (nb, ab)) in ckpt.parameters.iter().zip(restored.parameters.iter()) {
            assert_eq!(na, nb);
            assert_eq!(aa.shape(), ab.shape());
            for (x, y) in aa.data().iter().zip(ab.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();
        assert_eq!(restored, ckpt);
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(sample().to_bytes(), sample().to_bytes());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "version"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_rejected() {
        let bytes = sample().to_bytes();
        for cut in [10, 20, bytes.len() - 3] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
