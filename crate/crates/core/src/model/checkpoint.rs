//! Checkpoint container.
//!
//! Layout: 8-byte magic `CPLB0001`, a little-endian `u64` header length,
//! the UTF-8 JSON header, the parameter blobs as little-endian `f64` in
//! manifest order, and a trailing little-endian CRC32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPLB";
pub const CHECKPOINT_VERSION: &str = "0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    meta: TrainingMeta,
}

/// A model plus the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vec<String>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.model.param_names();
        let mut offset = 0u64;
        let tensors = names
            .into_iter()
            .zip(self.model.params())
            .map(|(name, t)| {
                let e = TensorEntry { name, shape: t.shape().to_vec(), offset };
                offset += (t.numel() * 8) as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: 1,
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(CHECKPOINT_VERSION.as_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Truncated(format!("{} bytes is shorter than the fixed framing", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = String::from_utf8_lossy(&bytes[4..8]).into_owned();
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION.into() });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_end = bytes.len() - 4;
        let check_crc = || {
            let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
            let computed = crc32fast::hash(&bytes[..body_end]);
            if stored == computed {
                Ok(())
            } else {
                Err(Error::Checksum { stored, computed })
            }
        };
        if 16 + hlen > body_end {
            return Err(Error::Truncated(format!("header of {hlen} bytes runs past the end")));
        }
        let header: Header = match serde_json::from_slice(&bytes[16..16 + hlen]) {
            Ok(h) => h,
            Err(e) => {
                check_crc()?;
                return Err(Error::Format(format!("checkpoint header: {e}")));
            }
        };
        if header.format_version != 1 {
            return Err(Error::Version { found: header.format_version.to_string(), expected: "1".into() });
        }
        let blob_len: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        let expected = 16 + hlen + blob_len + 4;
        if bytes.len() < expected {
            return Err(Error::Truncated(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - expected)));
        }
        check_crc()?;

        let blobs = &bytes[16 + hlen..body_end];
        let shapes = Model::param_shapes(&header.config);
        if shapes.len() != header.tensors.len() {
            return Err(Error::Format("tensor manifest does not match the config".into()));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for ((name, shape), e) in shapes.iter().zip(&header.tensors) {
            if name != &e.name || shape != &e.shape {
                return Err(Error::Format(format!("manifest entry {} does not match {name}", e.name)));
            }
            let start = e.offset as usize;
            let n: usize = shape.iter().product();
            let raw = blobs
                .get(start..start + n * 8)
                .ok_or_else(|| Error::Format(format!("{name}: offset out of range")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        if header.vocab.len() != header.config.vocab_size {
            return Err(Error::Format("vocabulary size does not match the config".into()));
        }
        Ok(Self { model: Model::from_parts(header.config, params)?, vocab: header.vocab, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let config =
            ModelConfig { n_blocks: 1, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 5, max_context: 6, seed: 3 };
        Checkpoint {
            model: Model::init(config).unwrap(),
            vocab: ["a", "b", "c", ":", ","].map(String::from).to_vec(),
            meta: TrainingMeta { steps: 12, final_loss: Some(0.125), seed: 3 },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = ckpt().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], b"CPLB0001");
    }

    #[test]
    fn forward_survives_round_trip_bitwise() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let a = c.model.next_token_dist(&[0, 1, 3]).unwrap();
        let b = back.model.next_token_dist(&[0, 1, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut bytes = ckpt().to_bytes().unwrap();
        let i = bytes.len() - 20;
        bytes[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn truncated_file_is_reported() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Truncated(_))));
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(b"0002");
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Version { found, .. }) => assert_eq!(found, "0002"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
