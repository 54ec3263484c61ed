//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ADVTCKPT"
//! version    u32
//! header_len u32
//! header     header_len bytes of UTF-8 JSON {arch, meta, tensors: [{name, shape}]}
//! payload    f32 values of every tensor, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::model::{Model, Param};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub dataset_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub rescale_augmentation: bool,
    pub adversarial_augmentation: bool,
    #[serde(default)]
    pub noise_amplitude: f64,
}

/// A trained model plus how it was trained. Immutable once produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let params = ckpt.model.params();
    let header = Header {
        arch: ckpt.model.arch().clone(),
        meta: ckpt.meta.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let n: usize = params.iter().map(|p| p.data.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 4 * n);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::CheckpointDecode(format!(
            "truncated while reading {what}: need {n} bytes, have {}",
            bytes.len()
        )));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn load_checkpoint(mut bytes: &[u8]) -> Result<Checkpoint> {
    let cur = &mut bytes;
    if take(cur, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointDecode("bad magic".into()));
    }
    let version = read_u32(cur, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = read_u32(cur, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(cur, header_len, "header")?)
        .map_err(|e| Error::CheckpointDecode(format!("header: {e}")))?;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = take(cur, 4 * n, &t.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        params.push(Param {
            name: t.name,
            shape: t.shape,
            data,
        });
    }
    if !cur.is_empty() {
        return Err(Error::CheckpointDecode(format!("{} trailing bytes", cur.len())));
    }
    let model = Model::from_params(header.arch, params)
        .map_err(|e| Error::CheckpointDecode(format!("inconsistent tensors: {e}")))?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, save_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::tests::small_arch;

    fn ckpt() -> Checkpoint {
        Checkpoint {
            model: Model::init(small_arch(), 11).unwrap(),
            meta: TrainingMeta {
                dataset_id: "synthetic".into(),
                seed: 11,
                epochs: 3,
                rescale_augmentation: true,
                adversarial_augmentation: false,
                noise_amplitude: 8.0,
            },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = ckpt();
        let bytes = save_checkpoint(&c);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(save_checkpoint(&back), bytes);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = save_checkpoint(&ckpt());
        for cut in [0, 7, 12, 20, bytes.len() - 1] {
            assert!(
                matches!(load_checkpoint(&bytes[..cut]), Err(Error::CheckpointDecode(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(load_checkpoint(&extra), Err(Error::CheckpointDecode(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = save_checkpoint(&ckpt());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            load_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
        let mut bad = save_checkpoint(&ckpt());
        bad[0] = b'X';
        assert!(load_checkpoint(&bad).is_err());
    }
}
