//! Self-describing checkpoint container: JSON metadata plus named f64
//! tensors, CRC-protected. Probe, projector, and adapter checkpoints all use
//! this one format.
//!
//! Layout (little-endian throughout):
//! `"AOTK" | version u16 | meta_len u32 | meta JSON | n_tensors u32 |`
//! per tensor `name_len u32 | name | rows u32 | cols u32 | f64 payload |`
//! trailing `crc32 of everything before it`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use super::atomic_write;

const MAGIC: &[u8; 4] = b"AOTK";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },
}

/// A checkpoint: free-form JSON metadata plus named matrices, order
/// preserved.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorFileError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        atomic_write(path, &buf).map_err(|source| TensorFileError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TensorFileError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| TensorFileError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let fail = |msg: &str| TensorFileError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 14 {
            return Err(fail("truncated"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail("bad magic (expected AOTK)"));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored != computed {
            return Err(TensorFileError::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let mut off = 4;
        let version = u16::from_le_bytes(body[off..off + 2].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        off += 2;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], TensorFileError> {
            if *off + n > body.len() {
                return Err(TensorFileError::Format {
                    path: path.to_path_buf(),
                    msg: "truncated body".to_string(),
                });
            }
            let s = &body[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let meta_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(take(&mut off, meta_len)?)
            .map_err(|e| fail(&format!("bad metadata: {e}")))?;
        let n_tensors = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| fail("tensor name not utf-8"))?;
            let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let payload = take(&mut off, rows * cols * 8)?;
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| fail(&format!("shape error: {e}")))?;
            tensors.push((name, t));
        }
        if off != body.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use serde_json::json;

    #[test]
    fn roundtrip_preserves_meta_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.aotk");
        let mut tf = TensorFile::new(json!({"seed": 42, "kind": "probe"}));
        tf.push("w", array![[1.0, -2.5], [0.125, 9.0]]);
        tf.push("b", array![[0.0, 1e-300]]);
        tf.save(&path).unwrap();
        let back = TensorFile::load(&path).unwrap();
        assert_eq!(back.meta["seed"], 42);
        assert_eq!(back.get("w").unwrap(), tf.get("w").unwrap());
        assert_eq!(back.get("b").unwrap(), tf.get("b").unwrap());
    }

    #[test]
    fn corrupted_byte_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.aotk");
        let mut tf = TensorFile::new(json!({}));
        tf.push("w", array![[3.0]]);
        tf.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            TensorFile::load(&path),
            Err(TensorFileError::Checksum { .. })
        ));
    }
}
