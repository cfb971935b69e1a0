//! On-disk feature cache keyed by (source_id, encoder_id, layer, label).
//!
//! Record layout (little-endian): `"AOTF" | version u16 | encoder_id_len u32
//! | encoder_id | layer u32 | t' u32 | h' u32 | w' u32 | d u32 | tubelet u32
//! | patch u32 | crc32(payload) u32 | payload f32`. Writes go through a
//! temp-file rename so concurrent readers never see a torn record; a
//! mismatched checksum is reported as corruption, distinct from absence.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::clip::DirectionLabel;
use crate::io::atomic_write;
use crate::nn::GridDims;

use super::FeatureGrid;

const MAGIC: &[u8; 4] = b"AOTF";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache entry not found: {0}")]
    NotFound(String),
    #[error("corrupt cache record {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Cache key; one record per (clip variant, encoder, layer).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub source_id: String,
    pub encoder_id: String,
    pub layer: usize,
    pub label: DirectionLabel,
}

impl CacheKey {
    pub fn new(
        source_id: impl Into<String>,
        encoder_id: impl Into<String>,
        layer: usize,
        label: DirectionLabel,
    ) -> Self {
        Self {
            source_id: source_id.into(),
            encoder_id: encoder_id.into(),
            layer,
            label,
        }
    }

    fn file_name(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.source_id.as_bytes());
        hasher.update([0]);
        hasher.update(self.encoder_id.as_bytes());
        hasher.update([0]);
        hasher.update(self.layer.to_le_bytes());
        hasher.update([match self.label {
            DirectionLabel::F => b'F',
            DirectionLabel::B => b'B',
        }]);
        let digest = hasher.finalize();
        let mut name = String::with_capacity(36);
        for b in digest.iter().take(16) {
            name.push_str(&format!("{b:02x}"));
        }
        name.push_str(".aotf");
        name
    }
}

/// A directory of feature records.
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(key.file_name())
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.path_for(key).exists()
    }

    /// Store a grid. Atomic: concurrent readers see the old record or the
    /// new one, never a mix.
    pub fn put(&self, key: &CacheKey, grid: &FeatureGrid) -> Result<(), CacheError> {
        let path = self.path_for(key);
        let mut payload = Vec::with_capacity(grid.data.len() * 4);
        for v in grid.data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut buf = Vec::with_capacity(payload.len() + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(grid.encoder_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(grid.encoder_id.as_bytes());
        for v in [
            grid.layer_index,
            grid.grid.t,
            grid.grid.h,
            grid.grid.w,
            grid.dim(),
            grid.tubelet,
            grid.patch,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        buf.extend_from_slice(&payload);
        atomic_write(&path, &buf).map_err(|source| CacheError::Io { path, source })
    }

    /// Fetch a grid. Missing records give [`CacheError::NotFound`]; torn or
    /// tampered records give [`CacheError::Corrupt`].
    pub fn get(&self, key: &CacheKey) -> Result<FeatureGrid, CacheError> {
        let path = self.path_for(key);
        if !path.exists() {
            return Err(CacheError::NotFound(format!(
                "{}/{}/layer{}/{}",
                key.source_id,
                key.encoder_id,
                key.layer,
                key.label.as_str()
            )));
        }
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CacheError::Io {
                path: path.clone(),
                source,
            })?;
        let fail = |msg: &str| CacheError::Corrupt {
            path: path.clone(),
            msg: msg.to_string(),
        };
        if bytes.len() < 10 {
            return Err(fail("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail("bad magic (expected AOTF)"));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let id_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let fixed = 10 + id_len + 7 * 4 + 4;
        if bytes.len() < fixed {
            return Err(fail("truncated header"));
        }
        let encoder_id = String::from_utf8(bytes[10..10 + id_len].to_vec())
            .map_err(|_| fail("encoder id not utf-8"))?;
        let mut off = 10 + id_len;
        let mut next_u32 = || {
            let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            off += 4;
            v as usize
        };
        let layer = next_u32();
        let (t, h, w, d) = (next_u32(), next_u32(), next_u32(), next_u32());
        let (tubelet, patch) = (next_u32(), next_u32());
        let stored_crc = next_u32() as u32;
        let payload = &bytes[off..];
        if payload.len() != t * h * w * d * 4 {
            return Err(fail(&format!(
                "payload length {} does not match dims {}x{}x{}x{}",
                payload.len(),
                t,
                h,
                w,
                d
            )));
        }
        if crc32fast::hash(payload) != stored_crc {
            return Err(fail("payload checksum mismatch"));
        }
        let mut data = Vec::with_capacity(t * h * w * d);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let data = Array2::from_shape_vec((t * h * w, d), data)
            .map_err(|e| fail(&format!("shape error: {e}")))?;
        Ok(FeatureGrid {
            data,
            grid: GridDims::new(t, h, w),
            tubelet,
            patch,
            layer_index: layer,
            encoder_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> FeatureGrid {
        FeatureGrid {
            data: Array2::from_shape_fn((12, 5), |(i, j)| (i as f32 * 0.9 - j as f32).sin()),
            grid: GridDims::new(3, 2, 2),
            tubelet: 2,
            patch: 4,
            layer_index: 3,
            encoder_id: "vct-test".to_string(),
        }
    }

    #[test]
    fn put_then_get_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let key = CacheKey::new("clip-1", "vct-test", 3, DirectionLabel::F);
        let g = grid();
        cache.put(&key, &g).unwrap();
        let back = cache.get(&key).unwrap();
        assert_eq!(back.data, g.data);
        assert_eq!(back.grid, g.grid);
        assert_eq!(back.tubelet, g.tubelet);
        assert_eq!(back.patch, g.patch);
        assert_eq!(back.layer_index, g.layer_index);
        assert_eq!(back.encoder_id, g.encoder_id);
    }

    #[test]
    fn missing_key_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let key = CacheKey::new("nope", "enc", 1, DirectionLabel::B);
        assert!(matches!(cache.get(&key), Err(CacheError::NotFound(_))));
    }

    #[test]
    fn keys_differ_by_label_and_layer() {
        let a = CacheKey::new("c", "e", 1, DirectionLabel::F);
        let b = CacheKey::new("c", "e", 1, DirectionLabel::B);
        let c = CacheKey::new("c", "e", 2, DirectionLabel::F);
        assert_ne!(a.file_name(), b.file_name());
        assert_ne!(a.file_name(), c.file_name());
    }

    #[test]
    fn corrupt_byte_is_checksum_error_not_wrong_array() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let key = CacheKey::new("clip-1", "vct-test", 3, DirectionLabel::F);
        cache.put(&key, &grid()).unwrap();
        let path = dir.path().join(key.file_name());
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 0x40; // flip a payload bit
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache.get(&key), Err(CacheError::Corrupt { .. })));
    }

    #[test]
    fn truncated_record_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let key = CacheKey::new("clip-1", "vct-test", 3, DirectionLabel::F);
        cache.put(&key, &grid()).unwrap();
        let path = dir.path().join(key.file_name());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(cache.get(&key), Err(CacheError::Corrupt { .. })));
    }
}
