//! Clip manifests, the raw AOTC clip file format, and paired evaluation
//! loading.
//!
//! A manifest is a line-delimited JSON file. Each record names a source
//! video either by a path to a raw AOTC clip file or by an inline synthetic
//! spec. Codec decoding is out of scope: real videos must be pre-extracted
//! to raw frame arrays by an external step.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::clip::{reverse_clip, DirectionLabel, LabeledClip, VideoClip};
use super::synthetic::{gen_synthetic, SyntheticSpec};
use super::DataError;

const CLIP_MAGIC: &[u8; 4] = b"AOTC";
const CLIP_VERSION: u16 = 1;

/// Where a manifest record's frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    /// Path to a raw AOTC clip file (relative paths resolve against the
    /// manifest's directory).
    Path(PathBuf),
    /// Inline synthetic recipe.
    Synthetic(SyntheticSpec),
}

/// One line of a clip manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub source_id: String,
    pub source: ClipSource,
    pub split: String,
    pub native_frame_count: usize,
}

/// Parse a manifest file into records. Malformed lines are reported with
/// their 1-based line number; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(line).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Write manifest records as line-delimited JSON.
pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<(), DataError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Materialize a record's frames: generate the synthetic spec or read the
/// AOTC file. Relative paths resolve against `base_dir`.
pub fn load_record_clip(rec: &ClipRecord, base_dir: &Path) -> Result<VideoClip, DataError> {
    match &rec.source {
        ClipSource::Synthetic(spec) => {
            let mut clip = gen_synthetic(spec)?;
            clip.source_id = rec.source_id.clone();
            clip.native_frame_count = rec.native_frame_count;
            Ok(clip)
        }
        ClipSource::Path(p) => {
            let full = if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            };
            let mut clip = read_clip_file(&full)?;
            clip.source_id = rec.source_id.clone();
            Ok(clip)
        }
    }
}

/// Write a clip as a raw AOTC file: magic, version u16, T/H/W/C u32
/// little-endian, then row-major f32 little-endian frame data.
pub fn write_clip_file(path: &Path, clip: &VideoClip) -> Result<(), DataError> {
    let (t, h, w, c) = clip.frames.dim();
    let mut buf = Vec::with_capacity(22 + t * h * w * c * 4);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for dim in [t, h, w, c] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let data = clip
        .frames
        .as_standard_layout();
    for v in data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a raw AOTC clip file.
pub fn read_clip_file(path: &Path) -> Result<VideoClip, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let fail = |msg: &str| DataError::ClipFile {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 22 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != CLIP_MAGIC {
        return Err(fail("bad magic (expected AOTC)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLIP_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + i * 4;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let [t, h, w, c] = dims;
    let expected = 22 + t * h * w * c * 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload length {} does not match header (expected {})",
            bytes.len(),
            expected
        )));
    }
    let mut data = Vec::with_capacity(t * h * w * c);
    for chunk in bytes[22..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let frames = Array4::from_shape_vec((t, h, w, c), data)
        .map_err(|e| fail(&format!("shape error: {e}")))?;
    VideoClip::new(frames, path.display().to_string(), t)
}

/// Load a paired evaluation set: every manifest record yields exactly two
/// labeled clips, the forward original and its reversal.
pub fn load_paired_eval(path: &Path) -> Result<Vec<(LabeledClip, LabeledClip)>, DataError> {
    let records = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(records.len());
    for rec in &records {
        let clip = load_record_clip(rec, base)?;
        let backward = LabeledClip {
            clip: reverse_clip(&clip),
            label: DirectionLabel::B,
            template_id: None,
        };
        let forward = LabeledClip {
            clip,
            label: DirectionLabel::F,
            template_id: None,
        };
        pairs.push((forward, backward));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::SyntheticKind;
    use ndarray::Array4;

    fn synth_record(i: u64) -> ClipRecord {
        ClipRecord {
            source_id: format!("syn-{i}"),
            source: ClipSource::Synthetic(SyntheticSpec::new(
                SyntheticKind::FallingDot,
                8,
                (16, 16),
                0.0,
                i,
            )),
            split: "eval".to_string(),
            native_frame_count: 8,
        }
    }

    #[test]
    fn clip_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.aotc");
        let frames = Array4::from_shape_fn((3, 4, 5, 1), |(t, y, x, _)| {
            ((t * 20 + y * 5 + x) as f32) / 60.0
        });
        let clip = VideoClip::new(frames, "rt", 3).unwrap();
        write_clip_file(&path, &clip).unwrap();
        let back = read_clip_file(&path).unwrap();
        assert_eq!(back.frames, clip.frames);
    }

    #[test]
    fn manifest_roundtrip_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.jsonl");
        let records: Vec<ClipRecord> = (0..5).map(synth_record).collect();
        write_manifest(&path, &records).unwrap();
        let pairs = load_paired_eval(&path).unwrap();
        assert_eq!(pairs.len(), 5);
        for (f, b) in &pairs {
            assert_eq!(f.label, DirectionLabel::F);
            assert_eq!(b.label, DirectionLabel::B);
            assert_eq!(reverse_clip(&f.clip).frames, b.clip.frames);
        }
    }

    #[test]
    fn empty_manifest_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_paired_eval(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&synth_record(1)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_manifest(&path) {
            Err(DataError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn unreadable_clip_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.jsonl");
        let rec = ClipRecord {
            source_id: "gone".to_string(),
            source: ClipSource::Path(PathBuf::from("no/such/file.aotc")),
            split: "eval".to_string(),
            native_frame_count: 4,
        };
        write_manifest(&path, &[rec]).unwrap();
        let err = load_paired_eval(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("file.aotc"), "error should name the path: {msg}");
    }

    #[test]
    fn truncated_clip_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.aotc");
        let clip = VideoClip::new(Array4::from_elem((2, 2, 2, 1), 0.5f32), "t", 2).unwrap();
        write_clip_file(&path, &clip).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_clip_file(&path),
            Err(DataError::ClipFile { .. })
        ));
    }
}
