//! Frozen toy vision encoders with per-layer taps and a disk feature cache.
//!
//! Two families:
//! - `video_centric_toy`: tubelet patchification (τ ≥ 2) followed by joint
//!   space-time attention blocks. Construction briefly self-trains the
//!   blocks on a seeded arrow-of-time pretext task (labels come free from
//!   reversal), then freezes; the patch embedding stays at its random
//!   initialization so early layers remain generic.
//! - `frame_centric_toy`: per-frame patchification (τ = 1) and per-frame
//!   attention; frames never exchange information. Without the temporal
//!   position code the output for a frame-permuted clip is exactly the
//!   permuted output.
//!
//! Weights are immutable after construction; no gradient ever flows into an
//! encoder from downstream training.

pub mod cache;
pub mod toy;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::GridDims;

pub use cache::{CacheError, CacheKey, FeatureCache};
pub use toy::Encoder;

/// Errors raised by encoder configuration and encoding.
#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{axis} = {value} is not divisible by {divisor} ({what})")]
    Divisibility {
        axis: &'static str,
        value: usize,
        divisor: usize,
        what: &'static str,
    },
    #[error("layer {layer} out of range 1..={num_layers}")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("layer list must be sorted ascending, got {0:?}")]
    UnsortedLayers(Vec<usize>),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Encoder family taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    VideoCentricToy,
    FrameCentricToy,
}

/// Configuration of a toy encoder. The same config and seed always produce
/// the same frozen weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: EncoderFamily,
    /// Temporal tubelet size τ; frames per token along time.
    pub tubelet: usize,
    /// Spatial patch size p.
    pub patch: usize,
    /// Feature width d.
    pub dim: usize,
    pub num_layers: usize,
    /// Add a per-t′ position code to tokens.
    pub temporal_pos_emb: bool,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale video-centric defaults.
    pub fn video_centric(seed: u64) -> Self {
        Self {
            family: EncoderFamily::VideoCentricToy,
            tubelet: 2,
            patch: 16,
            dim: 64,
            num_layers: 8,
            temporal_pos_emb: true,
            seed,
        }
    }

    /// Desk-scale frame-centric defaults (temporal position code off, the
    /// temporally blind configuration).
    pub fn frame_centric(seed: u64) -> Self {
        Self {
            family: EncoderFamily::FrameCentricToy,
            tubelet: 1,
            patch: 16,
            dim: 64,
            num_layers: 8,
            temporal_pos_emb: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        match self.family {
            EncoderFamily::VideoCentricToy if self.tubelet < 2 => Err(EncoderError::Config(
                "video_centric_toy requires tubelet >= 2 (cross-frame receptive field)"
                    .to_string(),
            )),
            EncoderFamily::FrameCentricToy if self.tubelet != 1 => Err(EncoderError::Config(
                "frame_centric_toy requires tubelet = 1".to_string(),
            )),
            _ if self.dim == 0 || self.num_layers == 0 || self.patch == 0 => Err(
                EncoderError::Config("dim, patch, num_layers must be positive".to_string()),
            ),
            _ if self.dim % toy::NUM_HEADS != 0 => Err(EncoderError::Config(format!(
                "dim {} must be divisible by {} heads",
                self.dim,
                toy::NUM_HEADS
            ))),
            _ => Ok(()),
        }
    }

    /// Stable identifier of the frozen encoder this config realizes.
    pub fn encoder_id(&self) -> String {
        let fam = match self.family {
            EncoderFamily::VideoCentricToy => "vct",
            EncoderFamily::FrameCentricToy => "fct",
        };
        format!(
            "{fam}-d{}-L{}-t{}-p{}-pe{}-s{}",
            self.dim,
            self.num_layers,
            self.tubelet,
            self.patch,
            u8::from(self.temporal_pos_emb),
            self.seed
        )
    }
}

/// Encoder output at one tapped layer: a dense T′×H′×W′×d grid stored
/// flattened to N×d rows (t-major, then h, then w).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub data: Array2<f32>,
    pub grid: GridDims,
    pub tubelet: usize,
    pub patch: usize,
    pub layer_index: usize,
    pub encoder_id: String,
}

impl FeatureGrid {
    pub fn num_tokens(&self) -> usize {
        self.grid.count()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Rows lifted to f64 for numeric work.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// The grid with its temporal axis mirrored (slice t′ ↔ T′−1−t′).
    pub fn mirror_time(&self) -> FeatureGrid {
        let per_t = self.grid.h * self.grid.w;
        let mut data = self.data.clone();
        for t in 0..self.grid.t {
            let src = (self.grid.t - 1 - t) * per_t;
            for r in 0..per_t {
                data.row_mut(t * per_t + r)
                    .assign(&self.data.row(src + r));
            }
        }
        FeatureGrid {
            data,
            grid: self.grid,
            tubelet: self.tubelet,
            patch: self.patch,
            layer_index: self.layer_index,
            encoder_id: self.encoder_id.clone(),
        }
    }
}
