//! Trace how arrow-of-time information flows through a video-LLM pipeline.
//!
//! The pipeline under study has three stages: a frozen vision encoder turns a
//! clip into a feature grid, a projector compresses the grid into visual
//! tokens, and a language decoder answers questions conditioned on those
//! tokens. This crate provides desk-scale versions of every stage plus the
//! measurement tools around them:
//!
//! - [`data`] — forward/backward clip construction, synthetic temporally
//!   asymmetric videos with an analytic direction oracle, VQA rendering,
//!   and paired evaluation sets.
//! - [`encoder`] — frame-centric and video-centric toy encoders with
//!   per-layer feature taps and a binary on-disk feature cache.
//! - [`probe`] — the attentive-pooling classifier trained on frozen features.
//! - [`projector`] — Q-Former and spatially/temporally pooled MLP projectors
//!   with exact token-budget accounting.
//! - [`llm`] — a small character-level decoder, LoRA adapters, VQA
//!   fine-tuning, and answer extraction.
//! - [`sweep`] — layer-wise probing and fine-tuning sweeps with CSV output.
//! - [`run`] — manifest-driven experiment orchestration used by the `aot`
//!   binary and the runnable examples.
//!
//! Every run is deterministic given its manifest: all randomness flows from
//! one base seed through named substreams (see [`seeds`]).

// Link the system BLAS for ndarray's matrix products.
extern crate blas_src;

pub mod data;
pub mod encoder;
pub mod io;
pub mod llm;
pub mod nn;
pub mod probe;
pub mod projector;
pub mod seeds;

pub use data::clip::{DirectionLabel, LabeledClip, VideoClip};
pub use data::synthetic::{SyntheticKind, SyntheticSpec};
pub use data::vqa::VqaSample;
pub use encoder::{Encoder, EncoderConfig, EncoderFamily, FeatureGrid};
pub use probe::{ProbeParams, ProbeTrainConfig};
pub use projector::{Projector, ProjectorConfig, ProjectorKind, TokenSequence};
