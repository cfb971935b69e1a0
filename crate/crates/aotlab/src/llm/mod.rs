//! Language-decoder bridge: a small character-level decoder, LoRA adapters,
//! VQA fine-tuning, and answer extraction.

pub mod decoder;
pub mod lora;
pub mod tune;
pub mod vocab;

pub use decoder::{Decoder, DecoderError};
pub use lora::{LoraAdapter, LoraError, LoraSet};
pub use tune::{
    eval_vqa_grids, finetune_vqa, parse_answer, ParsedAnswer, TuneConfig, TuneError,
    VqaPrediction,
};
