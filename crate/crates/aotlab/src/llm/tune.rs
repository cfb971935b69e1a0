//! VQA fine-tuning: train LoRA adapters (and optionally the projector) with
//! next-token cross-entropy on answer tokens only. The vision encoder is
//! frozen upstream; the decoder base is frozen here and verified by
//! checksum.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::clip::DirectionLabel;
use crate::data::vqa::VqaSample;
use crate::encoder::FeatureGrid;
use crate::nn::{Adam, Graph};
use crate::projector::{Projector, ProjectorError};
use crate::seeds;

use super::decoder::{Decoder, DecoderError};
use super::lora::LoraSet;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("empty training stream")]
    EmptyStream,
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

/// Fine-tuning configuration. Defaults: 1 epoch, batch 2, lr 2e-5, weight
/// decay 0.02, LoRA rank 16 with α = 32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 2,
            learning_rate: 2e-5,
            weight_decay: 0.02,
            lora_rank: 16,
            lora_alpha: 32.0,
            seed: 0,
        }
    }
}

/// Train adapters on (features, VQA sample) pairs. The projector trains iff
/// `train_projector`; the decoder base never changes. Deterministic given
/// the seed.
pub fn finetune_vqa(
    samples: &[(FeatureGrid, VqaSample)],
    decoder: &Decoder,
    projector: &mut Projector,
    cfg: &TuneConfig,
    train_projector: bool,
) -> Result<LoraSet, TuneError> {
    if samples.is_empty() {
        return Err(TuneError::EmptyStream);
    }
    let mut lora = LoraSet::init(
        cfg.seed,
        super::decoder::NUM_BLOCKS,
        super::decoder::D_MODEL,
        cfg.lora_rank,
        cfg.lora_alpha,
    );
    let encoded: Vec<(Vec<usize>, Vec<f64>)> = samples
        .iter()
        .map(|(_, s)| Decoder::encode_sample(s))
        .collect::<Result<_, _>>()?;
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = seeds::rng(seeds::substream(cfg.seed, "tune-shuffle"));
    for _epoch in 0..cfg.epochs {
        seeds::shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut lora_grads: Option<Vec<Array2<f64>>> = None;
            let mut proj_grads: Option<Vec<Array2<f64>>> = None;
            for &ix in chunk {
                let (grid, _) = &samples[ix];
                let (ids, mask) = &encoded[ix];
                let mut g = Graph::new();
                let grid_node = g.constant(grid.to_f64());
                let proj_nodes = projector.bind(&mut g, train_projector);
                let visual =
                    projector.forward_on_graph(&mut g, &proj_nodes, grid_node, grid.grid, None);
                let bound =
                    decoder.forward_on_graph(&mut g, Some(visual), ids, 0, false, Some(&lora))?;
                let n_vis = projector.token_budget();
                let (loss, _) = Decoder::loss_from_hidden(&mut g, &bound, n_vis, ids, mask);
                g.backward(loss);
                let sample_lora: Vec<Array2<f64>> = bound
                    .lora_ids
                    .iter()
                    .flat_map(|(aq, bq, av, bv)| {
                        [g.grad(*aq), g.grad(*bq), g.grad(*av), g.grad(*bv)]
                    })
                    .collect();
                accumulate(&mut lora_grads, sample_lora);
                if train_projector {
                    accumulate(&mut proj_grads, projector.grads(&g, &proj_nodes));
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut lg = lora_grads.expect("non-empty chunk");
            for ga in lg.iter_mut() {
                ga.mapv_inplace(|v| v * inv);
            }
            opt.begin_step();
            let mut k = 0;
            lora.visit_mut(&mut |w| {
                opt.update(k, w, &lg[k]);
                k += 1;
            });
            if train_projector {
                let mut pg = proj_grads.expect("non-empty chunk");
                for ga in pg.iter_mut() {
                    ga.mapv_inplace(|v| v * inv);
                }
                projector.adam_update(&mut opt, k, &pg);
            }
        }
    }
    Ok(lora)
}

fn accumulate(acc: &mut Option<Vec<Array2<f64>>>, sample: Vec<Array2<f64>>) {
    match acc {
        None => *acc = Some(sample),
        Some(acc) => {
            for (a, s) in acc.iter_mut().zip(sample) {
                *a += &s;
            }
        }
    }
}

/// Outcome of keyword extraction from generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedAnswer {
    Label(DirectionLabel),
    Unparseable,
}

/// Case-insensitive positional scan: the earliest occurrence of "forward" or
/// "backward" wins. Neither present → unparseable (scored incorrect). Note
/// the scan is purely positional: in "it is reversed, not forward" the only
/// keyword present is "forward", so the parse is F — a documented limitation
/// of keyword extraction.
pub fn parse_answer(generated: &str) -> ParsedAnswer {
    let lower = generated.to_lowercase();
    let f = lower.find("forward");
    let b = lower.find("backward");
    match (f, b) {
        (Some(fi), Some(bi)) => {
            // The two keywords never start at the same index, so the
            // comparison is a strict positional tie-break.
            if fi < bi {
                ParsedAnswer::Label(DirectionLabel::F)
            } else {
                ParsedAnswer::Label(DirectionLabel::B)
            }
        }
        (Some(_), None) => ParsedAnswer::Label(DirectionLabel::F),
        (None, Some(_)) => ParsedAnswer::Label(DirectionLabel::B),
        (None, None) => ParsedAnswer::Unparseable,
    }
}

/// One evaluated item, as written to predictions files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaPrediction {
    pub clip_ref: String,
    pub label: String,
    pub generated_text: String,
    pub parsed_label: Option<String>,
}

/// Evaluate a tuned model over pre-encoded paired items. Templates for the
/// prompts are drawn per item from the seeded stream; unparseable outputs
/// score as incorrect.
pub fn eval_vqa_grids(
    decoder: &Decoder,
    lora: Option<&LoraSet>,
    projector: &Projector,
    items: &[(FeatureGrid, DirectionLabel, String)],
    seed: u64,
) -> Result<(f64, Vec<VqaPrediction>), TuneError> {
    let template_seed = seeds::substream(seed, "eval-templates");
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(items.len());
    for (i, (grid, label, clip_ref)) in items.iter().enumerate() {
        let template_id = (seeds::for_index(template_seed, i as u64) % 4) as u32 + 1;
        let (instr, q) = crate::data::vqa::TEMPLATES[(template_id - 1) as usize];
        let prompt = format!("{instr}\n{q}\n");
        let tokens = projector.project(grid, None)?;
        let generated = decoder.generate(Some(&tokens.tokens), &prompt, lora, 12)?;
        let parsed = parse_answer(&generated);
        if parsed == ParsedAnswer::Label(*label) {
            correct += 1;
        }
        predictions.push(VqaPrediction {
            clip_ref: clip_ref.clone(),
            label: label.as_str().to_string(),
            generated_text: generated,
            parsed_label: match parsed {
                ParsedAnswer::Label(l) => Some(l.as_str().to_string()),
                ParsedAnswer::Unparseable => None,
            },
        });
    }
    let accuracy = if items.is_empty() {
        0.0
    } else {
        correct as f64 / items.len() as f64
    };
    Ok((accuracy, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_plain_answers() {
        assert_eq!(
            parse_answer("The video is played backward."),
            ParsedAnswer::Label(DirectionLabel::B)
        );
        assert_eq!(
            parse_answer("Forward."),
            ParsedAnswer::Label(DirectionLabel::F)
        );
        assert_eq!(parse_answer("no idea"), ParsedAnswer::Unparseable);
    }

    #[test]
    fn positional_scan_tie_break_contract() {
        // Only "forward" is a keyword here; "reversed" is not. The scan
        // yields F even though the sentence means backward.
        assert_eq!(
            parse_answer("It is reversed, not forward"),
            ParsedAnswer::Label(DirectionLabel::F)
        );
        // Earliest keyword by position wins.
        assert_eq!(
            parse_answer("backward, not forward"),
            ParsedAnswer::Label(DirectionLabel::B)
        );
        // "forward" inside "backward" does not count as an earlier forward.
        assert_eq!(
            parse_answer("backward"),
            ParsedAnswer::Label(DirectionLabel::B)
        );
    }
}
