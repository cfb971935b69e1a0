//! VQA rendering: turn a labeled clip into an instruction/question/answer
//! triple using one of four fixed templates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::{DirectionLabel, LabeledClip};
use super::DataError;

/// The four instruction templates. Text is fixed; rendered samples must be
/// byte-identical to these strings.
pub const TEMPLATES: [(&str, &str); 4] = [
    (
        "Examine the motion and temporal cues in the video to determine whether it is forward or backward.",
        "Based on the temporal cues, is the video forward or backward?",
    ),
    (
        "Determine whether the video is played normally or backward based on physical and temporal consistency.",
        "Is this clip more consistent with real-world forward dynamics or backward playback?",
    ),
    (
        "Identify the arrow of time in the video by deciding whether it runs forward or backward.",
        "What is the arrow of time of this video?",
    ),
    (
        "Analyze the temporal progression of the video and classify it as forward-time or reversed-time.",
        "Which of the following best describes the temporal direction of this clip?",
    ),
];

/// A rendered VQA sample bound to a clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub clip_ref: String,
    pub template_id: u32,
    pub instruction: String,
    pub question: String,
    pub answer: String,
}

/// Render the template for a labeled clip. The answer word is "forward" iff
/// the label is F.
pub fn render_vqa(labeled: &LabeledClip, template_id: u32) -> Result<VqaSample, DataError> {
    if !(1..=4).contains(&template_id) {
        return Err(DataError::UnknownTemplate(template_id));
    }
    let (instruction, question) = TEMPLATES[(template_id - 1) as usize];
    Ok(VqaSample {
        clip_ref: labeled.clip.source_id.clone(),
        template_id,
        instruction: instruction.to_string(),
        question: question.to_string(),
        answer: labeled.label.answer_word().to_string(),
    })
}

/// Draw a template id uniformly from {1..4} using the seeded stream.
pub fn pick_template(rng: &mut ChaCha8Rng) -> u32 {
    rng.random_range(1..=4)
}

/// All (template, label) renderings; handy for golden tests and for the
/// decoder's warmup corpus.
pub fn all_renderings() -> Vec<(u32, DirectionLabel, &'static str, &'static str, &'static str)> {
    let mut out = Vec::with_capacity(8);
    for (i, (instr, q)) in TEMPLATES.iter().enumerate() {
        for label in [DirectionLabel::F, DirectionLabel::B] {
            out.push((i as u32 + 1, label, *instr, *q, label.answer_word()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::clip::VideoClip;
    use ndarray::Array4;

    fn labeled(label: DirectionLabel) -> LabeledClip {
        let clip =
            VideoClip::new(Array4::from_elem((2, 2, 2, 1), 0.1f32), "clip-x", 2).unwrap();
        LabeledClip {
            clip,
            label,
            template_id: None,
        }
    }

    #[test]
    fn template_3_forward() {
        let s = render_vqa(&labeled(DirectionLabel::F), 3).unwrap();
        assert_eq!(s.question, "What is the arrow of time of this video?");
        assert_eq!(s.answer, "forward");
    }

    #[test]
    fn template_2_backward() {
        let s = render_vqa(&labeled(DirectionLabel::B), 2).unwrap();
        assert_eq!(
            s.question,
            "Is this clip more consistent with real-world forward dynamics or backward playback?"
        );
        assert_eq!(s.answer, "backward");
    }

    #[test]
    fn template_5_is_rejected() {
        assert!(matches!(
            render_vqa(&labeled(DirectionLabel::F), 5),
            Err(DataError::UnknownTemplate(5))
        ));
        assert!(render_vqa(&labeled(DirectionLabel::F), 0).is_err());
    }

    #[test]
    fn template_draw_covers_all_ids() {
        let mut rng = crate::seeds::rng(9);
        let mut seen = [false; 4];
        for _ in 0..200 {
            seen[(pick_template(&mut rng) - 1) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
