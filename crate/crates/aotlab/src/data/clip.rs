//! Video clips, playback-direction labels, and frame-level transforms.

use ndarray::{Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Playback direction of an observed clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectionLabel {
    /// Forward playback.
    F,
    /// Reversed playback.
    B,
}

impl DirectionLabel {
    pub fn answer_word(self) -> &'static str {
        match self {
            DirectionLabel::F => "forward",
            DirectionLabel::B => "backward",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DirectionLabel::F => "F",
            DirectionLabel::B => "B",
        }
    }
}

/// A video tensor of shape T×H×W×C with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f32>,
    pub source_id: String,
    pub native_frame_count: usize,
}

impl VideoClip {
    /// Build a clip, validating the shape and value-range invariants.
    pub fn new(
        frames: Array4<f32>,
        source_id: impl Into<String>,
        native_frame_count: usize,
    ) -> Result<Self, DataError> {
        let (t, h, w, c) = frames.dim();
        if t < 1 || h < 1 || w < 1 {
            return Err(DataError::InvalidClip(format!(
                "degenerate shape {t}x{h}x{w}x{c}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(DataError::InvalidClip(format!(
                "channel count {c} not in {{1, 3}}"
            )));
        }
        if frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DataError::InvalidClip(
                "pixel values outside [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
            native_frame_count,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().3
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }
}

/// An observed clip together with its direction label. When the label is
/// [`DirectionLabel::B`] the stored frames are already reversed: this is the
/// sequence a model sees, not the canonical forward one.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub label: DirectionLabel,
    /// Set iff the clip participates in VQA rendering.
    pub template_id: Option<u32>,
}

/// Time-reversal: output frame k is input frame T-1-k. Metadata preserved.
pub fn reverse_clip(clip: &VideoClip) -> VideoClip {
    let t = clip.num_frames();
    let mut frames = clip.frames.clone();
    for k in 0..t {
        frames
            .index_axis_mut(Axis(0), k)
            .assign(&clip.frames.index_axis(Axis(0), t - 1 - k));
    }
    VideoClip {
        frames,
        source_id: clip.source_id.clone(),
        native_frame_count: clip.native_frame_count,
    }
}

/// Flip a coin from the seeded stream: heads keeps the clip forward, tails
/// reverses it. Over a long stream the labels are balanced.
pub fn make_labeled(clip: VideoClip, rng: &mut ChaCha8Rng) -> LabeledClip {
    let coin: bool = rng.random();
    if coin {
        LabeledClip {
            clip: reverse_clip(&clip),
            label: DirectionLabel::B,
            template_id: None,
        }
    } else {
        LabeledClip {
            clip,
            label: DirectionLabel::F,
            template_id: None,
        }
    }
}

/// Indices used by [`sample_frames`]: floor((j + 0.5)·T/k) for j in 0..k.
/// Center-offset sampling never pins frame 0. The index set mirrors onto
/// itself (so sampling commutes with reversal) exactly when T/k is an odd
/// integer; for even T/k the forward and mirrored sets are offset by one
/// source frame, and for general T they differ by at most that offset.
/// Clips shorter than k repeat indices.
pub fn sample_indices(t: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|j| (((j as f64 + 0.5) * t as f64) / k as f64).floor() as usize)
        .map(|ix| ix.min(t - 1))
        .collect()
}

/// Uniformly sample `k` frames, order preserved.
pub fn sample_frames(clip: &VideoClip, k: usize) -> VideoClip {
    assert!(k >= 1, "k must be positive");
    let (_, h, w, c) = clip.frames.dim();
    let idx = sample_indices(clip.num_frames(), k);
    let mut frames = Array4::zeros((k, h, w, c));
    for (j, &ix) in idx.iter().enumerate() {
        frames
            .index_axis_mut(Axis(0), j)
            .assign(&clip.frames.index_axis(Axis(0), ix));
    }
    VideoClip {
        frames,
        source_id: clip.source_id.clone(),
        native_frame_count: clip.native_frame_count,
    }
}

/// Bilinearly resample every frame to side×side (half-pixel centers, edge
/// clamp), then clamp values back into [0, 1].
pub fn resize_clip(clip: &VideoClip, side: usize) -> VideoClip {
    assert!(side >= 1, "side must be positive");
    let (t, h, w, c) = clip.frames.dim();
    let mut out = Array4::zeros((t, side, side, c));
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for ft in 0..t {
        for oy in 0..side {
            let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = y - y0 as f64;
            for ox in 0..side {
                let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = x - x0 as f64;
                for ch in 0..c {
                    let p00 = clip.frames[[ft, y0, x0, ch]] as f64;
                    let p01 = clip.frames[[ft, y0, x1, ch]] as f64;
                    let p10 = clip.frames[[ft, y1, x0, ch]] as f64;
                    let p11 = clip.frames[[ft, y1, x1, ch]] as f64;
                    let v = p00 * (1.0 - wy) * (1.0 - wx)
                        + p01 * (1.0 - wy) * wx
                        + p10 * wy * (1.0 - wx)
                        + p11 * wy * wx;
                    out[[ft, oy, ox, ch]] = (v as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoClip {
        frames: out,
        source_id: clip.source_id.clone(),
        native_frame_count: clip.native_frame_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use ndarray::Array4;

    fn toy_clip(t: usize) -> VideoClip {
        let frames = Array4::from_shape_fn((t, 2, 2, 1), |(ft, y, x, _)| {
            ((ft * 7 + y * 3 + x) % 10) as f32 / 10.0
        });
        VideoClip::new(frames, "toy", t).unwrap()
    }

    #[test]
    fn reverse_swaps_first_and_last() {
        let clip = toy_clip(3);
        let rev = reverse_clip(&clip);
        assert_eq!(rev.frame(0), clip.frame(2));
        assert_eq!(rev.frame(1), clip.frame(1));
        assert_eq!(rev.frame(2), clip.frame(0));
        assert_eq!(rev.source_id, clip.source_id);
        assert_eq!(rev.native_frame_count, clip.native_frame_count);
    }

    #[test]
    fn reverse_is_an_involution() {
        let clip = toy_clip(9);
        let back = reverse_clip(&reverse_clip(&clip));
        assert_eq!(back.frames, clip.frames);
    }

    #[test]
    fn static_clip_is_a_fixed_point() {
        let frames = Array4::from_elem((5, 3, 3, 1), 0.25f32);
        let clip = VideoClip::new(frames, "static", 5).unwrap();
        let rev = reverse_clip(&clip);
        assert_eq!(rev.frames, clip.frames);
    }

    #[test]
    fn make_labeled_keeps_or_reverses() {
        let clip = toy_clip(4);
        let mut rng = seeds::rng(1);
        // Walk the stream until both outcomes were seen.
        let mut saw_f = false;
        let mut saw_b = false;
        for _ in 0..64 {
            let labeled = make_labeled(clip.clone(), &mut rng);
            match labeled.label {
                DirectionLabel::F => {
                    assert_eq!(labeled.clip.frames, clip.frames);
                    saw_f = true;
                }
                DirectionLabel::B => {
                    assert_eq!(labeled.clip.frames, reverse_clip(&clip).frames);
                    saw_b = true;
                }
            }
            if saw_f && saw_b {
                break;
            }
        }
        assert!(saw_f && saw_b);
    }

    #[test]
    fn label_fraction_is_balanced_over_10k_draws() {
        let mut rng = seeds::rng(42);
        let clip = toy_clip(2);
        let n = 10_000;
        let backs = (0..n)
            .filter(|_| make_labeled(clip.clone(), &mut rng).label == DirectionLabel::B)
            .count();
        let frac = backs as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "fraction of B = {frac}");
    }

    #[test]
    fn sample_indices_identity_when_t_equals_k() {
        assert_eq!(sample_indices(16, 16), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn sample_indices_t32_k16_are_odd() {
        let expect: Vec<usize> = (0..16).map(|j| 2 * j + 1).collect();
        assert_eq!(sample_indices(32, 16), expect);
    }

    #[test]
    fn sample_indices_t8_k16_repeat_each_frame_twice() {
        let idx = sample_indices(8, 16);
        let expect: Vec<usize> = (0..16).map(|j| j / 2).collect();
        assert_eq!(idx, expect);
    }

    #[test]
    fn sampling_commutes_with_reversal_for_odd_stride() {
        // T/k odd: index set is mirror-symmetric.
        for (t, k) in [(24, 8), (16, 16), (48, 16), (3, 3)] {
            let clip = toy_clip(t);
            let a = sample_frames(&reverse_clip(&clip), k);
            let b = reverse_clip(&sample_frames(&clip, k));
            assert_eq!(a.frames, b.frames, "t={t} k={k}");
        }
    }

    #[test]
    fn even_stride_mirror_offset_is_at_most_one() {
        // T/k even: forward and mirrored index sets are offset by one.
        let idx = sample_indices(32, 16);
        let mirrored: Vec<usize> = idx.iter().rev().map(|&i| 31 - i).collect();
        for (a, b) in idx.iter().zip(mirrored.iter()) {
            assert!(a.abs_diff(*b) <= 1);
        }
    }

    #[test]
    fn resize_constant_frame_stays_constant() {
        let frames = Array4::from_elem((2, 3, 3, 1), 0.6f32);
        let clip = VideoClip::new(frames, "const", 2).unwrap();
        let out = resize_clip(&clip, 7);
        assert!(out.frames.iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn resize_checkerboard_matches_bilinear_oracle() {
        // 2x2 checkerboard upsampled to 4x4; expected values evaluated from
        // the half-pixel-center bilinear weights by hand.
        let mut frames = Array4::zeros((1, 2, 2, 1));
        frames[[0, 0, 0, 0]] = 1.0;
        frames[[0, 1, 1, 0]] = 1.0;
        let clip = VideoClip::new(frames, "checker", 1).unwrap();
        let out = resize_clip(&clip, 4);
        let expect = [
            [1.0, 0.75, 0.25, 0.0],
            [0.75, 0.625, 0.375, 0.25],
            [0.25, 0.375, 0.625, 0.75],
            [0.0, 0.25, 0.75, 1.0],
        ];
        for y in 0..4 {
            for x in 0..4 {
                let got = out.frames[[0, y, x, 0]];
                assert!(
                    (got - expect[y][x] as f32).abs() < 1e-6,
                    "({y},{x}): got {got}, want {}",
                    expect[y][x]
                );
            }
        }
    }

    #[test]
    fn clip_validation_rejects_bad_channels_and_range() {
        let frames = Array4::from_elem((1, 2, 2, 2), 0.5f32);
        assert!(VideoClip::new(frames, "bad", 1).is_err());
        let frames = Array4::from_elem((1, 2, 2, 1), 1.5f32);
        assert!(VideoClip::new(frames, "bad", 1).is_err());
    }
}
