//! The two toy encoder families and their frozen weights.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use crate::data::clip::{make_labeled, DirectionLabel, VideoClip};
use crate::data::synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};
use crate::nn::{init, Adam, Graph, GridDims, NodeId};
use crate::seeds;

use super::{EncoderConfig, EncoderError, EncoderFamily, FeatureGrid};

/// Attention heads in every toy block.
pub const NUM_HEADS: usize = 4;
/// FFN hidden width as a multiple of d.
const FFN_MULT: usize = 2;
/// Standard deviation of the per-index position codes.
const POS_STD: f64 = 0.5;

/// Pretext-task recipe for video-centric construction. Fixed internally so a
/// config plus seed fully determines the frozen weights. The patch embedding
/// and the first quarter of the blocks stay at their random initialization,
/// so early layers remain generic while later layers absorb the task.
const PRETEXT_CLIPS: usize = 512;
const PRETEXT_EPOCHS: usize = 4;
const PRETEXT_BATCH: usize = 8;
const PRETEXT_LR: f64 = 1e-3;
const PRETEXT_NOISE: f64 = 0.35;

fn pretext_frozen_blocks(num_layers: usize) -> usize {
    num_layers / 4
}

struct BlockWeights {
    ln1_g: Array2<f64>,
    ln1_b: Array2<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    bo: Array2<f64>,
    ln2_g: Array2<f64>,
    ln2_b: Array2<f64>,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

impl BlockWeights {
    fn init(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Self {
        let hidden = FFN_MULT * d;
        Self {
            ln1_g: init::ones(1, d),
            ln1_b: init::zeros(1, d),
            wq: init::scaled_normal(rng, d, d, d),
            wk: init::scaled_normal(rng, d, d, d),
            wv: init::scaled_normal(rng, d, d, d),
            wo: init::scaled_normal(rng, d, d, d),
            bo: init::zeros(1, d),
            ln2_g: init::ones(1, d),
            ln2_b: init::zeros(1, d),
            w1: init::scaled_normal(rng, d, hidden, d),
            b1: init::zeros(1, hidden),
            w2: init::scaled_normal(rng, hidden, d, hidden),
            b2: init::zeros(1, d),
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        f(&mut self.ln1_g);
        f(&mut self.ln1_b);
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
        f(&mut self.bo);
        f(&mut self.ln2_g);
        f(&mut self.ln2_b);
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

struct BlockNodes {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl BlockWeights {
    fn bind(&self, g: &mut Graph, trainable: bool) -> BlockNodes {
        let mut leaf = |w: &Array2<f64>| {
            if trainable {
                g.param(w)
            } else {
                g.constant(w.clone())
            }
        };
        BlockNodes {
            ln1_g: leaf(&self.ln1_g),
            ln1_b: leaf(&self.ln1_b),
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
            bo: leaf(&self.bo),
            ln2_g: leaf(&self.ln2_g),
            ln2_b: leaf(&self.ln2_b),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }
}

/// Attention scope: joint space-time, or confined to each frame's tokens.
enum AttnScope {
    Joint,
    PerFrame { frames: usize, per_frame: usize },
}

/// Multi-head attention over `x` (pre-normalized).
fn mha(g: &mut Graph, x: NodeId, b: &BlockNodes, dh: usize) -> NodeId {
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, b.wq);
    let k = g.matmul(x, b.wk);
    let v = g.matmul(x, b.wv);
    let attended = g.attn_multi(q, k, v, NUM_HEADS, false, scale);
    let out = g.matmul(attended, b.wo);
    g.add_row(out, b.bo)
}

/// One pre-LN transformer block with the given attention scope.
fn block_forward(g: &mut Graph, x: NodeId, b: &BlockNodes, d: usize, scope: &AttnScope) -> NodeId {
    let dh = d / NUM_HEADS;
    let normed = g.layer_norm_rows(x, b.ln1_g, b.ln1_b);
    let attended = match scope {
        AttnScope::Joint => mha(g, normed, b, dh),
        AttnScope::PerFrame { frames, per_frame } => {
            let mut parts: Option<NodeId> = None;
            for f in 0..*frames {
                let xf = g.slice_rows(normed, f * per_frame, *per_frame);
                let of = mha(g, xf, b, dh);
                parts = Some(match parts {
                    None => of,
                    Some(p) => g.concat_rows(p, of),
                });
            }
            parts.expect("at least one frame")
        }
    };
    let x = g.add(x, attended);
    let normed2 = g.layer_norm_rows(x, b.ln2_g, b.ln2_b);
    let h1 = g.matmul(normed2, b.w1);
    let h1b = g.add_row(h1, b.b1);
    let act = g.gelu(h1b);
    let h2 = g.matmul(act, b.w2);
    let h2b = g.add_row(h2, b.b2);
    g.add(x, h2b)
}

/// Deterministic per-index position code: a seeded Gaussian vector. `tag`
/// separates the temporal and spatial tables.
fn pos_code(seed: u64, tag: u64, index: u64, d: usize) -> Array1<f64> {
    let s = seeds::splitmix64(seed ^ tag.rotate_left(24) ^ seeds::splitmix64(index));
    let mut rng = seeds::rng(s);
    let dist = Normal::new(0.0, POS_STD).expect("valid normal");
    Array1::from_shape_fn(d, |_| dist.sample(&mut rng))
}

/// A frozen toy encoder. Weights never change after construction.
pub struct Encoder {
    cfg: EncoderConfig,
    id: String,
    patch_embed: Array2<f64>,
    patch_bias: Array2<f64>,
    blocks: Vec<BlockWeights>,
}

impl Encoder {
    /// Build the frozen encoder for a config. Video-centric construction
    /// includes the seeded pretext training; frame-centric weights stay at
    /// their seeded initialization.
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = seeds::rng(seeds::substream(cfg.seed, "enc-init"));
        let in_dim = cfg.tubelet * cfg.patch * cfg.patch * 3;
        let patch_embed = init::scaled_normal(&mut rng, in_dim, cfg.dim, in_dim);
        let patch_bias = init::zeros(1, cfg.dim);
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockWeights::init(&mut rng, cfg.dim))
            .collect();
        let mut enc = Self {
            id: cfg.encoder_id(),
            cfg,
            patch_embed,
            patch_bias,
            blocks,
        };
        if matches!(cfg.family, EncoderFamily::VideoCentricToy) {
            enc.pretext_train();
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    /// Standardize pixels and cut the clip into tubelet/patch vectors,
    /// t-major then h then w. Single-channel clips are replicated to three
    /// channels so one embedding handles both.
    fn patchify(&self, clip: &VideoClip) -> (Array2<f64>, GridDims) {
        let (t, h, w, c) = clip.frames.dim();
        let (tau, p) = (self.cfg.tubelet, self.cfg.patch);
        let grid = GridDims::new(t / tau, h / p, w / p);
        let in_dim = tau * p * p * 3;
        let mut out = Array2::zeros((grid.count(), in_dim));
        for gt in 0..grid.t {
            for gh in 0..grid.h {
                for gw in 0..grid.w {
                    let row = (gt * grid.h + gh) * grid.w + gw;
                    let mut col = 0;
                    for dt in 0..tau {
                        for py in 0..p {
                            for px in 0..p {
                                for ch in 0..3 {
                                    let v = clip.frames
                                        [[gt * tau + dt, gh * p + py, gw * p + px, ch.min(c - 1)]]
                                        as f64;
                                    out[[row, col]] = (v - 0.5) / 0.5;
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, grid)
    }

    /// Token embeddings incl. position codes, as a graph node. The patch
    /// embedding is bound as a constant: it stays frozen even during pretext
    /// training, keeping the first layers generic.
    fn embed_tokens(&self, g: &mut Graph, clip: &VideoClip) -> (NodeId, GridDims) {
        let (patches, grid) = self.patchify(clip);
        let x = g.constant(patches);
        let we = g.constant(self.patch_embed.clone());
        let be = g.constant(self.patch_bias.clone());
        let projected = g.matmul(x, we);
        let tokens = g.add_row(projected, be);
        // Position codes: spatial always, temporal iff configured.
        let mut codes = Array2::zeros((grid.count(), self.cfg.dim));
        for gt in 0..grid.t {
            let tcode = pos_code(self.cfg.seed, 0x7e4b, gt as u64, self.cfg.dim);
            for gh in 0..grid.h {
                for gw in 0..grid.w {
                    let row = (gt * grid.h + gh) * grid.w + gw;
                    let scode = pos_code(
                        self.cfg.seed,
                        0x51a7,
                        (gh * grid.w + gw) as u64,
                        self.cfg.dim,
                    );
                    for j in 0..self.cfg.dim {
                        codes[[row, j]] = scode[j]
                            + if self.cfg.temporal_pos_emb { tcode[j] } else { 0.0 };
                    }
                }
            }
        }
        let codes = g.constant(codes);
        (g.add(tokens, codes), grid)
    }

    fn scope(&self, grid: GridDims) -> AttnScope {
        match self.cfg.family {
            EncoderFamily::VideoCentricToy => AttnScope::Joint,
            EncoderFamily::FrameCentricToy => AttnScope::PerFrame {
                frames: grid.t,
                per_frame: grid.h * grid.w,
            },
        }
    }

    /// Forward through all blocks, returning the node after each one.
    fn forward_all(
        &self,
        g: &mut Graph,
        clip: &VideoClip,
        block_nodes: &[BlockNodes],
    ) -> (Vec<NodeId>, GridDims) {
        let (mut x, grid) = self.embed_tokens(g, clip);
        let scope = self.scope(grid);
        let mut taps = Vec::with_capacity(self.blocks.len());
        for b in block_nodes {
            x = block_forward(g, x, b, self.cfg.dim, &scope);
            taps.push(x);
        }
        (taps, grid)
    }

    fn check_divisibility(&self, clip: &VideoClip) -> Result<(), EncoderError> {
        let (t, h, w, _) = clip.frames.dim();
        let checks = [
            ("T", t, self.cfg.tubelet, "tubelet must divide frame count"),
            ("H", h, self.cfg.patch, "patch must divide height"),
            ("W", w, self.cfg.patch, "patch must divide width"),
        ];
        for (axis, value, divisor, what) in checks {
            if value % divisor != 0 {
                return Err(EncoderError::Divisibility {
                    axis,
                    value,
                    divisor,
                    what,
                });
            }
        }
        Ok(())
    }

    /// Feature grid at one layer (1-based).
    pub fn encode(&self, clip: &VideoClip, layer: usize) -> Result<FeatureGrid, EncoderError> {
        Ok(self
            .tap_layers(clip, &[layer])?
            .pop()
            .expect("one grid per requested layer"))
    }

    /// Feature grids at several layers from a single forward pass. `layers`
    /// must be sorted ascending; an empty list is allowed and yields an
    /// empty result.
    pub fn tap_layers(
        &self,
        clip: &VideoClip,
        layers: &[usize],
    ) -> Result<Vec<FeatureGrid>, EncoderError> {
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EncoderError::UnsortedLayers(layers.to_vec()));
        }
        for &layer in layers {
            if layer == 0 || layer > self.cfg.num_layers {
                return Err(EncoderError::LayerOutOfRange {
                    layer,
                    num_layers: self.cfg.num_layers,
                });
            }
        }
        if layers.is_empty() {
            return Ok(Vec::new());
        }
        self.check_divisibility(clip)?;
        let mut g = Graph::new();
        let block_nodes: Vec<BlockNodes> =
            self.blocks.iter().map(|b| b.bind(&mut g, false)).collect();
        let (taps, grid) = self.forward_all(&mut g, clip, &block_nodes);
        Ok(layers
            .iter()
            .map(|&layer| FeatureGrid {
                data: g.value(taps[layer - 1]).mapv(|v| v as f32),
                grid,
                tubelet: self.cfg.tubelet,
                patch: self.cfg.patch,
                layer_index: layer,
                encoder_id: self.id.clone(),
            })
            .collect())
    }

    /// Brief self-supervised training on the arrow-of-time pretext task:
    /// classify seeded falling-dot clips as forward or reversed from the
    /// mean-pooled final layer. Blocks train; the patch embedding and
    /// position codes stay frozen. The classification head is discarded.
    fn pretext_train(&mut self) {
        let p = self.cfg.patch;
        let side = p * 2.max(8_usize.div_ceil(p));
        let t = if 16 % self.cfg.tubelet == 0 {
            16
        } else {
            8 * self.cfg.tubelet
        };
        let clip_seed = seeds::substream(self.cfg.seed, "enc-pretext");
        let coin_seed = seeds::substream(self.cfg.seed, "enc-coins");
        let mut coin_rng = seeds::rng(coin_seed);
        let data: Vec<(VideoClip, DirectionLabel)> = (0..PRETEXT_CLIPS)
            .map(|i| {
                let spec = SyntheticSpec::new(
                    SyntheticKind::FallingDot,
                    t,
                    (side, side),
                    PRETEXT_NOISE,
                    seeds::for_index(clip_seed, i as u64),
                );
                let labeled = make_labeled(gen_synthetic(&spec).expect("valid spec"), &mut coin_rng);
                (labeled.clip, labeled.label)
            })
            .collect();

        let mut head_rng = seeds::rng(seeds::substream(self.cfg.seed, "enc-head"));
        let mut head_w = init::scaled_normal(&mut head_rng, self.cfg.dim, 2, self.cfg.dim);
        let mut head_b = init::zeros(1, 2);

        let mut opt = Adam::new(PRETEXT_LR, 0.0);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = seeds::rng(seeds::substream(self.cfg.seed, "enc-shuffle"));
        for _epoch in 0..PRETEXT_EPOCHS {
            seeds::shuffle(&mut order, &mut shuffle_rng);
            for chunk in order.chunks(PRETEXT_BATCH) {
                let mut grads: Option<Vec<Array2<f64>>> = None;
                for &ix in chunk {
                    let (clip, label) = &data[ix];
                    let mut g = Graph::new();
                    let frozen = pretext_frozen_blocks(self.blocks.len());
                    let block_nodes: Vec<BlockNodes> = self
                        .blocks
                        .iter()
                        .enumerate()
                        .map(|(i, b)| b.bind(&mut g, i >= frozen))
                        .collect();
                    let hw = g.param(&head_w);
                    let hb = g.param(&head_b);
                    let (taps, _) = self.forward_all(&mut g, clip, &block_nodes);
                    let last = *taps.last().expect("at least one block");
                    let pooled = g.mean_rows(last);
                    let logits0 = g.matmul(pooled, hw);
                    let logits = g.add_row(logits0, hb);
                    let target = match label {
                        DirectionLabel::F => 0,
                        DirectionLabel::B => 1,
                    };
                    let loss = g.masked_ce(logits, vec![target], vec![1.0]);
                    g.backward(loss);
                    let mut sample_grads = Vec::new();
                    for b in block_nodes.iter().skip(frozen) {
                        collect_block_grads(&g, b, &mut sample_grads);
                    }
                    sample_grads.push(g.grad(hw));
                    sample_grads.push(g.grad(hb));
                    match &mut grads {
                        None => grads = Some(sample_grads),
                        Some(acc) => {
                            for (a, s) in acc.iter_mut().zip(sample_grads) {
                                *a += &s;
                            }
                        }
                    }
                }
                let mut grads = grads.expect("non-empty chunk");
                let scale = 1.0 / chunk.len() as f64;
                for ga in grads.iter_mut() {
                    ga.mapv_inplace(|v| v * scale);
                }
                opt.begin_step();
                let frozen = pretext_frozen_blocks(self.blocks.len());
                let mut k = 0;
                for b in self.blocks.iter_mut().skip(frozen) {
                    b.visit_mut(&mut |w| {
                        opt.update(k, w, &grads[k]);
                        k += 1;
                    });
                }
                opt.update(k, &mut head_w, &grads[k]);
                opt.update(k + 1, &mut head_b, &grads[k + 1]);
            }
        }
    }
}

fn collect_block_grads(g: &Graph, b: &BlockNodes, out: &mut Vec<Array2<f64>>) {
    for id in [
        b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2,
        b.b2,
    ] {
        out.push(g.grad(id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::clip::reverse_clip;
    use ndarray::Array4;

    fn small_cfg(family: EncoderFamily, temporal_pos: bool, seed: u64) -> EncoderConfig {
        EncoderConfig {
            family,
            tubelet: if matches!(family, EncoderFamily::VideoCentricToy) {
                2
            } else {
                1
            },
            patch: 4,
            dim: 16,
            num_layers: 2,
            temporal_pos_emb: temporal_pos,
            seed,
        }
    }

    fn random_clip(seed: u64, t: usize, side: usize) -> VideoClip {
        let mut rng = seeds::rng(seed);
        use rand::Rng;
        let frames = Array4::from_shape_fn((t, side, side, 1), |_| rng.random_range(0.0..1.0f32));
        VideoClip::new(frames, format!("rand-{seed}"), t).unwrap()
    }

    #[test]
    fn shape_law_holds() {
        let enc =
            Encoder::new(small_cfg(EncoderFamily::FrameCentricToy, false, 1)).unwrap();
        let clip = random_clip(3, 4, 8);
        let grid = enc.encode(&clip, 2).unwrap();
        assert_eq!(grid.grid, GridDims::new(4, 2, 2));
        assert_eq!(grid.data.dim(), (16, 16));
        assert_eq!(grid.layer_index, 2);
    }

    #[test]
    fn tap_equals_encode_bit_exact() {
        let enc =
            Encoder::new(small_cfg(EncoderFamily::FrameCentricToy, true, 2)).unwrap();
        let clip = random_clip(4, 2, 8);
        let via_tap = enc.tap_layers(&clip, &[1, 2]).unwrap();
        let direct = enc.encode(&clip, 1).unwrap();
        assert_eq!(via_tap[0].data, direct.data);
        assert_eq!(via_tap.len(), 2);
        assert!(enc.tap_layers(&clip, &[]).unwrap().is_empty());
    }

    #[test]
    fn divisibility_violation_names_axis() {
        let enc =
            Encoder::new(small_cfg(EncoderFamily::FrameCentricToy, false, 1)).unwrap();
        let clip = random_clip(5, 3, 8); // T=3 fine for tau=1; H=8 ok; make W odd
        let clip_bad = random_clip(5, 3, 9);
        assert!(enc.encode(&clip, 1).is_ok());
        match enc.encode(&clip_bad, 1) {
            Err(EncoderError::Divisibility { axis, .. }) => assert_eq!(axis, "H"),
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let enc =
            Encoder::new(small_cfg(EncoderFamily::FrameCentricToy, false, 1)).unwrap();
        let clip = random_clip(6, 2, 8);
        assert!(matches!(
            enc.encode(&clip, 3),
            Err(EncoderError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            enc.tap_layers(&clip, &[2, 1]),
            Err(EncoderError::UnsortedLayers(_))
        ));
    }

    #[test]
    fn frame_centric_is_temporally_blind_without_pos_code() {
        let enc =
            Encoder::new(small_cfg(EncoderFamily::FrameCentricToy, false, 7)).unwrap();
        let clip = random_clip(8, 4, 8);
        let rev = reverse_clip(&clip);
        let fwd = enc.encode(&clip, 2).unwrap();
        let bwd = enc.encode(&rev, 2).unwrap();
        assert_eq!(bwd.data, fwd.mirror_time().data, "mirror must be bit-exact");
    }

    #[test]
    fn frame_centric_with_pos_code_is_not_blind() {
        let enc = Encoder::new(small_cfg(EncoderFamily::FrameCentricToy, true, 7)).unwrap();
        let clip = random_clip(8, 4, 8);
        let rev = reverse_clip(&clip);
        let fwd = enc.encode(&clip, 2).unwrap();
        let bwd = enc.encode(&rev, 2).unwrap();
        assert_ne!(bwd.data, fwd.mirror_time().data);
    }

    #[test]
    fn video_centric_breaks_mirror_symmetry() {
        let enc = Encoder::new(small_cfg(EncoderFamily::VideoCentricToy, true, 5)).unwrap();
        let spec = SyntheticSpec::new(SyntheticKind::FallingDot, 8, (8, 8), 0.0, 11);
        let clip = gen_synthetic(&spec).unwrap();
        let rev = reverse_clip(&clip);
        let fwd = enc.encode(&clip, 2).unwrap();
        let bwd = enc.encode(&rev, 2).unwrap();
        let mirrored = bwd.mirror_time();
        let max_diff = fwd
            .data
            .iter()
            .zip(mirrored.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0, "cross-frame attention must break mirroring");
    }

    #[test]
    fn encoder_is_frozen_and_deterministic() {
        let cfg = small_cfg(EncoderFamily::VideoCentricToy, true, 9);
        let enc1 = Encoder::new(cfg).unwrap();
        let enc2 = Encoder::new(cfg).unwrap();
        let clip = random_clip(1, 8, 8);
        let a = enc1.encode(&clip, 1).unwrap();
        let b = enc1.encode(&clip, 1).unwrap();
        let c = enc2.encode(&clip, 1).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data, c.data);
    }

    #[test]
    fn config_validation_enforces_family_tubelets() {
        let mut cfg = small_cfg(EncoderFamily::VideoCentricToy, true, 1);
        cfg.tubelet = 1;
        assert!(Encoder::new(cfg).is_err());
        let mut cfg = small_cfg(EncoderFamily::FrameCentricToy, true, 1);
        cfg.tubelet = 2;
        assert!(Encoder::new(cfg).is_err());
    }
}
