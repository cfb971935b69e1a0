//! A small character-level transformer decoder.
//!
//! Four pre-LN blocks, width 128, causal self-attention. Visual tokens are
//! prepended to the text embedding sequence and attend causally like any
//! other position. Construction (`Decoder::pretrained`) briefly trains the
//! decoder as a plain character LM on the rendered template corpus so the
//! answer words are emittable; fine-tuning then adapts the frozen base with
//! low-rank adapters on the attention query/value projections.

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::vqa::{all_renderings, VqaSample};
use crate::io::tensorfile::{TensorFile, TensorFileError};
use crate::nn::{gelu, init, Adam, Graph, NodeId};
use crate::seeds;

use super::lora::LoraSet;
use super::vocab;

pub const D_MODEL: usize = 128;
pub const NUM_BLOCKS: usize = 4;
pub const NUM_HEADS: usize = 4;
const FFN_HIDDEN: usize = 256;
pub const MAX_LEN: usize = 512;
const HEAD_DIM: usize = D_MODEL / NUM_HEADS;

/// Pretraining recipe (fixed; a seed fully determines the base decoder).
const PRETRAIN_STEPS: usize = 500;
const PRETRAIN_BATCH: usize = 2;
const PRETRAIN_LR: f64 = 1e-3;
/// Random position offset range during pretraining, so the text tower is not
/// pinned to absolute position 0 and tolerates a visual prefix later.
const PRETRAIN_MAX_OFFSET: usize = 16;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("sequence length {len} exceeds decoder maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("text encoding: {0}")]
    Vocab(#[from] vocab::VocabError),
    #[error(transparent)]
    Checkpoint(#[from] TensorFileError),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderBlock {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl DecoderBlock {
    fn init(rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            ln1_g: init::ones(1, D_MODEL),
            ln1_b: init::zeros(1, D_MODEL),
            wq: init::scaled_normal(rng, D_MODEL, D_MODEL, D_MODEL),
            wk: init::scaled_normal(rng, D_MODEL, D_MODEL, D_MODEL),
            wv: init::scaled_normal(rng, D_MODEL, D_MODEL, D_MODEL),
            wo: init::scaled_normal(rng, D_MODEL, D_MODEL, D_MODEL),
            bo: init::zeros(1, D_MODEL),
            ln2_g: init::ones(1, D_MODEL),
            ln2_b: init::zeros(1, D_MODEL),
            w1: init::scaled_normal(rng, D_MODEL, FFN_HIDDEN, D_MODEL),
            b1: init::zeros(1, FFN_HIDDEN),
            w2: init::scaled_normal(rng, FFN_HIDDEN, D_MODEL, FFN_HIDDEN),
            b2: init::zeros(1, D_MODEL),
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

/// The frozen base decoder.
pub struct Decoder {
    pub seed: u64,
    pub(crate) tok_emb: Array2<f64>,
    pub(crate) pos_emb: Array2<f64>,
    pub(crate) blocks: Vec<DecoderBlock>,
    pub(crate) lnf_g: Array2<f64>,
    pub(crate) lnf_b: Array2<f64>,
    pub(crate) head: Array2<f64>,
    pub(crate) head_b: Array2<f64>,
}

/// Node handles for one bound block (training path).
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

/// LoRA node handles per block: (a_q, b_q, a_v, b_v).
pub(crate) type LoraNodes = Vec<(NodeId, NodeId, NodeId, NodeId)>;

/// Everything a caller needs after a training-path forward: the final
/// hidden-state node and LM head, plus the trainable leaf ids (base weights
/// in `visit_mut` order when the base is trainable, adapters when LoRA is
/// attached).
pub(crate) struct DecoderBound {
    pub hidden: NodeId,
    pub head: NodeId,
    pub head_b: NodeId,
    pub base_ids: Vec<NodeId>,
    pub lora_ids: LoraNodes,
}

impl Decoder {
    /// Random-initialized decoder (no language warmup).
    pub fn new(seed: u64) -> Self {
        let mut rng = seeds::rng(seeds::substream(seed, "dec-init"));
        Self {
            seed,
            tok_emb: init::normal(&mut rng, vocab::VOCAB_SIZE, D_MODEL, 0.5),
            pos_emb: init::normal(&mut rng, MAX_LEN, D_MODEL, 0.5),
            blocks: (0..NUM_BLOCKS).map(|_| DecoderBlock::init(&mut rng)).collect(),
            lnf_g: init::ones(1, D_MODEL),
            lnf_b: init::zeros(1, D_MODEL),
            head: init::scaled_normal(&mut rng, D_MODEL, vocab::VOCAB_SIZE, D_MODEL),
            head_b: init::zeros(1, vocab::VOCAB_SIZE),
        }
    }

    /// Decoder after the seeded template-corpus warmup: a character LM that
    /// can spell both answer words.
    pub fn pretrained(seed: u64) -> Self {
        let mut dec = Self::new(seed);
        dec.pretrain_on_templates(PRETRAIN_STEPS);
        dec
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        f(&mut self.tok_emb);
        f(&mut self.pos_emb);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.lnf_g);
        f(&mut self.lnf_b);
        f(&mut self.head);
        f(&mut self.head_b);
    }

    fn visit(&self, f: &mut impl FnMut(&Array2<f64>)) {
        f(&self.tok_emb);
        f(&self.pos_emb);
        for b in &self.blocks {
            f(&b.ln1_g);
            f(&b.ln1_b);
            f(&b.wq);
            f(&b.wk);
            f(&b.wv);
            f(&b.wo);
            f(&b.bo);
            f(&b.ln2_g);
            f(&b.ln2_b);
            f(&b.w1);
            f(&b.b1);
            f(&b.w2);
            f(&b.b2);
        }
        f(&self.lnf_g);
        f(&self.lnf_b);
        f(&self.head);
        f(&self.head_b);
    }

    /// SHA-256 over all base weights; used to verify the base stays frozen
    /// across fine-tuning.
    pub fn base_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit(&mut |w| {
            for v in w.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().into()
    }

    /// Serialize the text portion of a sample: prompt is instruction and
    /// question, continuation is the answer word.
    pub fn render_text(sample: &VqaSample) -> (String, String) {
        (
            format!("{}\n{}\n", sample.instruction, sample.question),
            sample.answer.clone(),
        )
    }

    /// Token ids for a full training sequence: BOS + prompt + answer + EOS,
    /// plus the answer mask aligned to next-token targets.
    pub fn encode_sample(sample: &VqaSample) -> Result<(Vec<usize>, Vec<f64>), DecoderError> {
        let (prompt, answer) = Self::render_text(sample);
        let p_ids = vocab::encode(&prompt)?;
        let a_ids = vocab::encode(&answer)?;
        let mut ids = Vec::with_capacity(p_ids.len() + a_ids.len() + 2);
        ids.push(vocab::BOS);
        ids.extend_from_slice(&p_ids);
        let answer_start = ids.len();
        ids.extend_from_slice(&a_ids);
        ids.push(vocab::EOS);
        // Targets are ids[1..]; target index k corresponds to ids[k+1].
        let mut mask = vec![0.0; ids.len() - 1];
        for (k, m) in mask.iter_mut().enumerate() {
            if k + 1 >= answer_start {
                *m = 1.0;
            }
        }
        Ok((ids, mask))
    }

    fn bind_block(
        g: &mut Graph,
        block: &DecoderBlock,
        trainable: bool,
        lora: Option<(&super::lora::LoraAdapter, &super::lora::LoraAdapter)>,
    ) -> (BlockNodes, Option<(NodeId, NodeId, NodeId, NodeId)>) {
        let mut leaf = |w: &Array2<f64>| {
            if trainable {
                g.param(w)
            } else {
                g.constant(w.clone())
            }
        };
        let ln1_g = leaf(&block.ln1_g);
        let ln1_b = leaf(&block.ln1_b);
        let wk = leaf(&block.wk);
        let wo = leaf(&block.wo);
        let bo = leaf(&block.bo);
        let ln2_g = leaf(&block.ln2_g);
        let ln2_b = leaf(&block.ln2_b);
        let w1 = leaf(&block.w1);
        let b1 = leaf(&block.b1);
        let w2 = leaf(&block.w2);
        let b2 = leaf(&block.b2);
        let (wq, wv, lora_ids) = match lora {
            Some((ad_q, ad_v)) => {
                let (wq_eff, aq, bq) = ad_q.apply_on_graph(g, &block.wq);
                let (wv_eff, av, bv) = ad_v.apply_on_graph(g, &block.wv);
                (wq_eff, wv_eff, Some((aq, bq, av, bv)))
            }
            None => {
                let wq = if trainable {
                    g.param(&block.wq)
                } else {
                    g.constant(block.wq.clone())
                };
                let wv = if trainable {
                    g.param(&block.wv)
                } else {
                    g.constant(block.wv.clone())
                };
                (wq, wv, None)
            }
        };
        (
            BlockNodes {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            },
            lora_ids,
        )
    }

    fn block_forward(g: &mut Graph, x: NodeId, n: &BlockNodes) -> NodeId {
        let scale = 1.0 / (HEAD_DIM as f64).sqrt();
        let normed = g.layer_norm_rows(x, n.ln1_g, n.ln1_b);
        let q = g.matmul(normed, n.wq);
        let k = g.matmul(normed, n.wk);
        let v = g.matmul(normed, n.wv);
        let attended = g.attn_multi(q, k, v, NUM_HEADS, true, scale);
        let sa = g.matmul(attended, n.wo);
        let sa = g.add_row(sa, n.bo);
        let x = g.add(x, sa);
        let normed = g.layer_norm_rows(x, n.ln2_g, n.ln2_b);
        let h1 = g.matmul(normed, n.w1);
        let h1b = g.add_row(h1, n.b1);
        let act = g.gelu(h1b);
        let h2 = g.matmul(act, n.w2);
        let h2b = g.add_row(h2, n.b2);
        g.add(x, h2b)
    }

    /// Training/teacher-forcing forward over `visual ++ text`.
    pub(crate) fn forward_on_graph(
        &self,
        g: &mut Graph,
        visual: Option<NodeId>,
        text_ids: &[usize],
        pos_offset: usize,
        trainable_base: bool,
        lora: Option<&LoraSet>,
    ) -> Result<DecoderBound, DecoderError> {
        let n_vis = visual
            .map(|v| g.value(v).nrows())
            .unwrap_or(0);
        let total = n_vis + text_ids.len();
        if total + pos_offset > MAX_LEN {
            return Err(DecoderError::TooLong {
                len: total + pos_offset,
                max: MAX_LEN,
            });
        }
        let tok_table = if trainable_base {
            g.param(&self.tok_emb)
        } else {
            g.constant(self.tok_emb.clone())
        };
        let pos_table = if trainable_base {
            g.param(&self.pos_emb)
        } else {
            g.constant(self.pos_emb.clone())
        };
        let text_emb = g.gather(tok_table, text_ids.to_vec());
        let x = match visual {
            Some(v) => g.concat_rows(v, text_emb),
            None => text_emb,
        };
        let pos_ids: Vec<usize> = (pos_offset..pos_offset + total).collect();
        let pos = g.gather(pos_table, pos_ids);
        let mut x = g.add(x, pos);
        let mut lora_nodes = Vec::new();
        let mut base_ids = vec![tok_table, pos_table];
        for (i, block) in self.blocks.iter().enumerate() {
            let adapters = lora.map(|set| {
                let (q, v) = &set.per_block[i];
                (q, v)
            });
            let (nodes, ids) = Self::bind_block(g, block, trainable_base, adapters);
            if let Some(ids) = ids {
                lora_nodes.push(ids);
            }
            if trainable_base {
                base_ids.extend_from_slice(&[
                    nodes.ln1_g, nodes.ln1_b, nodes.wq, nodes.wk, nodes.wv, nodes.wo,
                    nodes.bo, nodes.ln2_g, nodes.ln2_b, nodes.w1, nodes.b1, nodes.w2,
                    nodes.b2,
                ]);
            }
            x = Self::block_forward(g, x, &nodes);
        }
        let lnf_g = if trainable_base {
            g.param(&self.lnf_g)
        } else {
            g.constant(self.lnf_g.clone())
        };
        let lnf_b = if trainable_base {
            g.param(&self.lnf_b)
        } else {
            g.constant(self.lnf_b.clone())
        };
        let head = if trainable_base {
            g.param(&self.head)
        } else {
            g.constant(self.head.clone())
        };
        let head_b = if trainable_base {
            g.param(&self.head_b)
        } else {
            g.constant(self.head_b.clone())
        };
        let hidden = g.layer_norm_rows(x, lnf_g, lnf_b);
        if trainable_base {
            base_ids.extend_from_slice(&[lnf_g, lnf_b, head, head_b]);
        } else {
            base_ids.clear();
        }
        Ok(DecoderBound {
            hidden,
            head,
            head_b,
            base_ids,
            lora_ids: lora_nodes,
        })
    }

    /// Logits for every position (consistency checks; the loss path slices
    /// to the masked rows instead).
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn logits_all(g: &mut Graph, bound: &DecoderBound) -> NodeId {
        let logits = g.matmul(bound.hidden, bound.head);
        g.add_row(logits, bound.head_b)
    }

    /// Next-token cross-entropy restricted to masked targets, teacher
    /// forcing over `visual ++ text`. Masks of all zeros give loss 0.
    pub fn loss(
        &self,
        visual: Option<&Array2<f64>>,
        text_ids: &[usize],
        answer_mask: &[f64],
        lora: Option<&LoraSet>,
    ) -> Result<f64, DecoderError> {
        let mut g = Graph::new();
        let vis = visual.map(|v| g.constant(v.clone()));
        let bound = self.forward_on_graph(&mut g, vis, text_ids, 0, false, lora)?;
        let n_vis = visual.map(|v| v.nrows()).unwrap_or(0);
        let (loss, _) = Self::loss_from_hidden(&mut g, &bound, n_vis, text_ids, answer_mask);
        Ok(g.value(loss)[[0, 0]])
    }

    /// Attach the masked-CE loss to a bound forward. Only the rows inside
    /// the mask's nonzero span go through the LM head; zero-mask rows
    /// contribute nothing to the loss either way. Returns the loss node and
    /// the number of scored positions.
    pub(crate) fn loss_from_hidden(
        g: &mut Graph,
        bound: &DecoderBound,
        n_vis: usize,
        text_ids: &[usize],
        answer_mask: &[f64],
    ) -> (NodeId, usize) {
        // Row n_vis + k predicts text token k+1.
        let n_pred = text_ids.len() - 1;
        assert_eq!(answer_mask.len(), n_pred, "mask aligns with targets");
        let first = answer_mask.iter().position(|&m| m != 0.0);
        let (lo, hi) = match first {
            Some(lo) => {
                let hi = answer_mask.iter().rposition(|&m| m != 0.0).unwrap() + 1;
                (lo, hi)
            }
            None => (0, 0),
        };
        let rows = g.slice_rows(bound.hidden, n_vis + lo, hi - lo);
        let logits = g.matmul(rows, bound.head);
        let logits = g.add_row(logits, bound.head_b);
        let targets: Vec<usize> = text_ids[1 + lo..1 + hi].to_vec();
        (
            g.masked_ce(logits, targets, answer_mask[lo..hi].to_vec()),
            hi - lo,
        )
    }

    /// Brief seeded character-LM warmup on the template corpus.
    pub fn pretrain_on_templates(&mut self, steps: usize) {
        let corpus: Vec<Vec<usize>> = all_renderings()
            .iter()
            .map(|(_, _, instr, q, answer)| {
                let text = format!("{instr}\n{q}\n{answer}");
                let mut ids = vec![vocab::BOS];
                ids.extend(vocab::encode(&text).expect("templates are ascii"));
                ids.push(vocab::EOS);
                ids
            })
            .collect();
        let mut rng = seeds::rng(seeds::substream(self.seed, "dec-pretrain"));
        let mut opt = Adam::new(PRETRAIN_LR, 0.0);
        use rand::Rng;
        for _ in 0..steps {
            let mut grads: Option<Vec<Array2<f64>>> = None;
            for _ in 0..PRETRAIN_BATCH {
                let ids = &corpus[rng.random_range(0..corpus.len())];
                let offset = rng.random_range(0..=PRETRAIN_MAX_OFFSET);
                let mut g = Graph::new();
                let bound = self
                    .forward_on_graph(&mut g, None, ids, offset, true, None)
                    .expect("corpus fits");
                let mask = vec![1.0; ids.len() - 1];
                let (loss, _) = Self::loss_from_hidden(&mut g, &bound, 0, ids, &mask);
                g.backward(loss);
                let sample: Vec<Array2<f64>> =
                    bound.base_ids.iter().map(|id| g.grad(*id)).collect();
                match &mut grads {
                    None => grads = Some(sample),
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(sample) {
                            *a += &s;
                        }
                    }
                }
            }
            let mut grads = grads.expect("batch");
            let inv = 1.0 / PRETRAIN_BATCH as f64;
            for ga in grads.iter_mut() {
                ga.mapv_inplace(|v| v * inv);
            }
            opt.begin_step();
            let mut k = 0;
            self.visit_mut(&mut |w| {
                opt.update(k, w, &grads[k]);
                k += 1;
            });
        }
    }

    /// Save the full base decoder.
    pub fn save(&self, path: &std::path::Path) -> Result<(), DecoderError> {
        let mut tf = TensorFile::new(serde_json::json!({
            "kind": "decoder",
            "seed": self.seed,
            "d_model": D_MODEL,
            "blocks": NUM_BLOCKS,
        }));
        let mut k = 0;
        self.visit(&mut |w| {
            tf.push(format!("p{k:03}"), w.clone());
            k += 1;
        });
        tf.save(path)?;
        Ok(())
    }

    /// Load a decoder saved by [`Decoder::save`].
    pub fn load(path: &std::path::Path) -> Result<Self, DecoderError> {
        let tf = TensorFile::load(path)?;
        let seed = tf.meta["seed"].as_u64().unwrap_or(0);
        let mut dec = Self::new(seed);
        let mut k = 0;
        let mut missing = None;
        dec.visit_mut(&mut |w| {
            let name = format!("p{k:03}");
            match tf.get(&name) {
                Some(t) => *w = t.clone(),
                None => missing = Some(name),
            }
            k += 1;
        });
        if let Some(name) = missing {
            return Err(DecoderError::MissingTensor(name));
        }
        Ok(dec)
    }
}

// ---------------------------------------------------------------------------
// Inference path: plain ndarray forward with a per-block KV cache. Shares the
// weight tensors with the training path; a unit test pins the two paths to
// each other numerically.
// ---------------------------------------------------------------------------

fn ln_rows(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..x.ncols() {
            out[[i, j]] = (row[j] - mean) * inv * g[[0, j]] + b[[0, j]];
        }
    }
    out
}

fn add_row_inplace(x: &mut Array2<f64>, row: &Array2<f64>) {
    for mut r in x.rows_mut() {
        for j in 0..row.ncols() {
            r[j] += row[[0, j]];
        }
    }
}

/// Grown key/value tensors per block.
pub struct KvCache {
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    len: usize,
}

impl KvCache {
    fn new(blocks: usize) -> Self {
        Self {
            k: (0..blocks).map(|_| Array2::zeros((0, D_MODEL))).collect(),
            v: (0..blocks).map(|_| Array2::zeros((0, D_MODEL))).collect(),
            len: 0,
        }
    }

    fn append(dst: &mut Array2<f64>, new: &Array2<f64>) {
        let mut grown = Array2::zeros((dst.nrows() + new.nrows(), D_MODEL));
        grown.slice_mut(ndarray::s![..dst.nrows(), ..]).assign(dst);
        grown.slice_mut(ndarray::s![dst.nrows().., ..]).assign(new);
        *dst = grown;
    }
}

/// Per-block effective attention weights after LoRA application.
pub(crate) struct EffWeights {
    wq: Vec<Array2<f64>>,
    wv: Vec<Array2<f64>>,
}

impl Decoder {
    pub(crate) fn effective_weights(&self, lora: Option<&LoraSet>) -> EffWeights {
        match lora {
            None => EffWeights {
                wq: self.blocks.iter().map(|b| b.wq.clone()).collect(),
                wv: self.blocks.iter().map(|b| b.wv.clone()).collect(),
            },
            Some(set) => EffWeights {
                wq: self
                    .blocks
                    .iter()
                    .zip(&set.per_block)
                    .map(|(b, (q, _))| q.apply(&b.wq).expect("adapter fits"))
                    .collect(),
                wv: self
                    .blocks
                    .iter()
                    .zip(&set.per_block)
                    .map(|(b, (_, v))| v.apply(&b.wv).expect("adapter fits"))
                    .collect(),
            },
        }
    }

    /// Process `m` new rows whose absolute positions start at `cache.len`,
    /// extending the cache. Returns the final hidden rows (before the LM
    /// head).
    fn infer_rows(&self, eff: &EffWeights, cache: &mut KvCache, x_new: Array2<f64>) -> Array2<f64> {
        let m = x_new.nrows();
        let start = cache.len;
        let scale = 1.0 / (HEAD_DIM as f64).sqrt();
        let mut x = x_new;
        for (i, block) in self.blocks.iter().enumerate() {
            let normed = ln_rows(&x, &block.ln1_g, &block.ln1_b);
            let q = normed.dot(&eff.wq[i]);
            let k_new = normed.dot(&block.wk);
            let v_new = normed.dot(&eff.wv[i]);
            KvCache::append(&mut cache.k[i], &k_new);
            KvCache::append(&mut cache.v[i], &v_new);
            let keys = &cache.k[i];
            let vals = &cache.v[i];
            let total = keys.nrows();
            let mut attended = Array2::zeros((m, D_MODEL));
            for h in 0..NUM_HEADS {
                let hs = h * HEAD_DIM;
                for r in 0..m {
                    // causal horizon for this row
                    let visible = start + r + 1;
                    debug_assert!(visible <= total);
                    let mut logits = vec![0.0f64; visible];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for a in 0..HEAD_DIM {
                            dot += q[[r, hs + a]] * keys[[j, hs + a]];
                        }
                        *l = dot * scale;
                    }
                    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - mx).exp();
                        z += *l;
                    }
                    for a in 0..HEAD_DIM {
                        let mut acc = 0.0;
                        for (j, l) in logits.iter().enumerate() {
                            acc += l * vals[[j, hs + a]];
                        }
                        attended[[r, hs + a]] = acc / z;
                    }
                }
            }
            let mut sa = attended.dot(&block.wo);
            add_row_inplace(&mut sa, &block.bo);
            x += &sa;
            let normed = ln_rows(&x, &block.ln2_g, &block.ln2_b);
            let mut h1 = normed.dot(&block.w1);
            add_row_inplace(&mut h1, &block.b1);
            let act = h1.mapv(gelu);
            let mut h2 = act.dot(&block.w2);
            add_row_inplace(&mut h2, &block.b2);
            x += &h2;
        }
        cache.len += m;
        ln_rows(&x, &self.lnf_g, &self.lnf_b)
    }

    fn logits_for(&self, hidden_row: &Array2<f64>) -> Array2<f64> {
        let mut logits = hidden_row.dot(&self.head);
        add_row_inplace(&mut logits, &self.head_b);
        logits
    }

    fn embed_sequence(&self, visual: Option<&Array2<f64>>, ids: &[usize], start: usize) -> Array2<f64> {
        let n_vis = visual.map(|v| v.nrows()).unwrap_or(0);
        let total = n_vis + ids.len();
        let mut x = Array2::zeros((total, D_MODEL));
        if let Some(v) = visual {
            x.slice_mut(ndarray::s![..n_vis, ..]).assign(v);
        }
        for (i, &id) in ids.iter().enumerate() {
            x.row_mut(n_vis + i).assign(&self.tok_emb.row(id));
        }
        for r in 0..total {
            let p = start + r;
            for j in 0..D_MODEL {
                x[[r, j]] += self.pos_emb[[p, j]];
            }
        }
        x
    }

    /// Teacher-forcing logits via the inference path (used for consistency
    /// checks and fast evaluation without gradients).
    pub fn logits_nograd(
        &self,
        visual: Option<&Array2<f64>>,
        text_ids: &[usize],
        lora: Option<&LoraSet>,
    ) -> Result<Array2<f64>, DecoderError> {
        let n_vis = visual.map(|v| v.nrows()).unwrap_or(0);
        let total = n_vis + text_ids.len();
        if total > MAX_LEN {
            return Err(DecoderError::TooLong {
                len: total,
                max: MAX_LEN,
            });
        }
        let eff = self.effective_weights(lora);
        let mut cache = KvCache::new(self.blocks.len());
        let x = self.embed_sequence(visual, text_ids, 0);
        let hidden = self.infer_rows(&eff, &mut cache, x);
        Ok(self.logits_for(&hidden))
    }

    /// Greedy generation conditioned on visual tokens and a text prompt.
    /// Deterministic; stops at EOS or after `max_new` characters. Returns
    /// only the newly generated text.
    pub fn generate(
        &self,
        visual: Option<&Array2<f64>>,
        prompt: &str,
        lora: Option<&LoraSet>,
        max_new: usize,
    ) -> Result<String, DecoderError> {
        let mut ids = vec![vocab::BOS];
        ids.extend(vocab::encode(prompt)?);
        let n_vis = visual.map(|v| v.nrows()).unwrap_or(0);
        if n_vis + ids.len() + max_new > MAX_LEN {
            return Err(DecoderError::TooLong {
                len: n_vis + ids.len() + max_new,
                max: MAX_LEN,
            });
        }
        let eff = self.effective_weights(lora);
        let mut cache = KvCache::new(self.blocks.len());
        let prefix = self.embed_sequence(visual, &ids, 0);
        let hidden = self.infer_rows(&eff, &mut cache, prefix);
        let last = hidden.slice(ndarray::s![hidden.nrows() - 1.., ..]).to_owned();
        let mut next = argmax_row(&self.logits_for(&last));
        let mut out = Vec::new();
        for _ in 0..max_new {
            if next == vocab::EOS {
                break;
            }
            out.push(next);
            let pos = cache.len;
            let x = self.embed_sequence(None, &[next], pos);
            let hidden = self.infer_rows(&eff, &mut cache, x);
            next = argmax_row(&self.logits_for(&hidden));
        }
        Ok(vocab::decode(&out))
    }
}

/// Index of the row maximum; ties resolve to the lowest index.
fn argmax_row(logits: &Array2<f64>) -> usize {
    let row = logits.row(logits.nrows() - 1);
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
