//! Attentive probing: a single learnable query cross-attends over frozen
//! encoder features, and a small classifier reads the pooled vector.
//!
//! The probe contains no positional information, so its output is invariant
//! to any permutation of the flattened tokens (bit-exactly: attention
//! reductions use canonical-order sums). Any temporal discrimination it
//! measures is therefore attributable to the encoder's features.

use ndarray::Array2;
use serde_json::json;
use thiserror::Error;

use crate::data::clip::{DirectionLabel, LabeledClip};
use crate::encoder::{Encoder, EncoderError, FeatureGrid};
use crate::io::tensorfile::{TensorFile, TensorFileError};
use crate::nn::{init, Adam, Graph, NodeId};
use crate::seeds;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("feature width {got} does not match probe width {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("dim {dim} not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("empty training stream")]
    EmptyStream,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] TensorFileError),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
}

/// Probe parameters: query, projection matrices, and a two-layer classifier
/// with logits for (F, B).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub dim: usize,
    pub num_heads: usize,
    pub query: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Training configuration. Defaults: 1 epoch, batch 4, lr 1e-4, 16 heads.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-4,
            num_heads: 16,
            seed: 0,
        }
    }
}

impl ProbeParams {
    /// Seeded initialization for feature width `dim`.
    pub fn init(dim: usize, num_heads: usize, seed: u64) -> Result<Self, ProbeError> {
        if dim % num_heads != 0 {
            return Err(ProbeError::HeadSplit {
                dim,
                heads: num_heads,
            });
        }
        let mut rng = seeds::rng(seeds::substream(seed, "probe-init"));
        Ok(Self {
            dim,
            num_heads,
            query: init::normal(&mut rng, 1, dim, 0.5),
            wq: init::scaled_normal(&mut rng, dim, dim, dim),
            wk: init::scaled_normal(&mut rng, dim, dim, dim),
            wv: init::scaled_normal(&mut rng, dim, dim, dim),
            w1: init::scaled_normal(&mut rng, dim, dim, dim),
            b1: init::zeros(1, dim),
            w2: init::scaled_normal(&mut rng, dim, 2, dim),
            b2: init::zeros(1, 2),
        })
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        f(&mut self.query);
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }

    const TENSOR_NAMES: [&'static str; 8] =
        ["query", "wq", "wk", "wv", "w1", "b1", "w2", "b2"];

    /// Save as a self-describing checkpoint.
    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<(), ProbeError> {
        let mut tf = TensorFile::new(json!({
            "kind": "probe",
            "dim": self.dim,
            "num_heads": self.num_heads,
            "seed": seed,
        }));
        let clone = self.clone();
        for (name, t) in Self::TENSOR_NAMES.iter().zip([
            clone.query, clone.wq, clone.wk, clone.wv, clone.w1, clone.b1, clone.w2, clone.b2,
        ]) {
            tf.push(*name, t);
        }
        tf.save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ProbeError> {
        let tf = TensorFile::load(path)?;
        let fetch = |name: &str| -> Result<Array2<f64>, ProbeError> {
            tf.get(name)
                .cloned()
                .ok_or_else(|| ProbeError::MissingTensor(name.to_string()))
        };
        let query = fetch("query")?;
        let dim = query.ncols();
        Ok(Self {
            dim,
            num_heads: tf.meta["num_heads"].as_u64().unwrap_or(1) as usize,
            query,
            wq: fetch("wq")?,
            wk: fetch("wk")?,
            wv: fetch("wv")?,
            w1: fetch("w1")?,
            b1: fetch("b1")?,
            w2: fetch("w2")?,
            b2: fetch("b2")?,
        })
    }
}

struct ProbeNodes {
    query: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

fn bind(g: &mut Graph, p: &ProbeParams, trainable: bool) -> ProbeNodes {
    let mut leaf = |w: &Array2<f64>| {
        if trainable {
            g.param(w)
        } else {
            g.constant(w.clone())
        }
    };
    ProbeNodes {
        query: leaf(&p.query),
        wq: leaf(&p.wq),
        wk: leaf(&p.wk),
        wv: leaf(&p.wv),
        w1: leaf(&p.w1),
        b1: leaf(&p.b1),
        w2: leaf(&p.w2),
        b2: leaf(&p.b2),
    }
}

/// Slice columns [h·dh, (h+1)·dh) of a node.
fn col_slice(g: &mut Graph, x: NodeId, start: usize, len: usize) -> NodeId {
    let t = g.transpose(x);
    let s = g.slice_rows(t, start, len);
    g.transpose(s)
}

/// Build probe logits (1×2) on the graph from a token matrix node (N×d).
fn logits_on_graph(
    g: &mut Graph,
    tokens: NodeId,
    nodes: &ProbeNodes,
    dim: usize,
    num_heads: usize,
) -> NodeId {
    let dh = dim / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_full = g.matmul(nodes.query, nodes.wq); // 1×d
    let k_full = g.matmul(tokens, nodes.wk); // N×d
    let v_full = g.matmul(tokens, nodes.wv); // N×d
    // Per-head attention over all tokens; heads re-concatenated by column.
    let mut pooled: Option<NodeId> = None;
    for h in 0..num_heads {
        let qh = col_slice(g, q_full, h * dh, dh);
        let kh = col_slice(g, k_full, h * dh, dh);
        let vh = col_slice(g, v_full, h * dh, dh);
        let oh = g.attn_stable(qh, kh, vh, scale); // 1×dh
        pooled = Some(match pooled {
            None => oh,
            Some(acc) => {
                // column concat via transposes
                let at = g.transpose(acc);
                let ot = g.transpose(oh);
                let cat = g.concat_rows(at, ot);
                g.transpose(cat)
            }
        });
    }
    let pooled = pooled.expect("at least one head");
    let h1 = g.matmul(pooled, nodes.w1);
    let h1b = g.add_row(h1, nodes.b1);
    let act = g.gelu(h1b);
    let h2 = g.matmul(act, nodes.w2);
    g.add_row(h2, nodes.b2)
}

/// Probability vector (p_F, p_B) for one feature grid.
pub fn probe_forward(grid: &FeatureGrid, params: &ProbeParams) -> Result<[f64; 2], ProbeError> {
    if grid.dim() != params.dim {
        return Err(ProbeError::DimMismatch {
            got: grid.dim(),
            want: params.dim,
        });
    }
    let mut g = Graph::new();
    let tokens = g.constant(grid.to_f64());
    let nodes = bind(&mut g, params, false);
    let logits = logits_on_graph(&mut g, tokens, &nodes, params.dim, params.num_heads);
    let probs = crate::nn::softmax_rows(g.value(logits));
    Ok([probs[[0, 0]], probs[[0, 1]]])
}

/// Deterministic prediction: argmax, ties resolve to F.
pub fn predict(probs: [f64; 2]) -> DirectionLabel {
    if probs[0] >= probs[1] {
        DirectionLabel::F
    } else {
        DirectionLabel::B
    }
}

fn class_index(label: DirectionLabel) -> usize {
    match label {
        DirectionLabel::F => 0,
        DirectionLabel::B => 1,
    }
}

/// Train a probe on frozen features with cross-entropy and Adam. Only the
/// probe parameters receive updates; runs are deterministic given the seed.
pub fn train_probe(
    features: &[(FeatureGrid, DirectionLabel)],
    cfg: &ProbeTrainConfig,
) -> Result<ProbeParams, ProbeError> {
    let first = features.first().ok_or(ProbeError::EmptyStream)?;
    let dim = first.0.dim();
    let mut params = ProbeParams::init(dim, cfg.num_heads, cfg.seed)?;
    for (grid, _) in features {
        if grid.dim() != dim {
            return Err(ProbeError::DimMismatch {
                got: grid.dim(),
                want: dim,
            });
        }
    }
    let mut opt = Adam::new(cfg.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut shuffle_rng = seeds::rng(seeds::substream(cfg.seed, "probe-shuffle"));
    for _epoch in 0..cfg.epochs {
        seeds::shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Array2<f64>>> = None;
            for &ix in chunk {
                let (grid, label) = &features[ix];
                let mut g = Graph::new();
                let tokens = g.constant(grid.to_f64());
                let nodes = bind(&mut g, &params, true);
                let logits = logits_on_graph(&mut g, tokens, &nodes, dim, cfg.num_heads);
                let loss = g.masked_ce(logits, vec![class_index(*label)], vec![1.0]);
                g.backward(loss);
                let sample = vec![
                    g.grad(nodes.query),
                    g.grad(nodes.wq),
                    g.grad(nodes.wk),
                    g.grad(nodes.wv),
                    g.grad(nodes.w1),
                    g.grad(nodes.b1),
                    g.grad(nodes.w2),
                    g.grad(nodes.b2),
                ];
                match &mut grads {
                    None => grads = Some(sample),
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(sample) {
                            *a += &s;
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f64;
            for ga in grads.iter_mut() {
                ga.mapv_inplace(|v| v * inv);
            }
            opt.begin_step();
            let mut k = 0;
            params.visit_mut(&mut |w| {
                opt.update(k, w, &grads[k]);
                k += 1;
            });
        }
    }
    Ok(params)
}

/// Paired-set accuracy of a probe over encoded clips: correct / (2 × pairs).
pub fn eval_probe(
    params: &ProbeParams,
    pairs: &[(LabeledClip, LabeledClip)],
    encoder: &Encoder,
    layer: usize,
) -> Result<f64, ProbeError> {
    let mut items = Vec::with_capacity(pairs.len() * 2);
    for (f, b) in pairs {
        for side in [f, b] {
            let grid = encoder.encode(&side.clip, layer)?;
            items.push((grid, side.label));
        }
    }
    eval_probe_grids(params, &items)
}

/// Accuracy over pre-encoded items.
pub fn eval_probe_grids(
    params: &ProbeParams,
    items: &[(FeatureGrid, DirectionLabel)],
) -> Result<f64, ProbeError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (grid, label) in items {
        let probs = probe_forward(grid, params)?;
        if predict(probs) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GridDims;
    use ndarray::Array2;
    use rand::Rng;

    fn grid_from(data: Array2<f32>, t: usize, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid {
            data,
            grid: GridDims::new(t, h, w),
            tubelet: 1,
            patch: 1,
            layer_index: 1,
            encoder_id: "test".to_string(),
        }
    }

    #[test]
    fn single_token_attention_is_identity_weight() {
        // With one token the attention weight is exactly 1, so the pooled
        // vector is h·W_V regardless of q, W_Q, W_K.
        let dim = 8;
        let params = ProbeParams::init(dim, 1, 3).unwrap();
        let mut rng = seeds::rng(11);
        let data = Array2::from_shape_fn((1, dim), |_| rng.random_range(-1.0..1.0f32));
        let grid = grid_from(data.clone(), 1, 1, 1);
        let probs = probe_forward(&grid, &params).unwrap();

        // Oracle: pooled = h·W_V, then the classifier.
        let h = data.mapv(f64::from);
        let pooled = h.dot(&params.wv);
        let h1 = pooled.dot(&params.w1) + &params.b1;
        let act = h1.mapv(crate::nn::gelu);
        let logits = act.dot(&params.w2) + &params.b2;
        let expect = crate::nn::softmax_rows(&logits);
        assert!((probs[0] - expect[[0, 0]]).abs() < 1e-12);
        assert!((probs[1] - expect[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        // Two identical tokens: attention weights are (0.5, 0.5), so the
        // pooled vector equals the single-token pooled vector.
        let dim = 8;
        let params = ProbeParams::init(dim, 2, 5).unwrap();
        let mut rng = seeds::rng(13);
        let row: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut two = Array2::zeros((2, dim));
        for j in 0..dim {
            two[[0, j]] = row[j];
            two[[1, j]] = row[j];
        }
        let one = Array2::from_shape_vec((1, dim), row).unwrap();
        let p2 = probe_forward(&grid_from(two, 2, 1, 1), &params).unwrap();
        let p1 = probe_forward(&grid_from(one, 1, 1, 1), &params).unwrap();
        assert!((p1[0] - p2[0]).abs() < 1e-12);
    }

    #[test]
    fn permutation_of_tokens_is_bit_exact_invariant() {
        let dim = 16;
        let params = ProbeParams::init(dim, 4, 7).unwrap();
        let mut rng = seeds::rng(17);
        let data = Array2::from_shape_fn((12, dim), |_| rng.random_range(-1.0..1.0f32));
        let mut permuted = data.clone();
        // rotate rows and swap a couple
        let n = permuted.nrows();
        let tmp = permuted.row(0).to_owned();
        for i in 0..n - 1 {
            let next = permuted.row(i + 1).to_owned();
            permuted.row_mut(i).assign(&next);
        }
        permuted.row_mut(n - 1).assign(&tmp);
        let a = probe_forward(&grid_from(data, 12, 1, 1), &params).unwrap();
        let b = probe_forward(&grid_from(permuted, 12, 1, 1), &params).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn probabilities_normalize() {
        let params = ProbeParams::init(8, 2, 1).unwrap();
        let mut rng = seeds::rng(23);
        let data = Array2::from_shape_fn((6, 8), |_| rng.random_range(-2.0..2.0f32));
        let p = probe_forward(&grid_from(data, 6, 1, 1), &params).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert!(p[0] >= 0.0 && p[1] >= 0.0);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let params = ProbeParams::init(8, 2, 1).unwrap();
        let data = Array2::zeros((3, 6));
        let err = probe_forward(&grid_from(data, 3, 1, 1), &params);
        assert!(matches!(err, Err(ProbeError::DimMismatch { .. })));
    }

    fn separable_set(n: usize, dim: usize, seed: u64) -> Vec<(FeatureGrid, DirectionLabel)> {
        // Direction encoded in the sign of the mean feature.
        let mut rng = seeds::rng(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 {
                    DirectionLabel::F
                } else {
                    DirectionLabel::B
                };
                let mu = if label == DirectionLabel::F { 2.0 } else { -2.0 };
                let data = Array2::from_shape_fn((4, dim), |_| {
                    (mu + rng.random_range(-0.5..0.5)) as f32
                });
                (grid_from(data, 4, 1, 1), label)
            })
            .collect()
    }

    #[test]
    fn learns_linearly_separable_features_in_one_epoch() {
        let cfg = ProbeTrainConfig {
            num_heads: 4,
            seed: 21,
            ..Default::default()
        };
        let data = separable_set(2_000, 16, 31);
        let params = train_probe(&data, &cfg).unwrap();
        let acc = eval_probe_grids(&params, &data).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = ProbeTrainConfig {
            learning_rate: 0.0,
            num_heads: 2,
            seed: 4,
            ..Default::default()
        };
        let data = separable_set(16, 8, 5);
        let trained = train_probe(&data, &cfg).unwrap();
        let fresh = ProbeParams::init(8, 2, cfg.seed).unwrap();
        assert_eq!(trained, fresh);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ProbeTrainConfig {
            num_heads: 2,
            seed: 77,
            ..Default::default()
        };
        let data = separable_set(64, 8, 6);
        let a = train_probe(&data, &cfg).unwrap();
        let b = train_probe(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(train_probe(&[], &cfg).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.aotk");
        let params = ProbeParams::init(8, 2, 9).unwrap();
        params.save(&path, 9).unwrap();
        let back = ProbeParams::load(&path).unwrap();
        assert_eq!(back, params);
    }
}
