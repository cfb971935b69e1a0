//! Projectors: compress a feature grid into visual tokens of the decoder's
//! embedding width.
//!
//! Two designs are studied:
//! - `mlp_pooled`: arithmetic-mean pooling of the grid to a target
//!   (T_out, H_out, W_out), then a per-token two-layer MLP. With
//!   T_out = T′ this is the time-preserved projection: mirroring the grid in
//!   time mirrors the token sequence, token for token. With T_out = 1 the
//!   temporal axis is pooled away entirely and the output is bit-exactly
//!   invariant to temporal permutations of the grid.
//! - `q_former`: learnable query tokens pass through blocks of
//!   self-attention (optionally joined by text tokens), cross-attention to
//!   the flattened grid, and a feed-forward layer. With position codes off
//!   the output is bit-exactly invariant to any permutation of the grid
//!   tokens; switching them on breaks that invariance.
//!
//! Cross-attention and pooling reduce over the grid axis with
//! canonical-order sums, which is what makes the invariances exact.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::encoder::FeatureGrid;
use crate::io::tensorfile::{TensorFile, TensorFileError};
use crate::nn::{init, Graph, GridDims, NodeId};
use crate::seeds;

/// Attention heads in Q-Former blocks.
const QF_HEADS: usize = 4;
/// Q-Former depth.
const QF_BLOCKS: usize = 2;
/// Std of the optional grid position codes.
const QF_POS_STD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("pooling factor: grid {axis}={value} not divisible by out {out}")]
    Pooling {
        axis: &'static str,
        value: usize,
        out: usize,
    },
    #[error("feature width {got} does not match projector input width {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] TensorFileError),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
}

/// Projector family plus its family-specific shape knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProjectorKind {
    MlpPooled {
        /// Target (T_out, H_out, W_out); each must divide the grid extent.
        out_grid: (usize, usize, usize),
    },
    QFormer {
        num_queries: usize,
        /// Add per-position codes to grid tokens before cross-attention.
        /// Off by default; on, it breaks grid-permutation invariance.
        #[serde(default)]
        pos_emb: bool,
    },
}

/// Full projector configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    #[serde(flatten)]
    pub kind: ProjectorKind,
    pub d_llm: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl ProjectorConfig {
    pub fn mlp(out_grid: (usize, usize, usize), d_llm: usize, hidden: usize, seed: u64) -> Self {
        Self {
            kind: ProjectorKind::MlpPooled { out_grid },
            d_llm,
            hidden,
            seed,
        }
    }

    pub fn qformer(num_queries: usize, d_llm: usize, hidden: usize, seed: u64) -> Self {
        Self {
            kind: ProjectorKind::QFormer {
                num_queries,
                pos_emb: false,
            },
            d_llm,
            hidden,
            seed,
        }
    }

    /// Exact number of output tokens.
    pub fn token_budget(&self) -> usize {
        match self.kind {
            ProjectorKind::MlpPooled { out_grid } => out_grid.0 * out_grid.1 * out_grid.2,
            ProjectorKind::QFormer { num_queries, .. } => num_queries,
        }
    }
}

/// Projector output: N_tok visual tokens in the decoder embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    /// Grid the tokens originate from, t-major; `None` for query tokens.
    pub origin_grid: Option<GridDims>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Debug, Clone)]
struct MlpParams {
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

#[derive(Debug, Clone)]
struct QfBlockParams {
    ln1_g: Array2<f64>,
    ln1_b: Array2<f64>,
    sa_wq: Vec<Array2<f64>>,
    sa_wk: Vec<Array2<f64>>,
    sa_wv: Vec<Array2<f64>>,
    sa_wo: Vec<Array2<f64>>,
    sa_bo: Array2<f64>,
    ln2_g: Array2<f64>,
    ln2_b: Array2<f64>,
    ca_wq: Vec<Array2<f64>>,
    ca_wk: Vec<Array2<f64>>,
    ca_wv: Vec<Array2<f64>>,
    ca_wo: Vec<Array2<f64>>,
    ca_bo: Array2<f64>,
    ln3_g: Array2<f64>,
    ln3_b: Array2<f64>,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

#[derive(Debug, Clone)]
struct QfParams {
    queries: Array2<f64>,
    blocks: Vec<QfBlockParams>,
}

#[derive(Debug, Clone)]
enum Params {
    Mlp(MlpParams),
    QFormer(QfParams),
}

/// A projector with its parameters. `d_in` is the feature width it accepts.
#[derive(Debug, Clone)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    d_in: usize,
    params: Params,
}

pub(crate) struct ProjNodes {
    ids: Vec<NodeId>,
}

impl Projector {
    /// Seeded construction for features of width `d_in`.
    pub fn new(cfg: ProjectorConfig, d_in: usize) -> Result<Self, ProjectorError> {
        if cfg.d_llm == 0 || cfg.hidden == 0 || d_in == 0 {
            return Err(ProjectorError::Config(
                "d_llm, hidden, d_in must be positive".to_string(),
            ));
        }
        let mut rng = seeds::rng(seeds::substream(cfg.seed, "proj-init"));
        let params = match cfg.kind {
            ProjectorKind::MlpPooled { .. } => Params::Mlp(MlpParams {
                w1: init::scaled_normal(&mut rng, d_in, cfg.hidden, d_in),
                b1: init::zeros(1, cfg.hidden),
                w2: init::scaled_normal(&mut rng, cfg.hidden, cfg.d_llm, cfg.hidden),
                b2: init::zeros(1, cfg.d_llm),
            }),
            ProjectorKind::QFormer { num_queries, .. } => {
                if num_queries == 0 {
                    return Err(ProjectorError::Config(
                        "num_queries must be positive".to_string(),
                    ));
                }
                if cfg.d_llm % QF_HEADS != 0 {
                    return Err(ProjectorError::Config(format!(
                        "d_llm {} must be divisible by {QF_HEADS} heads",
                        cfg.d_llm
                    )));
                }
                let w = cfg.d_llm;
                let dh = w / QF_HEADS;
                let mut block = || QfBlockParams {
                    ln1_g: init::ones(1, w),
                    ln1_b: init::zeros(1, w),
                    sa_wq: per_head(&mut rng, QF_HEADS, w, dh),
                    sa_wk: per_head(&mut rng, QF_HEADS, w, dh),
                    sa_wv: per_head(&mut rng, QF_HEADS, w, dh),
                    sa_wo: per_head(&mut rng, QF_HEADS, dh, w),
                    sa_bo: init::zeros(1, w),
                    ln2_g: init::ones(1, w),
                    ln2_b: init::zeros(1, w),
                    ca_wq: per_head(&mut rng, QF_HEADS, w, dh),
                    ca_wk: per_head(&mut rng, QF_HEADS, d_in, dh),
                    ca_wv: per_head(&mut rng, QF_HEADS, d_in, dh),
                    ca_wo: per_head(&mut rng, QF_HEADS, dh, w),
                    ca_bo: init::zeros(1, w),
                    ln3_g: init::ones(1, w),
                    ln3_b: init::zeros(1, w),
                    w1: init::scaled_normal(&mut rng, w, cfg.hidden, w),
                    b1: init::zeros(1, cfg.hidden),
                    w2: init::scaled_normal(&mut rng, cfg.hidden, w, cfg.hidden),
                    b2: init::zeros(1, w),
                };
                let blocks = (0..QF_BLOCKS).map(|_| block()).collect();
                Params::QFormer(QfParams {
                    queries: init::normal(&mut rng, num_queries, w, 0.5),
                    blocks,
                })
            }
        };
        Ok(Self { cfg, d_in, params })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// An MLP projector initialized to the identity map: hidden width 2d
    /// with w1 = [I, −I] and w2 = [I; −I], so the per-token map computes
    /// gelu(x) − gelu(−x) = x. With `out_grid` equal to the input grid the
    /// whole projector reproduces its input features.
    pub fn identity_mlp(d: usize, out_grid: (usize, usize, usize), seed: u64) -> Self {
        let cfg = ProjectorConfig::mlp(out_grid, d, 2 * d, seed);
        let mut w1 = Array2::zeros((d, 2 * d));
        let mut w2 = Array2::zeros((2 * d, d));
        for i in 0..d {
            w1[[i, i]] = 1.0;
            w1[[i, d + i]] = -1.0;
            w2[[i, i]] = 1.0;
            w2[[d + i, i]] = -1.0;
        }
        Self {
            cfg,
            d_in: d,
            params: Params::Mlp(MlpParams {
                w1,
                b1: init::zeros(1, 2 * d),
                w2,
                b2: init::zeros(1, d),
            }),
        }
    }

    pub fn token_budget(&self) -> usize {
        self.cfg.token_budget()
    }

    /// Zero every cross-attention value projection (test hook for the
    /// "queries pass through unchanged by visual input" property).
    pub fn zero_cross_value_path(&mut self) {
        if let Params::QFormer(qf) = &mut self.params {
            for b in &mut qf.blocks {
                for w in &mut b.ca_wv {
                    w.fill(0.0);
                }
            }
        }
    }

    /// Enumerate parameters in a fixed order (training and checkpoints).
    pub(crate) fn visit_mut(&mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        match &mut self.params {
            Params::Mlp(m) => {
                f(&mut m.w1);
                f(&mut m.b1);
                f(&mut m.w2);
                f(&mut m.b2);
            }
            Params::QFormer(qf) => {
                f(&mut qf.queries);
                for b in &mut qf.blocks {
                    f(&mut b.ln1_g);
                    f(&mut b.ln1_b);
                    for w in b
                        .sa_wq
                        .iter_mut()
                        .chain(&mut b.sa_wk)
                        .chain(&mut b.sa_wv)
                        .chain(&mut b.sa_wo)
                    {
                        f(w);
                    }
                    f(&mut b.sa_bo);
                    f(&mut b.ln2_g);
                    f(&mut b.ln2_b);
                    for w in b
                        .ca_wq
                        .iter_mut()
                        .chain(&mut b.ca_wk)
                        .chain(&mut b.ca_wv)
                        .chain(&mut b.ca_wo)
                    {
                        f(w);
                    }
                    f(&mut b.ca_bo);
                    f(&mut b.ln3_g);
                    f(&mut b.ln3_b);
                    f(&mut b.w1);
                    f(&mut b.b1);
                    f(&mut b.w2);
                    f(&mut b.b2);
                }
            }
        }
    }

    fn visit(&self, f: &mut impl FnMut(&Array2<f64>)) {
        let mut clone = self.clone();
        clone.visit_mut(&mut |w| f(w));
    }

    /// Bind parameters onto a graph; order matches `visit_mut`.
    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> ProjNodes {
        let mut ids = Vec::new();
        self.visit(&mut |w| {
            ids.push(if trainable {
                g.param(w)
            } else {
                g.constant(w.clone())
            });
        });
        ProjNodes { ids }
    }

    /// Gradients for every bound parameter, in `visit_mut` order.
    pub(crate) fn grads(&self, g: &Graph, nodes: &ProjNodes) -> Vec<Array2<f64>> {
        nodes.ids.iter().map(|id| g.grad(*id)).collect()
    }

    /// Apply an optimizer update over all parameters.
    pub(crate) fn adam_update(
        &mut self,
        opt: &mut crate::nn::Adam,
        base_index: usize,
        grads: &[Array2<f64>],
    ) -> usize {
        let mut k = 0;
        self.visit_mut(&mut |w| {
            opt.update(base_index + k, w, &grads[k]);
            k += 1;
        });
        k
    }

    fn check_input(&self, grid: &FeatureGrid) -> Result<(), ProjectorError> {
        if grid.dim() != self.d_in {
            return Err(ProjectorError::DimMismatch {
                got: grid.dim(),
                want: self.d_in,
            });
        }
        if let ProjectorKind::MlpPooled { out_grid } = self.cfg.kind {
            let checks = [
                ("T'", grid.grid.t, out_grid.0),
                ("H'", grid.grid.h, out_grid.1),
                ("W'", grid.grid.w, out_grid.2),
            ];
            for (axis, value, out) in checks {
                if out == 0 || value % out != 0 {
                    return Err(ProjectorError::Pooling { axis, value, out });
                }
            }
        }
        Ok(())
    }

    /// Forward on a graph. `grid_tokens` must be the N×d_in constant for the
    /// grid; returns the N_tok×d_llm token node.
    pub(crate) fn forward_on_graph(
        &self,
        g: &mut Graph,
        nodes: &ProjNodes,
        grid_tokens: NodeId,
        dims: GridDims,
        text: Option<NodeId>,
    ) -> NodeId {
        let mut it = nodes.ids.iter().copied();
        let mut next = || it.next().expect("bound parameter");
        match (&self.params, self.cfg.kind) {
            (Params::Mlp(_), ProjectorKind::MlpPooled { out_grid }) => {
                let (w1, b1, w2, b2) = (next(), next(), next(), next());
                let pooled = g.pool_blocks(
                    grid_tokens,
                    dims,
                    GridDims::new(out_grid.0, out_grid.1, out_grid.2),
                );
                let h1 = g.matmul(pooled, w1);
                let h1b = g.add_row(h1, b1);
                let act = g.gelu(h1b);
                let h2 = g.matmul(act, w2);
                g.add_row(h2, b2)
            }
            (Params::QFormer(qf), ProjectorKind::QFormer { pos_emb, .. }) => {
                let w = self.cfg.d_llm;
                let dh = w / QF_HEADS;
                let scale = 1.0 / (dh as f64).sqrt();
                // Optional per-position codes on the grid tokens.
                let kv_grid = if pos_emb {
                    let mut codes = Array2::zeros((dims.count(), self.d_in));
                    for t in 0..dims.t {
                        for hh in 0..dims.h {
                            for ww in 0..dims.w {
                                let row = (t * dims.h + hh) * dims.w + ww;
                                let code = grid_pos_code(
                                    self.cfg.seed,
                                    (t, hh, ww),
                                    self.d_in,
                                );
                                for j in 0..self.d_in {
                                    codes[[row, j]] = code[j];
                                }
                            }
                        }
                    }
                    let c = g.constant(codes);
                    g.add(grid_tokens, c)
                } else {
                    grid_tokens
                };
                let mut x = next(); // queries
                for _ in 0..QF_BLOCKS {
                    let (ln1_g, ln1_b) = (next(), next());
                    let sa_wq: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let sa_wk: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let sa_wv: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let sa_wo: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let sa_bo = next();
                    let (ln2_g, ln2_b) = (next(), next());
                    let ca_wq: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let ca_wk: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let ca_wv: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let ca_wo: Vec<NodeId> = (0..QF_HEADS).map(|_| next()).collect();
                    let ca_bo = next();
                    let (ln3_g, ln3_b) = (next(), next());
                    let (w1, b1, w2, b2) = (next(), next(), next(), next());

                    // Self-attention over queries, text joining as extra
                    // keys/values only.
                    let normed = g.layer_norm_rows(x, ln1_g, ln1_b);
                    let kv_self = match text {
                        Some(t) => g.concat_rows(normed, t),
                        None => normed,
                    };
                    let mut acc: Option<NodeId> = None;
                    for h in 0..QF_HEADS {
                        let q = g.matmul(normed, sa_wq[h]);
                        let k = g.matmul(kv_self, sa_wk[h]);
                        let v = g.matmul(kv_self, sa_wv[h]);
                        let kt = g.transpose(k);
                        let logits = g.matmul(q, kt);
                        let scaled = g.scale(logits, scale);
                        let attn = g.softmax_rows(scaled);
                        let o = g.matmul(attn, v);
                        let proj = g.matmul(o, sa_wo[h]);
                        acc = Some(match acc {
                            None => proj,
                            Some(a) => g.add(a, proj),
                        });
                    }
                    let sa = acc.expect("heads");
                    let sa = g.add_row(sa, sa_bo);
                    x = g.add(x, sa);

                    // Cross-attention to the grid; canonical-order sums make
                    // the output exactly permutation invariant when the grid
                    // carries no position codes.
                    let normed = g.layer_norm_rows(x, ln2_g, ln2_b);
                    let mut acc: Option<NodeId> = None;
                    for h in 0..QF_HEADS {
                        let q = g.matmul(normed, ca_wq[h]);
                        let k = g.matmul(kv_grid, ca_wk[h]);
                        let v = g.matmul(kv_grid, ca_wv[h]);
                        let o = g.attn_stable(q, k, v, scale);
                        let proj = g.matmul(o, ca_wo[h]);
                        acc = Some(match acc {
                            None => proj,
                            Some(a) => g.add(a, proj),
                        });
                    }
                    let ca = acc.expect("heads");
                    let ca = g.add_row(ca, ca_bo);
                    x = g.add(x, ca);

                    let normed = g.layer_norm_rows(x, ln3_g, ln3_b);
                    let h1 = g.matmul(normed, w1);
                    let h1b = g.add_row(h1, b1);
                    let act = g.gelu(h1b);
                    let h2 = g.matmul(act, w2);
                    let h2b = g.add_row(h2, b2);
                    x = g.add(x, h2b);
                }
                let _ = qf;
                x
            }
            _ => unreachable!("params match config kind"),
        }
    }

    /// Project a grid (no gradients). Text tokens, when given, join the
    /// Q-Former self-attention stream; the MLP ignores them.
    pub fn project(
        &self,
        grid: &FeatureGrid,
        text: Option<&Array2<f64>>,
    ) -> Result<TokenSequence, ProjectorError> {
        self.check_input(grid)?;
        let mut g = Graph::new();
        let tokens = g.constant(grid.to_f64());
        let text_node = text.map(|t| g.constant(t.clone()));
        let nodes = self.bind(&mut g, false);
        let out = self.forward_on_graph(&mut g, &nodes, tokens, grid.grid, text_node);
        let origin = match self.cfg.kind {
            ProjectorKind::MlpPooled { out_grid } => {
                Some(GridDims::new(out_grid.0, out_grid.1, out_grid.2))
            }
            ProjectorKind::QFormer { .. } => None,
        };
        Ok(TokenSequence {
            tokens: g.value(out).clone(),
            origin_grid: origin,
        })
    }

    /// Save all parameters with config metadata.
    pub fn save(&self, path: &std::path::Path) -> Result<(), ProjectorError> {
        let mut tf = TensorFile::new(json!({
            "kind": "projector",
            "config": serde_json::to_value(&self.cfg).expect("config serializes"),
            "d_in": self.d_in,
        }));
        let mut k = 0;
        self.visit(&mut |w| {
            tf.push(format!("p{k:03}"), w.clone());
            k += 1;
        });
        tf.save(path)?;
        Ok(())
    }

    /// Load a projector saved by [`Projector::save`].
    pub fn load(path: &std::path::Path) -> Result<Self, ProjectorError> {
        let tf = TensorFile::load(path)?;
        let cfg: ProjectorConfig = serde_json::from_value(tf.meta["config"].clone())
            .map_err(|e| ProjectorError::Config(format!("bad checkpoint config: {e}")))?;
        let d_in = tf.meta["d_in"].as_u64().unwrap_or(0) as usize;
        let mut proj = Projector::new(cfg, d_in)?;
        let mut k = 0;
        let mut missing = None;
        proj.visit_mut(&mut |w| {
            let name = format!("p{k:03}");
            match tf.get(&name) {
                Some(t) => *w = t.clone(),
                None => missing = Some(name),
            }
            k += 1;
        });
        if let Some(name) = missing {
            return Err(ProjectorError::MissingTensor(name));
        }
        Ok(proj)
    }
}

fn per_head(
    rng: &mut rand_chacha::ChaCha8Rng,
    heads: usize,
    r: usize,
    c: usize,
) -> Vec<Array2<f64>> {
    (0..heads)
        .map(|_| init::scaled_normal(rng, r, c, r))
        .collect()
}

/// Deterministic position code for a (t,h,w) grid cell.
fn grid_pos_code(seed: u64, pos: (usize, usize, usize), d: usize) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let ix = ((pos.0 as u64) << 40) ^ ((pos.1 as u64) << 20) ^ pos.2 as u64;
    let s = seeds::splitmix64(seeds::substream(seed, "qf-pos") ^ seeds::splitmix64(ix));
    let mut rng = seeds::rng(s);
    let dist = Normal::new(0.0, QF_POS_STD).expect("valid normal");
    (0..d).map(|_| dist.sample(&mut rng)).collect()
}

/// One-shot MLP projection with a fresh seeded projector.
pub fn project_mlp(grid: &FeatureGrid, cfg: ProjectorConfig) -> Result<TokenSequence, ProjectorError> {
    Projector::new(cfg, grid.dim())?.project(grid, None)
}

/// One-shot Q-Former projection with a fresh seeded projector.
pub fn project_qformer(
    grid: &FeatureGrid,
    cfg: ProjectorConfig,
    text: Option<&Array2<f64>>,
) -> Result<TokenSequence, ProjectorError> {
    Projector::new(cfg, grid.dim())?.project(grid, text)
}

/// Exact token budget of a config.
pub fn token_budget(cfg: &ProjectorConfig) -> usize {
    cfg.token_budget()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(t: usize, h: usize, w: usize, d: usize, seed: u64) -> FeatureGrid {
        let mut rng = seeds::rng(seed);
        FeatureGrid {
            data: Array2::from_shape_fn((t * h * w, d), |_| rng.random_range(-1.0..1.0f32)),
            grid: GridDims::new(t, h, w),
            tubelet: 1,
            patch: 1,
            layer_index: 1,
            encoder_id: "test".to_string(),
        }
    }

    fn mirror_rows(tokens: &Array2<f64>, t: usize, per_t: usize) -> Array2<f64> {
        let mut out = tokens.clone();
        for i in 0..t {
            for r in 0..per_t {
                out.row_mut(i * per_t + r)
                    .assign(&tokens.row((t - 1 - i) * per_t + r));
            }
        }
        out
    }

    #[test]
    fn budgets_match_paper_configurations() {
        assert_eq!(ProjectorConfig::mlp((16, 4, 4), 128, 128, 0).token_budget(), 256);
        assert_eq!(ProjectorConfig::mlp((16, 8, 8), 128, 128, 0).token_budget(), 1024);
        assert_eq!(ProjectorConfig::mlp((4, 8, 8), 128, 128, 0).token_budget(), 256);
        assert_eq!(ProjectorConfig::qformer(1024, 128, 128, 0).token_budget(), 1024);
    }

    #[test]
    fn output_count_equals_budget() {
        let g = grid(4, 2, 2, 8, 1);
        for cfg in [
            ProjectorConfig::mlp((4, 1, 1), 12, 16, 3),
            ProjectorConfig::mlp((2, 2, 2), 12, 16, 3),
            ProjectorConfig::qformer(7, 12, 16, 3),
        ] {
            let toks = Projector::new(cfg, 8).unwrap().project(&g, None).unwrap();
            assert_eq!(toks.len(), cfg.token_budget());
            assert_eq!(toks.tokens.ncols(), 12);
        }
    }

    #[test]
    fn noop_pooling_preserves_features() {
        // out_grid equal to the input grid: pooling is the identity.
        let g = grid(3, 2, 2, 6, 2);
        let mut gr = Graph::new();
        let tokens = gr.constant(g.to_f64());
        let pooled = gr.pool_blocks(tokens, g.grid, g.grid);
        assert_eq!(gr.value(pooled), &g.to_f64());
    }

    #[test]
    fn identity_initialized_mlp_reproduces_input() {
        let g = grid(3, 2, 2, 6, 2);
        let proj = Projector::identity_mlp(6, (3, 2, 2), 0);
        let out = proj.project(&g, None).unwrap();
        let input = g.to_f64();
        for (a, b) in out.tokens.iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn time_preserved_projection_is_temporally_equivariant() {
        let g = grid(4, 2, 2, 8, 5);
        let cfg = ProjectorConfig::mlp((4, 1, 2), 10, 12, 9);
        let proj = Projector::new(cfg, 8).unwrap();
        let fwd = proj.project(&g, None).unwrap();
        let mirrored_grid = g.mirror_time();
        let bwd = proj.project(&mirrored_grid, None).unwrap();
        let expect = mirror_rows(&fwd.tokens, 4, 2);
        assert_eq!(bwd.tokens, expect, "must hold bit-exactly");
    }

    #[test]
    fn full_temporal_pooling_is_permutation_invariant() {
        let g = grid(6, 2, 1, 8, 6);
        let cfg = ProjectorConfig::mlp((1, 2, 1), 10, 12, 9);
        let proj = Projector::new(cfg, 8).unwrap();
        let base = proj.project(&g, None).unwrap();
        // permute temporal slices: rotate by 2 and swap two slices
        let per_t = 2;
        let mut permuted = g.clone();
        let order = [3usize, 5, 0, 4, 1, 2];
        for (dst, &src) in order.iter().enumerate() {
            for r in 0..per_t {
                permuted
                    .data
                    .row_mut(dst * per_t + r)
                    .assign(&g.data.row(src * per_t + r));
            }
        }
        let out = proj.project(&permuted, None).unwrap();
        assert_eq!(out.tokens, base.tokens, "must hold bit-exactly");
    }

    #[test]
    fn qformer_is_grid_permutation_invariant_without_pos_codes() {
        let g = grid(4, 2, 2, 8, 7);
        let cfg = ProjectorConfig::qformer(5, 12, 16, 11);
        let proj = Projector::new(cfg, 8).unwrap();
        let base = proj.project(&g, None).unwrap();
        // arbitrary row permutation of all 16 grid tokens
        let mut permuted = g.clone();
        let n = g.data.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data.row_mut(dst).assign(&g.data.row(src));
        }
        let out = proj.project(&permuted, None).unwrap();
        assert_eq!(out.tokens, base.tokens, "must hold bit-exactly");
    }

    #[test]
    fn qformer_pos_codes_break_invariance() {
        let g = grid(4, 2, 2, 8, 7);
        let mut cfg = ProjectorConfig::qformer(5, 12, 16, 11);
        cfg.kind = ProjectorKind::QFormer {
            num_queries: 5,
            pos_emb: true,
        };
        let proj = Projector::new(cfg, 8).unwrap();
        let base = proj.project(&g, None).unwrap();
        let mirrored = g.mirror_time();
        let out = proj.project(&mirrored, None).unwrap();
        assert_ne!(out.tokens, base.tokens);
    }

    #[test]
    fn zeroed_value_path_ignores_visual_input() {
        let cfg = ProjectorConfig::qformer(5, 12, 16, 13);
        let mut proj = Projector::new(cfg, 8).unwrap();
        proj.zero_cross_value_path();
        let a = proj.project(&grid(4, 2, 2, 8, 1), None).unwrap();
        let b = proj.project(&grid(4, 2, 2, 8, 2), None).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn pooling_divisibility_is_checked() {
        let g = grid(4, 2, 2, 8, 3);
        let cfg = ProjectorConfig::mlp((3, 1, 1), 10, 12, 9);
        let proj = Projector::new(cfg, 8).unwrap();
        assert!(matches!(
            proj.project(&g, None),
            Err(ProjectorError::Pooling { axis: "T'", .. })
        ));
        let cfg = ProjectorConfig::mlp((4, 1, 1), 10, 12, 9);
        let proj = Projector::new(cfg, 6).unwrap();
        assert!(matches!(
            proj.project(&g, None),
            Err(ProjectorError::DimMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.aotk");
        let cfg = ProjectorConfig::qformer(3, 12, 16, 21);
        let proj = Projector::new(cfg, 8).unwrap();
        proj.save(&path).unwrap();
        let back = Projector::load(&path).unwrap();
        let g = grid(2, 2, 2, 8, 9);
        assert_eq!(
            proj.project(&g, None).unwrap().tokens,
            back.project(&g, None).unwrap().tokens
        );
    }

    #[test]
    fn text_tokens_change_qformer_output() {
        let g = grid(2, 2, 2, 8, 9);
        let cfg = ProjectorConfig::qformer(4, 12, 16, 2);
        let proj = Projector::new(cfg, 8).unwrap();
        let without = proj.project(&g, None).unwrap();
        let text = Array2::from_elem((3, 12), 0.3);
        let with = proj.project(&g, Some(&text)).unwrap();
        assert_ne!(without.tokens, with.tokens);
    }
}
