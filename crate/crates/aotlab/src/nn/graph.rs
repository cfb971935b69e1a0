//! Tape-based reverse-mode autodiff over `ndarray` matrices.
//!
//! One [`Graph`] is built per training step: leaves are inserted for
//! parameters (trainable) and inputs (constant), forward ops append nodes in
//! topological order, and [`Graph::backward`] walks the tape in reverse.
//! Gradients are only materialized along paths that reach a trainable leaf,
//! so frozen weights cost a forward pass and nothing more.
//!
//! Ops with a `_stable` suffix reduce over their permutable axis with the
//! canonical-order summation from [`super::stable`]; they are used where an
//! invariant requires bit-exact symmetry under token permutation.

use ndarray::{Array2, Axis};

use super::stable::{stable_mean, stable_sum};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// 3-D grid extent (temporal, height, width) used by pooling ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn count(&self) -> usize {
        self.t * self.h * self.w
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu {
        x: NodeId,
        // cached tanh(u(x)) values for the backward pass
        tanh_u: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // saved per-row (mean, inv_std)
        stats: Vec<(f64, f64)>,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Transpose(NodeId),
    /// Fused scaled-dot-product attention with canonical-order reductions
    /// over the key axis. Saves the attention weights for backward.
    AttnStable {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
        weights: Array2<f64>,
    },
    /// Fused multi-head attention over packed q/k/v (L×d, heads side by
    /// side). Computes only the causal triangle when `causal`. Saves the
    /// per-head attention weights for backward.
    AttnMulti {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        scale: f64,
        weights: Vec<Array2<f64>>,
    },
    /// Block mean-pooling of a flattened (t,h,w) grid, canonical-order sums.
    PoolBlocks {
        x: NodeId,
        in_grid: GridDims,
        out_grid: GridDims,
    },
    /// Mean cross-entropy over rows selected by `mask`; saves softmax.
    MaskedCe {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    needs_grad: bool,
    op: Op,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a trainable leaf (gradient will be accumulated).
    pub fn param(&mut self, value: &Array2<f64>) -> NodeId {
        self.push(value.clone(), true, Op::Leaf)
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. a node. Zero-shaped if the node was never
    /// reached by backward.
    pub fn grad(&self, id: NodeId) -> Array2<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[id.0].value.raw_dim()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Add(a, b))
    }

    /// `a` (m×n) plus a 1×n row broadcast over every row.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let xs = av.as_slice().expect("standard layout");
        let rs = rv.as_slice().expect("standard layout");
        let n = rs.len();
        let mut out = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            out.push(x + rs[i % n]);
        }
        let v = Array2::from_shape_vec(av.raw_dim(), out).expect("same shape");
        let needs = self.needs(a) || self.needs(row);
        self.push(v, needs, Op::AddRowBroadcast(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(v, needs, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let xs = av.as_slice().expect("standard layout");
        let mut tanh_u = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            tanh_u.push(t);
            out.push(0.5 * x * (1.0 + t));
        }
        let v = Array2::from_shape_vec(av.raw_dim(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(v, needs, Op::Gelu { x: a, tanh_u })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[a.0].value);
        let needs = self.needs(a);
        self.push(v, needs, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols();
        let df = d as f64;
        let xs = xv.as_slice().expect("standard layout");
        let gs = self.nodes[gamma.0].value.clone();
        let bs = self.nodes[beta.0].value.clone();
        let gsl = gs.as_slice().expect("standard layout");
        let bsl = bs.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(xs.len());
        let mut stats = Vec::with_capacity(xv.nrows());
        for row in xs.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / df;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / df;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, inv_std));
            for j in 0..d {
                out.push((row[j] - mean) * inv_std * gsl[j] + bsl[j]);
            }
        }
        let out = Array2::from_shape_vec(xv.raw_dim(), out).expect("same shape");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, needs, Op::LayerNormRows { x, gamma, beta, stats })
    }

    /// Row lookup: output row i is `table` row `indices[i]`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        let t = &self.nodes[table.0].value;
        let d = t.ncols();
        let ts = t.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in &indices {
            out.extend_from_slice(&ts[ix * d..(ix + 1) * d]);
        }
        let out = Array2::from_shape_vec((indices.len(), d), out).expect("same shape");
        let needs = self.needs(table);
        self.push(out, needs, Op::Gather { table, indices })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(av.len() + bv.len());
        out.extend_from_slice(av.as_slice().expect("standard layout"));
        out.extend_from_slice(bv.as_slice().expect("standard layout"));
        let out = Array2::from_shape_vec((av.nrows() + bv.nrows(), av.ncols()), out)
            .expect("same width");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let needs = self.needs(x);
        self.push(v, needs, Op::SliceRows { x, start, len })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = to_standard(self.nodes[x.0].value.t().to_owned());
        let needs = self.needs(x);
        self.push(v, needs, Op::Transpose(x))
    }

    /// Scaled-dot-product attention `softmax(q·kᵀ·scale)·v` with
    /// canonical-order reductions over the key axis: output is bit-exactly
    /// invariant to any permutation of the (k, v) rows.
    pub fn attn_stable(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (nq, dh) = (qv.nrows(), qv.ncols());
        let nk = kv.nrows();
        let mut weights = Array2::zeros((nq, nk));
        let mut out = Array2::zeros((nq, vv.ncols()));
        let mut buf = Vec::with_capacity(nk);
        for i in 0..nq {
            // per-key logit: fixed-order dot over the head dim
            for j in 0..nk {
                let mut dot = 0.0;
                for a in 0..dh {
                    dot += qv[[i, a]] * kv[[j, a]];
                }
                weights[[i, j]] = dot * scale;
            }
            let m = weights
                .row(i)
                .fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            buf.clear();
            for j in 0..nk {
                let e = (weights[[i, j]] - m).exp();
                weights[[i, j]] = e;
                buf.push(e);
            }
            let z = stable_sum(&mut buf);
            for j in 0..nk {
                weights[[i, j]] /= z;
            }
            for c in 0..vv.ncols() {
                buf.clear();
                for j in 0..nk {
                    buf.push(weights[[i, j]] * vv[[j, c]]);
                }
                out[[i, c]] = stable_sum(&mut buf);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, needs, Op::AttnStable { q, k, v, scale, weights })
    }

    /// Fused multi-head attention over packed projections: column block h of
    /// the output is `softmax(q_h·k_hᵀ·scale)·v_h`. With `causal` only keys
    /// j ≤ i are attended. One node replaces the per-head slice, transpose,
    /// mask, and softmax chain.
    pub fn attn_multi(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        scale: f64,
    ) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (lq, d) = qv.dim();
        let lk = kv.nrows();
        assert_eq!(d % heads, 0, "head split");
        let dh = d / heads;
        let mut out = Array2::zeros((lq, d));
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let hs = h * dh;
            // Owned per-head copies keep the GEMMs on the contiguous fast
            // path; the copies are tiny next to the products.
            let qh = qv.slice(ndarray::s![.., hs..hs + dh]).to_owned();
            let kh = kv.slice(ndarray::s![.., hs..hs + dh]).to_owned();
            let vh = vv.slice(ndarray::s![.., hs..hs + dh]).to_owned();
            // Full rectangle via GEMM; the softmax loop below only touches
            // the causal horizon and zeroes the rest.
            let kh_t = kh.t().as_standard_layout().to_owned();
            let mut w = qh.dot(&kh_t);
            let ws = w.as_slice_mut().expect("standard layout");
            for i in 0..lq {
                let horizon = if causal { (i + 1).min(lk) } else { lk };
                let wrow = &mut ws[i * lk..(i + 1) * lk];
                let mut m = f64::NEG_INFINITY;
                for wj in wrow.iter_mut().take(horizon) {
                    *wj *= scale;
                    if *wj > m {
                        m = *wj;
                    }
                }
                let mut z = 0.0;
                for wj in wrow.iter_mut().take(horizon) {
                    *wj = (*wj - m).exp();
                    z += *wj;
                }
                let inv = 1.0 / z;
                for wj in wrow.iter_mut().take(horizon) {
                    *wj *= inv;
                }
                for wj in wrow.iter_mut().skip(horizon) {
                    *wj = 0.0;
                }
            }
            out.slice_mut(ndarray::s![.., hs..hs + dh]).assign(&w.dot(&vh));
            weights.push(w);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            needs,
            Op::AttnMulti {
                q,
                k,
                v,
                heads,
                causal,
                scale,
                weights,
            },
        )
    }

    /// Mean-pool a flattened (t,h,w) grid of rows down to `out_grid`.
    /// Rows are t-major, then h, then w; every output factor must divide the
    /// corresponding input extent. Block sums use canonical order, so pooling
    /// over the full temporal extent is bit-exactly invariant to temporal
    /// permutations of the input grid.
    pub fn pool_blocks(&mut self, x: NodeId, in_grid: GridDims, out_grid: GridDims) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), in_grid.count(), "grid/row mismatch");
        let d = xv.ncols();
        let (ft, fh, fw) = (
            in_grid.t / out_grid.t,
            in_grid.h / out_grid.h,
            in_grid.w / out_grid.w,
        );
        let block = (ft * fh * fw) as f64;
        let mut out = Array2::zeros((out_grid.count(), d));
        let mut buf = Vec::with_capacity(ft * fh * fw);
        for ot in 0..out_grid.t {
            for oh in 0..out_grid.h {
                for ow in 0..out_grid.w {
                    let orow = (ot * out_grid.h + oh) * out_grid.w + ow;
                    for c in 0..d {
                        buf.clear();
                        for it in ot * ft..(ot + 1) * ft {
                            for ih in oh * fh..(oh + 1) * fh {
                                for iw in ow * fw..(ow + 1) * fw {
                                    let irow = (it * in_grid.h + ih) * in_grid.w + iw;
                                    buf.push(xv[[irow, c]]);
                                }
                            }
                        }
                        out[[orow, c]] = stable_sum(&mut buf) / block;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::PoolBlocks { x, in_grid, out_grid })
    }

    /// Masked mean cross-entropy over rows of `logits`. Row i contributes
    /// `-log softmax(logits_i)[targets_i]` with weight `mask[i]`; the loss is
    /// the weighted sum divided by the total mask weight (0 if the mask is
    /// all zero). Returns a 1×1 node.
    pub fn masked_ce(&mut self, logits: NodeId, targets: Vec<usize>, mask: Vec<f64>) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), mask.len());
        let probs = softmax_rows(lv);
        let total: f64 = mask.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for i in 0..lv.nrows() {
                if mask[i] != 0.0 {
                    loss -= mask[i] * probs[[i, targets[i]]].max(1e-300).ln();
                }
            }
            loss /= total;
        }
        let needs = self.needs(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            needs,
            Op::MaskedCe { logits, targets, mask, probs },
        )
    }

    /// Mean over rows: n×d in, 1×d out (via pool_blocks).
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.nrows();
        self.pool_blocks(x, GridDims::new(n, 1, 1), GridDims::new(1, 1, 1))
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let rows = self.mean_rows(x);
        let t = self.transpose(rows);
        self.mean_rows(t)
    }

    fn add_grad(&mut self, id: NodeId, g: Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let g = to_standard(g);
        match &mut self.nodes[id.0].grad {
            Some(acc) => {
                let a = acc.as_slice_mut().expect("standard layout");
                let b = g.as_slice().expect("standard layout");
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += y;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from `loss` (must be 1×1). Gradients accumulate into
    /// every node on a path to a trainable leaf.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            // Temporarily move the op out to appease the borrow checker.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.apply_backward(&op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn apply_backward(&mut self, op: &Op, g: &Array2<f64>) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    self.add_grad(*a, da);
                }
                if self.needs(*b) {
                    let db = self.nodes[a.0].value.t().dot(g);
                    self.add_grad(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.add_grad(*a, g.clone());
                }
                if self.needs(*b) {
                    self.add_grad(*b, g.clone());
                }
            }
            Op::AddRowBroadcast(a, row) => {
                if self.needs(*a) {
                    self.add_grad(*a, g.clone());
                }
                if self.needs(*row) {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(*row, col_sum);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = ew_binary(g, &self.nodes[b.0].value, |x, y| x * y);
                    self.add_grad(*a, da);
                }
                if self.needs(*b) {
                    let db = ew_binary(g, &self.nodes[a.0].value, |x, y| x * y);
                    self.add_grad(*b, db);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    self.add_grad(*a, g.mapv(|x| x * c));
                }
            }
            Op::Gelu { x, tanh_u } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let xs = xv.as_slice().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    let mut out = Vec::with_capacity(xs.len());
                    for ((&xi, &t), &gi) in xs.iter().zip(tanh_u.iter()).zip(gs.iter()) {
                        let sech2 = 1.0 - t * t;
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * xi * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        out.push(d * gi);
                    }
                    let da = Array2::from_shape_vec(xv.raw_dim(), out).expect("same shape");
                    self.add_grad(*x, da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    // find our own value: it is the node whose op we hold; we
                    // reconstruct softmax from the input instead of caching.
                    let y = softmax_rows(&self.nodes[a.0].value);
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let mut dot = 0.0;
                        for j in 0..y.ncols() {
                            dot += g[[i, j]] * y[[i, j]];
                        }
                        for j in 0..y.ncols() {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    self.add_grad(*a, da);
                }
            }
            Op::LayerNormRows { x, gamma, beta, stats } => {
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                let d = xv.ncols();
                let nf = d as f64;
                let xs = xv.as_slice().expect("standard layout");
                let gsl = gv.as_slice().expect("standard layout");
                let gg = g.as_slice().expect("standard layout");
                if self.needs(*beta) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(*beta, db);
                }
                if self.needs(*gamma) {
                    let mut dg = vec![0.0f64; d];
                    for (i, (grow, xrow)) in gg.chunks_exact(d).zip(xs.chunks_exact(d)).enumerate()
                    {
                        let (mean, inv_std) = stats[i];
                        for j in 0..d {
                            dg[j] += grow[j] * (xrow[j] - mean) * inv_std;
                        }
                    }
                    self.add_grad(
                        *gamma,
                        Array2::from_shape_vec((1, d), dg).expect("row"),
                    );
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(xs.len());
                    for (i, (grow, xrow)) in gg.chunks_exact(d).zip(xs.chunks_exact(d)).enumerate()
                    {
                        let (mean, inv_std) = stats[i];
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for j in 0..d {
                            let gy = grow[j] * gsl[j];
                            let xhat = (xrow[j] - mean) * inv_std;
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        for j in 0..d {
                            let gy = grow[j] * gsl[j];
                            let xhat = (xrow[j] - mean) * inv_std;
                            dx.push(inv_std * (gy - sum_gy / nf - xhat * sum_gy_xhat / nf));
                        }
                    }
                    self.add_grad(
                        *x,
                        Array2::from_shape_vec(xv.raw_dim(), dx).expect("same shape"),
                    );
                }
            }
            Op::Gather { table, indices } => {
                if self.needs(*table) {
                    let t = &self.nodes[table.0].value;
                    let mut dt = Array2::zeros(t.raw_dim());
                    for (i, &ix) in indices.iter().enumerate() {
                        let mut row = dt.row_mut(ix);
                        row += &g.row(i);
                    }
                    self.add_grad(*table, dt);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.nrows();
                if self.needs(*a) {
                    self.add_grad(*a, g.slice(ndarray::s![..na, ..]).to_owned());
                }
                if self.needs(*b) {
                    self.add_grad(*b, g.slice(ndarray::s![na.., ..]).to_owned());
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs(*x) {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.raw_dim());
                    dx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(g);
                    self.add_grad(*x, dx);
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    self.add_grad(*x, g.t().to_owned());
                }
            }
            Op::AttnStable { q, k, v, scale, weights } => {
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                if self.needs(*v) {
                    self.add_grad(*v, weights.t().dot(g));
                }
                if self.needs(*q) || self.needs(*k) {
                    let dw = g.dot(&vv.t());
                    let mut dlogits = Array2::zeros(weights.raw_dim());
                    for i in 0..weights.nrows() {
                        let mut dot = 0.0;
                        for j in 0..weights.ncols() {
                            dot += dw[[i, j]] * weights[[i, j]];
                        }
                        for j in 0..weights.ncols() {
                            dlogits[[i, j]] = weights[[i, j]] * (dw[[i, j]] - dot);
                        }
                    }
                    if self.needs(*q) {
                        self.add_grad(*q, dlogits.dot(&kv).mapv(|x| x * scale));
                    }
                    if self.needs(*k) {
                        self.add_grad(*k, dlogits.t().dot(&qv).mapv(|x| x * scale));
                    }
                }
            }
            Op::AttnMulti {
                q,
                k,
                v,
                heads,
                causal,
                scale,
                weights,
            } => {
                // Weight rows are zero beyond the causal horizon, so the
                // full-rectangle GEMMs reproduce the triangle math exactly.
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let (lq, d) = qv.dim();
                let lk = kv.nrows();
                let dh = d / heads;
                let mut dq = Array2::zeros((lq, d));
                let mut dk = Array2::zeros((lk, d));
                let mut dv = Array2::zeros((lk, d));
                for h in 0..*heads {
                    let hs = h * dh;
                    let w = &weights[h];
                    let gh = g.slice(ndarray::s![.., hs..hs + dh]).to_owned();
                    let vh = self.nodes[v.0].value.slice(ndarray::s![.., hs..hs + dh]).to_owned();
                    let wt = w.t().as_standard_layout().to_owned();
                    dv.slice_mut(ndarray::s![.., hs..hs + dh])
                        .assign(&wt.dot(&gh));
                    let vh_t = vh.t().as_standard_layout().to_owned();
                    let mut dw = gh.dot(&vh_t); // lq×lk
                    let dws = dw.as_slice_mut().expect("standard layout");
                    let ws = w.as_slice().expect("standard layout");
                    for i in 0..lq {
                        let base = i * lk;
                        let horizon = if *causal { (i + 1).min(lk) } else { lk };
                        let mut dot = 0.0;
                        for j in 0..horizon {
                            dot += dws[base + j] * ws[base + j];
                        }
                        for j in 0..horizon {
                            dws[base + j] = ws[base + j] * (dws[base + j] - dot) * scale;
                        }
                        for j in horizon..lk {
                            dws[base + j] = 0.0;
                        }
                    }
                    let kh = kv.slice(ndarray::s![.., hs..hs + dh]).to_owned();
                    let qh = qv.slice(ndarray::s![.., hs..hs + dh]).to_owned();
                    dq.slice_mut(ndarray::s![.., hs..hs + dh])
                        .assign(&dw.dot(&kh));
                    let dw_t = dw.t().as_standard_layout().to_owned();
                    dk.slice_mut(ndarray::s![.., hs..hs + dh])
                        .assign(&dw_t.dot(&qh));
                }
                if self.needs(*q) {
                    self.add_grad(*q, dq);
                }
                if self.needs(*k) {
                    self.add_grad(*k, dk);
                }
                if self.needs(*v) {
                    self.add_grad(*v, dv);
                }
            }
            Op::PoolBlocks { x, in_grid, out_grid } => {
                if self.needs(*x) {
                    let d = g.ncols();
                    let (ft, fh, fw) = (
                        in_grid.t / out_grid.t,
                        in_grid.h / out_grid.h,
                        in_grid.w / out_grid.w,
                    );
                    let block = (ft * fh * fw) as f64;
                    let mut dx = Array2::zeros((in_grid.count(), d));
                    for it in 0..in_grid.t {
                        for ih in 0..in_grid.h {
                            for iw in 0..in_grid.w {
                                let irow = (it * in_grid.h + ih) * in_grid.w + iw;
                                let orow = ((it / ft) * out_grid.h + ih / fh) * out_grid.w
                                    + iw / fw;
                                for c in 0..d {
                                    dx[[irow, c]] = g[[orow, c]] / block;
                                }
                            }
                        }
                    }
                    self.add_grad(*x, dx);
                }
            }
            Op::MaskedCe { logits, targets, mask, probs } => {
                if self.needs(*logits) {
                    let total: f64 = mask.iter().sum();
                    let mut dl = Array2::zeros(probs.raw_dim());
                    if total > 0.0 {
                        let gs = g[[0, 0]] / total;
                        for i in 0..probs.nrows() {
                            if mask[i] != 0.0 {
                                for j in 0..probs.ncols() {
                                    dl[[i, j]] = gs * mask[i] * probs[[i, j]];
                                }
                                dl[[i, targets[i]]] -= gs * mask[i];
                            }
                        }
                    }
                    self.add_grad(*logits, dl);
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Owned array in C (row-major) layout; `to_owned` on transposed views
/// keeps F layout, which the slice-based ops here cannot accept.
fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.as_slice().is_some() {
        a
    } else {
        let dim = a.raw_dim();
        let v: Vec<f64> = a.iter().copied().collect();
        Array2::from_shape_vec(dim, v).expect("same shape")
    }
}

fn ew_binary(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let xs = a.as_slice().expect("standard layout");
    let ys = b.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        out.push(f(x, y));
    }
    Array2::from_shape_vec(a.raw_dim(), out).expect("same shape")
}

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax (max-subtracted, left-to-right sums).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut z = 0.0;
        for j in 0..x.ncols() {
            let e = (row[j] - m).exp();
            out[[i, j]] = e;
            z += e;
        }
        for j in 0..x.ncols() {
            out[[i, j]] /= z;
        }
    }
    out
}

/// Row-wise softmax with a canonical-order denominator; bit-exactly
/// equivariant to column permutations.
pub fn softmax_rows_stable(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let mut buf = Vec::with_capacity(x.ncols());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        buf.clear();
        for j in 0..x.ncols() {
            let e = (row[j] - m).exp();
            out[[i, j]] = e;
            buf.push(e);
        }
        let z = stable_sum(&mut buf);
        for j in 0..x.ncols() {
            out[[i, j]] /= z;
        }
    }
    out
}

/// Mean over rows with canonical-order sums (1×d output).
pub fn stable_row_mean(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, x.ncols()));
    let mut buf = Vec::with_capacity(x.nrows());
    for c in 0..x.ncols() {
        buf.clear();
        for r in 0..x.nrows() {
            buf.push(x[[r, c]]);
        }
        out[[0, c]] = stable_mean(&mut buf);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_diff(
        f: &mut dyn FnMut(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        let mut xp = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = xp[[i, j]];
                xp[[i, j]] = orig + h;
                let fp = f(&xp);
                xp[[i, j]] = orig - h;
                let fm = f(&xp);
                xp[[i, j]] = orig;
                g[[i, j]] = (fp - fm) / (2.0 * h);
            }
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "gradients differ: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let a = array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]];
        let b = array![[1.0, -0.5], [0.2, 0.7], [-0.3, 0.4]];
        let mut g = Graph::new();
        let na = g.param(&a);
        let nb = g.param(&b);
        let c = g.matmul(na, nb);
        let l2 = g.mean_all(c);
        g.backward(l2);
        let ga = g.grad(na);
        let fd = finite_diff(
            &mut |x: &Array2<f64>| {
                let c = x.dot(&b);
                c.mean().unwrap()
            },
            &a,
            1e-5,
        );
        assert_close(&ga, &fd, 1e-7);
    }

    #[test]
    fn gelu_layernorm_softmax_grads_match_fd() {
        let x = array![[0.3, -1.2, 0.5, 2.0], [0.9, 0.1, -0.4, -1.5]];
        let gamma = array![[1.1, 0.9, 1.0, 1.3]];
        let beta = array![[0.0, 0.1, -0.2, 0.05]];
        let run = |xv: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let nx = g.param(xv);
            let ng = g.constant(gamma.clone());
            let nb = g.constant(beta.clone());
            let ln = g.layer_norm_rows(nx, ng, nb);
            let ge = g.gelu(ln);
            let sm = g.softmax_rows(ge);
            let sq = g.mul(sm, sm);
            let m = g.mean_all(sq);
            g.value(m)[[0, 0]]
        };
        let mut g = Graph::new();
        let nx = g.param(&x);
        let ng = g.constant(gamma.clone());
        let nb = g.constant(beta.clone());
        let ln = g.layer_norm_rows(nx, ng, nb);
        let ge = g.gelu(ln);
        let sm = g.softmax_rows(ge);
        let sq = g.mul(sm, sm);
        let m = g.mean_all(sq);
        g.backward(m);
        let fd = finite_diff(&mut |xv| run(xv), &x, 1e-5);
        assert_close(&g.grad(nx), &fd, 1e-6);
    }

    #[test]
    fn attn_stable_grads_match_fd() {
        let q = array![[0.2, -0.4], [1.1, 0.3]];
        let k = array![[0.5, 0.1], [-0.2, 0.9], [0.7, -0.6]];
        let v = array![[1.0, 0.0], [0.3, -0.8], [0.2, 0.5]];
        let scale = 1.0 / (2f64).sqrt();
        let run = |qv: &Array2<f64>, kv: &Array2<f64>, vv: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let nq = g.constant(qv.clone());
            let nk = g.constant(kv.clone());
            let nv = g.constant(vv.clone());
            let o = g.attn_stable(nq, nk, nv, scale);
            let sq = g.mul(o, o);
            let m = g.mean_all(sq);
            g.value(m)[[0, 0]]
        };
        let mut g = Graph::new();
        let nq = g.param(&q);
        let nk = g.param(&k);
        let nv = g.param(&v);
        let o = g.attn_stable(nq, nk, nv, scale);
        let sq = g.mul(o, o);
        let m = g.mean_all(sq);
        g.backward(m);
        for (node, x, which) in [(nq, &q, 0), (nk, &k, 1), (nv, &v, 2)] {
            let fd = finite_diff(
                &mut |p| match which {
                    0 => run(p, &k, &v),
                    1 => run(&q, p, &v),
                    _ => run(&q, &k, p),
                },
                x,
                1e-5,
            );
            assert_close(&g.grad(node), &fd, 1e-6);
        }
    }

    #[test]
    fn attn_multi_grads_match_fd_and_masking_is_causal() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let l = 5;
        let d = 4;
        let heads = 2;
        let q = Array2::from_shape_fn((l, d), |_| next());
        let k = Array2::from_shape_fn((l, d), |_| next());
        let v = Array2::from_shape_fn((l, d), |_| next());
        let scale = 1.0 / ((d / heads) as f64).sqrt();
        for causal in [true, false] {
            let run = |qv: &Array2<f64>, kv: &Array2<f64>, vv: &Array2<f64>| -> f64 {
                let mut g = Graph::new();
                let nq = g.constant(qv.clone());
                let nk = g.constant(kv.clone());
                let nv = g.constant(vv.clone());
                let o = g.attn_multi(nq, nk, nv, heads, causal, scale);
                let sq = g.mul(o, o);
                let m = g.mean_all(sq);
                g.value(m)[[0, 0]]
            };
            let mut g = Graph::new();
            let nq = g.param(&q);
            let nk = g.param(&k);
            let nv = g.param(&v);
            let o = g.attn_multi(nq, nk, nv, heads, causal, scale);
            let sq = g.mul(o, o);
            let m = g.mean_all(sq);
            g.backward(m);
            for (node, x, which) in [(nq, &q, 0), (nk, &k, 1), (nv, &v, 2)] {
                let fd = finite_diff(
                    &mut |p| match which {
                        0 => run(p, &k, &v),
                        1 => run(&q, p, &v),
                        _ => run(&q, &k, p),
                    },
                    x,
                    1e-5,
                );
                assert_close(&g.grad(node), &fd, 1e-6);
            }
            // causal: first output row must depend only on the first token
            if causal {
                let mut v2 = v.clone();
                v2[[l - 1, 0]] += 10.0;
                let mut g2 = Graph::new();
                let nq = g2.constant(q.clone());
                let nk = g2.constant(k.clone());
                let nv = g2.constant(v2);
                let o2 = g2.attn_multi(nq, nk, nv, heads, causal, scale);
                assert_eq!(g2.value(o2).row(0), g.value(o).row(0));
            }
        }
    }

    #[test]
    fn masked_ce_grad_matches_fd_and_all_masked_is_zero() {
        let logits = array![[0.3, -0.2, 0.8], [1.2, 0.1, -0.5], [0.0, 0.4, 0.2]];
        let targets = vec![2usize, 0, 1];
        let mask = vec![1.0, 0.0, 1.0];
        let mut g = Graph::new();
        let nl = g.param(&logits);
        let loss = g.masked_ce(nl, targets.clone(), mask.clone());
        g.backward(loss);
        let fd = finite_diff(
            &mut |lv| {
                let mut g = Graph::new();
                let nl = g.constant(lv.clone());
                let l = g.masked_ce(nl, targets.clone(), mask.clone());
                g.value(l)[[0, 0]]
            },
            &logits,
            1e-6,
        );
        assert_close(&g.grad(nl), &fd, 1e-6);

        let mut g2 = Graph::new();
        let nl2 = g2.param(&logits);
        let zero_mask = vec![0.0; 3];
        let loss2 = g2.masked_ce(nl2, targets, zero_mask);
        assert_eq!(g2.value(loss2)[[0, 0]], 0.0);
    }

    #[test]
    fn pool_blocks_grad_matches_fd() {
        let x = Array2::from_shape_fn((8, 3), |(i, j)| (i as f64 * 0.37 - j as f64 * 0.11).sin());
        let in_grid = GridDims::new(4, 2, 1);
        let out_grid = GridDims::new(2, 1, 1);
        let mut g = Graph::new();
        let nx = g.param(&x);
        let p = g.pool_blocks(nx, in_grid, out_grid);
        let sq = g.mul(p, p);
        let m = g.mean_all(sq);
        g.backward(m);
        let fd = finite_diff(
            &mut |xv| {
                let mut g = Graph::new();
                let nx = g.constant(xv.clone());
                let p = g.pool_blocks(nx, in_grid, out_grid);
                let sq = g.mul(p, p);
                let m = g.mean_all(sq);
                g.value(m)[[0, 0]]
            },
            &x,
            1e-6,
        );
        assert_close(&g.grad(nx), &fd, 1e-6);
    }
}
