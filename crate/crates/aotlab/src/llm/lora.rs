//! Low-rank adapters: ΔW = (α/r)·B·A added onto a frozen base matrix.
//!
//! Weights here follow the row-vector convention `y = x·W` with
//! W: d_in×d_out, so the adapter stores `a: d_in×r` and `b: r×d_out` and the
//! delta is (α/r)·a·b — the transpose of the column-convention formula. `b`
//! starts at zero, so a freshly attached adapter is an exact no-op.

use ndarray::Array2;
use thiserror::Error;

use crate::nn::{init, Graph, NodeId};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("adapter shape ({a_rows}x{a_cols})·({b_rows}x{b_cols}) does not fit base {base_rows}x{base_cols}")]
    ShapeMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
        base_rows: usize,
        base_cols: usize,
    },
}

/// One adapter pair for one target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Seeded adapter for a d_in×d_out target. `a` is Gaussian, `b` zero.
    pub fn init(
        rng: &mut rand_chacha::ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
    ) -> Self {
        Self {
            a: init::scaled_normal(rng, d_in, rank, d_in),
            b: init::zeros(rank, d_out),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Effective matrix: base + (α/r)·a·b. The base is untouched.
    pub fn apply(&self, base: &Array2<f64>) -> Result<Array2<f64>, LoraError> {
        if self.a.nrows() != base.nrows()
            || self.b.ncols() != base.ncols()
            || self.a.ncols() != self.b.nrows()
        {
            return Err(LoraError::ShapeMismatch {
                a_rows: self.a.nrows(),
                a_cols: self.a.ncols(),
                b_rows: self.b.nrows(),
                b_cols: self.b.ncols(),
                base_rows: base.nrows(),
                base_cols: base.ncols(),
            });
        }
        let delta = self.a.dot(&self.b);
        Ok(base + &delta.mapv(|v| v * self.scale()))
    }

    /// Effective matrix as a graph node with `a`, `b` trainable and the base
    /// frozen. Returns (node, a_id, b_id).
    pub(crate) fn apply_on_graph(
        &self,
        g: &mut Graph,
        base: &Array2<f64>,
    ) -> (NodeId, NodeId, NodeId) {
        let base_node = g.constant(base.clone());
        let a = g.param(&self.a);
        let b = g.param(&self.b);
        let prod = g.matmul(a, b);
        let delta = g.scale(prod, self.scale());
        (g.add(base_node, delta), a, b)
    }
}

/// Adapters for the attention query and value projections of every decoder
/// block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub per_block: Vec<(LoraAdapter, LoraAdapter)>,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSet {
    pub fn init(
        seed: u64,
        num_blocks: usize,
        d_model: usize,
        rank: usize,
        alpha: f64,
    ) -> Self {
        let mut rng = crate::seeds::rng(crate::seeds::substream(seed, "lora-init"));
        let per_block = (0..num_blocks)
            .map(|_| {
                (
                    LoraAdapter::init(&mut rng, d_model, d_model, rank, alpha),
                    LoraAdapter::init(&mut rng, d_model, d_model, rank, alpha),
                )
            })
            .collect();
        Self {
            per_block,
            rank,
            alpha,
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        for (q, v) in &mut self.per_block {
            f(&mut q.a);
            f(&mut q.b);
            f(&mut v.a);
            f(&mut v.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use ndarray::array;

    #[test]
    fn zero_b_is_a_bit_exact_no_op() {
        let mut rng = seeds::rng(1);
        let base = init::normal(&mut rng, 4, 3, 1.0);
        let adapter = LoraAdapter::init(&mut rng, 4, 3, 2, 32.0);
        let eff = adapter.apply(&base).unwrap();
        assert_eq!(eff, base);
    }

    #[test]
    fn rank_one_outer_product() {
        // a = [1; 0] (d_in×r), b = [0 1] (r×d_out), α = r = 1:
        // delta = a·b = [[0,1],[0,0]].
        let base = array![[0.0, 0.0], [0.0, 0.0]];
        let adapter = LoraAdapter {
            a: array![[1.0], [0.0]],
            b: array![[0.0, 1.0]],
            rank: 1,
            alpha: 1.0,
        };
        let eff = adapter.apply(&base).unwrap();
        assert_eq!(eff, array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn alpha_scales_linearly() {
        let mut rng = seeds::rng(2);
        let base = init::normal(&mut rng, 3, 3, 1.0);
        let mut adapter = LoraAdapter::init(&mut rng, 3, 3, 2, 2.0);
        adapter.b = init::normal(&mut rng, 2, 3, 1.0);
        let at_r = adapter.apply(&base).unwrap();
        adapter.alpha = 4.0; // 2r
        let at_2r = adapter.apply(&base).unwrap();
        let delta_r = &at_r - &base;
        let delta_2r = &at_2r - &base;
        for (d1, d2) in delta_r.iter().zip(delta_2r.iter()) {
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let base = Array2::<f64>::zeros((4, 4));
        let adapter = LoraAdapter {
            a: Array2::zeros((3, 2)),
            b: Array2::zeros((2, 4)),
            rank: 2,
            alpha: 4.0,
        };
        assert!(matches!(
            adapter.apply(&base),
            Err(LoraError::ShapeMismatch { .. })
        ));
    }
}
