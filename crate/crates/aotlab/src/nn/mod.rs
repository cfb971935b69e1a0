//! Minimal neural-network toolkit: a single-use autodiff tape, Adam, seeded
//! initializers, and order-insensitive reductions.

pub mod adam;
pub mod graph;
pub mod init;
pub mod stable;

pub use adam::Adam;
pub use graph::{gelu, softmax_rows, softmax_rows_stable, stable_row_mean, Graph, GridDims, NodeId};
pub use stable::{stable_mean, stable_sum};
