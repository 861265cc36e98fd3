//! Couplings between source and target batches: exact mini-batch optimal
//! transport, its entropic relaxation, and cached deterministic teacher pairs.

pub mod dataset;
pub mod hungarian;
pub mod sinkhorn;

pub use dataset::{generate_pairs, PairDataset, PAIR_BLOCK};
pub use hungarian::{ot_pair, ot_pair_capped, solve_assignment, squared_cost_matrix, Permutation, OT_PAIR_CAP};
pub use sinkhorn::{sinkhorn_pair, SinkhornOptions, SinkhornResult};
