//! Conjugate gradient with merge-path SpMV, run on the virtual GPU.

pub mod csr;
pub mod merge;
pub mod mm;
pub mod solver;

pub use csr::CsrMatrix;
pub use merge::{merge_partition, path_len, spmv_merge, Level, MergePartition, PathCoord};
pub use mm::{load_matrix_market, parse_matrix_market, to_matrix_market};
pub use solver::{cg_solve, policy_traffic_compare, CgLayout, CgOptions, CgResult, CgState, PolicyRun};
