//! Self-contained dense numerics: a symmetric eigensolver and k-means.
//!
//! Both are deterministic. The eigensolver is single-threaded; callers
//! parallelize across matrices (folds, benchmark cells), not inside one
//! decomposition.

mod eigen;
mod kmeans;

pub use eigen::{bottom_eigen, sym_eigen, EigenDecomposition};
pub use kmeans::{kmeans, KMeansResult};
