//! Forest weight matrices and the similarity kernels built from them.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::sym_eigen;

/// Nonnegative per-test-point weights over a forest's training points.
///
/// Row `j` holds the weights of test point `j`; entries average leaf
/// co-occupancy over the trees that contribute to that row (trees whose leaf
/// for the point is empty abstain, and the row is renormalized over the
/// rest), so every row sums to 1.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    values: Array2<f64>,
    contributing: Vec<u32>,
}

impl WeightMatrix {
    pub(crate) fn new(values: Array2<f64>, contributing: Vec<u32>) -> Self {
        Self {
            values,
            contributing,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Number of trees that contributed to each row.
    pub fn contributing(&self) -> &[u32] {
        &self.contributing
    }

    pub fn n_test(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_train(&self) -> usize {
        self.values.ncols()
    }
}

/// Where a kernel matrix came from; thresholded kernels are not guaranteed
/// positive semi-definite and the spectral path treats them accordingly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelProvenance {
    Forest,
    Rbf,
    Thresholded,
    CrossfitAveraged,
}

/// Symmetric similarity matrix over a point set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelMatrix {
    values: Array2<f64>,
    provenance: KernelProvenance,
}

impl KernelMatrix {
    /// Wraps a dense matrix, enforcing exact symmetry (within `1e-12`
    /// tolerance on the input, which is then symmetrized).
    pub fn from_dense(values: Array2<f64>, provenance: KernelProvenance) -> Result<Self> {
        let m = values.nrows();
        if values.ncols() != m {
            return Err(Error::Kernel(format!(
                "kernel must be square, got {}x{}",
                m,
                values.ncols()
            )));
        }
        let mut values = values;
        for i in 0..m {
            if !values[[i, i]].is_finite() {
                return Err(Error::Kernel("non-finite kernel diagonal".into()));
            }
            for j in (i + 1)..m {
                let a = values[[i, j]];
                let b = values[[j, i]];
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Kernel("non-finite kernel entry".into()));
                }
                if (a - b).abs() > 1e-12 {
                    return Err(Error::Kernel(format!(
                        "kernel asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                let v = 0.5 * (a + b);
                values[[i, j]] = v;
                values[[j, i]] = v;
            }
        }
        Ok(Self { values, provenance })
    }

    pub(crate) fn from_symmetric_unchecked(
        values: Array2<f64>,
        provenance: KernelProvenance,
    ) -> Self {
        debug_assert_eq!(values.nrows(), values.ncols());
        Self { values, provenance }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn provenance(&self) -> KernelProvenance {
        self.provenance
    }

    pub fn trace(&self) -> f64 {
        (0..self.size()).map(|i| self.values[[i, i]]).sum()
    }

    /// Smallest eigenvalue, via the full symmetric decomposition. Intended
    /// for validation at test scale.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let d = sym_eigen(&self.values)?;
        Ok(d.eigenvalues[0])
    }

    /// Exact symmetry check (used by tests; construction already enforces it).
    pub fn is_exactly_symmetric(&self) -> bool {
        let m = self.size();
        for i in 0..m {
            for j in (i + 1)..m {
                if self.values[[i, j]] != self.values[[j, i]] {
                    return false;
                }
            }
        }
        true
    }
}

/// The outer-product kernel `K = alpha alpha^T`: entry `(j,k)` sums, over
/// training points, the products of the two test points' weights, so it
/// measures shared support in the forest. Exactly symmetric and positive
/// semi-definite by construction.
pub fn kernel_from_weights(weights: &WeightMatrix) -> KernelMatrix {
    let m = weights.n_test();
    let a = weights.values();
    let mut upper: Vec<Vec<f64>> = Vec::with_capacity(m);
    (0..m)
        .into_par_iter()
        .map(|j| {
            let row_j = a.row(j);
            (j..m)
                .map(|k| row_j.dot(&a.row(k)))
                .collect::<Vec<f64>>()
        })
        .collect_into_vec(&mut upper);

    let mut values = Array2::zeros((m, m));
    for j in 0..m {
        for (off, &v) in upper[j].iter().enumerate() {
            let k = j + off;
            values[[j, k]] = v;
            values[[k, j]] = v;
        }
    }
    KernelMatrix::from_symmetric_unchecked(values, KernelProvenance::Forest)
}

/// Gaussian RBF kernel `K(j,k) = exp(-||x_j - x_k||^2 / (2 h^2))`.
///
/// `bandwidth: None` uses the median-distance heuristic `h = median/sqrt(2)`,
/// which puts the median pair at `exp(-1)`.
pub fn rbf_kernel(x: &Array2<f64>, bandwidth: Option<f64>) -> Result<KernelMatrix> {
    let m = x.nrows();
    let mut sq = Array2::zeros((m, m));
    for j in 0..m {
        for k in (j + 1)..m {
            let mut acc = 0.0f64;
            for c in 0..x.ncols() {
                let d = x[[j, c]] - x[[k, c]];
                acc += d * d;
            }
            sq[[j, k]] = acc;
            sq[[k, j]] = acc;
        }
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::Kernel(format!(
                "rbf bandwidth must be positive, got {h}"
            )))
        }
        None => {
            let mut dists: Vec<f64> = (0..m)
                .flat_map(|j| ((j + 1)..m).map(move |k| (j, k)))
                .map(|(j, k)| sq[[j, k]].sqrt())
                .collect();
            if dists.is_empty() {
                return Err(Error::Kernel(
                    "median bandwidth undefined for a single point".into(),
                ));
            }
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let median = if dists.len() % 2 == 1 {
                dists[dists.len() / 2]
            } else {
                0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
            };
            let h = median / 2.0f64.sqrt();
            if h <= 0.0 {
                return Err(Error::Kernel(
                    "median pairwise distance is zero; pass an explicit bandwidth".into(),
                ));
            }
            h
        }
    };
    let denom = 2.0 * h * h;
    let values = sq.mapv(|d| (-d / denom).exp());
    Ok(KernelMatrix::from_symmetric_unchecked(
        values,
        KernelProvenance::Rbf,
    ))
}

/// Binarizes a kernel at a percentile of its off-diagonal values: entries at
/// or above the cutoff become 1, the rest 0, and the diagonal is set to 1.
/// `percentile=0` keeps everything (all-ones), `percentile=100` keeps only
/// the diagonal.
pub fn threshold_kernel(k: &KernelMatrix, percentile: f64) -> Result<KernelMatrix> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Kernel(format!(
            "percentile must be in [0, 100], got {percentile}"
        )));
    }
    let m = k.size();
    let mut off: Vec<f64> = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .map(|(i, j)| k.values()[[i, j]])
        .collect();
    off.sort_by(|a, b| a.partial_cmp(b).expect("finite kernel entries"));

    let mut values = Array2::zeros((m, m));
    for i in 0..m {
        values[[i, i]] = 1.0;
    }
    if !off.is_empty() {
        let cutoff_idx = ((percentile / 100.0) * off.len() as f64).floor() as usize;
        if cutoff_idx < off.len() {
            let cutoff = off[cutoff_idx];
            for i in 0..m {
                for j in (i + 1)..m {
                    if k.values()[[i, j]] >= cutoff {
                        values[[i, j]] = 1.0;
                        values[[j, i]] = 1.0;
                    }
                }
            }
        }
    }
    Ok(KernelMatrix::from_symmetric_unchecked(
        values,
        KernelProvenance::Thresholded,
    ))
}
