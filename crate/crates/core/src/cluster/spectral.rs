//! Normalized-cuts spectral embedding and clustering of a kernel matrix.

use ndarray::Array2;

use crate::cluster::{ClusterResult, SolverDiagnostics};
use crate::error::{Error, Result};
use crate::forest::{KernelMatrix, KernelProvenance};
use crate::numerics::{bottom_eigen, kmeans};

/// Row-normalized spectral coordinates.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// m x k matrix; each row has unit norm unless flagged in `zero_rows`.
    pub coords: Array2<f64>,
    pub source: KernelProvenance,
    /// Rows whose eigenvector coordinates were all (near) zero; left as
    /// zeros.
    pub zero_rows: Vec<usize>,
    /// Negative off-diagonal affinities clamped to zero while forming
    /// degrees (thresholded or hand-built kernels).
    pub clamped_negatives: usize,
    /// Points with zero off-diagonal affinity (only self-similarity).
    pub isolated_points: usize,
}

/// Cached eigenstructure of the normalized Laplacian
/// `L_sym = I - D^{-1/2} K D^{-1/2}`, reused across cluster counts.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: Vec<f64>,
    eigenvectors: Array2<f64>,
    source: KernelProvenance,
    clamped_negatives: usize,
    isolated_points: usize,
    m: usize,
}

impl SpectralDecomposition {
    /// Builds the Laplacian eigenstructure with enough pairs for embeddings
    /// up to dimension `max_k` and eigengap scans up to `max_k` (needs
    /// `max_k + 1` eigenvalues). Errors on zero-degree (fully isolated,
    /// zero self-similarity) rows, naming the row.
    pub fn new(kernel: &KernelMatrix, max_k: usize) -> Result<Self> {
        let m = kernel.size();
        if max_k == 0 {
            return Err(Error::Spectral("max_k must be >= 1".into()));
        }
        let vals = kernel.values();
        let mut clamped = 0usize;
        let mut degrees = vec![0.0f64; m];
        let mut isolated = 0usize;
        for i in 0..m {
            let mut deg = 0.0;
            let mut off = 0.0;
            for j in 0..m {
                let mut v = vals[[i, j]];
                if v < 0.0 {
                    clamped += 1;
                    v = 0.0;
                }
                deg += v;
                if j != i {
                    off += v;
                }
            }
            if deg <= 0.0 {
                return Err(Error::ZeroDegreeRow(i));
            }
            if off == 0.0 {
                isolated += 1;
            }
            degrees[i] = deg;
        }

        let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut lap = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                let v = vals[[i, j]].max(0.0) * inv_sqrt[i] * inv_sqrt[j];
                lap[[i, j]] = if i == j { 1.0 - v } else { -v };
            }
        }

        let n_pairs = (max_k + 1).min(m);
        // L_sym spectrum lies in [0, 2]; shift hint 2 keeps the iteration
        // matrix PSD.
        let d = bottom_eigen(&lap, n_pairs, 2.0)?;
        Ok(Self {
            eigenvalues: d.eigenvalues,
            eigenvectors: d.eigenvectors,
            source: kernel.provenance(),
            clamped_negatives: clamped,
            isolated_points: isolated,
            m,
        })
    }

    /// Ascending eigenvalues of `L_sym` (as many as were computed).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn n_points(&self) -> usize {
        self.m
    }

    pub fn isolated_points(&self) -> usize {
        self.isolated_points
    }

    /// Row-normalized embedding from the `k` smallest eigenvectors.
    pub fn embedding(&self, k: usize) -> Result<Embedding> {
        if k == 0 || k > self.eigenvectors.ncols() || k > self.m {
            return Err(Error::Spectral(format!(
                "embedding dimension {k} out of range (have {} eigenvectors for {} points)",
                self.eigenvectors.ncols(),
                self.m
            )));
        }
        let mut coords = Array2::zeros((self.m, k));
        let mut zero_rows = Vec::new();
        for i in 0..self.m {
            let mut norm2 = 0.0f64;
            for j in 0..k {
                let v = self.eigenvectors[[i, j]];
                coords[[i, j]] = v;
                norm2 += v * v;
            }
            let norm = norm2.sqrt();
            if norm < 1e-12 {
                zero_rows.push(i);
                for j in 0..k {
                    coords[[i, j]] = 0.0;
                }
            } else {
                for j in 0..k {
                    coords[[i, j]] /= norm;
                }
            }
        }
        Ok(Embedding {
            coords,
            source: self.source,
            zero_rows,
            clamped_negatives: self.clamped_negatives,
            isolated_points: self.isolated_points,
        })
    }
}

/// The normalized-cuts embedding: eigenvectors of the `k` smallest
/// eigenvalues of `L_sym`, rows normalized to unit length.
pub fn spectral_embed(kernel: &KernelMatrix, k: usize) -> Result<Embedding> {
    SpectralDecomposition::new(kernel, k)?.embedding(k)
}

/// Spectral clustering: k-means (k-means++, best of 10 restarts) on the
/// spectral embedding, labels canonicalized by ascending cluster mean of
/// `tau`.
pub fn spectral_cluster(
    kernel: &KernelMatrix,
    tau: &[f64],
    k: usize,
    seed: u64,
) -> Result<ClusterResult> {
    let decomp = SpectralDecomposition::new(kernel, k)?;
    spectral_cluster_with(&decomp, tau, k, seed)
}

/// As [`spectral_cluster`], reusing a cached decomposition (the per-k
/// embeddings share one Laplacian eigenstructure).
pub fn spectral_cluster_with(
    decomp: &SpectralDecomposition,
    tau: &[f64],
    k: usize,
    seed: u64,
) -> Result<ClusterResult> {
    if tau.len() != decomp.n_points() {
        return Err(Error::DimensionMismatch {
            expected: decomp.n_points(),
            actual: tau.len(),
            context: "tau length".into(),
        });
    }
    let emb = decomp.embedding(k)?;
    let km = kmeans(&emb.coords, k, seed, 10)?;
    let (result, _) = ClusterResult::from_raw_labels(
        tau,
        &km.labels,
        SolverDiagnostics::Spectral {
            kmeans_inertia: km.inertia,
            kmeans_iterations: km.iterations,
        },
    )?;
    Ok(result)
}
