//! Step 2: kernelized clustering of the out-of-fold CATE estimates, by
//! spectral clustering of the kernel or by sum-of-norms convex clustering,
//! plus the cluster-count selection heuristics.

mod select;
mod son;
mod spectral;

pub use select::{
    elbow_from_inertias, select_k_eigengap, select_k_eigengap_with, select_k_elbow,
    select_k_elbow_with, select_k_gap, select_k_gap_with, select_k_silhouette,
    select_k_silhouette_with, KSelection,
};
pub use son::{lambda_search, son_cluster, LambdaSearchResult, SonConfig};
pub use spectral::{spectral_cluster, spectral_cluster_with, spectral_embed, Embedding, SpectralDecomposition};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-cluster summary statistics over the CATE estimates of its members.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterStats {
    pub size: usize,
    /// Exact arithmetic mean of members' tau values.
    pub mean: f64,
    /// Standard error of the mean (sample sd / sqrt(size)); 0 for
    /// singletons, which are flagged.
    pub se: f64,
    pub singleton: bool,
}

/// Solver-specific diagnostics attached to a clustering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "snake_case")]
pub enum SolverDiagnostics {
    Spectral {
        kmeans_inertia: f64,
        kmeans_iterations: usize,
    },
    Son {
        objective: f64,
        lambda: f64,
        iterations: usize,
        /// Final fused value per cluster, in canonical cluster order.
        centroids: Vec<f64>,
        /// Negative kernel weights clamped to zero when building the
        /// fusion graph.
        clamped_negatives: usize,
    },
    /// Labels supplied externally (no solver ran).
    External,
}

/// A hard clustering: labels form a partition, cluster ids are canonical
/// (ascending by mean CATE), and per-cluster statistics are attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Indexed by cluster id; ascending mean by construction.
    pub clusters: Vec<ClusterStats>,
    pub diagnostics: SolverDiagnostics,
}

impl ClusterResult {
    /// Canonicalizes raw labels against `tau`: clusters are relabeled in
    /// ascending order of their mean CATE so repeated runs are comparable
    /// label-for-label. Returns the result and the permutation
    /// `new_id = perm[old_id]`.
    pub fn from_raw_labels(
        tau: &[f64],
        raw_labels: &[usize],
        diagnostics: SolverDiagnostics,
    ) -> Result<(Self, Vec<usize>)> {
        let stats = cluster_means(tau, raw_labels)?;
        let k = stats.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            stats[a]
                .mean
                .partial_cmp(&stats[b].mean)
                .expect("finite cluster means")
        });
        let mut perm = vec![0usize; k];
        for (new_id, &old_id) in order.iter().enumerate() {
            perm[old_id] = new_id;
        }
        let labels: Vec<usize> = raw_labels.iter().map(|&l| perm[l]).collect();
        let clusters: Vec<ClusterStats> = order.iter().map(|&old| stats[old].clone()).collect();
        Ok((
            Self {
                labels,
                k,
                clusters,
                diagnostics,
            },
            perm,
        ))
    }

    /// Expands cluster means back to a per-sample vector: each sample gets
    /// its cluster's mean CATE.
    pub fn member_means(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| self.clusters[l].mean)
            .collect()
    }
}

/// Validates that `labels` form a partition (every id in `[0,k)` with no
/// empty cluster) and returns per-cluster mean, size and standard error.
pub fn cluster_means(tau: &[f64], labels: &[usize]) -> Result<Vec<ClusterStats>> {
    if tau.is_empty() || labels.len() != tau.len() {
        return Err(Error::Metrics(format!(
            "labels ({}) and tau ({}) must be equal-length and non-empty",
            labels.len(),
            tau.len()
        )));
    }
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&t, &l) in tau.iter().zip(labels) {
        sums[l] += t;
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Metrics(format!(
            "labels are not a partition: cluster {empty} is empty"
        )));
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let mut sq = vec![0.0f64; k];
    for (&t, &l) in tau.iter().zip(labels) {
        let d = t - means[l];
        sq[l] += d * d;
    }
    Ok((0..k)
        .map(|c| {
            let size = counts[c];
            let singleton = size == 1;
            let se = if singleton {
                0.0
            } else {
                (sq[c] / (size - 1) as f64).sqrt() / (size as f64).sqrt()
            };
            ClusterStats {
                size,
                mean: means[c],
                se,
                singleton,
            }
        })
        .collect())
}
