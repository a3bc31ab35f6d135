//! Cluster-count selection heuristics: eigengap, elbow, silhouette, and the
//! gap statistic. The sweep-based selectors all operate on the spectral
//! embedding of the kernel and share one Laplacian decomposition.

use ndarray::Array2;
use rand::RngExt;

use crate::cluster::spectral::SpectralDecomposition;
use crate::error::{Error, Result};
use crate::forest::KernelMatrix;
use crate::numerics::kmeans;
use crate::rng::{derive_seed, stream_rng};

/// A selected cluster count with per-candidate scores for inspection.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub k: usize,
    /// Set when the selection was vacuous (flat spectrum, identical points,
    /// empty candidate range).
    pub degenerate: bool,
    /// `(candidate k, score)` pairs in scan order.
    pub scores: Vec<(usize, f64)>,
}

fn check_k_max(k_max: usize) -> Result<()> {
    if k_max < 2 {
        return Err(Error::InvalidConfig(format!(
            "k_max must be >= 2, got {k_max}"
        )));
    }
    Ok(())
}

/// Eigengap heuristic: the count just before the largest gap in the
/// ascending normalized-Laplacian spectrum.
pub fn select_k_eigengap(kernel: &KernelMatrix, k_max: usize) -> Result<KSelection> {
    check_k_max(k_max)?;
    let decomp = SpectralDecomposition::new(kernel, k_max)?;
    select_k_eigengap_with(&decomp, k_max)
}

/// As [`select_k_eigengap`] over a cached decomposition.
pub fn select_k_eigengap_with(
    decomp: &SpectralDecomposition,
    k_max: usize,
) -> Result<KSelection> {
    check_k_max(k_max)?;
    let evals = decomp.eigenvalues();
    if evals.len() < 2 {
        return Ok(KSelection {
            k: 1,
            degenerate: true,
            scores: vec![],
        });
    }
    let top = k_max.min(evals.len() - 1);
    let mut scores = Vec::with_capacity(top);
    let mut best_k = 1usize;
    let mut best_gap = f64::NEG_INFINITY;
    for i in 1..=top {
        let gap = evals[i] - evals[i - 1];
        scores.push((i, gap));
        if gap > best_gap {
            best_gap = gap;
            best_k = i;
        }
    }
    // A flat spectrum (all-isolated kernel) makes every gap vanish.
    let degenerate = best_gap <= 1e-12;
    Ok(KSelection {
        k: if degenerate { 1 } else { best_k },
        degenerate,
        scores,
    })
}

/// Elbow heuristic: k-means inertia of the k-dimensional embedding for
/// each k, selecting the largest discrete curvature (second difference).
/// Ties break toward the smallest k.
pub fn select_k_elbow(kernel: &KernelMatrix, k_max: usize, seed: u64) -> Result<KSelection> {
    check_k_max(k_max)?;
    let decomp = SpectralDecomposition::new(kernel, k_max)?;
    select_k_elbow_with(&decomp, k_max, seed)
}

/// As [`select_k_elbow`] over a cached decomposition.
pub fn select_k_elbow_with(
    decomp: &SpectralDecomposition,
    k_max: usize,
    seed: u64,
) -> Result<KSelection> {
    check_k_max(k_max)?;
    let k_max = k_max.min(decomp.n_points());
    let mut inertias = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let emb = decomp.embedding(k)?;
        let km = kmeans(&emb.coords, k, derive_seed(seed, &[10, k as u64]), 10)?;
        inertias.push(km.inertia);
    }
    let (k, degenerate) = elbow_from_inertias(&inertias);
    let scores = (2..k_max.max(2))
        .filter(|&k| k + 1 <= inertias.len())
        .map(|k| {
            (
                k,
                inertias[k - 2] - 2.0 * inertias[k - 1] + inertias[k],
            )
        })
        .collect();
    Ok(KSelection {
        k,
        degenerate,
        scores,
    })
}

/// Selects the k (2-based) maximizing the second difference of an inertia
/// sequence indexed from k = 1. Exposed separately so the tie rule can be
/// exercised on synthetic sequences.
pub fn elbow_from_inertias(inertias: &[f64]) -> (usize, bool) {
    // candidate k needs inertia at k-1, k, k+1
    let mut best_k = 2usize;
    let mut best_curv = f64::NEG_INFINITY;
    let mut any = false;
    for k in 2..inertias.len() {
        let curv = inertias[k - 2] - 2.0 * inertias[k - 1] + inertias[k];
        if curv > best_curv {
            best_curv = curv;
            best_k = k;
            any = true;
        }
    }
    (best_k, !any || best_curv.abs() <= 1e-12)
}

/// Silhouette heuristic: mean silhouette of the k-clustering measured with
/// Euclidean distances in the k-dimensional embedding; singleton clusters
/// score 0 by convention.
pub fn select_k_silhouette(kernel: &KernelMatrix, k_max: usize, seed: u64) -> Result<KSelection> {
    check_k_max(k_max)?;
    let decomp = SpectralDecomposition::new(kernel, k_max)?;
    select_k_silhouette_with(&decomp, k_max, seed)
}

/// As [`select_k_silhouette`] over a cached decomposition.
pub fn select_k_silhouette_with(
    decomp: &SpectralDecomposition,
    k_max: usize,
    seed: u64,
) -> Result<KSelection> {
    check_k_max(k_max)?;
    let m = decomp.n_points();
    let k_max = k_max.min(m);
    let mut best_k = 2usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut scores = Vec::new();
    for k in 2..=k_max {
        let emb = decomp.embedding(k)?;
        let km = kmeans(&emb.coords, k, derive_seed(seed, &[11, k as u64]), 10)?;
        let score = mean_silhouette(&emb.coords, &km.labels, k);
        scores.push((k, score));
        if score > best_score {
            best_score = score;
            best_k = k;
        }
    }
    // All-identical embeddings give silhouette 0 everywhere.
    let degenerate = best_score <= 0.0;
    Ok(KSelection {
        k: if degenerate { 2 } else { best_k },
        degenerate,
        scores,
    })
}

pub(crate) fn mean_silhouette(points: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let m = points.nrows();
    if k < 2 || m < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0f64;
    let mut dist_sums = vec![0.0f64; k];
    for i in 0..m {
        for s in dist_sums.iter_mut() {
            *s = 0.0;
        }
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..points.ncols() {
                let d = points[[i, c]] - points[[j, c]];
                d2 += d * d;
            }
            dist_sums[labels[j]] += d2.sqrt();
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue; // silhouette 0 for singletons
        }
        let a = dist_sums[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && counts[c] > 0 {
                b = b.min(dist_sums[c] / counts[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / m as f64
}

/// Gap statistic: compares the log within-dispersion of each k-clustering
/// against uniform reference draws over the embedding's bounding box and
/// returns the smallest k passing the one-standard-error rule.
///
/// All counts are clustered in the fixed `k_max`-dimensional embedding so
/// the dispersions are comparable across k (the k = 1 row-normalized
/// embedding would otherwise collapse to a single point).
pub fn select_k_gap(
    kernel: &KernelMatrix,
    k_max: usize,
    b_ref: usize,
    seed: u64,
) -> Result<KSelection> {
    check_k_max(k_max)?;
    let decomp = SpectralDecomposition::new(kernel, k_max)?;
    select_k_gap_with(&decomp, k_max, b_ref, seed)
}

/// As [`select_k_gap`] over a cached decomposition.
pub fn select_k_gap_with(
    decomp: &SpectralDecomposition,
    k_max: usize,
    b_ref: usize,
    seed: u64,
) -> Result<KSelection> {
    check_k_max(k_max)?;
    let b_ref = b_ref.max(2);
    let m = decomp.n_points();
    let k_max = k_max.min(m);
    let emb = decomp.embedding(k_max)?;
    let d = emb.coords.ncols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..m {
        for c in 0..d {
            lo[c] = lo[c].min(emb.coords[[i, c]]);
            hi[c] = hi[c].max(emb.coords[[i, c]]);
        }
    }

    let mut gaps = Vec::with_capacity(k_max);
    let mut sks = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let km = kmeans(&emb.coords, k, derive_seed(seed, &[12, k as u64]), 10)?;
        let log_w = km.inertia.max(1e-300).ln();

        let mut ref_logs = Vec::with_capacity(b_ref);
        for b in 0..b_ref {
            let mut rng = stream_rng(derive_seed(seed, &[13, k as u64, b as u64]), 0);
            let mut pts = Array2::zeros((m, d));
            for i in 0..m {
                for c in 0..d {
                    pts[[i, c]] = if hi[c] > lo[c] {
                        rng.random_range(lo[c]..hi[c])
                    } else {
                        lo[c]
                    };
                }
            }
            let ref_km = kmeans(&pts, k, derive_seed(seed, &[14, k as u64, b as u64]), 10)?;
            ref_logs.push(ref_km.inertia.max(1e-300).ln());
        }
        let mean_ref = ref_logs.iter().sum::<f64>() / b_ref as f64;
        let var_ref = ref_logs
            .iter()
            .map(|v| (v - mean_ref) * (v - mean_ref))
            .sum::<f64>()
            / b_ref as f64;
        let sk = var_ref.sqrt() * (1.0 + 1.0 / b_ref as f64).sqrt();
        gaps.push(mean_ref - log_w);
        sks.push(sk);
    }

    let scores: Vec<(usize, f64)> = gaps.iter().enumerate().map(|(i, &g)| (i + 1, g)).collect();
    for k in 1..k_max {
        if gaps[k - 1] >= gaps[k] - sks[k] {
            return Ok(KSelection {
                k,
                degenerate: false,
                scores,
            });
        }
    }
    Ok(KSelection {
        k: k_max,
        degenerate: true,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::KernelProvenance;

    fn block_kernel_noisy(sizes: &[usize], seed: u64) -> KernelMatrix {
        let m: usize = sizes.iter().sum();
        let mut rng = stream_rng(seed, 0);
        let mut v = Array2::zeros((m, m));
        let mut block_of = Vec::new();
        for (b, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                block_of.push(b);
            }
        }
        for i in 0..m {
            for j in 0..=i {
                let base = if block_of[i] == block_of[j] { 1.0 } else { 0.02 };
                let noise: f64 = rng.random_range(0.0..0.01);
                v[[i, j]] = base + noise;
                v[[j, i]] = base + noise;
            }
        }
        KernelMatrix::from_dense(v, KernelProvenance::Forest).unwrap()
    }

    fn exact_block_kernel(sizes: &[usize]) -> KernelMatrix {
        let m: usize = sizes.iter().sum();
        let mut v = Array2::zeros((m, m));
        let mut start = 0;
        for &s in sizes {
            for i in start..start + s {
                for j in start..start + s {
                    v[[i, j]] = 1.0;
                }
            }
            start += s;
        }
        KernelMatrix::from_dense(v, KernelProvenance::Forest).unwrap()
    }

    #[test]
    fn eigengap_exact_blocks() {
        let k = exact_block_kernel(&[5, 7, 6]);
        let sel = select_k_eigengap(&k, 10).unwrap();
        assert_eq!(sel.k, 3);
        assert!(!sel.degenerate);
    }

    #[test]
    fn eigengap_all_ones_returns_one() {
        let k = exact_block_kernel(&[8]);
        let sel = select_k_eigengap(&k, 5).unwrap();
        assert_eq!(sel.k, 1);
    }

    #[test]
    fn eigengap_identity_kernel_degenerate() {
        let k =
            KernelMatrix::from_dense(Array2::<f64>::eye(6), KernelProvenance::Forest).unwrap();
        let sel = select_k_eigengap(&k, 4).unwrap();
        assert!(sel.degenerate);
        assert_eq!(sel.k, 1);
    }

    #[test]
    fn elbow_finds_four_blocks() {
        let k = block_kernel_noisy(&[10, 10, 10, 10], 3);
        let sel = select_k_elbow(&k, 8, 5).unwrap();
        assert_eq!(sel.k, 4);
    }

    #[test]
    fn elbow_tie_rule_on_linear_decay() {
        // Linear inertia decay has zero curvature everywhere; first
        // candidate (k=2) wins and the choice is flagged.
        let inertias: Vec<f64> = (0..8).map(|i| 10.0 - i as f64).collect();
        let (k, degenerate) = elbow_from_inertias(&inertias);
        assert_eq!(k, 2);
        assert!(degenerate);
    }

    #[test]
    fn elbow_rejects_small_k_max() {
        let k = exact_block_kernel(&[4, 4]);
        assert!(select_k_elbow(&k, 1, 0).is_err());
    }

    #[test]
    fn silhouette_two_tight_blobs() {
        let k = block_kernel_noisy(&[12, 12], 7);
        let sel = select_k_silhouette(&k, 6, 9).unwrap();
        assert_eq!(sel.k, 2);
        assert!(!sel.degenerate);
    }

    #[test]
    fn silhouette_hand_value_on_separated_pairs() {
        // Points {0, 0.1} vs {10, 10.1} in one dimension: for each point
        // a = 0.1, b = mean(10.05, 9.95)-ish; silhouette ~ 0.99.
        let pts = ndarray::arr2(&[[0.0], [0.1], [10.0], [10.1]]);
        let labels = [0usize, 0, 1, 1];
        let s = mean_silhouette(&pts, &labels, 2);
        let expect = {
            let mut acc = 0.0;
            // point 0: a=0.1, b=(10+10.1)/2
            acc += (10.05 - 0.1) / 10.05;
            // point 1: a=0.1, b=(9.9+10.0)/2
            acc += (9.95 - 0.1) / 9.95;
            // symmetric for the other blob
            acc += (10.05 - 0.1) / 10.05;
            acc += (9.95 - 0.1) / 9.95;
            acc / 4.0
        };
        assert!((s - expect).abs() < 1e-12);
        assert!(s > 0.98);
    }

    #[test]
    fn silhouette_zero_on_identical_points_and_degenerate_flag() {
        // identical embedding points: a = b = 0 everywhere -> silhouette 0
        let pts = Array2::from_elem((5, 2), 0.3);
        let labels = [0usize, 1, 0, 1, 0];
        assert_eq!(mean_silhouette(&pts, &labels, 2), 0.0);

        // two points: every clustering is all-singletons, silhouette 0, so
        // the selector falls back to k=2 and flags it.
        let k = exact_block_kernel(&[1, 1]);
        let sel = select_k_silhouette(&k, 4, 1).unwrap();
        assert!(sel.degenerate);
        assert_eq!(sel.k, 2);
    }

    #[test]
    fn gap_statistic_three_blobs() {
        let k = block_kernel_noisy(&[10, 12, 9], 11);
        let sel = select_k_gap(&k, 6, 20, 13).unwrap();
        assert_eq!(sel.k, 3);
    }

    #[test]
    fn gap_statistic_single_blob_returns_one() {
        // Uniform all-ones kernel: embeddings collapse, no cluster structure.
        let k = exact_block_kernel(&[20]);
        let sel = select_k_gap(&k, 5, 20, 17).unwrap();
        assert_eq!(sel.k, 1);
    }

    #[test]
    fn gap_statistic_deterministic() {
        let k = block_kernel_noisy(&[8, 8], 19);
        let a = select_k_gap(&k, 5, 10, 23).unwrap();
        let b = select_k_gap(&k, 5, 10, 23).unwrap();
        assert_eq!(a.k, b.k);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(x, y);
        }
    }
}
