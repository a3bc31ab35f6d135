//! Lloyd's algorithm with k-means++ seeding and best-of-n-init restarts.

use ndarray::Array2;
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

const MAX_ITER: usize = 300;
const REL_TOL: f64 = 1e-8;

/// Result of one k-means run (the best of `n_init` restarts).
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Lloyd iterations used by the winning restart.
    pub iterations: usize,
    pub n_init: usize,
}

/// Clusters `points` (rows) into `k` groups.
///
/// Deterministic given `seed`: restart `i` draws from substream `i`, and the
/// best restart is chosen by inertia with ties going to the earlier restart.
/// Empty clusters are repaired by reseeding them to the point farthest from
/// its current center.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64, n_init: usize) -> Result<KMeansResult> {
    let m = points.nrows();
    if k == 0 {
        return Err(Error::Numerics("kmeans requires k >= 1".into()));
    }
    if k > m {
        return Err(Error::Numerics(format!(
            "kmeans requires k <= number of points ({k} > {m})"
        )));
    }
    let n_init = n_init.max(1);

    let mut best: Option<KMeansResult> = None;
    for init in 0..n_init {
        let run = lloyd_run(points, k, seed, init as u64)?;
        let better = match &best {
            None => true,
            Some(b) => run.inertia < b.inertia,
        };
        if better {
            best = Some(run);
        }
    }
    let mut out = best.expect("n_init >= 1");
    out.n_init = n_init;
    Ok(out)
}

fn lloyd_run(points: &Array2<f64>, k: usize, seed: u64, stream: u64) -> Result<KMeansResult> {
    let m = points.nrows();
    let d = points.ncols();
    let mut rng = stream_rng(seed, stream);

    let mut centers = plus_plus_seed(points, k, &mut rng);
    let mut labels = vec![0usize; m];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0usize;

    for iter in 0..MAX_ITER {
        iterations = iter + 1;

        // Assignment step.
        let mut inertia = 0.0f64;
        for i in 0..m {
            let (lab, dist) = nearest_center(points, i, &centers);
            labels[i] = lab;
            inertia += dist;
        }
        // Lloyd never increases the objective; allow float dust only.
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-9) + 1e-12,
            "inertia increased: {prev_inertia} -> {inertia}"
        );

        // Update step.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..m {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[[labels[i], j]] += points[[i, j]];
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[[c, j]] = sums[[c, j]] / counts[c] as f64;
                }
            }
        }
        // Repair empty clusters: reseed each to the point currently farthest
        // from its center (skipping points that are sole members).
        if !empty.is_empty() {
            let mut taken = vec![false; m];
            for c in empty {
                let mut far = None;
                let mut far_d = -1.0f64;
                for i in 0..m {
                    if taken[i] || counts[labels[i]] <= 1 {
                        continue;
                    }
                    let dist = sq_dist(points, i, &centers, labels[i]);
                    if dist > far_d {
                        far_d = dist;
                        far = Some(i);
                    }
                }
                if let Some(i) = far {
                    taken[i] = true;
                    counts[labels[i]] -= 1;
                    counts[c] += 1;
                    for j in 0..d {
                        centers[[c, j]] = points[[i, j]];
                    }
                    labels[i] = c;
                }
            }
        }

        let converged = prev_inertia.is_finite()
            && (prev_inertia - inertia).abs() <= REL_TOL * prev_inertia.max(f64::MIN_POSITIVE);
        prev_inertia = inertia;
        if converged {
            break;
        }
    }

    // Final assignment against the final centers so labels and inertia match
    // the returned centers exactly.
    let mut inertia = 0.0f64;
    for i in 0..m {
        let (lab, dist) = nearest_center(points, i, &centers);
        labels[i] = lab;
        inertia += dist;
    }

    Ok(KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
        n_init: 1,
    })
}

/// k-means++: first center uniform, the rest sampled proportional to the
/// squared distance to the nearest chosen center.
fn plus_plus_seed(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let m = points.nrows();
    let d = points.ncols();
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..m);
    centers.row_mut(0).assign(&points.row(first));

    let mut dist2 = vec![0.0f64; m];
    for i in 0..m {
        dist2[i] = sq_dist(points, i, &centers, 0);
    }
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = m - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining points coincide with chosen centers.
            rng.random_range(0..m)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..m {
            let nd = sq_dist(points, i, &centers, c);
            if nd < dist2[i] {
                dist2[i] = nd;
            }
        }
    }
    centers
}

fn nearest_center(points: &Array2<f64>, i: usize, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..centers.nrows() {
        let dist = sq_dist(points, i, centers, c);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    (best, best_d)
}

#[inline]
fn sq_dist(points: &Array2<f64>, i: usize, centers: &Array2<f64>, c: usize) -> f64 {
    let mut acc = 0.0f64;
    for j in 0..points.ncols() {
        let diff = points[[i, j]] - centers[[c, j]];
        acc += diff * diff;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn k_equals_m_gives_zero_inertia() {
        let pts = arr2(&[[0.0], [1.0], [2.0], [5.0]]);
        let res = kmeans(&pts, 4, 3, 10).unwrap();
        assert!(res.inertia.abs() < 1e-15);
        let mut sorted = res.labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_one_center_is_mean() {
        let pts = arr2(&[[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]]);
        let res = kmeans(&pts, 1, 0, 3).unwrap();
        assert!((res.centers[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((res.centers[[0, 1]] - 2.0).abs() < 1e-12);
        // inertia = sum of squared distances to the mean
        let expect = (4.0 + 4.0) + (0.0 + 0.0) + (4.0 + 4.0);
        assert!((res.inertia - expect).abs() < 1e-12);
    }

    #[test]
    fn separated_pairs_recovered_matches_brute_force() {
        // Brute force over all 2-partitions of {0, 0.1, 10, 10.1} puts
        // {0,0.1} and {10,10.1} together.
        let pts = arr2(&[[0.0], [0.1], [10.0], [10.1]]);
        let res = kmeans(&pts, 2, 7, 10).unwrap();
        assert_eq!(res.labels[0], res.labels[1]);
        assert_eq!(res.labels[2], res.labels[3]);
        assert_ne!(res.labels[0], res.labels[2]);

        // Independent brute-force check of the optimal inertia.
        let vals = [0.0, 0.1, 10.0, 10.1];
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 4) - 1 {
            let (mut a, mut b): (Vec<f64>, Vec<f64>) = (vec![], vec![]);
            for (i, &v) in vals.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(v);
                } else {
                    b.push(v);
                }
            }
            let sse = |xs: &[f64]| {
                let mu = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>()
            };
            best = best.min(sse(&a) + sse(&b));
        }
        assert!((res.inertia - best).abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = arr2(&[
            [0.1, 0.2],
            [0.3, 0.1],
            [5.0, 5.1],
            [5.2, 4.9],
            [9.0, 0.0],
            [9.1, 0.2],
        ]);
        let a = kmeans(&pts, 3, 42, 10).unwrap();
        let b = kmeans(&pts, 3, 42, 10).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = arr2(&[[0.0], [1.0]]);
        assert!(kmeans(&pts, 0, 0, 1).is_err());
        assert!(kmeans(&pts, 3, 0, 1).is_err());
    }
}
