//! Sum-of-norms convex clustering of scalar CATE estimates with
//! kernel-weighted fusion penalties, solved by projected dual ascent
//! (AMA-style: exact U-step, soft-thresholded pairwise terms via their
//! box-constrained duals).

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterResult, SolverDiagnostics};
use crate::error::{Error, Result};
use crate::forest::KernelMatrix;

/// Pairs with kernel weight at or below this are dropped from the penalty.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Solver configuration for [`son_cluster`] / [`lambda_search`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SonConfig {
    /// Fusion strength; 0 reproduces the inputs exactly.
    pub lambda: f64,
    /// Dual step size; `None` derives a stability-safe step from the active
    /// graph.
    pub step_size: Option<f64>,
    pub max_iterations: usize,
    /// Members whose fused values differ by at most this fraction of the
    /// tau range are merged into one cluster.
    pub merge_tolerance: f64,
    /// Relative objective change below which the solve counts as converged.
    pub convergence_tolerance: f64,
}

impl Default for SonConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            step_size: None,
            max_iterations: 5000,
            merge_tolerance: 1e-6,
            convergence_tolerance: 1e-8,
        }
    }
}

impl SonConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.merge_tolerance > 0.0) || !(self.convergence_tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "merge and convergence tolerances must be positive".into(),
            ));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig("step_size must be positive".into()));
            }
        }
        Ok(())
    }
}

struct Edge {
    i: usize,
    j: usize,
    w: f64,
}

/// Active fusion graph: kernel entries above the floor, negatives clamped.
fn build_edges(kernel: &KernelMatrix) -> (Vec<Edge>, usize) {
    let m = kernel.size();
    let vals = kernel.values();
    let mut edges = Vec::new();
    let mut clamped = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            let mut w = vals[[i, j]];
            if w < 0.0 {
                clamped += 1;
                w = 0.0;
            }
            if w > WEIGHT_FLOOR {
                edges.push(Edge { i, j, w });
            }
        }
    }
    (edges, clamped)
}

pub(crate) struct SonSolve {
    pub u: Vec<f64>,
    pub duals: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
    /// Objective value at the start of every iteration.
    pub trace: Vec<f64>,
}

fn objective(tau: &[f64], u: &[f64], edges: &[Edge], lambda: f64) -> f64 {
    let fidelity: f64 = tau
        .iter()
        .zip(u)
        .map(|(t, v)| (v - t) * (v - t))
        .sum();
    let fusion: f64 = edges
        .iter()
        .map(|e| e.w * (u[e.i] - u[e.j]).abs())
        .sum();
    fidelity + lambda * fusion
}

/// Projected dual ascent on the fusion duals. The primal iterate is the
/// exact minimizer `U = tau - A^T mu / 2`; each dual takes a gradient step
/// `U_i - U_j` and is clipped to its box `|mu_e| <= lambda w_e`.
pub(crate) fn solve_son(
    tau: &[f64],
    edges: &[Edge],
    lambda: f64,
    cfg: &SonConfig,
    warm_duals: Option<&[f64]>,
) -> Result<SonSolve> {
    let n = tau.len();
    let mut duals = match warm_duals {
        Some(d) if d.len() == edges.len() => d.to_vec(),
        _ => vec![0.0; edges.len()],
    };
    // Re-clip warm duals into the current box.
    for (mu, e) in duals.iter_mut().zip(edges) {
        let cap = lambda * e.w;
        *mu = mu.clamp(-cap, cap);
    }

    if lambda == 0.0 || edges.is_empty() {
        let u = tau.to_vec();
        let obj = objective(tau, &u, edges, lambda);
        return Ok(SonSolve {
            u,
            duals: vec![0.0; edges.len()],
            iterations: 0,
            objective: obj,
            trace: vec![obj],
        });
    }

    // Stability: the dual gradient is Lipschitz with constant bounded by the
    // maximum unweighted degree of the active graph, independent of lambda.
    let mut degree = vec![0usize; n];
    for e in edges {
        degree[e.i] += 1;
        degree[e.j] += 1;
    }
    let max_degree = degree.iter().copied().max().unwrap_or(1).max(1);
    let safe = 1.0 / max_degree as f64;
    let step = match cfg.step_size {
        Some(s) => s.min(safe),
        None => safe,
    };

    let mut u = vec![0.0f64; n];
    let mut delta = vec![0.0f64; n];
    let mut prev_obj = f64::INFINITY;
    let mut calm = 0usize;
    let mut trace = Vec::new();

    for iter in 0..cfg.max_iterations {
        delta.iter_mut().for_each(|v| *v = 0.0);
        for (mu, e) in duals.iter().zip(edges) {
            delta[e.i] += mu;
            delta[e.j] -= mu;
        }
        for i in 0..n {
            u[i] = tau[i] - 0.5 * delta[i];
        }
        let obj = objective(tau, &u, edges, lambda);
        trace.push(obj);
        if prev_obj.is_finite() {
            let change = (prev_obj - obj).abs();
            if change <= cfg.convergence_tolerance * prev_obj.abs().max(f64::MIN_POSITIVE) {
                calm += 1;
            } else {
                calm = 0;
            }
            // A short minimum run lets nearly-fused pairs contract to within
            // the merge window before the objective test can fire.
            if calm >= 2 && iter >= 30 {
                return Ok(SonSolve {
                    u,
                    duals,
                    iterations: iter + 1,
                    objective: obj,
                    trace,
                });
            }
        }
        prev_obj = obj;

        for (mu, e) in duals.iter_mut().zip(edges) {
            let cap = lambda * e.w;
            *mu = (*mu + step * (u[e.i] - u[e.j])).clamp(-cap, cap);
        }
    }

    let residual = trace
        .last()
        .zip(trace.len().checked_sub(2).map(|i| trace[i]))
        .map(|(last, before)| (before - last).abs() / before.abs().max(f64::MIN_POSITIVE))
        .unwrap_or(f64::INFINITY);
    Err(Error::SonNoConvergence {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// Merges points whose fused values are chained within the merge window
/// (connected components over `|U_i - U_j| <= tol * range(tau)`).
fn extract_labels(u: &[f64], tau_range: f64, merge_tolerance: f64) -> Vec<usize> {
    let n = u.len();
    let window = merge_tolerance * if tau_range > 0.0 { tau_range } else { 1.0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[a].partial_cmp(&u[b]).expect("finite fused values"));
    let mut labels = vec![0usize; n];
    let mut cluster = 0usize;
    for pos in 0..n {
        if pos > 0 && (u[order[pos]] - u[order[pos - 1]]).abs() > window {
            cluster += 1;
        }
        labels[order[pos]] = cluster;
    }
    labels
}

fn tau_range(tau: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &t in tau {
        lo = lo.min(t);
        hi = hi.max(t);
    }
    hi - lo
}

fn build_result(
    tau: &[f64],
    solve: &SonSolve,
    lambda: f64,
    merge_tolerance: f64,
    clamped_negatives: usize,
) -> Result<ClusterResult> {
    let labels = extract_labels(&solve.u, tau_range(tau), merge_tolerance);
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut centroid_sum = vec![0.0f64; k];
    let mut centroid_count = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        centroid_sum[l] += solve.u[i];
        centroid_count[l] += 1;
    }
    let (result, perm) = ClusterResult::from_raw_labels(
        tau,
        &labels,
        SolverDiagnostics::Son {
            objective: solve.objective,
            lambda,
            iterations: solve.iterations,
            centroids: vec![],
            clamped_negatives,
        },
    )?;
    let mut centroids = vec![0.0f64; k];
    for old in 0..k {
        centroids[perm[old]] = centroid_sum[old] / centroid_count[old] as f64;
    }
    let mut result = result;
    if let SolverDiagnostics::Son {
        centroids: ref mut c,
        ..
    } = result.diagnostics
    {
        *c = centroids;
    }
    Ok(result)
}

/// Kernelized sum-of-norms clustering of `tau` at `cfg.lambda`.
///
/// Minimizes `sum_i (U_i - tau_i)^2 + lambda * sum_{i<j} K_ij |U_i - U_j|`
/// and merges fused values into hard clusters.
pub fn son_cluster(tau: &[f64], kernel: &KernelMatrix, cfg: &SonConfig) -> Result<ClusterResult> {
    cfg.validate()?;
    if kernel.size() != tau.len() {
        return Err(Error::DimensionMismatch {
            expected: tau.len(),
            actual: kernel.size(),
            context: "kernel size vs tau length".into(),
        });
    }
    let (edges, clamped) = build_edges(kernel);
    let solve = solve_son(tau, &edges, cfg.lambda, cfg, None)?;
    build_result(tau, &solve, cfg.lambda, cfg.merge_tolerance, clamped)
}

/// Outcome of a [`lambda_search`]: the chosen penalty, its clustering, and
/// the traversed `(lambda, cluster count)` grid.
#[derive(Debug, Clone)]
pub struct LambdaSearchResult {
    pub lambda: f64,
    pub result: ClusterResult,
    /// Whether the requested cluster count was hit exactly.
    pub exact: bool,
    pub grid: Vec<(f64, usize)>,
}

const GRID_POINTS: usize = 50;

/// Sweeps a geometric lambda grid (warm-started in increasing lambda) and
/// returns the smallest lambda whose cluster count is at most `target_k`.
/// If no grid point hits the exact count, the closest count wins and the
/// result is flagged (`exact = false`).
pub fn lambda_search(
    tau: &[f64],
    kernel: &KernelMatrix,
    target_k: usize,
    cfg: &SonConfig,
) -> Result<LambdaSearchResult> {
    cfg.validate()?;
    let n = tau.len();
    if target_k == 0 || target_k > n {
        return Err(Error::InvalidConfig(format!(
            "target_k must lie in [1, {n}], got {target_k}"
        )));
    }
    if kernel.size() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: kernel.size(),
            context: "kernel size vs tau length".into(),
        });
    }
    let (edges, clamped) = build_edges(kernel);
    let range = tau_range(tau);
    let mean_weight = if edges.is_empty() {
        1.0
    } else {
        edges.iter().map(|e| e.w).sum::<f64>() / edges.len() as f64
    };
    let mut scale = range / mean_weight;
    if !scale.is_finite() || scale <= 0.0 {
        scale = 1.0;
    }
    let lo = 1e-4 * scale;
    let hi = 1e4 * scale;

    let mut grid = Vec::with_capacity(GRID_POINTS);
    let mut solves: Vec<(f64, SonSolve)> = Vec::with_capacity(GRID_POINTS);
    let mut warm: Option<Vec<f64>> = None;
    let mut prev_count = usize::MAX;
    for g in 0..GRID_POINTS {
        let lambda = lo * (hi / lo).powf(g as f64 / (GRID_POINTS - 1) as f64);
        let solve = solve_son(tau, &edges, lambda, cfg, warm.as_deref())?;
        let labels = extract_labels(&solve.u, range, cfg.merge_tolerance);
        let count = labels.iter().max().map(|m| m + 1).unwrap_or(0);
        // Agglomeration along the warm-started grid: increasing the penalty
        // never splits clusters.
        debug_assert!(
            count <= prev_count,
            "cluster count increased along the lambda grid: {prev_count} -> {count} at lambda={lambda}"
        );
        prev_count = prev_count.min(count);
        grid.push((lambda, count));
        warm = Some(solve.duals.clone());
        solves.push((lambda, solve));
        if count <= target_k {
            break;
        }
    }

    // Smallest lambda with count <= target, else the closest count.
    let chosen = grid
        .iter()
        .position(|&(_, c)| c <= target_k)
        .unwrap_or_else(|| {
            let mut best = 0usize;
            let mut best_err = usize::MAX;
            for (idx, &(_, c)) in grid.iter().enumerate() {
                let err = c.abs_diff(target_k);
                if err < best_err {
                    best_err = err;
                    best = idx;
                }
            }
            best
        });
    let (lambda, ref solve) = solves[chosen];
    let exact = grid[chosen].1 == target_k;
    let result = build_result(tau, solve, lambda, cfg.merge_tolerance, clamped)?;
    Ok(LambdaSearchResult {
        lambda,
        result,
        exact,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::KernelProvenance;
    use ndarray::{arr2, Array2};

    fn two_point_kernel(w: f64) -> KernelMatrix {
        KernelMatrix::from_dense(arr2(&[[1.0, w], [w, 1.0]]), KernelProvenance::Forest).unwrap()
    }

    fn cfg(lambda: f64) -> SonConfig {
        SonConfig {
            lambda,
            ..Default::default()
        }
    }

    #[test]
    fn lambda_zero_reproduces_inputs_exactly() {
        let tau = [2.0, 0.0, 1.0, -3.5];
        let mut v = Array2::zeros((4, 4));
        for i in 0..4 {
            v[[i, i]] = 1.0;
            for j in 0..4 {
                if i != j {
                    v[[i, j]] = 0.3;
                }
            }
        }
        let kernel = KernelMatrix::from_dense(v, KernelProvenance::Forest).unwrap();
        let res = son_cluster(&tau, &kernel, &cfg(0.0)).unwrap();
        assert_eq!(res.k, 4);
        if let SolverDiagnostics::Son { centroids, .. } = &res.diagnostics {
            let mut sorted = tau.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (c, t) in centroids.iter().zip(&sorted) {
                assert_eq!(c, t, "lambda=0 must return tau exactly");
            }
        } else {
            panic!("expected SON diagnostics");
        }
    }

    #[test]
    fn two_point_fused_closed_form() {
        // Fusion happens when lambda*K12 >= |tau1 - tau2| = 2; at lambda=3
        // the fused value is the mean, 1.
        let tau = [2.0, 0.0];
        let res = son_cluster(&tau, &two_point_kernel(1.0), &cfg(3.0)).unwrap();
        assert_eq!(res.k, 1);
        if let SolverDiagnostics::Son { centroids, .. } = &res.diagnostics {
            assert!((centroids[0] - 1.0).abs() < 1e-6);
        }
        assert_eq!(res.clusters[0].mean, 1.0);
    }

    #[test]
    fn two_point_unfused_closed_form() {
        // lambda=1 < 2: stationarity gives U = (tau1 - lambda*K12/2,
        // tau2 + lambda*K12/2) = (1.5, 0.5).
        let tau = [2.0, 0.0];
        let res = son_cluster(&tau, &two_point_kernel(1.0), &cfg(1.0)).unwrap();
        assert_eq!(res.k, 2);
        if let SolverDiagnostics::Son { centroids, .. } = &res.diagnostics {
            // canonical order: ascending mean, so centroid 0 pairs with tau=0
            assert!((centroids[0] - 0.5).abs() < 1e-6);
            assert!((centroids[1] - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn two_point_threshold_boundary() {
        // Exactly at the fusion threshold lambda*K12 = 2 the stationary
        // values coincide at the mean.
        let tau = [2.0, 0.0];
        let res = son_cluster(&tau, &two_point_kernel(1.0), &cfg(2.0)).unwrap();
        assert_eq!(res.k, 1);
        if let SolverDiagnostics::Son { centroids, .. } = &res.diagnostics {
            assert!((centroids[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_non_increasing_and_matches_closed_form() {
        let tau = [2.0, 0.0];
        let kernel = two_point_kernel(1.0);
        let (edges, _) = build_edges(&kernel);
        for lambda in [0.5, 1.0, 2.0, 3.0, 10.0] {
            let solve = solve_son(&tau, &edges, lambda, &cfg(lambda), None).unwrap();
            for pair in solve.trace.windows(2) {
                assert!(
                    pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12,
                    "objective increased at lambda={lambda}: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
            // closed-form optimum
            let expected = if lambda >= 2.0 {
                2.0 // (1-2)^2 + (1-0)^2 + lambda*0
            } else {
                let u1 = 2.0 - lambda / 2.0;
                let u2 = lambda / 2.0;
                (u1 - 2.0).powi(2) + u2 * u2 + lambda * (u1 - u2)
            };
            assert!(
                (solve.objective - expected).abs() <= 1e-6 * expected.max(1.0),
                "objective {} vs closed form {expected} at lambda={lambda}",
                solve.objective
            );
        }
    }

    #[test]
    fn non_convergence_reports_residual() {
        let tau = [2.0, 0.0];
        let kernel = two_point_kernel(1.0);
        let tight = SonConfig {
            lambda: 3.0,
            max_iterations: 3,
            ..Default::default()
        };
        match son_cluster(&tau, &kernel, &tight) {
            Err(Error::SonNoConvergence { iterations: 3, .. }) => {}
            other => panic!("expected SonNoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn lambda_search_two_point_fusion_threshold() {
        let tau = [2.0, 0.0];
        let kernel = two_point_kernel(1.0);
        let out = lambda_search(&tau, &kernel, 1, &SonConfig::default()).unwrap();
        assert_eq!(out.result.k, 1);
        assert!(out.exact);
        // fusion threshold is lambda = |dtau|/K12 = 2
        assert!(out.lambda >= 2.0, "lambda {} below threshold", out.lambda);
        // counts along grid never increase
        for pair in out.grid.windows(2) {
            assert!(pair[1].1 <= pair[0].1);
        }
    }

    #[test]
    fn lambda_search_targets_n_and_one() {
        let tau = [0.0, 1.0, 2.5, 4.0, 7.0];
        let mut v = Array2::from_elem((5, 5), 0.5);
        for i in 0..5 {
            v[[i, i]] = 1.0;
        }
        let kernel = KernelMatrix::from_dense(v, KernelProvenance::Forest).unwrap();
        let all = lambda_search(&tau, &kernel, 5, &SonConfig::default()).unwrap();
        assert_eq!(all.result.k, 5);
        assert!(all.exact);
        assert_eq!(all.grid.len(), 1, "smallest grid lambda separates everyone");

        let one = lambda_search(&tau, &kernel, 1, &SonConfig::default()).unwrap();
        assert_eq!(one.result.k, 1);
        if let SolverDiagnostics::Son { centroids, .. } = &one.result.diagnostics {
            let mean = tau.iter().sum::<f64>() / 5.0;
            assert!((centroids[0] - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn agglomeration_monotone_on_random_instance() {
        let mut rng = crate::rng::stream_rng(77, 0);
        use rand::RngExt;
        let n = 30;
        let tau: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut v = Array2::zeros((n, n));
        for i in 0..n {
            v[[i, i]] = 1.0;
            for j in (i + 1)..n {
                let w = rng.random_range(0.0..0.02);
                v[[i, j]] = w;
                v[[j, i]] = w;
            }
        }
        let kernel = KernelMatrix::from_dense(v, KernelProvenance::Rbf).unwrap();
        let out = lambda_search(&tau, &kernel, 1, &SonConfig::default()).unwrap();
        for pair in out.grid.windows(2) {
            assert!(
                pair[1].1 <= pair[0].1,
                "counts must not increase: {:?} -> {:?}",
                pair[0],
                pair[1]
            );
        }
        assert_eq!(out.result.k, 1);
    }
}
