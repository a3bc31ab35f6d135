//! Honest tree ensembles: a regression forest for nuisance functions, a
//! causal forest on residualized data, and forest-weight / kernel
//! extraction.

mod kernel;
mod tree;

pub use kernel::{
    kernel_from_weights, rbf_kernel, threshold_kernel, KernelMatrix, KernelProvenance,
    WeightMatrix,
};
pub use tree::{HonestTree, TreeNode, TreePlan};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use tree::{grow_tree, GrowSettings, SplitScorer};

/// Ensemble hyperparameters. The regularization of the fitted effect
/// function lives entirely in these (depth, leaf size, subsampling).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Fraction of the training set subsampled (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Fraction of each subsample used to choose splits; the remainder
    /// populates leaves.
    pub honesty_fraction: f64,
    /// Minimum samples per child, enforced on both halves at split time.
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Candidate split features per node; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            subsample_fraction: 0.5,
            honesty_fraction: 0.5,
            min_leaf: 5,
            max_depth: None,
            mtry: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be >= 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "subsample_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "honesty_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidConfig("min_leaf must be >= 1".into()));
        }
        Ok(())
    }

    fn mtry_for(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p)
    }

    fn check_n(&self, n: usize) -> Result<()> {
        let needed = 2.0 * self.min_leaf as f64 / self.honesty_fraction;
        if (n as f64) < needed {
            return Err(Error::ForestFit(format!(
                "need at least {} samples for min_leaf={} at honesty_fraction={}, got {n}",
                needed.ceil(),
                self.min_leaf,
                self.honesty_fraction
            )));
        }
        let s = (self.subsample_fraction * n as f64).floor() as usize;
        if s < 2 {
            return Err(Error::ForestFit(format!(
                "subsample of {n} samples at fraction {} is too small",
                self.subsample_fraction
            )));
        }
        Ok(())
    }
}

/// Draws the per-tree subsample plan from substream `b` of the forest seed.
fn draw_plan(n: usize, params: &ForestParams, rng: &mut rand_chacha::ChaCha8Rng) -> TreePlan {
    let s = ((params.subsample_fraction * n as f64).floor() as usize).max(2);
    let n_struct = ((params.honesty_fraction * s as f64).floor() as usize).clamp(1, s - 1);
    let drawn = rand::seq::index::sample(rng, n, s).into_vec();
    let mut structure: Vec<u32> = drawn[..n_struct].iter().map(|&i| i as u32).collect();
    let mut estimation: Vec<u32> = drawn[n_struct..].iter().map(|&i| i as u32).collect();
    structure.sort_unstable();
    estimation.sort_unstable();
    TreePlan {
        structure,
        estimation,
    }
}

/// Behavior shared by both forest kinds; weight extraction only needs the
/// trees and the training-set size.
pub trait ForestModel {
    fn trees(&self) -> &[HonestTree];
    fn n_train(&self) -> usize;
    fn n_features(&self) -> usize;
}

/// Fills `buf` (length n_train) with the forest weights of one test row.
/// Returns the number of contributing trees.
fn fill_weights_row(
    trees: &[HonestTree],
    x: &Array2<f64>,
    row: usize,
    buf: &mut [f64],
) -> Result<u32> {
    buf.iter_mut().for_each(|v| *v = 0.0);
    let mut contributing = 0u32;
    for t in trees {
        let leaf = t.leaf_for(x, row);
        let members = t.leaf_members(leaf);
        if members.is_empty() {
            // Empty estimation leaf: the tree abstains for this row.
            continue;
        }
        let w = 1.0 / members.len() as f64;
        for &i in members {
            buf[i as usize] += w;
        }
        contributing += 1;
    }
    if contributing == 0 {
        return Err(Error::Predict {
            index: row,
            message: "no tree has a non-empty leaf for this point".into(),
        });
    }
    let scale = 1.0 / contributing as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(contributing)
}

/// Forest weights over test rows: per tree, each estimation sample in the
/// leaf of a test point receives `1/|leaf|`, averaged over contributing
/// trees; rows sum to 1.
pub fn forest_weights<F: ForestModel + Sync>(f: &F, x_test: &Array2<f64>) -> Result<WeightMatrix> {
    check_features(f, x_test)?;
    if f.trees().is_empty() {
        return Err(Error::ForestFit("forest has no trees".into()));
    }
    let m = x_test.nrows();
    let n = f.n_train();
    let rows: Vec<Result<(Vec<f64>, u32)>> = (0..m)
        .into_par_iter()
        .map(|row| {
            let mut buf = vec![0.0f64; n];
            let contributing = fill_weights_row(f.trees(), x_test, row, &mut buf)?;
            Ok((buf, contributing))
        })
        .collect();
    let mut values = Array2::zeros((m, n));
    let mut contributing = Vec::with_capacity(m);
    for (row, item) in rows.into_iter().enumerate() {
        let (buf, c) = item?;
        for (j, v) in buf.into_iter().enumerate() {
            values[[row, j]] = v;
        }
        let _ = row;
        contributing.push(c);
    }
    Ok(WeightMatrix::new(values, contributing))
}

fn check_features<F: ForestModel>(f: &F, x: &Array2<f64>) -> Result<()> {
    if x.ncols() != f.n_features() {
        return Err(Error::DimensionMismatch {
            expected: f.n_features(),
            actual: x.ncols(),
            context: "test feature count".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Regression forest
// ---------------------------------------------------------------------------

/// Honest regression forest; predictions are convex combinations of the
/// training targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionForest {
    params: ForestParams,
    trees: Vec<HonestTree>,
    targets: Array1<f64>,
    n_features: usize,
}

impl ForestModel for RegressionForest {
    fn trees(&self) -> &[HonestTree] {
        &self.trees
    }
    fn n_train(&self) -> usize {
        self.targets.len()
    }
    fn n_features(&self) -> usize {
        self.n_features
    }
}

struct RegressionScorer<'a> {
    targets: &'a Array1<f64>,
}

impl SplitScorer for RegressionScorer<'_> {
    fn node_scores(&self, node: &[u32]) -> Option<Vec<f64>> {
        Some(node.iter().map(|&i| self.targets[i as usize]).collect())
    }
}

/// Fits an honest regression forest by variance reduction on the structure
/// halves. Deterministic given `params.seed`.
pub fn fit_regression_forest(
    x: &Array2<f64>,
    targets: &Array1<f64>,
    params: &ForestParams,
) -> Result<RegressionForest> {
    params.validate()?;
    let n = x.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: targets.len(),
            context: "targets length".into(),
        });
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::ForestFit("non-finite target".into()));
    }
    params.check_n(n)?;
    let trees = fit_trees(x, params, None, &RegressionScorer { targets })?;
    Ok(RegressionForest {
        params: params.clone(),
        trees,
        targets: targets.clone(),
        n_features: x.ncols(),
    })
}

/// As [`fit_regression_forest`] but with caller-supplied subsample plans
/// (one per tree); plans must index into `x`.
pub fn fit_regression_forest_with_plans(
    x: &Array2<f64>,
    targets: &Array1<f64>,
    params: &ForestParams,
    plans: &[TreePlan],
) -> Result<RegressionForest> {
    params.validate()?;
    let trees = fit_trees(x, params, Some(plans), &RegressionScorer { targets })?;
    Ok(RegressionForest {
        params: params.clone(),
        trees,
        targets: targets.clone(),
        n_features: x.ncols(),
    })
}

/// Predicts by forest-weight averaging: `sum_i alpha_i(x) * target_i`.
pub fn predict_regression(f: &RegressionForest, x_test: &Array2<f64>) -> Result<Vec<f64>> {
    check_features(f, x_test)?;
    if f.trees.is_empty() {
        return Err(Error::ForestFit("forest has no trees".into()));
    }
    let n = f.n_train();
    (0..x_test.nrows())
        .into_par_iter()
        .map(|row| {
            let mut buf = vec![0.0f64; n];
            fill_weights_row(&f.trees, x_test, row, &mut buf)?;
            Ok(buf
                .iter()
                .zip(f.targets.iter())
                .map(|(a, t)| a * t)
                .sum::<f64>())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Causal forest
// ---------------------------------------------------------------------------

/// Honest causal forest grown on residualized data; stores the training
/// residuals for local effect prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalForest {
    params: ForestParams,
    trees: Vec<HonestTree>,
    features: Array2<f64>,
    y_res: Array1<f64>,
    w_res: Array1<f64>,
}

impl ForestModel for CausalForest {
    fn trees(&self) -> &[HonestTree] {
        &self.trees
    }
    fn n_train(&self) -> usize {
        self.y_res.len()
    }
    fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

impl CausalForest {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn y_res(&self) -> &Array1<f64> {
        &self.y_res
    }

    pub fn w_res(&self) -> &Array1<f64> {
        &self.w_res
    }
}

/// Gradient-style heterogeneity scorer: within a node, form pseudo-outcomes
/// `rho_i = w~_i (y~_i - w~_i tau_P) / mean(w~^2)` around the node-level
/// effect `tau_P` and split to maximize the spread of their child sums.
struct CausalScorer<'a> {
    y_res: &'a Array1<f64>,
    w_res: &'a Array1<f64>,
}

impl SplitScorer for CausalScorer<'_> {
    fn node_scores(&self, node: &[u32]) -> Option<Vec<f64>> {
        let mut sum_wy = 0.0f64;
        let mut sum_w2 = 0.0f64;
        for &i in node {
            let w = self.w_res[i as usize];
            sum_wy += w * self.y_res[i as usize];
            sum_w2 += w * w;
        }
        if sum_w2 <= 1e-12 {
            return None;
        }
        let tau_p = sum_wy / sum_w2;
        let mean_w2 = sum_w2 / node.len() as f64;
        Some(
            node.iter()
                .map(|&i| {
                    let w = self.w_res[i as usize];
                    w * (self.y_res[i as usize] - w * tau_p) / mean_w2
                })
                .collect(),
        )
    }
}

/// Fits an honest causal forest on residuals `(y~, w~)`.
pub fn fit_causal_forest(
    x: &Array2<f64>,
    y_res: &Array1<f64>,
    w_res: &Array1<f64>,
    params: &ForestParams,
) -> Result<CausalForest> {
    params.validate()?;
    let n = x.nrows();
    if y_res.len() != n || w_res.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y_res.len().min(w_res.len()),
            context: "residual length".into(),
        });
    }
    if y_res.iter().chain(w_res.iter()).any(|v| !v.is_finite()) {
        return Err(Error::ForestFit("non-finite residual".into()));
    }
    let mean_w = w_res.sum() / n as f64;
    let var_w = w_res.iter().map(|w| (w - mean_w) * (w - mean_w)).sum::<f64>() / n as f64;
    if var_w <= 1e-8 {
        return Err(Error::ForestFit(
            "treatment residuals have (near-)zero variance; no overlap in residualized treatment"
                .into(),
        ));
    }
    params.check_n(n)?;
    let trees = fit_trees(x, params, None, &CausalScorer { y_res, w_res })?;
    Ok(CausalForest {
        params: params.clone(),
        trees,
        features: x.clone(),
        y_res: y_res.clone(),
        w_res: w_res.clone(),
    })
}

/// As [`fit_causal_forest`] with caller-supplied subsample plans.
pub fn fit_causal_forest_with_plans(
    x: &Array2<f64>,
    y_res: &Array1<f64>,
    w_res: &Array1<f64>,
    params: &ForestParams,
    plans: &[TreePlan],
) -> Result<CausalForest> {
    params.validate()?;
    let trees = fit_trees(x, params, Some(plans), &CausalScorer { y_res, w_res })?;
    Ok(CausalForest {
        params: params.clone(),
        trees,
        features: x.clone(),
        y_res: y_res.clone(),
        w_res: w_res.clone(),
    })
}

/// Builds a causal forest from existing parts (hand-constructed trees);
/// used to exercise routing and weight extraction on known structures.
pub fn causal_forest_from_parts(
    params: ForestParams,
    trees: Vec<HonestTree>,
    features: Array2<f64>,
    y_res: Array1<f64>,
    w_res: Array1<f64>,
) -> CausalForest {
    CausalForest {
        params,
        trees,
        features,
        y_res,
        w_res,
    }
}

/// Builds a regression forest from existing parts.
pub fn regression_forest_from_parts(
    params: ForestParams,
    trees: Vec<HonestTree>,
    targets: Array1<f64>,
    n_features: usize,
) -> RegressionForest {
    RegressionForest {
        params,
        trees,
        targets,
        n_features,
    }
}

/// Local effect estimate: the weighted-least-squares closed form
/// `tau(x) = sum_j alpha_j w~_j y~_j / sum_j alpha_j w~_j^2`.
pub fn predict_tau(f: &CausalForest, x_test: &Array2<f64>) -> Result<Vec<f64>> {
    check_features(f, x_test)?;
    if f.trees.is_empty() {
        return Err(Error::ForestFit("forest has no trees".into()));
    }
    let n = f.n_train();
    let wy: Vec<f64> = f
        .w_res
        .iter()
        .zip(f.y_res.iter())
        .map(|(w, y)| w * y)
        .collect();
    let w2: Vec<f64> = f.w_res.iter().map(|w| w * w).collect();
    (0..x_test.nrows())
        .into_par_iter()
        .map(|row| {
            let mut buf = vec![0.0f64; n];
            fill_weights_row(&f.trees, x_test, row, &mut buf)?;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..n {
                num += buf[i] * wy[i];
                den += buf[i] * w2[i];
            }
            if den <= 1e-10 {
                return Err(Error::Predict {
                    index: row,
                    message: format!(
                        "degenerate effect denominator {den:.3e} (weighted treatment residuals vanish)"
                    ),
                });
            }
            Ok(num / den)
        })
        .collect()
}

fn fit_trees(
    x: &Array2<f64>,
    params: &ForestParams,
    plans: Option<&[TreePlan]>,
    scorer: &(dyn SplitScorer + Sync),
) -> Result<Vec<HonestTree>> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || p == 0 {
        return Err(Error::ForestFit("empty training data".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::ForestFit("non-finite feature".into()));
    }
    if let Some(plans) = plans {
        if plans.len() != params.n_trees {
            return Err(Error::ForestFit(format!(
                "expected {} tree plans, got {}",
                params.n_trees,
                plans.len()
            )));
        }
    }
    let settings = GrowSettings {
        min_leaf: params.min_leaf,
        max_depth: params.max_depth,
        mtry: params.mtry_for(p),
    };
    // One RNG substream per tree: fits parallelize in any order and still
    // reproduce exactly.
    (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(params.seed, b as u64);
            let plan = match plans {
                Some(plans) => plans[b].clone(),
                None => draw_plan(n, params, &mut rng),
            };
            if plan.structure.iter().chain(plan.estimation.iter()).any(|&i| i as usize >= n) {
                return Err(Error::ForestFit(format!(
                    "tree plan {b} references a sample outside the training set"
                )));
            }
            grow_tree(x, &plan, scorer, &settings, &mut rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Versioned JSON documents
// ---------------------------------------------------------------------------

const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct VersionedDoc<T> {
    format_version: u32,
    forest: T,
}

impl CausalForest {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&VersionedDoc {
            format_version: FOREST_FORMAT_VERSION,
            forest: self,
        })?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: VersionedDoc<CausalForest> = serde_json::from_str(s)?;
        if doc.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: FOREST_FORMAT_VERSION,
            });
        }
        Ok(doc.forest)
    }
}

impl RegressionForest {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&VersionedDoc {
            format_version: FOREST_FORMAT_VERSION,
            forest: self,
        })?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: VersionedDoc<RegressionForest> = serde_json::from_str(s)?;
        if doc.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: FOREST_FORMAT_VERSION,
            });
        }
        Ok(doc.forest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::RngExt;
    use rand_distr::{Distribution, StandardNormal};

    fn small_params(seed: u64) -> ForestParams {
        ForestParams {
            n_trees: 50,
            min_leaf: 2,
            seed,
            ..Default::default()
        }
    }

    fn random_x(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream_rng(seed, 0);
        let mut x = Array2::zeros((n, p));
        for v in x.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        x
    }

    #[test]
    fn constant_targets_predict_constant() {
        let x = random_x(60, 2, 1);
        let targets = Array1::from_elem(60, 4.25);
        let f = fit_regression_forest(&x, &targets, &small_params(3)).unwrap();
        let preds = predict_regression(&f, &random_x(10, 2, 2)).unwrap();
        for p in preds {
            assert!((p - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn learns_linear_signal() {
        let n = 50;
        let x = random_x(n, 2, 5);
        let targets: Array1<f64> = (0..n).map(|i| x[[i, 0]]).collect::<Vec<_>>().into();
        let f = fit_regression_forest(&x, &targets, &small_params(7)).unwrap();
        let x_test = random_x(40, 2, 6);
        let preds = predict_regression(&f, &x_test).unwrap();
        // Pearson correlation with x1 on held-out points
        let xs: Vec<f64> = (0..40).map(|i| x_test[[i, 0]]).collect();
        let mx = xs.iter().sum::<f64>() / 40.0;
        let mp = preds.iter().sum::<f64>() / 40.0;
        let cov: f64 = xs.iter().zip(&preds).map(|(a, b)| (a - mx) * (b - mp)).sum();
        let vx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vp: f64 = preds.iter().map(|b| (b - mp) * (b - mp)).sum();
        let r = cov / (vx * vp).sqrt();
        assert!(r > 0.5, "correlation too weak: {r}");
    }

    #[test]
    fn same_seed_same_forest() {
        let x = random_x(60, 3, 9);
        let targets: Array1<f64> = (0..60).map(|i| x[[i, 1]]).collect::<Vec<_>>().into();
        let f1 = fit_regression_forest(&x, &targets, &small_params(11)).unwrap();
        let f2 = fit_regression_forest(&x, &targets, &small_params(11)).unwrap();
        assert_eq!(
            f1.to_json_string().unwrap(),
            f2.to_json_string().unwrap()
        );
    }

    #[test]
    fn honesty_halves_disjoint_on_fitted_trees() {
        let x = random_x(80, 2, 13);
        let targets: Array1<f64> = (0..80).map(|i| x[[i, 0]]).collect::<Vec<_>>().into();
        let f = fit_regression_forest(&x, &targets, &small_params(15)).unwrap();
        for t in f.trees() {
            assert!(t.halves_disjoint());
            assert!(!t.structure_indices().is_empty());
            assert!(!t.estimation_indices().is_empty());
        }
    }

    #[test]
    fn single_leaf_tree_predicts_target_mean() {
        let targets = arr1(&[1.0, 2.0, 3.0, 4.0]);
        let tree = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![0, 1, 2, 3]],
            vec![],
            vec![0, 1, 2, 3],
        );
        let f = regression_forest_from_parts(small_params(0), vec![tree], targets, 1);
        let preds = predict_regression(&f, &arr2(&[[5.0]])).unwrap();
        assert!((preds[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn pure_leaf_returns_training_target() {
        let x_train = arr2(&[[0.0], [1.0]]);
        let targets = arr1(&[3.0, 7.0]);
        let tree = HonestTree::from_parts(
            vec![
                TreeNode::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { leaf: 0 },
                TreeNode::Leaf { leaf: 1 },
            ],
            vec![vec![0], vec![1]],
            vec![],
            vec![0, 1],
        );
        let f = regression_forest_from_parts(small_params(0), vec![tree], targets, 1);
        let preds = predict_regression(&f, &x_train).unwrap();
        assert_eq!(preds, vec![3.0, 7.0]);
    }

    #[test]
    fn empty_forest_rejected() {
        let f = regression_forest_from_parts(small_params(0), vec![], arr1(&[1.0]), 1);
        assert!(predict_regression(&f, &arr2(&[[0.0]])).is_err());
    }

    #[test]
    fn weights_single_leaf_uniform() {
        let tree = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![0, 1, 2, 3]],
            vec![],
            vec![0, 1, 2, 3],
        );
        let f = regression_forest_from_parts(
            small_params(0),
            vec![tree],
            arr1(&[0.0, 0.0, 0.0, 0.0]),
            1,
        );
        let w = forest_weights(&f, &arr2(&[[0.0], [9.0]])).unwrap();
        for row in 0..2 {
            for col in 0..4 {
                assert!((w.values()[[row, col]] - 0.25).abs() < 1e-15);
            }
        }
        assert_eq!(w.contributing(), &[1, 1]);
    }

    #[test]
    fn weights_two_hand_built_trees() {
        // Tree A splits at 0.5: leaf {0,1} left, leaf {2} right.
        // Tree B is a single leaf {1,2,3}.
        // Test point x=0.2 -> tree A left leaf {0,1} each 1/2; tree B {1,2,3}
        // each 1/3. Average over 2 trees:
        //   alpha = [1/4, 1/4 + 1/6, 1/6, 1/6]
        let tree_a = HonestTree::from_parts(
            vec![
                TreeNode::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { leaf: 0 },
                TreeNode::Leaf { leaf: 1 },
            ],
            vec![vec![0, 1], vec![2]],
            vec![],
            vec![0, 1, 2],
        );
        let tree_b = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![1, 2, 3]],
            vec![],
            vec![1, 2, 3],
        );
        let f = regression_forest_from_parts(
            small_params(0),
            vec![tree_a, tree_b],
            arr1(&[0.0, 0.0, 0.0, 0.0]),
            1,
        );
        let w = forest_weights(&f, &arr2(&[[0.2]])).unwrap();
        let expect = [0.25, 0.25 + 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (j, e) in expect.iter().enumerate() {
            assert!((w.values()[[0, j]] - e).abs() < 1e-15, "entry {j}");
        }
        let sum: f64 = w.values().row(0).sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }

    #[test]
    fn empty_leaf_abstains_and_renormalizes() {
        let full = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![0, 1]],
            vec![],
            vec![0, 1],
        );
        let empty = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![]],
            vec![],
            vec![],
        );
        let f = regression_forest_from_parts(
            small_params(0),
            vec![full, empty.clone()],
            arr1(&[2.0, 4.0]),
            1,
        );
        let w = forest_weights(&f, &arr2(&[[0.0]])).unwrap();
        assert_eq!(w.contributing(), &[1]);
        assert!((w.values()[[0, 0]] - 0.5).abs() < 1e-15);
        let preds = predict_regression(&f, &arr2(&[[0.0]])).unwrap();
        assert!((preds[0] - 3.0).abs() < 1e-15);

        // all trees abstain -> error naming the row
        let f2 = regression_forest_from_parts(small_params(0), vec![empty], arr1(&[2.0, 4.0]), 1);
        let err = forest_weights(&f2, &arr2(&[[0.0]])).unwrap_err();
        assert!(matches!(err, Error::Predict { index: 0, .. }));
    }

    #[test]
    fn row_sums_one_on_fitted_forest() {
        let x = random_x(70, 2, 21);
        let targets: Array1<f64> = (0..70).map(|i| x[[i, 0]] * 2.0).collect::<Vec<_>>().into();
        let f = fit_regression_forest(&x, &targets, &small_params(23)).unwrap();
        let w = forest_weights(&f, &random_x(15, 2, 24)).unwrap();
        for row in 0..15 {
            let sum: f64 = w.values().row(row).sum();
            assert!((sum - 1.0).abs() < 1e-10, "row {row} sums to {sum}");
            for col in 0..70 {
                assert!(w.values()[[row, col]] >= 0.0);
            }
        }
    }

    fn residual_data(n: usize, c: f64, seed: u64) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let mut rng = crate::rng::stream_rng(seed, 0);
        let x = random_x(n, 2, seed + 1);
        let w_res: Array1<f64> = (0..n)
            .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.5 } else { -0.5 })
            .collect::<Vec<_>>()
            .into();
        let y_res: Array1<f64> = w_res.iter().map(|w| c * w).collect::<Vec<_>>().into();
        (x, y_res, w_res)
    }

    #[test]
    fn causal_constant_effect_recovered_exactly() {
        let (x, y_res, w_res) = residual_data(80, 3.5, 31);
        let f = fit_causal_forest(&x, &y_res, &w_res, &small_params(33)).unwrap();
        let preds = predict_tau(&f, &random_x(20, 2, 34)).unwrap();
        for p in preds {
            assert!((p - 3.5).abs() < 1e-9, "tau should collapse to c, got {p}");
        }
    }

    #[test]
    fn causal_rejects_zero_treatment_residuals() {
        let x = random_x(40, 2, 35);
        let y_res = Array1::zeros(40);
        let w_res = Array1::zeros(40);
        let err = fit_causal_forest(&x, &y_res, &w_res, &small_params(0)).unwrap_err();
        assert!(err.to_string().contains("variance"));
    }

    #[test]
    fn causal_deterministic_and_linear_in_y() {
        let mut rng = crate::rng::stream_rng(41, 0);
        let n = 80;
        let x = random_x(n, 2, 42);
        let w_res: Array1<f64> = (0..n)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect::<Vec<_>>()
            .into();
        let y_res: Array1<f64> = (0..n)
            .map(|i| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                w_res[i] * (1.0 + x[[i, 0]]) + 0.1 * noise
            })
            .collect::<Vec<_>>()
            .into();
        let f1 = fit_causal_forest(&x, &y_res, &w_res, &small_params(43)).unwrap();
        let f2 = fit_causal_forest(&x, &y_res, &w_res, &small_params(43)).unwrap();
        assert_eq!(f1.to_json_string().unwrap(), f2.to_json_string().unwrap());

        // The predictor is linear in y~ for a fixed forest: rebuild the same
        // trees around scaled residuals and compare.
        let y_scaled: Array1<f64> = y_res.iter().map(|v| v * -2.5).collect::<Vec<_>>().into();
        let f3 = causal_forest_from_parts(
            f1.params().clone(),
            f1.trees().to_vec(),
            x.clone(),
            y_scaled,
            w_res.clone(),
        );
        let x_test = random_x(10, 2, 44);
        let p1 = predict_tau(&f1, &x_test).unwrap();
        let p3 = predict_tau(&f3, &x_test).unwrap();
        for (a, b) in p1.iter().zip(&p3) {
            assert!((b - a * -2.5).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn predict_tau_uniform_weight_closed_form() {
        // Single leaf holding everything: alpha = 1/n. With y~ = tau0 w~ and
        // balanced w~ = +-1/2, tau = tau0.
        let x = arr2(&[[0.0], [0.0], [0.0], [0.0]]);
        let w_res = arr1(&[0.5, -0.5, 0.5, -0.5]);
        let tau0 = 1.75;
        let y_res = w_res.mapv(|w| tau0 * w);
        let tree = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![0, 1, 2, 3]],
            vec![],
            vec![0, 1, 2, 3],
        );
        let f = causal_forest_from_parts(small_params(0), vec![tree], x.clone(), y_res, w_res);
        let preds = predict_tau(&f, &arr2(&[[0.0]])).unwrap();
        assert!((preds[0] - tau0).abs() < 1e-15);
    }

    #[test]
    fn predict_tau_degenerate_denominator_errors() {
        let x = arr2(&[[0.0]]);
        let tree = HonestTree::from_parts(
            vec![TreeNode::Leaf { leaf: 0 }],
            vec![vec![0]],
            vec![],
            vec![0],
        );
        let f = causal_forest_from_parts(
            small_params(0),
            vec![tree],
            x.clone(),
            arr1(&[1.0]),
            arr1(&[0.0]),
        );
        let err = predict_tau(&f, &arr2(&[[0.0]])).unwrap_err();
        assert!(matches!(err, Error::Predict { index: 0, .. }));
    }

    #[test]
    fn predict_tau_matches_weight_matrix_formula() {
        let mut rng = crate::rng::stream_rng(51, 0);
        let n = 60;
        let x = random_x(n, 2, 52);
        let w_res: Array1<f64> = (0..n)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect::<Vec<_>>()
            .into();
        let y_res: Array1<f64> = (0..n)
            .map(|i| w_res[i] * 2.0 + 0.05 * rng.random_range(-1.0..1.0))
            .collect::<Vec<_>>()
            .into();
        let f = fit_causal_forest(&x, &y_res, &w_res, &small_params(53)).unwrap();
        let x_test = random_x(20, 2, 54);
        let preds = predict_tau(&f, &x_test).unwrap();
        let w = forest_weights(&f, &x_test).unwrap();
        for row in 0..20 {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                num += w.values()[[row, i]] * w_res[i] * y_res[i];
                den += w.values()[[row, i]] * w_res[i] * w_res[i];
            }
            assert!((preds[row] - num / den).abs() <= 1e-10);
        }
    }

    #[test]
    fn permuted_rows_with_matched_plans_reproduce_predictions() {
        let n = 40;
        let x = random_x(n, 2, 61);
        let targets: Array1<f64> = (0..n)
            .map(|i| x[[i, 0]] + 0.3 * x[[i, 1]])
            .collect::<Vec<_>>()
            .into();
        let params = ForestParams {
            n_trees: 20,
            min_leaf: 2,
            seed: 62,
            ..Default::default()
        };
        // explicit plans on the original ordering
        let plans: Vec<TreePlan> = (0..params.n_trees)
            .map(|b| {
                let mut rng = stream_rng(params.seed, b as u64);
                draw_plan(n, &params, &mut rng)
            })
            .collect();
        let f1 = fit_regression_forest_with_plans(&x, &targets, &params, &plans).unwrap();

        // permute rows and map the plans through the permutation
        let perm: Vec<usize> = (0..n).map(|i| (i * 17 + 5) % n).collect();
        let mut x_perm = Array2::zeros((n, 2));
        let mut t_perm = Array1::zeros(n);
        for (new, &old) in perm.iter().enumerate() {
            x_perm.row_mut(new).assign(&x.row(old));
            t_perm[new] = targets[old];
        }
        let inv: Vec<u32> = {
            let mut inv = vec![0u32; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new as u32;
            }
            inv
        };
        let plans_perm: Vec<TreePlan> = plans
            .iter()
            .map(|pl| {
                let mut structure: Vec<u32> =
                    pl.structure.iter().map(|&i| inv[i as usize]).collect();
                let mut estimation: Vec<u32> =
                    pl.estimation.iter().map(|&i| inv[i as usize]).collect();
                structure.sort_unstable();
                estimation.sort_unstable();
                TreePlan {
                    structure,
                    estimation,
                }
            })
            .collect();
        let f2 = fit_regression_forest_with_plans(&x_perm, &t_perm, &params, &plans_perm).unwrap();

        let x_test = random_x(12, 2, 63);
        let p1 = predict_regression(&f1, &x_test).unwrap();
        let p2 = predict_regression(&f2, &x_test).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            // identical up to summation reassociation
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                "permutation-consistent refit diverged: {a} vs {b}"
            );
        }
    }

    #[test]
    fn forest_json_round_trip() {
        let (x, y_res, w_res) = residual_data(60, 2.0, 71);
        let f = fit_causal_forest(&x, &y_res, &w_res, &small_params(72)).unwrap();
        let json = f.to_json_string().unwrap();
        let back = CausalForest::from_json_str(&json).unwrap();
        let x_test = random_x(8, 2, 73);
        assert_eq!(
            predict_tau(&f, &x_test).unwrap(),
            predict_tau(&back, &x_test).unwrap()
        );
        // version mismatch rejected
        let tampered = json.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(CausalForest::from_json_str(&tampered).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = random_x(30, 3, 81);
        let targets: Array1<f64> = (0..30).map(|i| x[[i, 0]]).collect::<Vec<_>>().into();
        let f = fit_regression_forest(&x, &targets, &small_params(82)).unwrap();
        assert!(predict_regression(&f, &random_x(5, 2, 83)).is_err());
    }
}
