//! Step 1 of the procedure: cross-fitted nuisance estimation, residual-on-
//! residual CATE estimation with per-fold causal forests, and extraction of
//! the cross-fitted similarity kernel.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::forest::{
    fit_causal_forest, fit_causal_forest_with_plans, fit_regression_forest,
    fit_regression_forest_with_plans, forest_weights, kernel_from_weights, predict_regression,
    predict_tau, CausalForest, ForestParams, KernelMatrix, KernelProvenance, TreePlan,
};
use crate::rng::derive_seed;

/// Seed-derivation roles for the per-fold fits.
const ROLE_OUTCOME: u64 = 1;
const ROLE_PROPENSITY: u64 = 2;
const ROLE_CAUSAL: u64 = 3;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Out-of-fold nuisance predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    /// Out-of-fold estimates of `E[Y | X]`.
    pub m_hat: Array1<f64>,
    /// Out-of-fold propensities, clipped to `[clip, 1 - clip]`.
    pub e_hat: Array1<f64>,
}

/// Robinson residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Residuals {
    pub y_tilde: Array1<f64>,
    pub w_tilde: Array1<f64>,
}

/// Explicit subsample plans for every forest of a cross-fit; used by
/// reproducibility checks that refit under a row permutation.
#[derive(Debug, Clone)]
pub struct CrossfitPlans {
    /// One plan set per fold, for the outcome nuisance forest.
    pub outcome: Vec<Vec<TreePlan>>,
    /// One plan set per fold, for the propensity nuisance forest.
    pub propensity: Vec<Vec<TreePlan>>,
    /// One plan set per fold, for the causal forest.
    pub causal: Vec<Vec<TreePlan>>,
}

/// The fitted Step-1 state: per-fold causal forests (trained on each fold's
/// complement), nuisances, residuals, out-of-fold CATE estimates, and the
/// cross-fitted kernel over the training points.
#[derive(Debug, Clone)]
pub struct CrossfitResult {
    folds: FoldAssignment,
    params: ForestParams,
    clip: f64,
    nuisances: NuisanceEstimates,
    residuals: Residuals,
    tau_hf: Vec<f64>,
    fold_forests: Vec<CausalForest>,
    /// Global training indices of each fold forest (the fold's complement,
    /// ascending).
    fold_train_indices: Vec<Vec<usize>>,
    features: Array2<f64>,
    kernel_hf: KernelMatrix,
}

impl CrossfitResult {
    pub fn n(&self) -> usize {
        self.tau_hf.len()
    }

    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn nuisances(&self) -> &NuisanceEstimates {
        &self.nuisances
    }

    pub fn residuals(&self) -> &Residuals {
        &self.residuals
    }

    /// Out-of-fold CATE estimates: `tau_hf[i]` comes from the forest whose
    /// training set excluded `i`'s fold.
    pub fn tau_hf(&self) -> &[f64] {
        &self.tau_hf
    }

    pub fn fold_forests(&self) -> &[CausalForest] {
        &self.fold_forests
    }

    pub fn fold_train_indices(&self) -> &[Vec<usize>] {
        &self.fold_train_indices
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// The cross-fitted kernel over the training points.
    pub fn kernel_hf(&self) -> &KernelMatrix {
        &self.kernel_hf
    }

    /// Out-of-fold discipline: no fold forest was trained on its own fold.
    pub fn out_of_fold_ok(&self) -> bool {
        for s in 0..self.folds.n_folds() {
            let fold: std::collections::HashSet<usize> =
                self.folds.fold_indices(s).into_iter().collect();
            if self.fold_train_indices[s].iter().any(|i| fold.contains(i)) {
                return false;
            }
        }
        true
    }
}

fn check_clip(clip: f64) -> Result<()> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::InvalidConfig(format!(
            "propensity clip must lie in (0, 0.5), got {clip}"
        )));
    }
    Ok(())
}

/// Per-fold regression forests for the outcome and the treatment, predicted
/// out of fold; propensities are clipped to `[clip, 1 - clip]`.
pub fn estimate_nuisances(
    d: &Dataset,
    folds: &FoldAssignment,
    params: &ForestParams,
    clip: f64,
) -> Result<NuisanceEstimates> {
    estimate_nuisances_impl(d, folds, params, clip, None)
}

fn estimate_nuisances_impl(
    d: &Dataset,
    folds: &FoldAssignment,
    params: &ForestParams,
    clip: f64,
    plans: Option<(&[Vec<TreePlan>], &[Vec<TreePlan>])>,
) -> Result<NuisanceEstimates> {
    check_clip(clip)?;
    params.validate()?;
    if folds.fold_of().len() != d.n() {
        return Err(Error::Folds(format!(
            "fold assignment covers {} samples, dataset has {}",
            folds.fold_of().len(),
            d.n()
        )));
    }
    let w_f64 = d.treatment_f64();
    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>)>> = (0..folds.n_folds())
        .into_par_iter()
        .map(|s| {
            let train_idx = folds.complement_indices(s);
            let test_idx = folds.fold_indices(s);
            let x_train = d.features_at(&train_idx);
            let x_test = d.features_at(&test_idx);
            let y_train: Array1<f64> = train_idx.iter().map(|&i| d.outcome()[i]).collect();
            let w_train: Array1<f64> = train_idx.iter().map(|&i| w_f64[i]).collect();

            let mut y_params = params.clone();
            y_params.seed = derive_seed(params.seed, &[ROLE_OUTCOME, s as u64]);
            let mut w_params = params.clone();
            w_params.seed = derive_seed(params.seed, &[ROLE_PROPENSITY, s as u64]);

            let (m_forest, e_forest) = match plans {
                None => (
                    fit_regression_forest(&x_train, &y_train, &y_params)?,
                    fit_regression_forest(&x_train, &w_train, &w_params)?,
                ),
                Some((yp, wp)) => (
                    fit_regression_forest_with_plans(&x_train, &y_train, &y_params, &yp[s])?,
                    fit_regression_forest_with_plans(&x_train, &w_train, &w_params, &wp[s])?,
                ),
            };
            let m_pred = predict_regression(&m_forest, &x_test)?;
            let e_pred = predict_regression(&e_forest, &x_test)?;
            Ok((test_idx, m_pred, e_pred))
        })
        .collect();

    let n = d.n();
    let mut m_hat = Array1::zeros(n);
    let mut e_hat = Array1::zeros(n);
    for item in per_fold {
        let (test_idx, m_pred, e_pred) = item?;
        for (pos, &i) in test_idx.iter().enumerate() {
            m_hat[i] = m_pred[pos];
            e_hat[i] = e_pred[pos].clamp(clip, 1.0 - clip);
        }
    }
    Ok(NuisanceEstimates { m_hat, e_hat })
}

/// Robinson residualization: `y~ = Y - m^(X)`, `w~ = W - e^(X)`.
pub fn residualize(d: &Dataset, nz: &NuisanceEstimates) -> Result<Residuals> {
    let n = d.n();
    if nz.m_hat.len() != n || nz.e_hat.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: nz.m_hat.len().min(nz.e_hat.len()),
            context: "nuisance estimate length".into(),
        });
    }
    let y_tilde = d.outcome() - &nz.m_hat;
    let w_tilde = d.treatment_f64() - &nz.e_hat;
    Ok(Residuals { y_tilde, w_tilde })
}

/// Runs the full Step-1 cross-fit with default seed-derived subsampling.
pub fn crossfit_cate(
    d: &Dataset,
    folds: &FoldAssignment,
    params: &ForestParams,
    clip: f64,
) -> Result<CrossfitResult> {
    crossfit_cate_impl(d, folds, params, clip, None)
}

/// As [`crossfit_cate`] with explicit subsample plans for every forest.
pub fn crossfit_cate_with_plans(
    d: &Dataset,
    folds: &FoldAssignment,
    params: &ForestParams,
    clip: f64,
    plans: &CrossfitPlans,
) -> Result<CrossfitResult> {
    crossfit_cate_impl(d, folds, params, clip, Some(plans))
}

fn crossfit_cate_impl(
    d: &Dataset,
    folds: &FoldAssignment,
    params: &ForestParams,
    clip: f64,
    plans: Option<&CrossfitPlans>,
) -> Result<CrossfitResult> {
    let nuisances = estimate_nuisances_impl(
        d,
        folds,
        params,
        clip,
        plans.map(|p| (p.outcome.as_slice(), p.propensity.as_slice())),
    )?;
    let residuals = residualize(d, &nuisances)?;

    let per_fold: Vec<Result<(Vec<usize>, Vec<usize>, CausalForest, Vec<f64>)>> = (0..folds
        .n_folds())
        .into_par_iter()
        .map(|s| {
            let train_idx = folds.complement_indices(s);
            let test_idx = folds.fold_indices(s);
            let x_train = d.features_at(&train_idx);
            let y_res: Array1<f64> = train_idx.iter().map(|&i| residuals.y_tilde[i]).collect();
            let w_res: Array1<f64> = train_idx.iter().map(|&i| residuals.w_tilde[i]).collect();

            let mut c_params = params.clone();
            c_params.seed = derive_seed(params.seed, &[ROLE_CAUSAL, s as u64]);
            let forest = match plans {
                None => fit_causal_forest(&x_train, &y_res, &w_res, &c_params)?,
                Some(p) => {
                    fit_causal_forest_with_plans(&x_train, &y_res, &w_res, &c_params, &p.causal[s])?
                }
            };
            let x_test = d.features_at(&test_idx);
            let tau = predict_tau(&forest, &x_test)?;
            Ok((train_idx, test_idx, forest, tau))
        })
        .collect();

    let n = d.n();
    let mut tau_hf = vec![0.0f64; n];
    let mut fold_forests = Vec::with_capacity(folds.n_folds());
    let mut fold_train_indices = Vec::with_capacity(folds.n_folds());
    for item in per_fold {
        let (train_idx, test_idx, forest, tau) = item?;
        for (pos, &i) in test_idx.iter().enumerate() {
            tau_hf[i] = tau[pos];
        }
        fold_forests.push(forest);
        fold_train_indices.push(train_idx);
    }

    let kernel_hf = training_kernel(&fold_forests, &fold_train_indices, folds, d.features())?;

    Ok(CrossfitResult {
        folds: folds.clone(),
        params: params.clone(),
        clip,
        nuisances,
        residuals,
        tau_hf,
        fold_forests,
        fold_train_indices,
        features: d.features().clone(),
        kernel_hf,
    })
}

/// The cross-fitted kernel over the training points.
///
/// Each point's weight vector comes from its own out-of-fold forest, mapped
/// to global training indices (zero outside that forest's training set), and
/// the kernel is the Gram matrix of these stacked embeddings. Same-fold
/// entries therefore equal the out-of-fold forest kernel `K^(-s)(i,j)`
/// exactly, cross-fold entries are inner products of the two points'
/// out-of-fold weight vectors on their shared training points, and the whole
/// matrix is positive semi-definite by construction. (Averaging the two fold
/// kernels entrywise instead makes the matrix indefinite: it mixes rows of
/// different PSD matrices.)
pub(crate) fn training_kernel(
    fold_forests: &[CausalForest],
    fold_train_indices: &[Vec<usize>],
    folds: &FoldAssignment,
    x: &Array2<f64>,
) -> Result<KernelMatrix> {
    let n = x.nrows();
    let mut embed = Array2::<f64>::zeros((n, n));
    let mut contributing = vec![0u32; n];
    for (s, forest) in fold_forests.iter().enumerate() {
        let rows = folds.fold_indices(s);
        let mut x_fold = Array2::zeros((rows.len(), x.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            x_fold.row_mut(r).assign(&x.row(i));
        }
        let weights = forest_weights(forest, &x_fold)?;
        let train = &fold_train_indices[s];
        for (r, &i) in rows.iter().enumerate() {
            for (c, &t) in train.iter().enumerate() {
                embed[[i, t]] = weights.values()[[r, c]];
            }
            contributing[i] = weights.contributing()[r];
        }
    }
    let gram = kernel_from_weights(&crate::forest::WeightMatrix::new(embed, contributing));
    KernelMatrix::from_dense(gram.values().clone(), KernelProvenance::CrossfitAveraged)
}

/// Evaluates the cross-fitted kernel. `x_eval: None` returns the stored
/// training-point kernel; for unseen points (no fold), the kernel averages
/// all fold-forest kernels, which keeps it positive semi-definite.
pub fn crossfit_kernel(r: &CrossfitResult, x_eval: Option<&Array2<f64>>) -> Result<KernelMatrix> {
    match x_eval {
        None => Ok(r.kernel_hf.clone()),
        Some(x) => {
            let m = x.nrows();
            let s_count = r.fold_forests.len();
            let mut acc = Array2::<f64>::zeros((m, m));
            for forest in &r.fold_forests {
                let weights = forest_weights(forest, x)?;
                let k_s = kernel_from_weights(&weights);
                acc += k_s.values();
            }
            acc /= s_count as f64;
            KernelMatrix::from_dense(acc, KernelProvenance::CrossfitAveraged)
        }
    }
}

/// Step-1 outputs for unseen points: effect estimates and the kernel, both
/// averaged over the fold forests (no refitting).
#[derive(Debug, Clone)]
pub struct UnseenPredictions {
    pub tau: Vec<f64>,
    pub kernel: KernelMatrix,
}

impl CrossfitResult {
    /// Predicts effects and the kernel for new points without refitting.
    pub fn predict_unseen(&self, x: &Array2<f64>) -> Result<UnseenPredictions> {
        let m = x.nrows();
        let s_count = self.fold_forests.len();
        let mut tau = vec![0.0f64; m];
        let mut acc = Array2::<f64>::zeros((m, m));
        for forest in &self.fold_forests {
            let t = predict_tau(forest, x)?;
            for (out, v) in tau.iter_mut().zip(t) {
                *out += v;
            }
            let weights = forest_weights(forest, x)?;
            acc += kernel_from_weights(&weights).values();
        }
        for v in tau.iter_mut() {
            *v /= s_count as f64;
        }
        acc /= s_count as f64;
        Ok(UnseenPredictions {
            tau,
            kernel: KernelMatrix::from_dense(acc, KernelProvenance::CrossfitAveraged)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Versioned bundle
// ---------------------------------------------------------------------------

/// Serialized form of a [`CrossfitResult`]. The kernel is not stored; it is
/// a deterministic function of the forests and features and is recomputed on
/// load.
#[derive(Serialize, Deserialize)]
struct CrossfitBundle {
    format_version: u32,
    params: ForestParams,
    clip: f64,
    folds: FoldAssignment,
    nuisances: NuisanceEstimates,
    residuals: Residuals,
    tau_hf: Vec<f64>,
    fold_forests: Vec<CausalForest>,
    fold_train_indices: Vec<Vec<usize>>,
    features: Array2<f64>,
}

impl CrossfitResult {
    pub fn to_bundle_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CrossfitBundle {
            format_version: BUNDLE_FORMAT_VERSION,
            params: self.params.clone(),
            clip: self.clip,
            folds: self.folds.clone(),
            nuisances: self.nuisances.clone(),
            residuals: self.residuals.clone(),
            tau_hf: self.tau_hf.clone(),
            fold_forests: self.fold_forests.clone(),
            fold_train_indices: self.fold_train_indices.clone(),
            features: self.features.clone(),
        })?)
    }

    pub fn from_bundle_json(s: &str) -> Result<Self> {
        let b: CrossfitBundle = serde_json::from_str(s)?;
        if b.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: b.format_version,
                expected: BUNDLE_FORMAT_VERSION,
            });
        }
        let kernel_hf = training_kernel(&b.fold_forests, &b.fold_train_indices, &b.folds, &b.features)?;
        Ok(CrossfitResult {
            folds: b.folds,
            params: b.params,
            clip: b.clip,
            nuisances: b.nuisances,
            residuals: b.residuals,
            tau_hf: b.tau_hf,
            fold_forests: b.fold_forests,
            fold_train_indices: b.fold_train_indices,
            features: b.features,
            kernel_hf,
        })
    }
}
