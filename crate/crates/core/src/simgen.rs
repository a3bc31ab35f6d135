//! Deterministic generators for the two synthetic designs: a Gaussian-cluster
//! recovery design with cluster-constant effects, and an adversarial design
//! whose smooth CATE surface has no true cluster structure.

use ndarray::{Array1, Array2};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Configuration for the cluster-recovery design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub n: usize,
    pub k_true: usize,
    pub cluster_sd: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            n: 1200,
            k_true: 4,
            cluster_sd: 0.6,
            noise_sd: 0.5,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.k_true) {
            return Err(Error::InvalidConfig(format!(
                "k_true must be in 2..=6, got {}",
                self.k_true
            )));
        }
        if self.n < self.k_true * 10 {
            return Err(Error::InvalidConfig(format!(
                "n must be at least 10*k_true, got n={}, k_true={}",
                self.n, self.k_true
            )));
        }
        if !(self.cluster_sd > 0.0) {
            return Err(Error::InvalidConfig("cluster_sd must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig("noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// Configuration for the adversarial (no true clusters) design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            n: 1200,
            p: 20,
            sigma: 2.0,
            seed: 0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be >= 1".into()));
        }
        if self.p < 2 {
            return Err(Error::InvalidConfig(format!(
                "p must be >= 2, got {}",
                self.p
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfig("sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Treatment propensity of the recovery design, evaluated on standardized
/// features: `e(x) = 1 / (1 + exp(-(1.5*x2 - 0.5*x1)))`.
pub fn recovery_propensity(x1: f64, x2: f64) -> f64 {
    1.0 / (1.0 + (-(1.5 * x2 - 0.5 * x1)).exp())
}

/// Sigmoid step of the adversarial CATE: strictly increasing with range
/// (1, 3), equal to 2 at `x = 1/3`.
pub fn zeta(x: f64) -> f64 {
    1.0 + 2.0 / (1.0 + (-20.0 * (x - 1.0 / 3.0)).exp())
}

/// Generates the recovery design: a 2-D Gaussian mixture with `k_true`
/// equally likely components whose means are equally spaced on a circle of
/// radius 2, features standardized after mixing.
///
/// Potential outcomes use the standardized features: `mu(x) = x1`,
/// `Y(0) = mu + eps`, `Y(1) = Y(0) + tau` with the cluster-constant effect
/// `tau = 2 * component`, and treatment follows [`recovery_propensity`].
/// Bit-identical output for equal configs.
pub fn gen_gaussian_clusters(cfg: &RecoveryConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n;
    let k = cfg.k_true;
    let mut rng = stream_rng(cfg.seed, 0);

    let centers: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            (2.0 * angle.cos(), 2.0 * angle.sin())
        })
        .collect();

    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let comp = rng.random_range(0..k);
        let gx: f64 = StandardNormal.sample(&mut rng);
        let gy: f64 = StandardNormal.sample(&mut rng);
        features[[i, 0]] = centers[comp].0 + cfg.cluster_sd * gx;
        features[[i, 1]] = centers[comp].1 + cfg.cluster_sd * gy;
        labels.push(comp);
    }
    standardize_columns(&mut features);

    let mut outcome = Array1::zeros(n);
    let mut treatment = Array1::zeros(n);
    let mut true_cate = Array1::zeros(n);
    for i in 0..n {
        let x1 = features[[i, 0]];
        let x2 = features[[i, 1]];
        let tau = 2.0 * labels[i] as f64;
        let eps: f64 = StandardNormal.sample(&mut rng);
        let y0 = x1 + cfg.noise_sd * eps;
        let e = recovery_propensity(x1, x2);
        let u: f64 = rng.random_range(0.0..1.0);
        let w = u < e;
        outcome[i] = if w { y0 + tau } else { y0 };
        treatment[i] = w as u8;
        true_cate[i] = tau;
    }

    Dataset::new(
        features,
        outcome,
        treatment,
        None,
        None,
        Some(true_cate),
        Some(labels),
    )
}

/// Generates the adversarial design: `X ~ U([0,1]^p)`,
/// `tau(x) = zeta(x1) * zeta(x2)`, `e(x) = 0.5`, zero baseline, and
/// `Y = W * tau + sigma * eps`.
pub fn gen_adversarial(cfg: &AdversarialConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n;
    let p = cfg.p;
    let mut rng = stream_rng(cfg.seed, 0);

    let mut features = Array2::zeros((n, p));
    let mut outcome = Array1::zeros(n);
    let mut treatment = Array1::zeros(n);
    let mut true_cate = Array1::zeros(n);
    for i in 0..n {
        for j in 0..p {
            features[[i, j]] = rng.random_range(0.0..1.0);
        }
        let tau = zeta(features[[i, 0]]) * zeta(features[[i, 1]]);
        let u: f64 = rng.random_range(0.0..1.0);
        let w = u < 0.5;
        let eps: f64 = StandardNormal.sample(&mut rng);
        outcome[i] = if w { tau } else { 0.0 } + cfg.sigma * eps;
        treatment[i] = w as u8;
        true_cate[i] = tau;
    }

    Dataset::new(
        features,
        outcome,
        treatment,
        None,
        None,
        Some(true_cate),
        None,
    )
}

/// In-place standardization with the same (n-1) convention as
/// `dataset::standardize_features`.
fn standardize_columns(features: &mut Array2<f64>) {
    let n = features.nrows();
    if n < 2 {
        return;
    }
    for mut col in features.columns_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if sd == 0.0 {
            continue;
        }
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
}
