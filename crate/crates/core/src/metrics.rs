//! Evaluation metrics: PEHE, excess risk, within/between-cluster variance,
//! and the partition-agreement measures RI, ARI, NMI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation row: estimation quality plus (when ground-truth labels
/// exist) partition agreement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub k: usize,
    /// PEHE of the cluster-mean estimates.
    pub pehe: Option<f64>,
    /// PEHE of the unclustered per-sample estimates.
    pub pehe_base: Option<f64>,
    /// `pehe - pehe_base` (negative when clustering helps).
    pub excess_risk: Option<f64>,
    pub v_within: f64,
    pub v_out: f64,
    pub ri: Option<f64>,
    pub ari: Option<f64>,
    pub nmi: Option<f64>,
}

impl MetricsReport {
    /// Flat CSV header matching [`Self::csv_row`].
    pub fn csv_header() -> &'static str {
        "n,k,pehe,pehe_base,excess_risk,v_within,v_out,ri,ari,nmi"
    }

    pub fn csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.k,
            opt(self.pehe),
            opt(self.pehe_base),
            opt(self.excess_risk),
            self.v_within,
            self.v_out,
            opt(self.ri),
            opt(self.ari),
            opt(self.nmi),
        )
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metrics(format!(
            "length mismatch: {a} vs {b}"
        )));
    }
    Ok(())
}

/// Root mean squared error between predicted and true effects:
/// `sqrt(mean((tau_hat_i - tau_i)^2))`.
pub fn pehe(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_lengths(tau_hat.len(), tau_true.len())?;
    if tau_hat.is_empty() {
        return Err(Error::Metrics("pehe of empty input".into()));
    }
    let ss: f64 = tau_hat
        .iter()
        .zip(tau_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / tau_hat.len() as f64).sqrt())
}

/// Performance penalty of the clustered estimate over the base estimator;
/// negative values mean clustering reduced the error.
pub fn excess_risk(pehe_clustered: f64, pehe_base: f64) -> f64 {
    pehe_clustered - pehe_base
}

fn validate_partition(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Metrics("empty labels".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Metrics(format!(
            "labels are not a partition: cluster {missing} is empty"
        )));
    }
    Ok(k)
}

/// Mean squared deviation of estimates from their cluster means:
/// `(1/n) sum_c sum_{i in c} (tau_i - mean_c)^2`.
pub fn within_var(tau_hat: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(tau_hat.len(), labels.len())?;
    let k = validate_partition(labels)?;
    let n = tau_hat.len();
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&t, &l) in tau_hat.iter().zip(labels) {
        sums[l] += t;
        counts[l] += 1;
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let ss: f64 = tau_hat
        .iter()
        .zip(labels)
        .map(|(&t, &l)| (t - means[l]) * (t - means[l]))
        .sum();
    Ok(ss / n as f64)
}

/// Size-weighted dispersion of cluster means around the global mean:
/// `(1/n) sum_c |c| (mean_c - mean)^2`.
pub fn between_var(tau_hat: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(tau_hat.len(), labels.len())?;
    let k = validate_partition(labels)?;
    let n = tau_hat.len();
    let grand = tau_hat.iter().sum::<f64>() / n as f64;
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&t, &l) in tau_hat.iter().zip(labels) {
        sums[l] += t;
        counts[l] += 1;
    }
    let ss: f64 = (0..k)
        .map(|c| {
            let mean_c = sums[c] / counts[c] as f64;
            counts[c] as f64 * (mean_c - grand) * (mean_c - grand)
        })
        .sum();
    Ok(ss / n as f64)
}

/// Contingency table of two labelings plus the row/column totals.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<u64>>, Vec<u64>, Vec<u64>) {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Rand index: the fraction of sample pairs on which the two labelings
/// agree (same cluster in both, or different in both).
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Err(Error::Metrics("rand index needs n >= 2".into()));
    }
    validate_partition(a)?;
    validate_partition(b)?;
    let (table, rows, cols) = contingency(a, b);
    let total = choose2(n as u64);
    let same_same: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let same_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let same_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    // pairs separated in both = total - (same in a) - (same in b) + (same in both)
    let diff_diff = total - same_a - same_b + same_same;
    Ok((same_same + diff_diff) / total)
}

/// Adjusted Rand index (chance-corrected), via the contingency form.
/// Degenerate cases where the correction denominator vanishes return 1 for
/// identical set partitions and 0 otherwise.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Err(Error::Metrics("adjusted rand needs n >= 2".into()));
    }
    validate_partition(a)?;
    validate_partition(b)?;
    let (table, rows, cols) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        return Ok(if same_partition(a, b) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Normalized mutual information `I(U;V)/sqrt(H(U) H(V))` (natural log).
/// If either labeling has zero entropy the convention is 1 for identical
/// set partitions and 0 otherwise.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let n = a.len();
    if n == 0 {
        return Err(Error::Metrics("nmi of empty labels".into()));
    }
    validate_partition(a)?;
    validate_partition(b)?;
    let (table, rows, cols) = contingency(a, b);
    let nf = n as f64;
    let entropy = |counts: &[u64]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&rows);
    let h_b = entropy(&cols);
    if h_a <= 0.0 || h_b <= 0.0 {
        return Ok(if same_partition(a, b) { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0f64;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p = c as f64 / nf;
            let pa = rows[i] as f64 / nf;
            let pb = cols[j] as f64 / nf;
            mi += p * (p / (pa * pb)).ln();
        }
    }
    Ok((mi / (h_a * h_b).sqrt()).clamp(0.0, 1.0))
}

/// Whether two labelings induce the same partition (equal up to renaming).
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut fwd: HashMap<usize, usize> = HashMap::new();
    let mut bwd: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}
