//! Core data container, fold assignment, feature standardization and CSV
//! ingestion for observational studies.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// An observational study sample: features `X`, outcomes `Y`, binary
/// treatments `W`, and optional ground truth for simulated data.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    features: Array2<f64>,
    outcome: Array1<f64>,
    treatment: Array1<u8>,
    ids: Vec<String>,
    feature_names: Vec<String>,
    true_cate: Option<Array1<f64>>,
    true_labels: Option<Vec<usize>>,
}

impl Dataset {
    /// Validates the container invariants: matching lengths, n >= 1, p >= 1,
    /// strictly binary treatment, and no non-finite entries.
    pub fn new(
        features: Array2<f64>,
        outcome: Array1<f64>,
        treatment: Array1<u8>,
        ids: Option<Vec<String>>,
        feature_names: Option<Vec<String>>,
        true_cate: Option<Array1<f64>>,
        true_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let p = features.ncols();
        if n == 0 || p == 0 {
            return Err(Error::InvalidDataset(format!(
                "need n >= 1 and p >= 1, got n={n}, p={p}"
            )));
        }
        let check_len = |len: usize, what: &str| -> Result<()> {
            if len != n {
                return Err(Error::InvalidDataset(format!(
                    "{what} has length {len}, expected {n}"
                )));
            }
            Ok(())
        };
        check_len(outcome.len(), "outcome")?;
        check_len(treatment.len(), "treatment")?;
        if let Some(t) = &true_cate {
            check_len(t.len(), "true_cate")?;
        }
        if let Some(l) = &true_labels {
            check_len(l.len(), "true_labels")?;
        }
        for (i, &w) in treatment.iter().enumerate() {
            if w > 1 {
                return Err(Error::InvalidDataset(format!(
                    "treatment must be 0 or 1, got {w} at row {i}"
                )));
            }
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidDataset(format!(
                        "non-finite feature at row {i}, column {j}"
                    )));
                }
            }
        }
        if let Some((i, _)) = outcome.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite outcome at row {i}"
            )));
        }
        if let Some(t) = &true_cate {
            if let Some((i, _)) = t.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "non-finite true_cate at row {i}"
                )));
            }
        }
        let ids = match ids {
            Some(v) => {
                check_len(v.len(), "ids")?;
                v
            }
            None => (0..n).map(|i| i.to_string()).collect(),
        };
        let feature_names = match feature_names {
            Some(v) => {
                if v.len() != p {
                    return Err(Error::InvalidDataset(format!(
                        "feature_names has length {}, expected {p}",
                        v.len()
                    )));
                }
                v
            }
            None => (1..=p).map(|j| format!("x{j}")).collect(),
        };
        Ok(Self {
            features,
            outcome,
            treatment,
            ids,
            feature_names,
            true_cate,
            true_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn outcome(&self) -> &Array1<f64> {
        &self.outcome
    }

    pub fn treatment(&self) -> &Array1<u8> {
        &self.treatment
    }

    /// Treatment as floats, for arithmetic on residuals.
    pub fn treatment_f64(&self) -> Array1<f64> {
        self.treatment.mapv(|w| w as f64)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn true_cate(&self) -> Option<&Array1<f64>> {
        self.true_cate.as_ref()
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    /// Rows `indices` of the dataset as a new feature matrix.
    pub fn features_at(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.p()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&self.features.row(i));
        }
        out
    }
}

/// Assignment of each sample to one of `n_folds` cross-fitting folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    n_folds: usize,
}

impl FoldAssignment {
    /// Builds the assignment from raw fold indices, checking the partition
    /// invariants (every fold present, min size >= 2).
    pub fn new(fold_of: Vec<usize>, n_folds: usize) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::Folds(format!(
                "need at least 2 folds, got {n_folds}"
            )));
        }
        let mut counts = vec![0usize; n_folds];
        for (i, &f) in fold_of.iter().enumerate() {
            if f >= n_folds {
                return Err(Error::Folds(format!(
                    "fold index {f} out of range at row {i}"
                )));
            }
            counts[f] += 1;
        }
        if let Some(f) = counts.iter().position(|&c| c < 2) {
            return Err(Error::Folds(format!(
                "fold {f} has {} samples, need at least 2",
                counts[f]
            )));
        }
        Ok(Self { fold_of, n_folds })
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// Sample indices in fold `s`.
    pub fn fold_indices(&self, s: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == s)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sample indices outside fold `s` (the training complement).
    pub fn complement_indices(&self, s: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != s)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Deterministically partitions `n` samples into `n_folds` folds whose sizes
/// differ by at most one.
pub fn make_folds(n: usize, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 || n_folds * 2 > n {
        return Err(Error::Folds(format!(
            "fold count must satisfy 2 <= S <= n/2, got S={n_folds}, n={n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0);
    perm.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % n_folds;
    }
    FoldAssignment::new(fold_of, n_folds)
}

/// Per-column standardization parameters; inverts the map exactly for
/// non-constant columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingParams {
    pub means: Vec<f64>,
    /// Sample standard deviations ((n-1) denominator), 1.0 for constant
    /// columns.
    pub sds: Vec<f64>,
    /// Columns whose values were constant and passed through unchanged.
    pub constant: Vec<bool>,
}

impl ScalingParams {
    /// Maps standardized features back to the original units.
    pub fn invert(&self, standardized: &Array2<f64>) -> Array2<f64> {
        let mut out = standardized.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            if self.constant[j] {
                continue;
            }
            for v in col.iter_mut() {
                *v = *v * self.sds[j] + self.means[j];
            }
        }
        out
    }
}

/// Centers and scales each feature column to sample mean 0 and sample
/// standard deviation 1 (the (n-1) convention). Constant columns pass
/// through unchanged and are flagged.
pub fn standardize_features(d: &Dataset) -> Result<(Dataset, ScalingParams)> {
    let n = d.n();
    if n < 2 {
        return Err(Error::InvalidDataset(
            "standardization requires n >= 2".into(),
        ));
    }
    let p = d.p();
    let mut features = d.features.clone();
    let mut means = Vec::with_capacity(p);
    let mut sds = Vec::with_capacity(p);
    let mut constant = Vec::with_capacity(p);
    for mut col in features.columns_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if sd == 0.0 {
            means.push(mean);
            sds.push(1.0);
            constant.push(true);
            continue;
        }
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
        means.push(mean);
        sds.push(sd);
        constant.push(false);
    }
    let out = Dataset {
        features,
        ..d.clone()
    };
    Ok((
        out,
        ScalingParams {
            means,
            sds,
            constant,
        },
    ))
}

/// Column-name mapping used to interpret a CSV file as a [`Dataset`].
///
/// Optional columns named here are used when present and silently absent
/// otherwise. `features: None` takes every column not mapped to another
/// role, in header order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    #[serde(default)]
    pub id: Option<String>,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub true_cate: Option<String>,
    #[serde(default)]
    pub true_labels: Option<String>,
}

impl Default for DatasetSchema {
    /// The schema written by the simulation generators.
    fn default() -> Self {
        Self {
            id: Some("id".into()),
            outcome: "y".into(),
            treatment: "w".into(),
            features: None,
            true_cate: Some("true_tau".into()),
            true_labels: Some("true_label".into()),
        }
    }
}

fn parse_cell_f64(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::CsvCell {
        row,
        column: column.to_string(),
        message: format!("cannot parse '{raw}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::CsvCell {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{raw}'"),
        });
    }
    Ok(v)
}

/// Reads a headered CSV file into a [`Dataset`] using `schema` to resolve
/// columns by name. Rows keep file order; data rows are reported 1-based in
/// errors (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };
    let require =
        |name: &str| -> Result<usize> { col(name).ok_or_else(|| Error::MissingColumn(name.to_string())) };

    let outcome_idx = require(&schema.outcome)?;
    let treatment_idx = require(&schema.treatment)?;
    let id_idx = schema.id.as_deref().and_then(col);
    let true_cate_idx = schema.true_cate.as_deref().and_then(col);
    let true_labels_idx = schema.true_labels.as_deref().and_then(col);

    let feature_cols: Vec<(usize, String)> = match &schema.features {
        Some(names) => {
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                out.push((require(name)?, name.clone()));
            }
            out
        }
        None => {
            let mapped: HashSet<usize> = [
                Some(outcome_idx),
                Some(treatment_idx),
                id_idx,
                true_cate_idx,
                true_labels_idx,
            ]
            .into_iter()
            .flatten()
            .collect();
            headers
                .iter()
                .enumerate()
                .filter(|(j, _)| !mapped.contains(j))
                .map(|(j, h)| (j, h.clone()))
                .collect()
        }
    };
    if feature_cols.is_empty() {
        return Err(Error::InvalidDataset("no feature columns".into()));
    }

    let mut features_flat: Vec<f64> = Vec::new();
    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut ids = Vec::new();
    let mut true_cate = true_cate_idx.map(|_| Vec::new());
    let mut true_labels = true_labels_idx.map(|_| Vec::new());

    for (rec_idx, record) in reader.records().enumerate() {
        let row = rec_idx + 1;
        let record = record?;
        let get = |j: usize, column: &str| -> Result<&str> {
            record.get(j).ok_or_else(|| Error::CsvCell {
                row,
                column: column.to_string(),
                message: "row has too few fields".into(),
            })
        };

        outcome.push(parse_cell_f64(
            get(outcome_idx, &schema.outcome)?,
            row,
            &schema.outcome,
        )?);

        let w_raw = get(treatment_idx, &schema.treatment)?;
        let w = match w_raw.trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => match other.parse::<f64>() {
                Ok(v) if v == 0.0 => 0,
                Ok(v) if v == 1.0 => 1,
                _ => {
                    return Err(Error::CsvCell {
                        row,
                        column: schema.treatment.clone(),
                        message: format!("treatment must be 0 or 1, got '{w_raw}'"),
                    })
                }
            },
        };
        treatment.push(w);

        for (j, name) in &feature_cols {
            features_flat.push(parse_cell_f64(get(*j, name)?, row, name)?);
        }

        ids.push(match id_idx {
            Some(j) => get(j, "id")?.to_string(),
            None => rec_idx.to_string(),
        });

        if let (Some(j), Some(vs)) = (true_cate_idx, true_cate.as_mut()) {
            let name = schema.true_cate.as_deref().unwrap_or("true_cate");
            vs.push(parse_cell_f64(get(j, name)?, row, name)?);
        }
        if let (Some(j), Some(vs)) = (true_labels_idx, true_labels.as_mut()) {
            let name = schema.true_labels.as_deref().unwrap_or("true_label");
            let raw = get(j, name)?;
            let lab: usize = raw.trim().parse().map_err(|_| Error::CsvCell {
                row,
                column: name.to_string(),
                message: format!("cannot parse '{raw}' as a cluster label"),
            })?;
            vs.push(lab);
        }
    }

    let n = outcome.len();
    if n == 0 {
        return Err(Error::InvalidDataset("csv file has no data rows".into()));
    }
    let p = feature_cols.len();
    let features = Array2::from_shape_vec((n, p), features_flat)
        .expect("row-major feature buffer matches (n, p)");
    Dataset::new(
        features,
        Array1::from_vec(outcome),
        Array1::from_vec(treatment),
        Some(ids),
        Some(feature_cols.into_iter().map(|(_, name)| name).collect()),
        true_cate.map(Array1::from_vec),
        true_labels,
    )
}

/// Writes a dataset to CSV with the generator schema: `id,y,w,x1..xp`
/// followed by `true_tau` / `true_label` when present.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = vec!["id".into(), "y".into(), "w".into()];
    header.extend(d.feature_names().iter().cloned());
    if d.true_cate().is_some() {
        header.push("true_tau".into());
    }
    if d.true_labels().is_some() {
        header.push("true_label".into());
    }
    writer.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(d.ids()[i].clone());
        rec.push(d.outcome()[i].to_string());
        rec.push(d.treatment()[i].to_string());
        for j in 0..d.p() {
            rec.push(d.features()[[i, j]].to_string());
        }
        if let Some(t) = d.true_cate() {
            rec.push(t[i].to_string());
        }
        if let Some(l) = d.true_labels() {
            rec.push(l[i].to_string());
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// A feature-only table (optionally with ground-truth CATE), used to cluster
/// unseen test points against a fitted bundle.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub feature_names: Vec<String>,
    pub true_cate: Option<Array1<f64>>,
}

/// Reads a feature-only CSV. `schema` is interpreted as in [`load_csv`] but
/// outcome/treatment columns are optional and ignored if present.
pub fn load_features_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<FeatureTable> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };

    let id_idx = schema.id.as_deref().and_then(col);
    let true_cate_idx = schema.true_cate.as_deref().and_then(col);
    let skip: HashSet<usize> = [
        id_idx,
        true_cate_idx,
        col(&schema.outcome),
        col(&schema.treatment),
        schema.true_labels.as_deref().and_then(col),
    ]
    .into_iter()
    .flatten()
    .collect();

    let feature_cols: Vec<(usize, String)> = match &schema.features {
        Some(names) => {
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                out.push((
                    col(name).ok_or_else(|| Error::MissingColumn(name.clone()))?,
                    name.clone(),
                ));
            }
            out
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| !skip.contains(j))
            .map(|(j, h)| (j, h.clone()))
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::InvalidDataset("no feature columns".into()));
    }

    let mut flat = Vec::new();
    let mut ids = Vec::new();
    let mut true_cate = true_cate_idx.map(|_| Vec::new());
    for (rec_idx, record) in reader.records().enumerate() {
        let row = rec_idx + 1;
        let record = record?;
        for (j, name) in &feature_cols {
            let raw = record.get(*j).ok_or_else(|| Error::CsvCell {
                row,
                column: name.clone(),
                message: "row has too few fields".into(),
            })?;
            flat.push(parse_cell_f64(raw, row, name)?);
        }
        ids.push(match id_idx {
            Some(j) => record.get(j).unwrap_or("").to_string(),
            None => rec_idx.to_string(),
        });
        if let (Some(j), Some(vs)) = (true_cate_idx, true_cate.as_mut()) {
            let name = schema.true_cate.as_deref().unwrap_or("true_cate");
            let raw = record.get(j).ok_or_else(|| Error::CsvCell {
                row,
                column: name.to_string(),
                message: "row has too few fields".into(),
            })?;
            vs.push(parse_cell_f64(raw, row, name)?);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::InvalidDataset("csv file has no data rows".into()));
    }
    let p = feature_cols.len();
    Ok(FeatureTable {
        ids,
        features: Array2::from_shape_vec((n, p), flat)
            .expect("row-major feature buffer matches (n, p)"),
        feature_names: feature_cols.into_iter().map(|(_, n)| n).collect(),
        true_cate: true_cate.map(Array1::from_vec),
    })
}
