//! Dataset loading, synthetic data generation, splitting and standardization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Feature matrix (one row per sample) plus a target vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Vec<f64>,
    feature_names: Vec<String>,
    target_name: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        targets: Vec<f64>,
        feature_names: Vec<String>,
        target_name: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() == 0 || targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.cols() == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one feature".into()));
        }
        if features.rows() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        if !features.is_finite() || targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Self {
            features,
            targets,
            feature_names,
            target_name: target_name.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices);
        let targets = indices.iter().map(|&i| self.targets[i]).collect();
        Self::new(features, targets, self.feature_names.clone(), self.target_name.clone())
    }
}

/// A parsed numeric CSV file: header plus rows, nothing selected yet.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Pulls the named columns out in the requested order.
    pub fn select(&self, names: &[String]) -> Result<Matrix> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::MissingColumn(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Matrix::zeros(self.rows.len(), idx.len());
        for (r, row) in self.rows.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                out.set(r, c, row[j]);
            }
        }
        Ok(out)
    }
}

/// Reads a comma-separated file with a header row. Every cell must parse as a
/// finite real. A header-only file yields zero rows.
pub fn read_csv_table(path: &Path) -> Result<CsvTable> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let mut row = Vec::with_capacity(header.len());
        for (c, cell) in record.iter().enumerate() {
            let parsed = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            match parsed {
                Some(v) => row.push(v),
                None => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        // 1-based data row, header excluded
                        row: r + 1,
                        column: header.get(c).cloned().unwrap_or_else(|| c.to_string()),
                        value: cell.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

/// Loads a dataset from CSV. The target is the named column, or the last
/// column when `target_column` is `None`. Row order follows the file.
pub fn load_csv(path: &Path, target_column: Option<&str>) -> Result<Dataset> {
    let table = read_csv_table(path)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let target_idx = match target_column {
        Some(name) => table
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?,
        None => table.header.len() - 1,
    };
    let feature_names: Vec<String> = table
        .header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let features = table.select(&feature_names)?;
    let targets = table.rows.iter().map(|r| r[target_idx]).collect();
    Dataset::new(features, targets, feature_names, table.header[target_idx].clone())
}

/// `sin(x) + sqrt(x/2) + exp(x/15)`.
pub fn synthetic_target(x: f64) -> f64 {
    x.sin() + (x / 2.0).sqrt() + (x / 15.0).exp()
}

/// `count` evenly spaced points on `[x_min, x_max]` labelled with
/// [`synthetic_target`]. Single feature `x`, target `y`.
pub fn generate_synthetic(count: usize, x_min: f64, x_max: f64) -> Result<Dataset> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("count must be at least 2, got {count}")));
    }
    if !(x_min.is_finite() && x_max.is_finite()) || x_min >= x_max {
        return Err(Error::InvalidArgument(format!(
            "need x_min < x_max, got [{x_min}, {x_max}]"
        )));
    }
    if x_min < 0.0 {
        return Err(Error::InvalidArgument(format!("x_min must be >= 0, got {x_min}")));
    }
    let step = (x_max - x_min) / (count - 1) as f64;
    let xs: Vec<f64> = (0..count)
        .map(|i| if i == count - 1 { x_max } else { x_min + step * i as f64 })
        .collect();
    let ys = xs.iter().map(|&x| synthetic_target(x)).collect();
    Dataset::new(Matrix::column_vector(&xs), ys, vec!["x".into()], "y")
}

/// Disjoint train / validation / test row indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n_samples` with `seed`, holds out `round(n * test_fraction)`
/// rows for testing and splits the rest 2:1 into train and validation.
/// Fails if fewer than `min_train` training rows remain.
pub fn split(
    n_samples: usize,
    test_fraction: f64,
    seed: u64,
    min_train: usize,
) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n_samples as f64 * test_fraction).round() as usize;
    let n_rest = n_samples - n_test.min(n_samples);
    let n_val = n_rest / 3;
    let n_train = n_rest - n_val;
    if n_train < min_train.max(1) {
        return Err(Error::TooFewRows {
            required: min_train.max(1),
            actual: n_train,
        });
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test = order[..n_test].to_vec();
    let validation = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    Ok(SplitIndices {
        train,
        validation,
        test,
    })
}

impl SplitIndices {
    /// Checks that the parts are disjoint and cover `0..n_samples`.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut seen = vec![false; n_samples];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n_samples || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("split does not cover every row".into()));
        }
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::InvalidArgument(
                "train and validation parts must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Per-column z-scoring for features and target. Population standard
/// deviation; constant columns keep stddev 1 and are flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub feature_means: Vec<f64>,
    pub feature_stddevs: Vec<f64>,
    pub constant_features: Vec<bool>,
    pub target_mean: f64,
    pub target_stddev: f64,
    pub constant_target: bool,
}

fn mean_and_stddev(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, bool) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        (mean, 1.0, true)
    } else {
        (mean, std, false)
    }
}

impl StandardScaler {
    /// Statistics are taken over `rows` only.
    pub fn fit(dataset: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("scaler needs at least one row".into()));
        }
        let x = dataset.features();
        let mut feature_means = Vec::with_capacity(x.cols());
        let mut feature_stddevs = Vec::with_capacity(x.cols());
        let mut constant_features = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let (m, s, c) = mean_and_stddev(rows.iter().map(|&i| x.get(i, j)));
            feature_means.push(m);
            feature_stddevs.push(s);
            constant_features.push(c);
        }
        let y = dataset.targets();
        let (target_mean, target_stddev, constant_target) =
            mean_and_stddev(rows.iter().map(|&i| y[i]));
        Ok(Self {
            feature_means,
            feature_stddevs,
            constant_features,
            target_mean,
            target_stddev,
            constant_target,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_means.len()
    }

    pub fn transform_point(&self, raw: &[f64], out: &mut [f64]) {
        for (j, (o, &v)) in out.iter_mut().zip(raw).enumerate() {
            *o = (v - self.feature_means[j]) / self.feature_stddevs[j];
        }
    }

    pub fn inverse_point(&self, scaled: &[f64], out: &mut [f64]) {
        for (j, (o, &v)) in out.iter_mut().zip(scaled).enumerate() {
            *o = v * self.feature_stddevs[j] + self.feature_means[j];
        }
    }

    pub fn transform_features(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.transform_point(x.row(i), out.row_mut(i));
        }
        out
    }

    pub fn transform_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_stddev
    }

    pub fn inverse_target(&self, z: f64) -> f64 {
        z * self.target_stddev + self.target_mean
    }
}
