//! Experiment configuration, model files and the command implementations
//! behind the `fuzzboost` binary.
//!
//! Configuration files are flat `key = value` text; `#` starts a comment.
//! Lists are either comma separated (`2,3,5`) or inclusive ranges
//! `start:end[:step]` (`1.1:2.9:0.1`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boosting::{boost_fit, boost_fit_fixed_lambda, default_fuzzifier_grid, BoostConfig, BoostedEnsemble, IterationTrace};
use crate::dataset::{generate_synthetic, load_csv, read_csv_table, split, Dataset, SplitIndices};
use crate::error::{Error, Result};
use crate::metrics::{run_sweep, EvalReport, ImprovementSummary, TargetUnits};

pub const MODEL_FORMAT: &str = "fuzzboost-model";
pub const MODEL_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, x_min: f64, x_max: f64 },
    Csv { path: PathBuf, target: Option<String> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Dynamic,
    FixedLambda,
    Sweep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub test_fraction: f64,
    /// Seeds the split and, unless `boost.seed` is set separately, training.
    pub seed: u64,
    pub boost: BoostConfig,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub fixed_lambdas: Vec<f64>,
    pub sweep_clusters: Vec<usize>,
    pub sweep_fuzzifiers: Vec<f64>,
    /// Write wall-clock seconds into traces (makes reruns differ).
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                count: 4000,
                x_min: 1.0,
                x_max: 4000.0,
            },
            test_fraction: 0.3,
            seed: 0,
            boost: BoostConfig::default(),
            output_dir: PathBuf::from("out"),
            mode: Mode::Dynamic,
            fixed_lambdas: vec![0.1, 0.5, 1.0],
            sweep_clusters: (2..=18).collect(),
            sweep_fuzzifiers: default_fuzzifier_grid(),
            record_timing: false,
        }
    }
}

/// Every key accepted in a config file, with its default.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("preset", "(none); `large` widens clusters to 2:20 and max_stages to 10000"),
    ("dataset", "synthetic, or a CSV path"),
    ("target", "last column"),
    ("synthetic_count", "4000"),
    ("synthetic_min", "1"),
    ("synthetic_max", "4000"),
    ("test_fraction", "0.3"),
    ("seed", "0"),
    ("max_stages", "100"),
    ("tolerance", "1e-4"),
    ("patience", "5"),
    ("clusters", "2:10"),
    ("fuzzifiers", "1.1:2.9:0.1"),
    ("lambdas", "0:1:0.05"),
    ("ridges", "0,1e-4,1e-2"),
    ("subsample_fraction", "1"),
    ("fcm_max_iterations", "300"),
    ("fcm_tolerance", "1e-5"),
    ("output_dir", "out"),
    ("mode", "dynamic (dynamic | fixed | sweep)"),
    ("fixed_lambdas", "0.1,0.5,1.0"),
    ("sweep_clusters", "2:18"),
    ("sweep_fuzzifiers", "1.1:2.9:0.1"),
    ("record_timing", "false"),
];

fn config_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value}: {what}"))
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(key, value, "cannot parse value"))
}

/// Parses `a,b,c` or `start:end[:step]` into reals. Range points are rounded
/// to 10 decimals so `1.1:2.9:0.1` yields exactly 1.1, 1.2, ...
pub fn parse_real_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.contains(':') {
        let parts: Vec<f64> = value
            .split(':')
            .map(|p| parse_scalar::<f64>(key, p.trim()))
            .collect::<Result<_>>()?;
        let (start, end, step) = match parts[..] {
            [a, b] => (a, b, 1.0),
            [a, b, s] => (a, b, s),
            _ => return Err(config_err(key, value, "range must be start:end[:step]")),
        };
        if !(step > 0.0) || end < start {
            return Err(config_err(key, value, "range needs start <= end and step > 0"));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        Ok((0..=count)
            .map(|k| ((start + k as f64 * step) * 1e10).round() / 1e10)
            .collect())
    } else {
        value.split(',').map(|p| parse_scalar::<f64>(key, p.trim())).collect()
    }
}

pub fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.contains(':') {
        let parts: Vec<usize> = value
            .split(':')
            .map(|p| parse_scalar::<usize>(key, p.trim()))
            .collect::<Result<_>>()?;
        let (start, end, step) = match parts[..] {
            [a, b] => (a, b, 1),
            [a, b, s] => (a, b, s),
            _ => return Err(config_err(key, value, "range must be start:end[:step]")),
        };
        if step == 0 || end < start {
            return Err(config_err(key, value, "range needs start <= end and step > 0"));
        }
        Ok((start..=end).step_by(step).collect())
    } else {
        value.split(',').map(|p| parse_scalar::<usize>(key, p.trim())).collect()
    }
}

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Builds a config from file pairs followed by overrides; later pairs win.
    /// A key may appear only once in the file itself.
    pub fn from_pairs(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in file {
            if map.insert(k, v).is_some() {
                return Err(Error::Config(format!("key '{k}' given twice")));
            }
        }
        for (k, v) in overrides {
            map.insert(k, v);
        }
        if let Some(k) = map.keys().find(|k| !CONFIG_KEYS.iter().any(|(name, _)| name == *k)) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }

        let mut cfg = Self::default();
        if let Some(&preset) = map.get("preset") {
            match preset {
                "large" => cfg.boost = BoostConfig::large_dataset(),
                other => return Err(config_err("preset", other, "expected `large`")),
            }
        }
        let mut boost_seed = None;
        let (mut count, mut x_min, mut x_max) = (4000usize, 1.0f64, 4000.0f64);
        let mut dataset: Option<&str> = None;
        let mut target: Option<String> = None;
        for (&k, &v) in &map {
            match k {
                "preset" => {}
                "dataset" => dataset = Some(v),
                "target" => target = Some(v.to_string()),
                "synthetic_count" => count = parse_scalar(k, v)?,
                "synthetic_min" => x_min = parse_scalar(k, v)?,
                "synthetic_max" => x_max = parse_scalar(k, v)?,
                "test_fraction" => cfg.test_fraction = parse_scalar(k, v)?,
                "seed" => {
                    cfg.seed = parse_scalar(k, v)?;
                    boost_seed = Some(cfg.seed);
                }
                "max_stages" => cfg.boost.max_stages = parse_scalar(k, v)?,
                "tolerance" => cfg.boost.tolerance = parse_scalar(k, v)?,
                "patience" => cfg.boost.patience = parse_scalar(k, v)?,
                "clusters" => cfg.boost.cluster_grid = parse_usize_list(k, v)?,
                "fuzzifiers" => cfg.boost.fuzzifier_grid = parse_real_list(k, v)?,
                "lambdas" => cfg.boost.lambda_grid = parse_real_list(k, v)?,
                "ridges" => cfg.boost.ridge_grid = parse_real_list(k, v)?,
                "subsample_fraction" => cfg.boost.subsample_fraction = parse_scalar(k, v)?,
                "fcm_max_iterations" => cfg.boost.fcm_max_iterations = parse_scalar(k, v)?,
                "fcm_tolerance" => cfg.boost.fcm_tolerance = parse_scalar(k, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "mode" => {
                    cfg.mode = match v {
                        "dynamic" => Mode::Dynamic,
                        "fixed" => Mode::FixedLambda,
                        "sweep" => Mode::Sweep,
                        _ => return Err(config_err(k, v, "expected dynamic, fixed or sweep")),
                    }
                }
                "fixed_lambdas" => cfg.fixed_lambdas = parse_real_list(k, v)?,
                "sweep_clusters" => cfg.sweep_clusters = parse_usize_list(k, v)?,
                "sweep_fuzzifiers" => cfg.sweep_fuzzifiers = parse_real_list(k, v)?,
                "record_timing" => cfg.record_timing = parse_scalar(k, v)?,
                _ => unreachable!("keys checked above"),
            }
        }
        if let Some(seed) = boost_seed {
            cfg.boost.seed = seed;
        }
        cfg.data = match dataset {
            None | Some("synthetic") => {
                if target.is_some() {
                    return Err(Error::Config("target applies to CSV datasets only".into()));
                }
                DataSource::Synthetic { count, x_min, x_max }
            }
            Some(path) => DataSource::Csv {
                path: PathBuf::from(path),
                target,
            },
        };
        cfg.boost.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
            return Err(config_err("test_fraction", &cfg.test_fraction.to_string(), "must lie in (0, 1)"));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, overrides)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic { count, x_min, x_max } => generate_synthetic(*count, *x_min, *x_max),
            DataSource::Csv { path, target } => load_csv(path, target.as_deref()),
        }
    }

    pub fn split(&self, dataset: &Dataset) -> Result<SplitIndices> {
        split(dataset.n_samples(), self.test_fraction, self.seed, 2 * self.boost.max_clusters())
    }
}

#[derive(Serialize, Deserialize)]
struct ArtifactBody {
    ensemble: BoostedEnsemble,
    splits: Option<SplitIndices>,
    trace_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ArtifactFile {
    format: String,
    version: u32,
    content_hash: String,
    #[serde(flatten)]
    body: ArtifactBody,
}

/// A trained ensemble as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub ensemble: BoostedEnsemble,
    pub splits: Option<SplitIndices>,
    pub trace_file: Option<String>,
}

fn content_hash(body: &ArtifactBody) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ModelArtifact {
    pub fn to_json(&self) -> Result<String> {
        let body = ArtifactBody {
            ensemble: self.ensemble.clone(),
            splits: self.splits.clone(),
            trace_file: self.trace_file.clone(),
        };
        let file = ArtifactFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            content_hash: content_hash(&body)?,
            body,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ArtifactFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Artifact(format!("unexpected format '{}'", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Artifact(format!("unsupported version {}", file.version)));
        }
        let expected = content_hash(&file.body)?;
        if expected != file.content_hash {
            return Err(Error::Artifact("content hash mismatch; file was modified".into()));
        }
        Ok(Self {
            ensemble: file.body.ensemble,
            splits: file.body.splits,
            trace_file: file.body.trace_file,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes all files or none: on any failure the ones already written are
/// removed.
fn write_all(files: &[(PathBuf, String)]) -> Result<()> {
    let mut written = Vec::new();
    for (path, contents) in files {
        if let Err(e) = write_file(path, contents) {
            for p in written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub stages_accepted: usize,
    pub validation_rmse: f64,
    pub test_rmse: Option<f64>,
    pub model_path: PathBuf,
    pub trace_path: PathBuf,
}

impl std::fmt::Display for FitSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stages accepted: {}, validation RMSE: {:.6}, test RMSE: {}",
            self.stages_accepted,
            self.validation_rmse,
            self.test_rmse.map_or_else(|| "n/a".to_string(), |t| format!("{t:.6}"))
        )
    }
}

/// Trains on the configured data and writes `model.json` and `trace.csv`
/// into the output directory.
pub fn cmd_fit(config: &ExperimentConfig) -> Result<FitSummary> {
    let dataset = config.load_dataset()?;
    let splits = config.split(&dataset)?;
    let (ensemble, trace) = boost_fit(&dataset, &splits, &config.boost)?;
    let last = trace.final_record().expect("zero-model row");
    let summary = FitSummary {
        stages_accepted: trace.accepted_stages(),
        validation_rmse: last.validation_rmse,
        test_rmse: last.test_rmse,
        model_path: config.output_dir.join(MODEL_FILE),
        trace_path: config.output_dir.join(TRACE_FILE),
    };
    let artifact = ModelArtifact {
        ensemble,
        splits: Some(splits),
        trace_file: Some(TRACE_FILE.into()),
    };
    create_dir(&config.output_dir)?;
    write_all(&[
        (summary.model_path.clone(), artifact.to_json()?),
        (summary.trace_path.clone(), trace.to_csv(config.record_timing)),
    ])?;
    Ok(summary)
}

/// Rows of `table` arranged in the model's feature order, matched by name.
fn model_inputs(ensemble: &BoostedEnsemble, input: &Path) -> Result<(crate::dataset::CsvTable, crate::Matrix)> {
    let table = read_csv_table(input)?;
    let x = table.select(&ensemble.feature_names)?;
    Ok((table, x))
}

/// Predictions (raw target units) for every row of `input` as CSV text.
/// With `explain`, per-rule membership, local output and contribution of the
/// stage with the largest factor are appended; these are in standardized
/// units.
pub fn cmd_predict(model_path: &Path, input: &Path, explain: bool) -> Result<String> {
    let artifact = ModelArtifact::load(model_path)?;
    let ensemble = &artifact.ensemble;
    let (_, x) = model_inputs(ensemble, input)?;
    let predictions = ensemble.predict_batch(&x)?;
    let explained = if explain { ensemble.largest_lambda_stage() } else { None };

    let mut out = String::from("prediction");
    if let Some(s) = explained {
        for r in 0..ensemble.stages[s].model.rules() {
            out.push_str(&format!(",rule{r}_membership,rule{r}_local,rule{r}_contribution"));
        }
    }
    out.push('\n');
    let mut z = vec![0.0; ensemble.n_features()];
    for (i, p) in predictions.iter().enumerate() {
        out.push_str(&p.to_string());
        if let Some(s) = explained {
            ensemble.scaler.transform_point(x.row(i), &mut z);
            for part in ensemble.stages[s].model.explain(&z) {
                out.push_str(&format!(",{},{},{}", part.membership, part.local_output, part.contribution));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub standardized: EvalReport,
    pub raw: EvalReport,
}

/// RMSE of the model on a labelled CSV, in both standardized and raw units.
pub fn cmd_evaluate(model_path: &Path, input: &Path, target: Option<&str>) -> Result<Evaluation> {
    let artifact = ModelArtifact::load(model_path)?;
    let ensemble = &artifact.ensemble;
    let (table, x) = model_inputs(ensemble, input)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let target = target.unwrap_or(&ensemble.target_name);
    let t = table.column_index(target).ok_or_else(|| Error::MissingColumn(target.to_string()))?;
    let actual: Vec<f64> = table.rows.iter().map(|r| r[t]).collect();
    let raw = ensemble.predict_batch(&x)?;
    let z_pred: Vec<f64> = raw.iter().map(|&p| ensemble.scaler.transform_target(p)).collect();
    let z_true: Vec<f64> = actual.iter().map(|&y| ensemble.scaler.transform_target(y)).collect();
    Ok(Evaluation {
        standardized: EvalReport::new(&z_pred, &z_true, TargetUnits::Standardized)?,
        raw: EvalReport::new(&raw, &actual, TargetUnits::Raw)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub name: String,
    pub file: String,
    pub stages_accepted: usize,
    pub final_validation_rmse: f64,
    pub final_test_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExperimentSummary {
    Fixed { traces: Vec<TraceSummary> },
    Sweep { rows: usize, improvement: ImprovementSummary },
}

fn summarize(name: String, file: String, trace: &IterationTrace) -> TraceSummary {
    let last = trace.final_record().expect("zero-model row");
    TraceSummary {
        name,
        file,
        stages_accepted: trace.accepted_stages(),
        final_validation_rmse: last.validation_rmse,
        final_test_rmse: last.test_rmse,
    }
}

/// Runs a fixed-vs-dynamic factor comparison or a cluster/fuzzifier sweep and
/// writes its CSVs plus `summary.json` into the output directory.
pub fn cmd_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    let dataset = config.load_dataset()?;
    let dir = &config.output_dir;
    let (summary, mut files) = match config.mode {
        Mode::FixedLambda => {
            if config.fixed_lambdas.is_empty() {
                return Err(Error::Config("fixed_lambdas is empty".into()));
            }
            let splits = config.split(&dataset)?;
            let mut files = Vec::new();
            let mut traces = Vec::new();
            for &lambda in &config.fixed_lambdas {
                let (_, trace) = boost_fit_fixed_lambda(&dataset, &splits, &config.boost, lambda)?;
                let file = format!("trace_fixed_{lambda}.csv");
                traces.push(summarize(format!("fixed {lambda}"), file.clone(), &trace));
                files.push((dir.join(file), trace.to_csv(config.record_timing)));
            }
            let (_, trace) = boost_fit(&dataset, &splits, &config.boost)?;
            traces.push(summarize("dynamic".into(), "trace_dynamic.csv".into(), &trace));
            files.push((dir.join("trace_dynamic.csv"), trace.to_csv(config.record_timing)));
            (ExperimentSummary::Fixed { traces }, files)
        }
        Mode::Sweep => {
            let max_c = config.sweep_clusters.iter().copied().max().unwrap_or(1);
            let splits = split(dataset.n_samples(), config.test_fraction, config.seed, 2 * max_c)?;
            let table = run_sweep(&dataset, &splits, &config.sweep_clusters, &config.sweep_fuzzifiers, &config.boost)?;
            let improvement = table.improvement_summary(config.boost.tolerance)?;
            let files = vec![(dir.join("sweep.csv"), table.to_csv())];
            (
                ExperimentSummary::Sweep {
                    rows: table.rows.len(),
                    improvement,
                },
                files,
            )
        }
        Mode::Dynamic => {
            return Err(Error::Config("experiment needs mode = fixed or mode = sweep".into()));
        }
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    files.push((dir.join("summary.json"), text));
    create_dir(dir)?;
    write_all(&files)?;
    Ok(summary)
}

/// Writes the synthetic dataset as a two-column `x,y` CSV.
pub fn cmd_synth(count: usize, x_min: f64, x_max: f64, out: &Path) -> Result<()> {
    let data = generate_synthetic(count, x_min, x_max)?;
    let mut text = String::from("x,y\n");
    for (row, y) in data.features().iter_rows().zip(data.targets()) {
        text.push_str(&format!("{},{}\n", row[0], y));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, &text)
}
