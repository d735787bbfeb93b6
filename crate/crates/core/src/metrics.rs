//! Error metrics and the cluster/fuzzifier sweep.

use serde::{Deserialize, Serialize};

use crate::boosting::{boost_fit, BoostConfig};
use crate::dataset::{Dataset, SplitIndices, StandardScaler};
use crate::error::{Error, Result};
use crate::fcm::FcmConfig;
use crate::tsk::tsk_fit;

/// Root mean squared error.
pub fn rmse(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != actuals.len() {
        return Err(Error::ShapeMismatch(format!(
            "rmse needs equal non-empty vectors, got {} and {}",
            predictions.len(),
            actuals.len()
        )));
    }
    let sse: f64 = predictions.iter().zip(actuals).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Percentage by which `method_rmse` improves on `baseline_rmse`.
pub fn relative_improvement(baseline_rmse: f64, method_rmse: f64) -> Result<f64> {
    if !(baseline_rmse > 0.0) {
        return Err(Error::InvalidArgument(format!("baseline RMSE must be > 0, got {baseline_rmse}")));
    }
    Ok(100.0 * (baseline_rmse - method_rmse) / baseline_rmse)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUnits {
    Standardized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub n: usize,
    pub target_units: TargetUnits,
}

impl EvalReport {
    pub fn new(predictions: &[f64], actuals: &[f64], target_units: TargetUnits) -> Result<Self> {
        Ok(Self {
            rmse: rmse(predictions, actuals)?,
            n: actuals.len(),
            target_units,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    SingleTsk,
    Boosted,
}

impl SweepMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMethod::SingleTsk => "single_tsk",
            SweepMethod::Boosted => "boosted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub clusters: usize,
    pub fuzzifier: f64,
    pub method: SweepMethod,
    pub test_rmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Mean and sample standard deviation of the per-cell improvements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub cells: usize,
    pub mean_percent: f64,
    pub std_percent: f64,
    pub boosted_not_worse: usize,
}

pub const SWEEP_CSV_HEADER: &str = "clusters,fuzzifier,method,test_rmse";

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.clusters, r.fuzzifier, r.method.as_str(), r.test_rmse));
        }
        out
    }

    /// Pairs of `(single_tsk, boosted)` test RMSE per cell, in table order.
    pub fn cells(&self) -> Vec<(usize, f64, f64, f64)> {
        let mut out = Vec::new();
        for pair in self.rows.chunks(2) {
            if let [a, b] = pair {
                debug_assert_eq!((a.method, b.method), (SweepMethod::SingleTsk, SweepMethod::Boosted));
                out.push((a.clusters, a.fuzzifier, a.test_rmse, b.test_rmse));
            }
        }
        out
    }

    /// Relative improvement of boosted over single-model RMSE, cell by cell.
    /// `slack` is the margin used when counting cells where boosting is not worse.
    pub fn improvement_summary(&self, slack: f64) -> Result<ImprovementSummary> {
        let cells = self.cells();
        let gains = cells
            .iter()
            .map(|&(_, _, single, boosted)| relative_improvement(single, boosted))
            .collect::<Result<Vec<_>>>()?;
        if gains.is_empty() {
            return Err(Error::InvalidArgument("sweep table is empty".into()));
        }
        let n = gains.len() as f64;
        let mean = gains.iter().sum::<f64>() / n;
        let std = if gains.len() > 1 {
            (gains.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(ImprovementSummary {
            cells: gains.len(),
            mean_percent: mean,
            std_percent: std,
            boosted_not_worse: cells.iter().filter(|c| c.3 <= c.2 + slack).count(),
        })
    }
}

/// For every `(clusters, fuzzifier)` cell, compares a single rule base fit
/// directly to the training targets with a boosted ensemble whose grids are
/// collapsed to that cell. Both are scored on the test rows in standardized
/// units. The single model picks its ridge penalty from
/// `boost_config.ridge_grid` by validation RMSE.
pub fn run_sweep(
    dataset: &Dataset,
    splits: &SplitIndices,
    cluster_grid: &[usize],
    fuzzifier_grid: &[f64],
    boost_config: &BoostConfig,
) -> Result<SweepTable> {
    if cluster_grid.is_empty() || fuzzifier_grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    splits.validate(dataset.n_samples())?;
    let mut clusters = cluster_grid.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut fuzzifiers = fuzzifier_grid.to_vec();
    fuzzifiers.sort_by(f64::total_cmp);
    fuzzifiers.dedup();

    let scaler = StandardScaler::fit(dataset, &splits.train)?;
    let prepare = |rows: &[usize]| {
        let x = scaler.transform_features(&dataset.features().select_rows(rows));
        let y: Vec<f64> = rows.iter().map(|&i| scaler.transform_target(dataset.targets()[i])).collect();
        (x, y)
    };
    let (x_train, y_train) = prepare(&splits.train);
    let (x_val, y_val) = prepare(&splits.validation);
    let (x_test, y_test) = prepare(&splits.test);
    if y_test.is_empty() {
        return Err(Error::InvalidArgument("sweep needs a non-empty test split".into()));
    }

    let mut table = SweepTable::default();
    for &c in &clusters {
        for &m in &fuzzifiers {
            let fcm_config = FcmConfig {
                clusters: c,
                fuzzifier: m,
                max_iterations: boost_config.fcm_max_iterations,
                tolerance: boost_config.fcm_tolerance,
                seed: boost_config.seed,
            };
            let mut single: Option<(f64, f64)> = None;
            for &ridge in &boost_config.ridge_grid {
                let (model, _) = tsk_fit(&x_train, &y_train, &fcm_config, ridge)?;
                let val = rmse(&model.predict_batch(&x_val), &y_val)?;
                if single.is_none_or(|(best, _)| val < best) {
                    single = Some((val, rmse(&model.predict_batch(&x_test), &y_test)?));
                }
            }
            let single_test = single.expect("ridge grid is non-empty").1;

            let cell_config = BoostConfig {
                cluster_grid: vec![c],
                fuzzifier_grid: vec![m],
                ..boost_config.clone()
            };
            let (_, trace) = boost_fit(dataset, splits, &cell_config)?;
            let boosted_test = trace
                .final_record()
                .and_then(|r| r.test_rmse)
                .expect("zero-model record is always present");

            table.rows.push(SweepRow {
                clusters: c,
                fuzzifier: m,
                method: SweepMethod::SingleTsk,
                test_rmse: single_test,
            });
            table.rows.push(SweepRow {
                clusters: c,
                fuzzifier: m,
                method: SweepMethod::Boosted,
                test_rmse: boosted_test,
            });
        }
    }
    Ok(table)
}
