//! Additive ensembles of Takagi-Sugeno stages fit to residuals.
//!
//! The ensemble starts from the mean of the (standardized) training targets.
//! Every stage fits a rule base to the current training residuals and enters
//! the ensemble scaled by a contribution factor chosen on the validation
//! split:
//!
//! ```text
//! y_hat = y_0 + lambda_1 * M_1(x) + ... + lambda_T * M_T(x)
//! ```
//!
//! Within a stage every `(clusters, fuzzifier, ridge)` candidate is tried and
//! the one whose best factor gives the lowest validation RMSE wins. A stage is
//! kept only if it improves the best validation RMSE so far by more than the
//! tolerance; `patience` consecutive rejections end training.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SplitIndices, StandardScaler};
use crate::error::{Error, Result};
use crate::fcm::{fcm_fit, FcmConfig, FcmModel, MembershipMatrix};
use crate::matrix::Matrix;
use crate::metrics::rmse;
use crate::tsk::{design_rhs, predict_with_memberships, FactoredSystem, NormalEquations, TskModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    /// Hard cap on attempted stages.
    pub max_stages: usize,
    /// Minimum validation RMSE improvement for a stage to be kept.
    pub tolerance: f64,
    /// Consecutive rejected stages before stopping.
    pub patience: usize,
    pub cluster_grid: Vec<usize>,
    pub fuzzifier_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub ridge_grid: Vec<f64>,
    /// Fraction of training rows each stage is fit on. 1.0 uses all rows.
    pub subsample_fraction: f64,
    pub seed: u64,
    pub fcm_max_iterations: usize,
    pub fcm_tolerance: f64,
}

/// 1.1, 1.2, ..., 2.9
pub fn default_fuzzifier_grid() -> Vec<f64> {
    (11..=29).map(|k| k as f64 / 10.0).collect()
}

/// 0.00, 0.05, ..., 1.00
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            max_stages: 100,
            tolerance: 1e-4,
            patience: 5,
            cluster_grid: (2..=10).collect(),
            fuzzifier_grid: default_fuzzifier_grid(),
            lambda_grid: default_lambda_grid(),
            ridge_grid: vec![0.0, 1e-4, 1e-2],
            subsample_fraction: 1.0,
            seed: 0,
            fcm_max_iterations: 300,
            fcm_tolerance: 1e-5,
        }
    }
}

impl BoostConfig {
    /// Settings for large datasets: up to 20 rules and 10,000 stages.
    pub fn large_dataset() -> Self {
        Self {
            max_stages: 10_000,
            cluster_grid: (2..=20).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.cluster_grid.is_empty()
            || self.fuzzifier_grid.is_empty()
            || self.lambda_grid.is_empty()
            || self.ridge_grid.is_empty()
        {
            return bad("cluster, fuzzifier, lambda and ridge grids must be non-empty".into());
        }
        if self.cluster_grid.contains(&0) {
            return bad("cluster counts must be >= 1".into());
        }
        if let Some(m) = self.fuzzifier_grid.iter().find(|m| !(**m > 1.0 && m.is_finite())) {
            return bad(format!("fuzzifier {m} is not > 1"));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !l.is_finite()) {
            return bad(format!("lambda {l} is not finite"));
        }
        if let Some(r) = self.ridge_grid.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return bad(format!("ridge {r} is not a finite non-negative number"));
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be > 0, got {}", self.tolerance));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad(format!("subsample fraction must lie in (0, 1], got {}", self.subsample_fraction));
        }
        if self.fcm_max_iterations == 0 || !(self.fcm_tolerance > 0.0) {
            return bad("clustering iterations and tolerance must be positive".into());
        }
        Ok(())
    }

    pub fn max_clusters(&self) -> usize {
        self.cluster_grid.iter().copied().max().unwrap_or(1)
    }

    fn subsampling(&self) -> bool {
        self.subsample_fraction < 1.0
    }
}

/// How each stage's contribution factor is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "lambda", rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// Grid search on the validation split; stages must improve validation RMSE.
    Dynamic,
    /// Every stage uses this factor and is always kept.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub model: TskModel,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    /// Mean of the standardized training targets.
    pub zero_model: f64,
    /// In fitting order.
    pub stages: Vec<Stage>,
    pub scaler: StandardScaler,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub lambda_policy: LambdaPolicy,
    pub config: BoostConfig,
}

impl BoostedEnsemble {
    pub fn n_features(&self) -> usize {
        self.scaler.n_features()
    }

    /// Prediction for an already standardized point, in standardized units.
    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        let mut y = self.zero_model;
        for stage in &self.stages {
            // a zero factor must leave the sum bit-identical
            if stage.lambda != 0.0 {
                y += stage.lambda * stage.model.predict(z);
            }
        }
        y
    }

    pub fn predict_standardized_batch(&self, z: &Matrix) -> Vec<f64> {
        let mut y = vec![self.zero_model; z.rows()];
        for stage in &self.stages {
            if stage.lambda != 0.0 {
                for (acc, s) in y.iter_mut().zip(stage.model.predict_batch(z)) {
                    *acc += stage.lambda * s;
                }
            }
        }
        y
    }

    /// Prediction for a raw point, in raw target units.
    pub fn predict(&self, raw: &[f64]) -> Result<f64> {
        self.check_dimension(raw.len())?;
        let mut z = vec![0.0; raw.len()];
        self.scaler.transform_point(raw, &mut z);
        Ok(self.scaler.inverse_target(self.predict_standardized(&z)))
    }

    pub fn predict_batch(&self, raw: &Matrix) -> Result<Vec<f64>> {
        if raw.rows() == 0 {
            return Ok(Vec::new());
        }
        self.check_dimension(raw.cols())?;
        let z = self.scaler.transform_features(raw);
        Ok(self
            .predict_standardized_batch(&z)
            .into_iter()
            .map(|v| self.scaler.inverse_target(v))
            .collect())
    }

    /// Index of the stage with the largest factor (first one on ties).
    pub fn largest_lambda_stage(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.stages.iter().enumerate() {
            if best.is_none_or(|b| s.lambda > self.stages[b].lambda) {
                best = Some(i);
            }
        }
        best
    }

    fn check_dimension(&self, got: usize) -> Result<()> {
        if got != self.n_features() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} features, got {got}",
                self.n_features()
            )));
        }
        Ok(())
    }
}

/// One attempted stage. Stage 0 is the zero model. RMSEs are standardized and
/// describe the ensemble with this stage added, whether or not it was kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub accepted: bool,
    pub clusters: Option<usize>,
    pub fuzzifier: Option<f64>,
    pub ridge: Option<f64>,
    pub lambda: Option<f64>,
    pub train_rmse: f64,
    pub validation_rmse: f64,
    pub test_rmse: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<StageRecord>,
}

pub const TRACE_CSV_HEADER: &str = "stage,accepted,c,m,ridge,lambda,train_rmse,val_rmse,test_rmse,seconds";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl IterationTrace {
    pub fn accepted_stages(&self) -> usize {
        self.records.iter().filter(|r| r.accepted && r.stage > 0).count()
    }

    /// Validation RMSE of the zero model followed by each kept stage.
    pub fn accepted_validation_rmse(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.accepted).map(|r| r.validation_rmse).collect()
    }

    /// Test RMSE of the zero model followed by each kept stage.
    pub fn accepted_test_rmse(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.accepted).filter_map(|r| r.test_rmse).collect()
    }

    /// The last kept record, i.e. the final ensemble.
    pub fn final_record(&self) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.accepted)
    }

    /// CSV with one row per attempted stage. Without `timing` the seconds
    /// column is left empty so reruns are byte-identical.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.stage,
                r.accepted,
                opt(r.clusters),
                opt(r.fuzzifier),
                opt(r.ridge),
                opt(r.lambda),
                r.train_rmse,
                r.validation_rmse,
                opt(r.test_rmse),
                if timing { r.seconds.to_string() } else { String::new() },
            ));
        }
        out
    }
}

/// `y - predictions`, elementwise.
pub fn compute_residuals(y: &[f64], predictions: &[f64]) -> Result<Vec<f64>> {
    if y.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets but {} predictions",
            y.len(),
            predictions.len()
        )));
    }
    Ok(y.iter().zip(predictions).map(|(a, b)| a - b).collect())
}

#[inline]
fn scaled_rmse(y: &[f64], partial: &[f64], stage: &[f64], lambda: f64) -> f64 {
    let mut sse = 0.0;
    for ((t, p), s) in y.iter().zip(partial).zip(stage) {
        let e = t - (p + lambda * s);
        sse += e * e;
    }
    (sse / y.len() as f64).sqrt()
}

/// Picks the factor from `grid` minimizing `RMSE(y, partial + lambda * stage)`.
/// Ties go to the smaller factor. Returns `(lambda, rmse)`.
pub fn select_lambda(partial: &[f64], stage: &[f64], y: &[f64], grid: &[f64]) -> Result<(f64, f64)> {
    if partial.len() != y.len() || stage.len() != y.len() || y.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "partial {}, stage {}, targets {}",
            partial.len(),
            stage.len(),
            y.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let e = scaled_rmse(y, partial, stage, lambda);
        best = match best {
            Some((bl, be)) if be < e || (be == e && bl <= lambda) => Some((bl, be)),
            _ => Some((lambda, e)),
        };
    }
    best.ok_or_else(|| Error::InvalidArgument("lambda grid is empty".into()))
}

/// Winning candidate of one stage.
#[derive(Clone, Debug)]
pub struct StageChoice {
    pub model: TskModel,
    pub lambda: f64,
    pub clusters: usize,
    pub fuzzifier: f64,
    pub ridge: f64,
    pub validation_rmse: f64,
    /// Set when the ridge fallback replaced an unregularized solve.
    pub design_condition_flag: bool,
    /// Unscaled stage output on the training rows used for fitting.
    pub train_output: Vec<f64>,
    /// Unscaled stage output on the validation rows.
    pub validation_output: Vec<f64>,
}

struct Antecedent {
    clusters: usize,
    fuzzifier: f64,
    model: FcmModel,
    train_u: MembershipMatrix,
    validation_u: MembershipMatrix,
    // aligned with CandidatePool::ridges
    systems: Vec<FactoredSystem>,
}

/// Every `(clusters, fuzzifier, ridge)` combination, with clustering and
/// normal-equation factorizations done up front. These depend on the inputs
/// only, so one pool serves every stage that trains on the same rows.
struct CandidatePool {
    x_train: Matrix,
    x_val: Matrix,
    ridges: Vec<f64>,
    antecedents: Vec<Antecedent>,
}

fn sorted_unique<T: Copy + PartialOrd>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("grid values are comparable"));
    v.dedup_by(|a, b| a == b);
    v
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clustering seed for one candidate; independent of the stage so that a
/// pool can be reused across stages.
fn candidate_seed(seed: u64, clusters: usize, fuzzifier: f64) -> u64 {
    splitmix(seed ^ splitmix(clusters as u64) ^ splitmix(fuzzifier.to_bits()))
}

impl CandidatePool {
    fn build(x_train: Matrix, x_val: Matrix, config: &BoostConfig, seed: u64) -> Result<Self> {
        let clusters = sorted_unique(&config.cluster_grid);
        let fuzzifiers = sorted_unique(&config.fuzzifier_grid);
        let ridges = sorted_unique(&config.ridge_grid);
        if x_train.rows() < config.max_clusters() {
            return Err(Error::TooFewRows {
                required: config.max_clusters(),
                actual: x_train.rows(),
            });
        }
        let mut antecedents = Vec::with_capacity(clusters.len() * fuzzifiers.len());
        for &c in &clusters {
            for &m in &fuzzifiers {
                let fcm_config = FcmConfig {
                    clusters: c,
                    fuzzifier: m,
                    max_iterations: config.fcm_max_iterations,
                    tolerance: config.fcm_tolerance,
                    seed: candidate_seed(seed, c, m),
                };
                let (model, train_u) = fcm_fit(&x_train, &fcm_config)?;
                let validation_u = model.memberships(&x_val);
                let normal = NormalEquations::new(&x_train, &train_u);
                let systems = ridges.iter().map(|&r| normal.factor(r)).collect::<Result<Vec<_>>>()?;
                antecedents.push(Antecedent {
                    clusters: c,
                    fuzzifier: m,
                    model,
                    train_u,
                    validation_u,
                    systems,
                });
            }
        }
        Ok(Self {
            x_train,
            x_val,
            ridges,
            antecedents,
        })
    }

    /// Fits every candidate to `residuals` and returns the one with the
    /// lowest validation RMSE. Candidates are visited in increasing
    /// `(clusters, fuzzifier, ridge)` order and only a strictly better score
    /// replaces the incumbent.
    fn best(&self, residuals: &[f64], y_val: &[f64], partial_val: &[f64], lambdas: &[f64]) -> Result<StageChoice> {
        let width = self.x_train.cols() + 1;
        // (antecedent, ridge index, coefficients, lambda, rmse, validation output)
        let mut best: Option<(usize, usize, Matrix, f64, f64, Vec<f64>)> = None;
        for (a, ante) in self.antecedents.iter().enumerate() {
            let rhs = design_rhs(&self.x_train, &ante.train_u, residuals);
            for (r, system) in ante.systems.iter().enumerate() {
                let coefficients = system.solve(rhs.clone(), ante.clusters, width);
                let val_out = predict_with_memberships(&self.x_val, &ante.validation_u, &coefficients);
                let (lambda, score) = select_lambda(partial_val, &val_out, y_val, lambdas)?;
                if best.as_ref().is_none_or(|b| score < b.4) {
                    best = Some((a, r, coefficients, lambda, score, val_out));
                }
            }
        }
        let (a, r, consequents, lambda, validation_rmse, validation_output) =
            best.ok_or_else(|| Error::InvalidArgument("no stage candidates".into()))?;
        let ante = &self.antecedents[a];
        let system = &ante.systems[r];
        let train_output = predict_with_memberships(&self.x_train, &ante.train_u, &consequents);
        Ok(StageChoice {
            model: TskModel {
                antecedent: ante.model.clone(),
                consequents,
                ridge_penalty: system.ridge,
            },
            lambda,
            clusters: ante.clusters,
            fuzzifier: ante.fuzzifier,
            ridge: self.ridges[r],
            validation_rmse,
            design_condition_flag: system.fallback,
            train_output,
            validation_output,
        })
    }
}

fn subsample_rows(n: usize, config: &BoostConfig, stage_index: usize) -> Vec<usize> {
    let take = ((n as f64 * config.subsample_fraction).round() as usize).clamp(config.max_clusters().min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ stage_index as u64);
    let mut rows = sample(&mut rng, n, take).into_vec();
    rows.sort_unstable();
    rows
}

/// Fits one stage to `residuals` over the configured grids.
///
/// Inputs are expected in the units the ensemble works in (standardized).
/// When `config.subsample_fraction < 1` the stage trains on a random subset
/// of rows drawn with seed `config.seed ^ stage_index`; `residuals` are then
/// still given for every training row.
pub fn fit_stage(
    x_train: &Matrix,
    residuals: &[f64],
    x_val: &Matrix,
    y_val: &[f64],
    partial_val: &[f64],
    config: &BoostConfig,
    stage_index: usize,
) -> Result<StageChoice> {
    config.validate()?;
    if residuals.len() != x_train.rows() || y_val.len() != x_val.rows() || partial_val.len() != y_val.len() {
        return Err(Error::ShapeMismatch("stage inputs disagree in length".into()));
    }
    let mut choice = if config.subsampling() {
        let rows = subsample_rows(x_train.rows(), config, stage_index);
        let sub_res: Vec<f64> = rows.iter().map(|&i| residuals[i]).collect();
        let pool = CandidatePool::build(x_train.select_rows(&rows), x_val.clone(), config, config.seed ^ stage_index as u64)?;
        pool.best(&sub_res, y_val, partial_val, &config.lambda_grid)?
    } else {
        let pool = CandidatePool::build(x_train.clone(), x_val.clone(), config, config.seed)?;
        pool.best(residuals, y_val, partial_val, &config.lambda_grid)?
    };
    if config.subsampling() {
        choice.train_output = choice.model.predict_batch(x_train);
    }
    Ok(choice)
}

struct Standardized {
    x: Matrix,
    y: Vec<f64>,
}

fn standardize(dataset: &Dataset, scaler: &StandardScaler, rows: &[usize]) -> Standardized {
    let x = scaler.transform_features(&dataset.features().select_rows(rows));
    let y = rows.iter().map(|&i| scaler.transform_target(dataset.targets()[i])).collect();
    Standardized { x, y }
}

fn rmse_or_nan(pred: &[f64], y: &[f64]) -> Option<f64> {
    if y.is_empty() {
        None
    } else {
        rmse(pred, y).ok()
    }
}

/// Trains an ensemble with validation-tuned contribution factors.
///
/// Features and target are standardized with statistics from the training
/// rows. Test rows only feed the `test_rmse` column of the trace; they never
/// influence the fitted ensemble.
pub fn boost_fit(dataset: &Dataset, splits: &SplitIndices, config: &BoostConfig) -> Result<(BoostedEnsemble, IterationTrace)> {
    fit_ensemble(dataset, splits, config, LambdaPolicy::Dynamic)
}

/// Trains an ensemble where every stage enters with the same factor and is
/// always kept, for `config.max_stages` stages.
pub fn boost_fit_fixed_lambda(
    dataset: &Dataset,
    splits: &SplitIndices,
    config: &BoostConfig,
    lambda: f64,
) -> Result<(BoostedEnsemble, IterationTrace)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("fixed lambda must be > 0, got {lambda}")));
    }
    fit_ensemble(dataset, splits, config, LambdaPolicy::Fixed(lambda))
}

pub fn fit_ensemble(
    dataset: &Dataset,
    splits: &SplitIndices,
    config: &BoostConfig,
    policy: LambdaPolicy,
) -> Result<(BoostedEnsemble, IterationTrace)> {
    config.validate()?;
    splits.validate(dataset.n_samples())?;

    let scaler = StandardScaler::fit(dataset, &splits.train)?;
    let train = standardize(dataset, &scaler, &splits.train);
    let val = standardize(dataset, &scaler, &splits.validation);
    let test = standardize(dataset, &scaler, &splits.test);

    let zero_model = train.y.iter().sum::<f64>() / train.y.len() as f64;
    let mut pred_train = vec![zero_model; train.y.len()];
    let mut pred_val = vec![zero_model; val.y.len()];
    let mut pred_test = vec![zero_model; test.y.len()];

    let mut ensemble = BoostedEnsemble {
        zero_model,
        stages: Vec::new(),
        scaler,
        feature_names: dataset.feature_names().to_vec(),
        target_name: dataset.target_name().to_string(),
        lambda_policy: policy,
        config: config.clone(),
    };

    let mut best_val = rmse(&pred_val, &val.y)?;
    let mut trace = IterationTrace {
        records: vec![StageRecord {
            stage: 0,
            accepted: true,
            clusters: None,
            fuzzifier: None,
            ridge: None,
            lambda: None,
            train_rmse: rmse(&pred_train, &train.y)?,
            validation_rmse: best_val,
            test_rmse: rmse_or_nan(&pred_test, &test.y),
            seconds: 0.0,
        }],
    };
    if config.max_stages == 0 {
        return Ok((ensemble, trace));
    }

    let lambdas: Vec<f64> = match policy {
        LambdaPolicy::Dynamic => config.lambda_grid.clone(),
        LambdaPolicy::Fixed(l) => vec![l],
    };
    let shared_pool = if config.subsampling() {
        None
    } else {
        Some(CandidatePool::build(train.x.clone(), val.x.clone(), config, config.seed)?)
    };
    // Without subsampling a rejected stage leaves every input unchanged, so
    // the next attempt would reproduce it exactly.
    let mut repeat: Option<StageChoice> = None;
    let mut strikes = 0;

    for t in 1..=config.max_stages {
        let started = Instant::now();
        let choice = match (&shared_pool, repeat.take()) {
            (Some(_), Some(previous)) => previous,
            (Some(pool), None) => {
                let residuals = compute_residuals(&train.y, &pred_train)?;
                pool.best(&residuals, &val.y, &pred_val, &lambdas)?
            }
            (None, _) => {
                let rows = subsample_rows(train.y.len(), config, t);
                let residuals = compute_residuals(&train.y, &pred_train)?;
                let sub_res: Vec<f64> = rows.iter().map(|&i| residuals[i]).collect();
                let pool = CandidatePool::build(train.x.select_rows(&rows), val.x.clone(), config, config.seed ^ t as u64)?;
                let mut choice = pool.best(&sub_res, &val.y, &pred_val, &lambdas)?;
                choice.train_output = choice.model.predict_batch(&train.x);
                choice
            }
        };

        let lambda = choice.lambda;
        let step = |pred: &[f64], out: &[f64]| -> Vec<f64> {
            pred.iter()
                .zip(out)
                .map(|(p, s)| if lambda != 0.0 { p + lambda * s } else { *p })
                .collect::<Vec<f64>>()
        };
        let next_train = step(&pred_train, &choice.train_output);
        let next_val = step(&pred_val, &choice.validation_output);
        let next_test = if test.y.is_empty() {
            Vec::new()
        } else {
            step(&pred_test, &choice.model.predict_batch(&test.x))
        };
        let val_rmse = rmse(&next_val, &val.y)?;
        let accepted = match policy {
            LambdaPolicy::Fixed(_) => true,
            LambdaPolicy::Dynamic => val_rmse < best_val - config.tolerance,
        };
        let record = StageRecord {
            stage: t,
            accepted,
            clusters: Some(choice.clusters),
            fuzzifier: Some(choice.fuzzifier),
            ridge: Some(choice.ridge),
            lambda: Some(lambda),
            train_rmse: rmse(&next_train, &train.y)?,
            validation_rmse: val_rmse,
            test_rmse: rmse_or_nan(&next_test, &test.y),
            seconds: started.elapsed().as_secs_f64(),
        };
        trace.records.push(record);

        if accepted {
            strikes = 0;
            best_val = best_val.min(val_rmse);
            pred_train = next_train;
            pred_val = next_val;
            pred_test = next_test;
            ensemble.stages.push(Stage {
                model: choice.model,
                lambda,
            });
        } else {
            strikes += 1;
            if strikes >= config.patience {
                break;
            }
            if shared_pool.is_some() {
                repeat = Some(choice);
            }
        }
    }
    Ok((ensemble, trace))
}
