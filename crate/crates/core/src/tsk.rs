//! First-order Takagi-Sugeno rule bases.
//!
//! Rule `i` reads "if x is A_i then y_i = a_i0 + a_i1 x_1 + ... + a_in x_n",
//! where `A_i` is the fuzzy c-means membership of `x` in cluster `i`. The
//! output is the membership-weighted mean of the rule outputs. Consequents are
//! fit jointly: one least-squares problem over the `N x c(n+1)` design matrix
//! whose row `k`, block `i` is `u_i(x_k) * [1, x_k]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcm::{fcm_fit, memberships_into, FcmConfig, FcmModel, MembershipMatrix};
use crate::matrix::Matrix;
use crate::metrics::rmse;

/// Ridge penalty used when the caller has no preference.
pub const DEFAULT_RIDGE: f64 = 1e-8;
/// Penalty retried with when unregularized normal equations are singular.
pub const FALLBACK_RIDGE: f64 = 1e-6;
// Cholesky pivots smaller than this fraction of their diagonal entry count
// as rank deficiency.
const PIVOT_RATIO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TskModel {
    pub antecedent: FcmModel,
    /// Row `i` is `[a_i0, a_i1, ..., a_in]` for rule `i`.
    pub consequents: Matrix,
    pub ridge_penalty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TskFitReport {
    pub training_rmse: f64,
    /// Set when the unregularized system was singular and the fallback
    /// penalty was used instead.
    pub design_condition_flag: bool,
    pub rules_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RuleContribution {
    pub rule: usize,
    pub membership: f64,
    pub local_output: f64,
    pub contribution: f64,
}

#[inline]
fn local_output(coefficients: &[f64], point: &[f64]) -> f64 {
    let mut y = coefficients[0];
    for (a, x) in coefficients[1..].iter().zip(point) {
        y += a * x;
    }
    y
}

/// Membership-weighted sum of rule outputs. Shared by every prediction path
/// so that scalar, batch and training-time predictions agree bit for bit.
#[inline]
pub(crate) fn combine(memberships: &[f64], consequents: &Matrix, point: &[f64]) -> f64 {
    let mut y = 0.0;
    for (i, &u) in memberships.iter().enumerate() {
        y += u * local_output(consequents.row(i), point);
    }
    y
}

impl TskModel {
    pub fn rules(&self) -> usize {
        self.consequents.rows()
    }

    pub fn dimension(&self) -> usize {
        self.antecedent.dimension()
    }

    /// Model output at `point`.
    ///
    /// Panics if `point` does not have the model's dimension.
    pub fn predict(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.dimension(), "point dimension");
        let u = self.antecedent.membership(point);
        combine(&u, &self.consequents, point)
    }

    /// Row-wise [`TskModel::predict`].
    pub fn predict_batch(&self, x: &Matrix) -> Vec<f64> {
        if x.rows() == 0 {
            return Vec::new();
        }
        assert_eq!(x.cols(), self.dimension(), "point dimension");
        let c = self.rules();
        let mut scratch = vec![0.0; c];
        let mut u = vec![0.0; c];
        x.iter_rows()
            .map(|row| {
                memberships_into(&self.antecedent.prototypes, self.antecedent.fuzzifier, row, &mut scratch, &mut u);
                combine(&u, &self.consequents, row)
            })
            .collect()
    }

    /// Per-rule breakdown of [`TskModel::predict`]; the contributions sum to
    /// the prediction.
    pub fn explain(&self, point: &[f64]) -> Vec<RuleContribution> {
        assert_eq!(point.len(), self.dimension(), "point dimension");
        self.antecedent
            .membership(point)
            .into_iter()
            .enumerate()
            .map(|(rule, membership)| {
                let local = local_output(self.consequents.row(rule), point);
                RuleContribution {
                    rule,
                    membership,
                    local_output: local,
                    contribution: membership * local,
                }
            })
            .collect()
    }
}

/// Gram matrix `Phi^T Phi` of the rule design for fixed inputs and memberships.
pub(crate) struct NormalEquations {
    size: usize,
    gram: Vec<f64>,
}

impl NormalEquations {
    pub(crate) fn new(x: &Matrix, u: &MembershipMatrix) -> Self {
        let c = u.clusters();
        let width = x.cols() + 1;
        let size = c * width;
        let mut gram = vec![0.0; size * size];
        let mut phi = vec![0.0; size];
        for k in 0..x.rows() {
            fill_design_row(x.row(k), u.column(k), &mut phi);
            // upper triangle only, mirrored below
            for a in 0..size {
                let pa = phi[a];
                if pa == 0.0 {
                    continue;
                }
                let row = &mut gram[a * size..(a + 1) * size];
                for b in a..size {
                    row[b] += pa * phi[b];
                }
            }
        }
        for a in 0..size {
            for b in 0..a {
                gram[a * size + b] = gram[b * size + a];
            }
        }
        Self { size, gram }
    }

    /// Factors `G + ridge * I`. A rank-deficient unregularized system is
    /// retried with [`FALLBACK_RIDGE`].
    pub(crate) fn factor(&self, ridge: f64) -> Result<FactoredSystem> {
        if let Some(f) = self.try_factor(ridge, ridge == 0.0) {
            return Ok(f);
        }
        if ridge == 0.0 {
            if let Some(mut f) = self.try_factor(FALLBACK_RIDGE, false) {
                f.fallback = true;
                return Ok(f);
            }
        }
        Err(Error::Singular)
    }

    fn try_factor(&self, ridge: f64, check_pivots: bool) -> Option<FactoredSystem> {
        let n = self.size;
        let mut m = DMatrix::from_row_slice(n, n, &self.gram);
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
        let chol = Cholesky::new(m)?;
        if check_pivots {
            let l = chol.l_dirty();
            let deficient = (0..n).any(|i| {
                let pivot = l[(i, i)] * l[(i, i)];
                !(pivot > PIVOT_RATIO * diag[i])
            });
            if deficient {
                return None;
            }
        }
        Some(FactoredSystem {
            chol,
            ridge,
            fallback: false,
        })
    }
}

pub(crate) struct FactoredSystem {
    chol: Cholesky<f64, Dyn>,
    pub(crate) ridge: f64,
    pub(crate) fallback: bool,
}

impl FactoredSystem {
    /// Coefficients as a `clusters x width` matrix.
    pub(crate) fn solve(&self, rhs: Vec<f64>, clusters: usize, width: usize) -> Matrix {
        let sol = self.chol.solve(&DVector::from_vec(rhs));
        Matrix::from_vec(clusters, width, sol.as_slice().to_vec()).expect("solution size")
    }
}

#[inline]
fn fill_design_row(point: &[f64], u: &[f64], phi: &mut [f64]) {
    let width = point.len() + 1;
    for (i, &ui) in u.iter().enumerate() {
        let block = &mut phi[i * width..(i + 1) * width];
        block[0] = ui;
        for (b, &x) in block[1..].iter_mut().zip(point) {
            *b = ui * x;
        }
    }
}

/// `Phi^T y`.
pub(crate) fn design_rhs(x: &Matrix, u: &MembershipMatrix, y: &[f64]) -> Vec<f64> {
    let width = x.cols() + 1;
    let mut rhs = vec![0.0; u.clusters() * width];
    for k in 0..x.rows() {
        let yk = y[k];
        if yk == 0.0 {
            continue;
        }
        let point = x.row(k);
        for (i, &ui) in u.column(k).iter().enumerate() {
            let w = ui * yk;
            let block = &mut rhs[i * width..(i + 1) * width];
            block[0] += w;
            for (b, &xv) in block[1..].iter_mut().zip(point) {
                *b += w * xv;
            }
        }
    }
    rhs
}

/// Predictions for rows of `x` whose memberships are already known.
pub(crate) fn predict_with_memberships(x: &Matrix, u: &MembershipMatrix, consequents: &Matrix) -> Vec<f64> {
    (0..x.rows())
        .map(|k| combine(u.column(k), consequents, x.row(k)))
        .collect()
}

/// Clusters `x` into `config.clusters` rules and fits the consequents to `y`
/// by ridge-regularized least squares over all rules at once.
pub fn tsk_fit(x: &Matrix, y: &[f64], config: &FcmConfig, ridge_penalty: f64) -> Result<(TskModel, TskFitReport)> {
    if x.rows() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} rows but {} targets", x.rows(), y.len())));
    }
    if !(ridge_penalty >= 0.0 && ridge_penalty.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge penalty must be finite and >= 0, got {ridge_penalty}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("targets contain non-finite values".into()));
    }
    let (antecedent, u) = fcm_fit(x, config)?;
    let system = NormalEquations::new(x, &u).factor(ridge_penalty)?;
    let consequents = system.solve(design_rhs(x, &u, y), u.clusters(), x.cols() + 1);
    let fitted = predict_with_memberships(x, &u, &consequents);
    let report = TskFitReport {
        training_rmse: rmse(&fitted, y)?,
        design_condition_flag: system.fallback,
        rules_used: u.clusters(),
    };
    let model = TskModel {
        antecedent,
        consequents,
        ridge_penalty: system.ridge,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixed_model(protos: &[&[f64]], m: f64, consequents: &[&[f64]]) -> TskModel {
        TskModel {
            antecedent: FcmModel {
                prototypes: Matrix::from_rows(protos).unwrap(),
                fuzzifier: m,
                objective_trace: vec![],
                iterations: 0,
                converged: true,
                config: FcmConfig::new(protos.len(), m),
            },
            consequents: Matrix::from_rows(consequents).unwrap(),
            ridge_penalty: 0.0,
        }
    }

    fn sse(model: &TskModel, x: &Matrix, y: &[f64]) -> f64 {
        model.predict_batch(x).iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum()
    }

    /// Closed-form OLS through the normal equations with an explicit intercept,
    /// solved by Gaussian elimination with partial pivoting.
    fn ols_oracle(x: &Matrix, y: &[f64]) -> Vec<f64> {
        let p = x.cols() + 1;
        let mut a = vec![vec![0.0; p + 1]; p];
        for k in 0..x.rows() {
            let mut row = vec![1.0];
            row.extend_from_slice(x.row(k));
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += row[i] * row[j];
                }
                a[i][p] += row[i] * y[k];
            }
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..p).map(|i| a[i][p] / a[i][i]).collect()
    }

    #[test]
    fn single_rule_recovers_a_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let (model, report) = tsk_fit(&Matrix::column_vector(&xs), &y, &FcmConfig::new(1, 2.0), 0.0).unwrap();
        assert!((model.consequents.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((model.consequents.get(0, 1) - 2.0).abs() < 1e-9);
        assert!(report.training_rmse < 1e-9);
        assert!(!report.design_condition_flag);
        assert_eq!(report.rules_used, 1);
    }

    #[test]
    fn single_rule_matches_ols_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let n = rng.random_range(1..4);
            let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (model, _) = tsk_fit(&x, &y, &FcmConfig::new(1, 2.0), 0.0).unwrap();
            let oracle = ols_oracle(&x, &y);
            for (a, b) in model.consequents.row(0).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn two_separated_affine_segments_fit_exactly() {
        let mut xs = Vec::new();
        let mut y = Vec::new();
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            xs.push(x);
            y.push(3.0 * x - 1.0);
            xs.push(10.0 + x);
            y.push(-2.0 * (10.0 + x) + 25.0);
        }
        let cfg = FcmConfig { seed: 1, ..FcmConfig::new(2, 1.1) };
        let (_, report) = tsk_fit(&Matrix::column_vector(&xs), &y, &cfg, 0.0).unwrap();
        assert!(report.training_rmse < 1e-6, "rmse {}", report.training_rmse);
    }

    #[test]
    fn constant_target_is_reproduced() {
        let rows: Vec<[f64; 2]> = (0..30).map(|i| [i as f64 * 0.1, (i % 7) as f64]).collect();
        let y = vec![4.25; 30];
        let (model, report) = tsk_fit(&Matrix::from_rows(&rows).unwrap(), &y, &FcmConfig::new(3, 2.0), 0.0).unwrap();
        assert!(report.training_rmse < 1e-9);
        assert!((model.predict(&[1.0, 3.0]) - 4.25).abs() < 1e-9);
    }

    #[test]
    fn collinear_design_triggers_fallback() {
        // second feature duplicates the first
        let rows: Vec<[f64; 2]> = (0..15).map(|i| [i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..15).map(|i| i as f64 * 0.3).collect();
        let (model, report) = tsk_fit(&Matrix::from_rows(&rows).unwrap(), &y, &FcmConfig::new(1, 2.0), 0.0).unwrap();
        assert!(report.design_condition_flag);
        assert_eq!(model.ridge_penalty, FALLBACK_RIDGE);
        assert!(report.training_rmse < 1e-4);
    }

    #[test]
    fn too_few_rows_and_bad_ridge() {
        let x = Matrix::column_vector(&[1.0, 2.0]);
        assert!(matches!(tsk_fit(&x, &[1.0, 2.0], &FcmConfig::new(3, 2.0), 0.0), Err(Error::TooFewRows { .. })));
        assert!(tsk_fit(&x, &[1.0, 2.0], &FcmConfig::new(1, 2.0), -1.0).is_err());
        assert!(tsk_fit(&x, &[1.0], &FcmConfig::new(1, 2.0), 0.0).is_err());
    }

    #[test]
    fn prediction_examples() {
        let model = fixed_model(&[&[0.0], &[10.0]], 2.0, &[&[0.0, 1.0], &[5.0, 1.0]]);
        assert!((model.predict(&[2.0]) - 2.2941176470588234).abs() < 1e-12);
        // equidistant point: equal weights on locals 5 and 10
        assert_eq!(model.predict(&[5.0]), 7.5);
        // coincident with the first prototype: local output 0 only
        assert_eq!(model.predict(&[0.0]), 0.0);
    }

    #[test]
    fn explain_example() {
        let model = fixed_model(&[&[0.0], &[10.0]], 2.0, &[&[0.0, 1.0], &[5.0, 1.0]]);
        let parts = model.explain(&[2.0]);
        let expected = [(0.9411764705882353, 2.0, 1.8823529411764706), (0.058823529411764705, 7.0, 0.4117647058823529)];
        for (p, (u, l, c)) in parts.iter().zip(expected) {
            assert!((p.membership - u).abs() < 1e-12);
            assert!((p.local_output - l).abs() < 1e-12);
            assert!((p.contribution - c).abs() < 1e-12);
        }
        let total: f64 = parts.iter().map(|p| p.contribution).sum();
        assert!((total - model.predict(&[2.0])).abs() < 1e-9);

        let single = fixed_model(&[&[1.0]], 2.0, &[&[3.0, 0.5]]);
        let parts = single.explain(&[4.0]);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].membership, 1.0);

        let sym = fixed_model(&[&[-1.0, 0.0], &[1.0, 0.0]], 2.0, &[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]);
        let parts = sym.explain(&[0.0, 3.0]);
        assert_eq!(parts[0].membership, parts[1].membership);
    }

    #[test]
    fn batch_matches_scalar_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f64; 2]> = (0..60).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| (r[0] * 2.0).sin() + r[1] * r[1]).collect();
        let (model, _) = tsk_fit(&x, &y, &FcmConfig::new(4, 1.8), DEFAULT_RIDGE).unwrap();

        assert!(model.predict_batch(&Matrix::zeros(0, 2)).is_empty());
        let one = Matrix::from_rows(&[[0.3, -0.4]]).unwrap();
        assert_eq!(model.predict_batch(&one), vec![model.predict(&[0.3, -0.4])]);

        let probe: Vec<[f64; 2]> = (0..100).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let probe = Matrix::from_rows(&probe).unwrap();
        let batch = model.predict_batch(&probe);
        for (i, b) in batch.iter().enumerate() {
            assert_eq!(b.to_bits(), model.predict(probe.row(i)).to_bits());
        }
    }

    #[test]
    fn least_squares_optimality_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let rows: Vec<[f64; 2]> = (0..50).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = rows.iter().map(|r| r[0].exp() - r[1] + rng.random_range(-0.1..0.1)).collect();
            let c = rng.random_range(1..4);
            let cfg = FcmConfig { seed: rng.random(), ..FcmConfig::new(c, rng.random_range(1.5..2.5)) };
            let (model, report) = tsk_fit(&x, &y, &cfg, 0.0).unwrap();
            assert!(!report.design_condition_flag);
            let base = sse(&model, &x, &y);
            for i in 0..model.consequents.rows() {
                for j in 0..model.consequents.cols() {
                    for delta in [1e-3, -1e-3] {
                        let mut perturbed = model.clone();
                        let v = perturbed.consequents.get(i, j);
                        perturbed.consequents.set(i, j, v + delta);
                        assert!(sse(&perturbed, &x, &y) >= base - 1e-9);
                    }
                }
            }
            // convex combination bound and decomposition
            for r in x.iter_rows() {
                let parts = model.explain(r);
                let lo = parts.iter().map(|p| p.local_output).fold(f64::INFINITY, f64::min);
                let hi = parts.iter().map(|p| p.local_output).fold(f64::NEG_INFINITY, f64::max);
                let yhat = model.predict(r);
                assert!(yhat >= lo - 1e-9 && yhat <= hi + 1e-9);
                let total: f64 = parts.iter().map(|p| p.contribution).sum();
                assert!((total - yhat).abs() < 1e-9);
                assert!((parts.iter().map(|p| p.membership).sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn training_error_grows_with_ridge() {
        let rows: Vec<[f64; 1]> = (0..40).map(|i| [i as f64 / 10.0]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| (r[0] * 1.7).sin() * 3.0).collect();
        let cfg = FcmConfig { seed: 8, ..FcmConfig::new(3, 2.0) };
        let mut last = 0.0;
        for ridge in [0.0, 1e-4, 1e-2, 1.0, 10.0, 100.0] {
            let (model, _) = tsk_fit(&x, &y, &cfg, ridge).unwrap();
            let e = sse(&model, &x, &y);
            assert!(e >= last - 1e-9, "ridge {ridge}: {e} < {last}");
            last = e;
        }
    }
}
