//! Fuzzy c-means clustering.
//!
//! Minimizes `Q = sum_i sum_j u_ij^m * ||x_j - v_i||^2` by alternating the
//! prototype update (membership-weighted means) and the membership update
//! `u_ij = 1 / sum_l (||x_j - v_i|| / ||x_j - v_l||)^(2/(m-1))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Distances below this are treated as coincidence with a prototype.
pub const COINCIDENCE_DISTANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcmConfig {
    pub clusters: usize,
    pub fuzzifier: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FcmConfig {
    fn default() -> Self {
        Self {
            clusters: 2,
            fuzzifier: 2.0,
            max_iterations: 300,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

impl FcmConfig {
    pub fn new(clusters: usize, fuzzifier: f64) -> Self {
        Self {
            clusters,
            fuzzifier,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::InvalidArgument("cluster count must be >= 1".into()));
        }
        if !(self.fuzzifier > 1.0 && self.fuzzifier.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fuzzifier must be > 1, got {}",
                self.fuzzifier
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Fitted prototypes. Memberships of any point follow from `prototypes` and
/// `fuzzifier` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcmModel {
    pub prototypes: Matrix,
    pub fuzzifier: f64,
    /// Objective after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub config: FcmConfig,
}

/// `c x N` membership matrix, column `j` holds the memberships of point `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipMatrix {
    clusters: usize,
    points: usize,
    // point-major: data[j * clusters + i] = u_ij
    data: Vec<f64>,
}

impl MembershipMatrix {
    /// Builds from per-point membership vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let clusters = columns.first().map_or(0, Vec::len);
        if clusters == 0 || columns.iter().any(|c| c.len() != clusters) {
            return Err(Error::ShapeMismatch("membership columns must share a non-zero length".into()));
        }
        Ok(Self {
            clusters,
            points: columns.len(),
            data: columns.concat(),
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn points(&self) -> usize {
        self.points
    }

    #[inline]
    pub fn get(&self, cluster: usize, point: usize) -> f64 {
        self.data[point * self.clusters + cluster]
    }

    /// Memberships of one point across all clusters.
    #[inline]
    pub fn column(&self, point: usize) -> &[f64] {
        &self.data[point * self.clusters..(point + 1) * self.clusters]
    }

    fn column_mut(&mut self, point: usize) -> &mut [f64] {
        &mut self.data[point * self.clusters..(point + 1) * self.clusters]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Membership of `point` in each of the clusters given by `prototypes`.
/// Writes `prototypes.rows()` values that sum to one into `out`; `scratch`
/// must have the same length.
pub(crate) fn memberships_into(
    prototypes: &Matrix,
    fuzzifier: f64,
    point: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let c = prototypes.rows();
    let mut nearest = f64::INFINITY;
    for i in 0..c {
        let d2 = squared_distance(point, prototypes.row(i));
        scratch[i] = d2;
        nearest = nearest.min(d2);
    }

    if nearest < COINCIDENCE_DISTANCE * COINCIDENCE_DISTANCE {
        let ties = scratch.iter().filter(|&&d2| d2 == nearest).count() as f64;
        for (o, &d2) in out.iter_mut().zip(scratch.iter()) {
            *o = if d2 == nearest { 1.0 / ties } else { 0.0 };
        }
        return;
    }

    // (d_i / d_l)^(2/(m-1)) on squared distances is (d2_i / d2_l)^(1/(m-1)).
    // Ratios against the nearest prototype stay in (0, 1].
    let exponent = 1.0 / (fuzzifier - 1.0);
    let mut total = 0.0;
    for (o, &d2) in out.iter_mut().zip(scratch.iter()) {
        *o = (nearest / d2).powf(exponent);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl FcmModel {
    pub fn clusters(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dimension(&self) -> usize {
        self.prototypes.cols()
    }

    /// Memberships of a single point; sums to one.
    pub fn membership(&self, point: &[f64]) -> Vec<f64> {
        let c = self.clusters();
        let mut scratch = vec![0.0; c];
        let mut out = vec![0.0; c];
        memberships_into(&self.prototypes, self.fuzzifier, point, &mut scratch, &mut out);
        out
    }

    /// Memberships for every row of `data`.
    pub fn memberships(&self, data: &Matrix) -> MembershipMatrix {
        compute_memberships(&self.prototypes, self.fuzzifier, data)
    }

    /// Objective `Q` for the given data and memberships.
    pub fn objective(&self, data: &Matrix, memberships: &MembershipMatrix) -> Result<f64> {
        if memberships.clusters() != self.clusters()
            || memberships.points() != data.rows()
            || data.cols() != self.dimension()
        {
            return Err(Error::ShapeMismatch(format!(
                "{} prototypes of dimension {}, {}x{} memberships, {}x{} data",
                self.clusters(),
                self.dimension(),
                memberships.clusters(),
                memberships.points(),
                data.rows(),
                data.cols()
            )));
        }
        Ok(objective(&self.prototypes, self.fuzzifier, data, memberships))
    }

    /// One more prototype/membership update starting from `memberships`.
    pub fn update_pass(&self, data: &Matrix, memberships: &MembershipMatrix) -> (Matrix, MembershipMatrix) {
        let protos = update_prototypes(data, memberships, self.fuzzifier, Some(&self.prototypes));
        let u = compute_memberships(&protos, self.fuzzifier, data);
        (protos, u)
    }
}

fn compute_memberships(prototypes: &Matrix, fuzzifier: f64, data: &Matrix) -> MembershipMatrix {
    let c = prototypes.rows();
    let mut u = MembershipMatrix {
        clusters: c,
        points: data.rows(),
        data: vec![0.0; c * data.rows()],
    };
    let mut scratch = vec![0.0; c];
    for j in 0..data.rows() {
        memberships_into(prototypes, fuzzifier, data.row(j), &mut scratch, u.column_mut(j));
    }
    u
}

fn objective(prototypes: &Matrix, fuzzifier: f64, data: &Matrix, u: &MembershipMatrix) -> f64 {
    let mut q = 0.0;
    for j in 0..data.rows() {
        let x = data.row(j);
        for (i, &uij) in u.column(j).iter().enumerate() {
            if uij > 0.0 {
                q += uij.powf(fuzzifier) * squared_distance(x, prototypes.row(i));
            }
        }
    }
    q
}

/// Membership-weighted means. A cluster with zero total weight keeps its
/// previous prototype (or the data mean on the first pass).
fn update_prototypes(
    data: &Matrix,
    u: &MembershipMatrix,
    fuzzifier: f64,
    previous: Option<&Matrix>,
) -> Matrix {
    let c = u.clusters();
    let n = data.cols();
    let mut sums = Matrix::zeros(c, n);
    let mut weights = vec![0.0; c];
    for j in 0..data.rows() {
        let x = data.row(j);
        for (i, &uij) in u.column(j).iter().enumerate() {
            let w = uij.powf(fuzzifier);
            if w == 0.0 {
                continue;
            }
            weights[i] += w;
            for (s, &xv) in sums.row_mut(i).iter_mut().zip(x) {
                *s += w * xv;
            }
        }
    }
    for i in 0..c {
        if weights[i] > 0.0 {
            let w = weights[i];
            for s in sums.row_mut(i) {
                *s /= w;
            }
        } else if let Some(prev) = previous {
            sums.row_mut(i).copy_from_slice(prev.row(i));
        } else {
            for k in 0..n {
                let mean = data.iter_rows().map(|r| r[k]).sum::<f64>() / data.rows() as f64;
                sums.set(i, k, mean);
            }
        }
    }
    sums
}

/// Fits `config.clusters` prototypes to the rows of `data`.
///
/// Memberships start as seeded uniform draws normalized per point, then the
/// prototype and membership updates alternate until the largest membership
/// change drops below `config.tolerance` or `config.max_iterations` passes run.
/// The returned memberships are exactly [`FcmModel::memberships`] of `data`.
pub fn fcm_fit(data: &Matrix, config: &FcmConfig) -> Result<(FcmModel, MembershipMatrix)> {
    config.validate()?;
    if data.rows() == 0 || data.cols() == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.rows() < config.clusters {
        return Err(Error::TooFewRows {
            required: config.clusters,
            actual: data.rows(),
        });
    }
    if !data.is_finite() {
        return Err(Error::InvalidArgument("clustering data contains non-finite values".into()));
    }

    let c = config.clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut u = MembershipMatrix {
        clusters: c,
        points: data.rows(),
        data: vec![0.0; c * data.rows()],
    };
    for j in 0..data.rows() {
        let col = u.column_mut(j);
        let mut total = 0.0;
        for v in col.iter_mut() {
            // open interval keeps every column strictly positive
            *v = rng.random::<f64>() + f64::EPSILON;
            total += *v;
        }
        for v in col.iter_mut() {
            *v /= total;
        }
    }
    iterate(data, config, u)
}

/// Same as [`fcm_fit`] but starting from the given memberships instead of a
/// seeded random draw.
pub fn fcm_fit_from(
    data: &Matrix,
    config: &FcmConfig,
    initial: MembershipMatrix,
) -> Result<(FcmModel, MembershipMatrix)> {
    config.validate()?;
    if initial.clusters() != config.clusters || initial.points() != data.rows() {
        return Err(Error::ShapeMismatch(format!(
            "initial memberships are {}x{}, expected {}x{}",
            initial.clusters(),
            initial.points(),
            config.clusters,
            data.rows()
        )));
    }
    if data.rows() < config.clusters {
        return Err(Error::TooFewRows {
            required: config.clusters,
            actual: data.rows(),
        });
    }
    iterate(data, config, initial)
}

fn iterate(
    data: &Matrix,
    config: &FcmConfig,
    mut u: MembershipMatrix,
) -> Result<(FcmModel, MembershipMatrix)> {
    let m = config.fuzzifier;
    let mut prototypes: Option<Matrix> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let protos = update_prototypes(data, &u, m, prototypes.as_ref());
        let next = compute_memberships(&protos, m, data);
        trace.push(objective(&protos, m, data, &next));
        let delta = next.max_abs_diff(&u);
        u = next;
        prototypes = Some(protos);
        if delta < config.tolerance {
            converged = true;
            break;
        }
    }

    let prototypes = prototypes.expect("at least one iteration runs");
    let model = FcmModel {
        prototypes,
        fuzzifier: m,
        objective_trace: trace,
        iterations,
        converged,
        config: config.clone(),
    };
    Ok((model, u))
}
