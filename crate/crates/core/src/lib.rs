//! Gradient-boosted ensembles of first-order Takagi-Sugeno fuzzy models.
//!
//! Each boosting stage is a fuzzy rule base whose antecedents come from fuzzy
//! c-means clustering and whose affine consequents are fit by least squares
//! to the residuals of the ensemble so far. A per-stage contribution factor is
//! picked by grid search on a validation split.
//!
//! ```
//! use fuzzboost::boosting::{boost_fit, BoostConfig};
//! use fuzzboost::dataset::{generate_synthetic, split};
//!
//! let data = generate_synthetic(300, 0.0, 20.0).unwrap();
//! let splits = split(data.n_samples(), 0.3, 7, 6).unwrap();
//! let config = BoostConfig {
//!     max_stages: 3,
//!     cluster_grid: vec![2, 3],
//!     fuzzifier_grid: vec![2.0],
//!     ..BoostConfig::default()
//! };
//! let (ensemble, trace) = boost_fit(&data, &splits, &config).unwrap();
//! assert!(trace.accepted_stages() >= 1);
//! let y = ensemble.predict(&[5.0]).unwrap();
//! assert!(y.is_finite());
//! ```

pub mod boosting;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fcm;
pub mod matrix;
pub mod metrics;
pub mod tsk;

pub use error::{Error, Result};
pub use matrix::Matrix;
