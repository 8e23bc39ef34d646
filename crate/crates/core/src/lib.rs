//! Sequential anomaly detection on multivariate streams with k-nearest-neighbor
//! evidence.
//!
//! A nominal model ranks training points by their kNN total distance to a
//! reference set and turns each new sample's distance into a log-likelihood-ratio
//! surrogate. The evidence is accumulated in a CUSUM-like statistic that alarms
//! when it crosses a threshold `h`. A second model also measures distance to a
//! set of known anomalies, and both can run together with the anomaly set grown
//! online. After an alarm, per-dimension contributions are t-tested to localize
//! the anomalous dimensions.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision. Baselines, scenarios and the evaluation harness
//! work in `f64`.
//!
//! ```
//! use odit_core::{train_odit, run_detector, Dataset64, DetectorConfig, Label, RunOptions};
//!
//! let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 20) as f64, (i / 20) as f64]).collect();
//! let nominal = Dataset64::from_rows("grid", Label::Nominal, &rows).unwrap();
//! let model = train_odit(&nominal, &DetectorConfig::default()).unwrap();
//!
//! let far = vec![vec![100.0, 100.0]; 5];
//! let state = run_detector(&model, far.iter().map(|r| &r[..]), RunOptions::new(5.0)).unwrap();
//! assert!(state.alarm);
//! ```

// Negated comparisons deliberately reject NaN parameters.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod knn;
pub mod localization;
pub mod rng;
pub mod scalar;
pub mod scenarios;

pub use data::{Dataset, DetectorConfig, Label, ObservationVector, Partition};
pub use detectors::{
    run_detector, run_odit_uni, train_odit, train_odit_with, Backend, DetectorState, Evidence,
    EvidenceSource, Odit2Model, RunOptions, SequentialDetector, TrainedModel,
};
pub use error::{Error, Result};
pub use knn::{NeighborResult, SearchIndex};
pub use localization::{localize, LocalizationConfig, LocalizationReport};
pub use scalar::Scalar;
pub use scenarios::{GroundTruth, Scenario};

pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
pub type TrainedModel32 = TrainedModel<f32>;
pub type TrainedModel64 = TrainedModel<f64>;
pub type Odit2Model32 = Odit2Model<f32>;
pub type Odit2Model64 = Odit2Model<f64>;
pub type DetectorState32 = DetectorState<f32>;
pub type DetectorState64 = DetectorState<f64>;
pub type SearchIndex32 = SearchIndex<f32>;
pub type SearchIndex64 = SearchIndex<f64>;
