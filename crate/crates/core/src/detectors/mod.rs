//! Sequential kNN-distance detectors.
//!
//! [`TrainedModel`] scores a sample against the nominal reference set,
//! [`Odit2Model`] additionally against a cleaned anomaly reference, and
//! [`DetectorState`] accumulates the resulting evidence into a CUSUM-like
//! statistic.

mod model;
mod odit2;
mod state;
mod uni;

pub use model::{
    odit_evidence, total_distance, train_odit, train_odit_partitioned, train_odit_with, Backend,
    TrainedModel,
};
pub use odit2::{clean_anomaly_set, odit2_evidence, Odit2Model};
pub use state::{
    run_detector, write_event_log, CusumDetector, DetectorState, EventLogWriter, EvidenceRecord,
    RunOptions, SequentialDetector,
};
pub use uni::{run_odit_uni, OditUni, UniOutcome, UniStop};

use crate::error::Result;
use crate::scalar::Scalar;

/// One sample's evidence, with the per-dimension contributions when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence<T> {
    pub value: T,
    pub contributions: Option<Vec<T>>,
}

/// Anything that maps a sample to a log-likelihood-ratio-like increment.
pub trait EvidenceSource<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn evidence(&self, x: &[T], with_contributions: bool) -> Result<Evidence<T>>;
}

impl<T: Scalar, E: EvidenceSource<T> + ?Sized> EvidenceSource<T> for std::sync::Arc<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evidence(&self, x: &[T], with_contributions: bool) -> Result<Evidence<T>> {
        (**self).evidence(x, with_contributions)
    }
}
