use std::io::Write;

use super::{Evidence, EvidenceSource};
use crate::error::Result;
use crate::scalar::Scalar;

/// One processed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceRecord<T> {
    pub t: u64,
    pub evidence: T,
    pub statistic: T,
    pub alarm: bool,
    pub contributions: Option<Vec<T>>,
}

/// Running statistic `Delta_t = max(Delta_{t-1} + D_t, 0)` and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState<T> {
    pub statistic: T,
    /// Last time the statistic was zero; the onset estimate once alarmed.
    pub last_zero_time: u64,
    pub alarm: bool,
    pub alarm_time: Option<u64>,
    /// Time index of the last processed sample.
    pub t: u64,
    pub evidence_log: Vec<EvidenceRecord<T>>,
}

impl<T: Scalar> Default for DetectorState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> DetectorState<T> {
    pub fn new() -> Self {
        Self {
            statistic: T::zero(),
            last_zero_time: 0,
            alarm: false,
            alarm_time: None,
            t: 0,
            evidence_log: Vec::new(),
        }
    }

    /// Applies one evidence value at time `t`; returns whether the alarm is raised.
    ///
    /// After an alarm the statistic keeps evolving but the alarm time and the
    /// onset estimate are frozen until [`reset`](Self::reset).
    pub fn update_statistic(&mut self, t: u64, evidence: T, h: T) -> bool {
        self.t = t;
        self.statistic = (self.statistic + evidence).max(T::zero());
        if self.alarm {
            return true;
        }
        if self.statistic == T::zero() {
            self.last_zero_time = t;
        }
        if self.statistic >= h {
            self.alarm = true;
            self.alarm_time = Some(t);
        }
        self.alarm
    }

    /// Onset estimate `max{t < T : Delta_t = 0}`, once alarmed.
    pub fn tau_hat(&self) -> Option<u64> {
        self.alarm.then_some(self.last_zero_time)
    }

    /// Clears the statistic for the next alarm episode; the log is kept.
    pub fn reset(&mut self) {
        self.statistic = T::zero();
        self.last_zero_time = self.t;
        self.alarm = false;
        self.alarm_time = None;
    }

    /// Logged contributions for `t` in `(from, from + count]`.
    pub fn contributions_after(&self, from: u64, count: usize) -> Vec<&[T]> {
        self.evidence_log
            .iter()
            .filter(|r| r.t > from)
            .filter_map(|r| r.contributions.as_deref())
            .take(count)
            .collect()
    }
}

/// Options for [`run_detector`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub threshold_h: f64,
    pub record_contributions: bool,
    /// Record the per-sample evidence log.
    pub log: bool,
    /// Samples to keep consuming after the alarm, e.g. for localization.
    pub post_alarm_samples: usize,
}

impl RunOptions {
    pub fn new(threshold_h: f64) -> Self {
        Self {
            threshold_h,
            record_contributions: false,
            log: true,
            post_alarm_samples: 0,
        }
    }

    pub fn with_contributions(mut self, extra: usize) -> Self {
        self.record_contributions = true;
        self.post_alarm_samples = extra;
        self
    }
}

/// Feeds `stream` through `source` until the alarm (plus any requested extra samples).
///
/// Samples are numbered from 1 in stream order.
pub fn run_detector<'a, T, E, I>(
    source: &E,
    stream: I,
    opts: RunOptions,
) -> Result<DetectorState<T>>
where
    T: Scalar,
    E: EvidenceSource<T> + ?Sized,
    I: IntoIterator<Item = &'a [T]>,
{
    let h: T = crate::scalar::cast(opts.threshold_h);
    let mut state = DetectorState::new();
    let mut extra = 0usize;
    for (i, x) in stream.into_iter().enumerate() {
        let t = i as u64 + 1;
        let was_alarmed = state.alarm;
        let Evidence {
            value,
            contributions,
        } = source.evidence(x, opts.record_contributions)?;
        let alarm = state.update_statistic(t, value, h);
        if opts.log {
            state.evidence_log.push(EvidenceRecord {
                t,
                evidence: value,
                statistic: state.statistic,
                alarm,
                contributions,
            });
        }
        if was_alarmed {
            extra += 1;
        }
        if alarm && extra >= opts.post_alarm_samples {
            break;
        }
    }
    Ok(state)
}

/// Incremental writer for the event log: `t,D_t,Delta_t,alarm_flag`.
pub struct EventLogWriter<W: Write> {
    wtr: csv::Writer<W>,
}

impl<W: Write> EventLogWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "D_t", "Delta_t", "alarm_flag"])?;
        Ok(Self { wtr })
    }

    pub fn record<T: Scalar>(
        &mut self,
        t: u64,
        evidence: T,
        statistic: T,
        alarm: bool,
    ) -> Result<()> {
        self.wtr.write_record([
            t.to_string(),
            evidence.to_string(),
            statistic.to_string(),
            u8::from(alarm).to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.wtr.flush()?;
        Ok(())
    }
}

/// Writes the logged records of `state` as an event log.
pub fn write_event_log<T: Scalar, W: Write>(state: &DetectorState<T>, writer: W) -> Result<()> {
    let mut log = EventLogWriter::new(writer)?;
    for r in &state.evidence_log {
        log.record(r.t, r.evidence, r.statistic, r.alarm)?;
    }
    log.finish()
}

/// A per-sample decision statistic; alarms are declared when it reaches `h`.
///
/// Implemented by the kNN detectors and by every baseline so the evaluation
/// harness can drive them interchangeably.
pub trait SequentialDetector<T: Scalar>: Send {
    fn dim(&self) -> usize;

    /// Consumes one sample and returns the updated statistic.
    fn step(&mut self, x: &[T]) -> Result<T>;

    fn reset(&mut self);
}

/// CUSUM recursion over any [`EvidenceSource`].
#[derive(Debug, Clone)]
pub struct CusumDetector<E> {
    source: E,
    statistic: f64,
}

impl<E> CusumDetector<E> {
    pub fn new(source: E) -> Self {
        Self {
            source,
            statistic: 0.0,
        }
    }

    pub fn source(&self) -> &E {
        &self.source
    }
}

impl<T: Scalar, E: EvidenceSource<T>> SequentialDetector<T> for CusumDetector<E> {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn step(&mut self, x: &[T]) -> Result<T> {
        let v = crate::scalar::to_f64(self.source.evidence(x, false)?.value);
        self.statistic = (self.statistic + v).max(0.0);
        Ok(crate::scalar::cast(self.statistic))
    }

    fn reset(&mut self) {
        self.statistic = 0.0;
    }
}
