use super::{DetectorState, EvidenceRecord, EvidenceSource, Odit2Model, TrainedModel};
use crate::error::Result;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UniStop {
    /// The supervised statistic reached its threshold first (or together with ODIT).
    Odit2,
    /// Only the semi-supervised statistic alarmed; the anomaly set was augmented.
    Odit,
    /// Neither alarmed before the stream ended.
    None,
}

#[derive(Debug, Clone)]
pub struct UniOutcome<T> {
    pub odit: DetectorState<T>,
    pub odit2: DetectorState<T>,
    pub stopped_by: UniStop,
    pub stop_time: Option<u64>,
    /// Rows appended to the anomaly reference.
    pub appended: usize,
}

/// ODIT and ODIT-2 stepped in lockstep, one sample at a time.
///
/// When ODIT alarms first at `T`, the samples `x_{tau_hat+1..=T}` are appended
/// to the anomaly reference of the ODIT-2 model.
pub struct OditUni<'m, T> {
    odit: &'m TrainedModel<T>,
    odit2: &'m mut Odit2Model<T>,
    h1: T,
    h2: T,
    reclean: bool,
    s1: DetectorState<T>,
    s2: DetectorState<T>,
    // Samples since ODIT's statistic was last zero.
    pending: Vec<Vec<T>>,
    stopped: Option<(UniStop, u64, usize)>,
}

impl<'m, T: Scalar> OditUni<'m, T> {
    pub fn new(
        odit: &'m TrainedModel<T>,
        odit2: &'m mut Odit2Model<T>,
        h1: f64,
        h2: f64,
        reclean: bool,
    ) -> Self {
        Self {
            odit,
            odit2,
            h1: cast(h1),
            h2: cast(h2),
            reclean,
            s1: DetectorState::new(),
            s2: DetectorState::new(),
            pending: Vec::new(),
            stopped: None,
        }
    }

    /// Processes the next sample; returns the stop reason once either statistic alarms.
    pub fn step(&mut self, x: &[T]) -> Result<Option<UniStop>> {
        if let Some((stop, _, _)) = self.stopped {
            return Ok(Some(stop));
        }
        let t = self.s1.t + 1;
        let d1 = self.odit.evidence(x, false)?.value;
        let d2 = self.odit2.evidence(x, false)?.value;
        let a1 = self.s1.update_statistic(t, d1, self.h1);
        let a2 = self.s2.update_statistic(t, d2, self.h2);
        for (s, d, a) in [(&mut self.s1, d1, a1), (&mut self.s2, d2, a2)] {
            let statistic = s.statistic;
            s.evidence_log.push(EvidenceRecord {
                t,
                evidence: d,
                statistic,
                alarm: a,
                contributions: None,
            });
        }
        if self.s1.statistic == T::zero() {
            self.pending.clear();
        } else {
            self.pending.push(x.to_vec());
        }
        if a2 {
            self.stopped = Some((UniStop::Odit2, t, 0));
        } else if a1 {
            let appended = self.odit2.augment(&self.pending, self.reclean)?;
            self.pending.clear();
            self.stopped = Some((UniStop::Odit, t, appended));
        }
        Ok(self.stopped.map(|s| s.0))
    }

    pub fn odit_state(&self) -> &DetectorState<T> {
        &self.s1
    }

    pub fn odit2_state(&self) -> &DetectorState<T> {
        &self.s2
    }

    pub fn finish(self) -> UniOutcome<T> {
        let (stopped_by, stop_time, appended) = match self.stopped {
            Some((s, t, a)) => (s, Some(t), a),
            None => (UniStop::None, None, 0),
        };
        UniOutcome {
            odit: self.s1,
            odit2: self.s2,
            stopped_by,
            stop_time,
            appended,
        }
    }
}

/// Runs [`OditUni`] over `stream` until the first alarm of either detector.
pub fn run_odit_uni<'a, T, I>(
    odit: &TrainedModel<T>,
    odit2: &mut Odit2Model<T>,
    stream: I,
    h1: f64,
    h2: f64,
    reclean: bool,
) -> Result<UniOutcome<T>>
where
    T: Scalar,
    I: IntoIterator<Item = &'a [T]>,
{
    let mut uni = OditUni::new(odit, odit2, h1, h2, reclean);
    for x in stream {
        if uni.step(x)?.is_some() {
            break;
        }
    }
    Ok(uni.finish())
}
