//! Monte-Carlo evaluation: detection delay and false alarms over threshold
//! sweeps, localization ROC curves, and per-sample timing.
//!
//! Every trial draws a fresh stream from a seed derived from the master seed
//! and the trial index, and runs a fresh detector instance over it. The
//! statistic path of a trial is computed once and shared by every threshold,
//! so the sweep uses common random numbers and the delay/false-alarm frontier
//! is monotone in `h` within a run.
//!
//! Delays are averaged over true detections only (`tau <= T`); trials with no
//! alarm by the horizon are reported as a censored count.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    GCusum, GCusumParams, GaussianLlr, InfoMetric, OracleCusum, WindowDetectorConfig,
};
use crate::data::{Dataset, DetectorConfig, Label};
use crate::detectors::{
    run_detector, train_odit_with, Backend, CusumDetector, DetectorState, EvidenceSource,
    Odit2Model, RunOptions, SequentialDetector, TrainedModel,
};
use crate::error::{Error, Result};
use crate::localization::{localize, student_t_threshold, LocalizationConfig, Variant};
use crate::rng::{derive_seed, derive_seed_str, rng_from_seed};
use crate::scenarios::{GroundTruth, Scenario};

/// How a single trial ended for one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    NoAlarm,
    FalseAlarm,
    Detection,
}

/// Flag counts of a localization decision against the ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_flags(flags: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&f, &t) in flags.iter().zip(truth) {
            match (f, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// `(fpr, tpr)`; a rate with an empty denominator is 0.
    pub fn rates(&self) -> (f64, f64) {
        let ratio = |a: usize, b: usize| {
            if a + b == 0 {
                0.0
            } else {
                a as f64 / (a + b) as f64
            }
        };
        (ratio(self.fp, self.tn), ratio(self.tp, self.fn_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub alarm_time: Option<u64>,
    pub true_tau: u64,
    /// `(T - tau)+` for a true detection.
    pub detection_delay: Option<u64>,
    /// Alarm strictly before `tau`.
    pub false_alarm: bool,
    pub localization: Option<Confusion>,
}

impl TrialOutcome {
    pub fn new(alarm_time: Option<u64>, true_tau: u64) -> Self {
        let false_alarm = alarm_time.is_some_and(|t| t < true_tau);
        Self {
            alarm_time,
            true_tau,
            detection_delay: alarm_time.filter(|&t| t >= true_tau).map(|t| t - true_tau),
            false_alarm,
            localization: None,
        }
    }

    pub fn kind(&self) -> OutcomeKind {
        match (self.alarm_time, self.false_alarm) {
            (None, _) => OutcomeKind::NoAlarm,
            (Some(_), true) => OutcomeKind::FalseAlarm,
            (Some(_), false) => OutcomeKind::Detection,
        }
    }
}

/// Aggregate over all trials at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    #[serde(serialize_with = "ser_h")]
    pub h: f64,
    /// Mean over true detections; `None` when there were none.
    pub mean_delay: Option<f64>,
    /// 95% percentile-bootstrap interval of the mean delay.
    pub delay_ci: Option<(f64, f64)>,
    /// Fraction of trials alarming before `tau`.
    pub far: f64,
    /// Trials without any alarm by the horizon.
    pub censored: usize,
    pub detections: usize,
    pub n_trials: usize,
    #[serde(skip)]
    pub outcomes: Vec<TrialOutcome>,
}

fn ser_h<S: serde::Serializer>(h: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if h.is_finite() {
        s.serialize_f64(*h)
    } else {
        s.serialize_str("inf")
    }
}

/// One point of a localization ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The swept parameter: a test level or a score threshold.
    pub operating_point: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetadata {
    pub detector: String,
    pub master_seed: u64,
    pub n_trials: usize,
    pub tau: u64,
    pub horizon: usize,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub rows: Vec<ThresholdRow>,
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    /// Writes `h,mean_delay,far,censored,n_trials`; an undefined delay is left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["h", "mean_delay", "far", "censored", "n_trials"])?;
        for r in &self.rows {
            w.write_record([
                fmt_f64(r.h),
                r.mean_delay.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.far),
                r.censored.to_string(),
                r.n_trials.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `operating_point,fpr,tpr`.
    pub fn write_roc_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_roc_csv(&self.roc, writer)
    }

    /// Mean delay at the smallest threshold whose false alarm rate is at most `max_far`.
    pub fn delay_at_far(&self, max_far: f64) -> Option<(f64, Option<f64>)> {
        self.rows
            .iter()
            .filter(|r| r.far <= max_far)
            .min_by(|a, b| a.h.total_cmp(&b.h))
            .map(|r| (r.h, r.mean_delay))
    }

    pub fn row(&self, h: f64) -> Option<&ThresholdRow> {
        self.rows.iter().find(|r| r.h == h)
    }
}

pub fn write_roc_csv<W: Write>(points: &[RocPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["operating_point", "fpr", "tpr"])?;
    for p in points {
        w.write_record([fmt_f64(p.operating_point), fmt_f64(p.fpr), fmt_f64(p.tpr)])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// `n` thresholds spaced geometrically from `lo` to `hi`, both included.
pub fn geometric_thresholds(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "geometric grid needs 0 < lo <= hi < inf and n >= 1, got lo = {lo}, hi = {hi}, n = {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo * (r * i as f64).exp()
            }
        })
        .collect())
}

/// Trained detector ready to be instantiated once per trial.
#[derive(Clone)]
pub enum Prepared {
    Odit(Arc<TrainedModel<f64>>),
    Odit2(Arc<Odit2Model<f64>>),
    Sequential(Arc<dyn Fn() -> Box<dyn SequentialDetector<f64>> + Send + Sync>),
}

impl Prepared {
    pub fn sequential<F>(f: F) -> Self
    where
        F: Fn() -> Box<dyn SequentialDetector<f64>> + Send + Sync + 'static,
    {
        Self::Sequential(Arc::new(f))
    }

    /// Fresh detector with zero statistic.
    pub fn instantiate(&self) -> Box<dyn SequentialDetector<f64>> {
        match self {
            Self::Odit(m) => Box::new(CusumDetector::new(Arc::clone(m))),
            Self::Odit2(m) => Box::new(CusumDetector::new(Arc::clone(m))),
            Self::Sequential(f) => f(),
        }
    }

    fn evidence_source(&self) -> Option<&dyn EvidenceSource<f64>> {
        match self {
            Self::Odit(m) => Some(m.as_ref()),
            Self::Odit2(m) => Some(m.as_ref()),
            Self::Sequential(_) => None,
        }
    }
}

impl std::fmt::Debug for Prepared {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Odit(_) => f.write_str("Prepared::Odit"),
            Self::Odit2(_) => f.write_str("Prepared::Odit2"),
            Self::Sequential(_) => f.write_str("Prepared::Sequential"),
        }
    }
}

/// Statistic after each sample; stops early once `stop_at` is reached.
pub fn statistic_path(
    detector: &mut dyn SequentialDetector<f64>,
    stream: &Dataset<f64>,
    stop_at: f64,
) -> Result<Vec<f64>> {
    let mut path = Vec::with_capacity(stream.len());
    for x in stream.rows() {
        let s = detector.step(x)?;
        path.push(s);
        if s >= stop_at {
            break;
        }
    }
    Ok(path)
}

/// First time (1-based) the path reaches `h`.
pub fn first_passage(path: &[f64], h: f64) -> Option<u64> {
    path.iter().position(|&s| s >= h).map(|i| i as u64 + 1)
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?;
    Ok(pool.install(f))
}

fn trial_seed(master: u64, label: &str, i: usize) -> u64 {
    derive_seed(derive_seed_str(master, label), i as u64)
}

fn check_thresholds(thresholds: &[f64], n_trials: usize) -> Result<()> {
    if n_trials == 0 {
        return Err(Error::InvalidParameter(
            "n_trials must be at least 1".into(),
        ));
    }
    if thresholds.is_empty() || thresholds.iter().any(|h| h.is_nan()) {
        return Err(Error::InvalidParameter(
            "thresholds must be a non-empty list of numbers".into(),
        ));
    }
    Ok(())
}

/// Alarm times of every trial at every threshold, indexed `[threshold][trial]`.
///
/// Trial `i` uses the stream `stream_for(i)`, so different detectors called
/// with the same generator see identical streams.
pub fn alarm_matrix<F>(
    prepared: &Prepared,
    thresholds: &[f64],
    n_trials: usize,
    jobs: usize,
    stream_for: F,
) -> Result<Vec<Vec<Option<u64>>>>
where
    F: Fn(usize) -> Result<Dataset<f64>> + Sync,
{
    check_thresholds(thresholds, n_trials)?;
    let stop_at = thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let paths: Vec<Vec<f64>> = with_pool(jobs, || {
        (0..n_trials)
            .into_par_iter()
            .map(|i| {
                let stream = stream_for(i)?;
                let mut det = prepared.instantiate();
                statistic_path(det.as_mut(), &stream, stop_at)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(thresholds
        .iter()
        .map(|&h| paths.iter().map(|p| first_passage(p, h)).collect())
        .collect())
}

/// Percentile-bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Option<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = rng_from_seed(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    Some((q(tail), q(1.0 - tail)))
}

fn aggregate(h: f64, alarms: &[Option<u64>], tau: u64, ci_seed: u64) -> ThresholdRow {
    let outcomes: Vec<TrialOutcome> = alarms.iter().map(|&a| TrialOutcome::new(a, tau)).collect();
    let delays: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.detection_delay)
        .map(|d| d as f64)
        .collect();
    let n = outcomes.len();
    let false_alarms = outcomes.iter().filter(|o| o.false_alarm).count();
    ThresholdRow {
        h,
        mean_delay: (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64),
        delay_ci: bootstrap_mean_ci(&delays, 0.95, 1000, ci_seed),
        far: false_alarms as f64 / n as f64,
        censored: outcomes.iter().filter(|o| o.alarm_time.is_none()).count(),
        detections: delays.len(),
        n_trials: n,
        outcomes,
    }
}

/// Delay and false-alarm sweep over `thresholds` on streams drawn from `scenario`.
///
/// Deterministic in `master_seed` for any `jobs`.
pub fn run_trials(
    name: &str,
    prepared: &Prepared,
    scenario: &Scenario,
    thresholds: &[f64],
    n_trials: usize,
    jobs: usize,
    master_seed: u64,
) -> Result<EvalReport> {
    scenario.validate()?;
    let matrix = alarm_matrix(prepared, thresholds, n_trials, jobs, |i| {
        Ok(scenario.generate(trial_seed(master_seed, "trial", i))?.0)
    })?;
    let tau = scenario.tau();
    let rows = thresholds
        .iter()
        .zip(&matrix)
        .enumerate()
        .map(|(j, (&h, alarms))| aggregate(h, alarms, tau, trial_seed(master_seed, "bootstrap", j)))
        .collect();
    Ok(EvalReport {
        metadata: EvalMetadata {
            detector: name.to_string(),
            master_seed,
            n_trials,
            tau,
            horizon: scenario.horizon(),
            scenario: scenario.clone(),
        },
        rows,
        roc: Vec::new(),
    })
}

/// Run length under purely nominal data, censored at `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FalseAlarmPeriod {
    #[serde(serialize_with = "ser_h")]
    pub h: f64,
    /// Mean of `min(T, horizon)`; a lower bound on the false alarm period when trials are censored.
    pub mean_run_length: f64,
    pub censored: usize,
    pub n_trials: usize,
}

pub fn false_alarm_period(
    prepared: &Prepared,
    scenario: &Scenario,
    thresholds: &[f64],
    horizon: usize,
    n_trials: usize,
    jobs: usize,
    master_seed: u64,
) -> Result<Vec<FalseAlarmPeriod>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    let matrix = alarm_matrix(prepared, thresholds, n_trials, jobs, |i| {
        scenario.sample_nominal(horizon, trial_seed(master_seed, "null", i))
    })?;
    Ok(thresholds
        .iter()
        .zip(&matrix)
        .map(|(&h, alarms)| FalseAlarmPeriod {
            h,
            mean_run_length: alarms
                .iter()
                .map(|a| a.unwrap_or(horizon as u64) as f64)
                .sum::<f64>()
                / n_trials as f64,
            censored: alarms.iter().filter(|a| a.is_none()).count(),
            n_trials,
        })
        .collect())
}

/// Per-dimension scores of one trial and the ground-truth anomalous flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationTrial {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
}

impl LocalizationTrial {
    pub fn new(scores: Vec<f64>, affected: &[usize]) -> Self {
        let mut truth = vec![false; scores.len()];
        for &i in affected {
            if i < truth.len() {
                truth[i] = true;
            }
        }
        Self { scores, truth }
    }

    /// Dimensions flagged iff `score >= threshold`.
    pub fn confusion(&self, threshold: f64) -> Confusion {
        let flags: Vec<bool> = self.scores.iter().map(|&s| s >= threshold).collect();
        Confusion::from_flags(&flags, &self.truth)
    }
}

/// Pooled ROC over dimensions and trials, one point per threshold.
pub fn roc_points(trials: &[LocalizationTrial], thresholds: &[f64]) -> Vec<RocPoint> {
    roc_labeled(trials, thresholds.iter().map(|&t| (t, t)))
}

fn roc_labeled(
    trials: &[LocalizationTrial],
    ops: impl Iterator<Item = (f64, f64)>,
) -> Vec<RocPoint> {
    ops.map(|(label, threshold)| {
        let mut c = Confusion::default();
        for t in trials {
            c.add(&t.confusion(threshold));
        }
        let (fpr, tpr) = c.rates();
        RocPoint {
            operating_point: label,
            fpr,
            tpr,
        }
    })
    .collect()
}

/// ROC for a grid of t-test levels; each level maps to its Student-t threshold.
pub fn roc_over_betas(
    trials: &[LocalizationTrial],
    betas: &[f64],
    samples: usize,
) -> Result<Vec<RocPoint>> {
    if samples < 2 {
        return Err(Error::InvalidParameter(
            "the t-test needs at least 2 samples".into(),
        ));
    }
    let ops = betas
        .iter()
        .map(|&b| Ok((b, student_t_threshold(b, samples - 1)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(roc_labeled(trials, ops.into_iter()))
}

/// Full empirical ROC with every distinct score as a threshold, from (0, 0) to (1, 1).
pub fn full_roc(trials: &[LocalizationTrial]) -> Vec<RocPoint> {
    let mut scores: Vec<f64> = trials
        .iter()
        .flat_map(|t| t.scores.iter().copied())
        .collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut ops = vec![f64::INFINITY];
    ops.extend(scores.iter().copied().filter(|s| s.is_finite()));
    ops.push(f64::NEG_INFINITY);
    let mut pts = roc_points(trials, &ops);
    // A threshold of +inf still flags +inf scores.
    pts.insert(
        0,
        RocPoint {
            operating_point: f64::INFINITY,
            fpr: 0.0,
            tpr: 0.0,
        },
    );
    pts
}

/// Trapezoidal area under the curve through (0, 0) and (1, 1).
pub fn auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Best TPR among operating points with FPR at most `fpr`.
pub fn tpr_at_fpr(points: &[RocPoint], fpr: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpr <= fpr)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Localization scores from the trials of a scenario that ended in a true detection.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRun {
    pub trials: Vec<LocalizationTrial>,
    /// Trials that alarmed before `tau`, never alarmed, or ended before `S` post-onset samples.
    pub skipped: usize,
}

/// Runs the detector at threshold `h`, localizes after each true detection,
/// and keeps the per-dimension t statistics.
#[allow(clippy::too_many_arguments)]
pub fn localization_trials(
    prepared: &Prepared,
    scenario: &Scenario,
    h: f64,
    config: &LocalizationConfig,
    n_trials: usize,
    jobs: usize,
    master_seed: u64,
) -> Result<LocalizationRun> {
    config.validate()?;
    check_thresholds(&[h], n_trials)?;
    let source = prepared.evidence_source().ok_or_else(|| {
        Error::InvalidParameter("localization needs an ODIT or ODIT-2 model".into())
    })?;
    let results: Vec<Option<LocalizationTrial>> = with_pool(jobs, || {
        (0..n_trials)
            .into_par_iter()
            .map(|i| {
                let (stream, truth) = scenario.generate(trial_seed(master_seed, "trial", i))?;
                localization_trial(prepared, source, &stream, &truth, h, config)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    Ok(LocalizationRun {
        trials: results.into_iter().flatten().collect(),
        skipped,
    })
}

fn localization_trial(
    prepared: &Prepared,
    source: &dyn EvidenceSource<f64>,
    stream: &Dataset<f64>,
    truth: &GroundTruth,
    h: f64,
    config: &LocalizationConfig,
) -> Result<Option<LocalizationTrial>> {
    let opts = RunOptions::new(h).with_contributions(config.samples);
    let state: DetectorState<f64> = run_detector(source, stream.rows(), opts)?;
    match state.alarm_time {
        Some(t) if t >= truth.tau => {}
        _ => return Ok(None),
    }
    let variant = match prepared {
        Prepared::Odit(m) => Variant::Odit(m.as_ref()),
        Prepared::Odit2(m) => Variant::Odit2(m.as_ref()),
        Prepared::Sequential(_) => unreachable!("checked by the caller"),
    };
    match localize(variant, &state, config) {
        Ok(report) => {
            let scores = report.per_dimension.iter().map(|r| r.t_stat).collect();
            Ok(Some(LocalizationTrial::new(scores, &truth.affected)))
        }
        Err(Error::InsufficientLocalizationSamples { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Wall-clock cost of one evidence computation plus statistic update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingResult {
    pub backend: Backend,
    pub n2: usize,
    pub d: usize,
    pub n_queries: usize,
    pub build_seconds: f64,
    pub per_sample_seconds: f64,
}

/// Mean seconds per sample over `queries`, after `warmup` untimed samples.
pub fn time_per_sample(
    source: &dyn EvidenceSource<f64>,
    queries: &Dataset<f64>,
    warmup: usize,
) -> Result<f64> {
    let mut state = DetectorState::new();
    for x in queries.rows().take(warmup) {
        std::hint::black_box(source.evidence(x, false)?);
    }
    let timed = queries.len().saturating_sub(warmup);
    if timed == 0 {
        return Err(Error::InvalidParameter(
            "no queries left after warm-up".into(),
        ));
    }
    let start = Instant::now();
    for (i, x) in queries.rows().skip(warmup).enumerate() {
        let d = source.evidence(x, false)?.value;
        state.update_statistic(i as u64 + 1, d, f64::INFINITY);
    }
    std::hint::black_box(state.statistic);
    Ok(start.elapsed().as_secs_f64() / timed as f64)
}

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Result<Dataset<f64>> {
    let mut rng = rng_from_seed(seed);
    let v = (0..n * d)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Dataset::from_flat("gaussian", Label::Nominal, d, v)
}

/// Trains on `n2` standard Gaussian reference points (plus a small ranking
/// set) and times `n_queries` fresh samples.
pub fn timing_benchmark(
    backend: Backend,
    n2: usize,
    d: usize,
    n_queries: usize,
    seed: u64,
) -> Result<TimingResult> {
    const N1: usize = 200;
    const WARMUP: usize = 10;
    let nominal = gaussian_rows(N1 + n2, d, derive_seed_str(seed, "bench-nominal"))?;
    let config = DetectorConfig {
        partition_ratio: N1 as f64 / (N1 + n2) as f64,
        rng_seed: seed,
        ..DetectorConfig::default()
    };
    let start = Instant::now();
    let model = train_odit_with(&nominal, &config, backend)?;
    let build_seconds = start.elapsed().as_secs_f64();
    let queries = gaussian_rows(
        n_queries + WARMUP,
        d,
        derive_seed_str(seed, "bench-queries"),
    )?;
    Ok(TimingResult {
        backend,
        n2: model.index().len(),
        d,
        n_queries,
        build_seconds,
        per_sample_seconds: time_per_sample(&model, &queries, WARMUP)?,
    })
}

/// Detection delay in seconds: `sample_delay * sampling_period + per_sample_overhead`.
pub fn effective_delay(
    sample_delay: f64,
    sampling_period: f64,
    per_sample_overhead: f64,
) -> Result<f64> {
    if [sample_delay, sampling_period, per_sample_overhead]
        .iter()
        .any(|v| !(*v >= 0.0) || !v.is_finite())
    {
        return Err(Error::InvalidParameter(
            "delay inputs must be finite and non-negative".into(),
        ));
    }
    Ok(sample_delay * sampling_period + per_sample_overhead)
}

/// Whether the detector keeps up with the sampling rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum SamplingRegime {
    RealTime,
    /// Processing one sample spans several periods; the samples arriving meanwhile are skipped.
    Staircase {
        missed_per_sample: u64,
    },
}

pub fn sampling_regime(sampling_period: f64, per_sample_overhead: f64) -> Result<SamplingRegime> {
    if !(sampling_period > 0.0) || !(per_sample_overhead >= 0.0) {
        return Err(Error::InvalidParameter(
            "sampling period must be positive".into(),
        ));
    }
    if per_sample_overhead <= sampling_period {
        return Ok(SamplingRegime::RealTime);
    }
    Ok(SamplingRegime::Staircase {
        missed_per_sample: (per_sample_overhead / sampling_period).ceil() as u64 - 1,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn default_true() -> bool {
    true
}

fn default_shift() -> f64 {
    3.0
}

/// Detector to train for an experiment; training data come from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    Odit {
        #[serde(default)]
        config: DetectorConfig,
        #[serde(default)]
        backend: Backend,
        n_nominal: usize,
    },
    Odit2 {
        #[serde(default)]
        config: DetectorConfig,
        #[serde(default)]
        backend: Backend,
        n_nominal: usize,
        n_anomaly: usize,
        /// Drop anomaly samples inside the nominal borderline before use.
        #[serde(default = "default_true")]
        clean: bool,
        /// Cleaning level; defaults to the nominal model's `alpha`.
        #[serde(default)]
        alpha_clean: Option<f64>,
        /// Draw the known anomalies from this scenario instead of the test one.
        #[serde(default)]
        anomaly_scenario: Option<Scenario>,
    },
    OracleCusum,
    GCusum {
        n_nominal: usize,
        #[serde(default = "default_shift")]
        shift_sigmas: f64,
    },
    InfoMetric {
        n_nominal: usize,
        #[serde(default)]
        window: WindowDetectorConfig,
    },
}

impl DetectorSpec {
    /// Trains the detector. Nominal and anomaly training sets are drawn from
    /// seeds derived from `master_seed`, so specs with equal sizes share data.
    pub fn prepare(&self, scenario: &Scenario, master_seed: u64) -> Result<Prepared> {
        let nominal =
            |n: usize| scenario.sample_nominal(n, derive_seed_str(master_seed, "train-nominal"));
        match self {
            Self::Odit {
                config,
                backend,
                n_nominal,
            } => Ok(Prepared::Odit(Arc::new(train_odit_with(
                &nominal(*n_nominal)?,
                config,
                *backend,
            )?))),
            Self::Odit2 {
                config,
                backend,
                n_nominal,
                n_anomaly,
                clean,
                alpha_clean,
                anomaly_scenario,
            } => {
                let m = Arc::new(train_odit_with(&nominal(*n_nominal)?, config, *backend)?);
                let source = anomaly_scenario.as_ref().unwrap_or(scenario);
                let raw = source
                    .sample_anomalous(*n_anomaly, derive_seed_str(master_seed, "train-anomaly"))?;
                let model = if *clean {
                    Odit2Model::train(m, &raw, *alpha_clean)?
                } else {
                    let mut model = Odit2Model::new(m, raw)?;
                    model.refresh_baseline()?;
                    model
                };
                Ok(Prepared::Odit2(Arc::new(model)))
            }
            Self::OracleCusum => {
                let (f0, f1) = scenario.oracle_models()?;
                let llr = GaussianLlr::new(f0, f1)?;
                Ok(Prepared::sequential(
                    move || -> Box<dyn SequentialDetector<f64>> {
                        Box::new(OracleCusum::new(llr.clone()))
                    },
                ))
            }
            Self::GCusum {
                n_nominal,
                shift_sigmas,
            } => {
                let params = GCusumParams::fit(&nominal(*n_nominal)?, *shift_sigmas)?;
                Ok(Prepared::sequential(
                    move || -> Box<dyn SequentialDetector<f64>> {
                        Box::new(GCusum::new(params.clone()))
                    },
                ))
            }
            Self::InfoMetric { n_nominal, window } => {
                let proto = InfoMetric::fit(&nominal(*n_nominal)?, *window)?;
                Ok(Prepared::sequential(
                    move || -> Box<dyn SequentialDetector<f64>> { Box::new(proto.clone()) },
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDetector {
    pub name: String,
    /// Overrides the experiment's threshold grid.
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    #[serde(flatten)]
    pub spec: DetectorSpec,
}

/// Localization sweep attached to an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSweep {
    /// Detection threshold per detector name; detectors not listed are skipped.
    pub h: std::collections::BTreeMap<String, f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub betas: Vec<f64>,
    pub n_trials: usize,
}

fn default_samples() -> usize {
    2
}

/// Complete evaluation description, as read from an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    pub scenario: Scenario,
    pub detectors: Vec<NamedDetector>,
    pub thresholds: Vec<f64>,
    /// Append `h = inf` to every grid.
    #[serde(default)]
    pub include_infinite: bool,
    pub n_trials: usize,
    /// Also estimate the false alarm period on nominal streams of this length.
    #[serde(default)]
    pub false_alarm_horizon: Option<usize>,
    #[serde(default)]
    pub localization: Option<LocalizationSweep>,
}

/// Results of one detector in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorResult {
    pub report: EvalReport,
    pub false_alarm_period: Option<Vec<FalseAlarmPeriod>>,
    pub localization_trials: usize,
    pub localization_skipped: usize,
}

impl Experiment {
    pub fn from_json(text: &str) -> Result<Self> {
        let exp: Self = serde_json::from_str(text)?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        check_thresholds(&self.thresholds, self.n_trials)?;
        if self.detectors.is_empty() {
            return Err(Error::InvalidParameter(
                "experiment lists no detectors".into(),
            ));
        }
        let mut names: Vec<&str> = self.detectors.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(
                "detector names must be unique".into(),
            ));
        }
        if names.iter().any(|n| {
            n.is_empty()
                || !n
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        }) {
            return Err(Error::InvalidParameter(
                "detector names may only use ASCII letters, digits, '_' and '-'".into(),
            ));
        }
        if let Some(loc) = &self.localization {
            if let Some(unknown) = loc.h.keys().find(|k| !names.contains(&k.as_str())) {
                return Err(Error::InvalidParameter(format!(
                    "localization refers to unknown detector {unknown:?}"
                )));
            }
        }
        Ok(())
    }

    fn grid_for(&self, d: &NamedDetector) -> Vec<f64> {
        let mut grid = d
            .thresholds
            .clone()
            .unwrap_or_else(|| self.thresholds.clone());
        if self.include_infinite {
            grid.push(f64::INFINITY);
        }
        grid
    }

    /// Trains and evaluates every detector on common streams.
    pub fn run(&self, master_seed: u64, jobs: usize) -> Result<Vec<DetectorResult>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.detectors.len());
        for d in &self.detectors {
            let prepared = d.spec.prepare(&self.scenario, master_seed)?;
            let grid = self.grid_for(d);
            let mut report = run_trials(
                &d.name,
                &prepared,
                &self.scenario,
                &grid,
                self.n_trials,
                jobs,
                master_seed,
            )?;
            let false_alarm_period = self
                .false_alarm_horizon
                .map(|hz| {
                    false_alarm_period(
                        &prepared,
                        &self.scenario,
                        &grid,
                        hz,
                        self.n_trials,
                        jobs,
                        master_seed,
                    )
                })
                .transpose()?;
            let (mut used, mut skipped) = (0, 0);
            if let Some((loc, &h)) = self
                .localization
                .as_ref()
                .and_then(|l| l.h.get(&d.name).map(|h| (l, h)))
            {
                let cfg = LocalizationConfig {
                    samples: loc.samples,
                    beta: loc.betas.first().copied().unwrap_or(0.05),
                };
                let run = localization_trials(
                    &prepared,
                    &self.scenario,
                    h,
                    &cfg,
                    loc.n_trials,
                    jobs,
                    master_seed,
                )?;
                report.roc = roc_over_betas(&run.trials, &loc.betas, loc.samples)?;
                used = run.trials.len();
                skipped = run.skipped;
            }
            out.push(DetectorResult {
                report,
                false_alarm_period,
                localization_trials: used,
                localization_skipped: skipped,
            });
        }
        Ok(out)
    }
}

/// Writes `<name>_<detector>.csv`, `<name>_<detector>_roc.csv` (when
/// localized) and `<name>.json` into `dir`; returns the paths written.
pub fn write_experiment_outputs(
    exp: &Experiment,
    results: &[DetectorResult],
    master_seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in results {
        let stem = format!("{}_{}", exp.name, r.report.metadata.detector);
        let path = dir.join(format!("{stem}.csv"));
        r.report.write_csv(std::fs::File::create(&path)?)?;
        written.push(path);
        if !r.report.roc.is_empty() {
            let path = dir.join(format!("{stem}_roc.csv"));
            r.report.write_roc_csv(std::fs::File::create(&path)?)?;
            written.push(path);
        }
    }
    let meta = serde_json::json!({
        "experiment": exp,
        "master_seed": master_seed,
        "results": results,
    });
    let path = dir.join(format!("{}.json", exp.name));
    let mut f = std::fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::MeanShiftScenario;

    struct Constant(f64);

    impl SequentialDetector<f64> for Constant {
        fn dim(&self) -> usize {
            1
        }

        fn step(&mut self, _: &[f64]) -> Result<f64> {
            Ok(self.0)
        }

        fn reset(&mut self) {}
    }

    fn shift_scenario(shift: f64) -> Scenario {
        Scenario::MeanShift(MeanShiftScenario::leading(4, 0.5, shift, 20, 60))
    }

    #[test]
    fn outcome_kinds_are_exclusive() {
        let cases = [
            (None, OutcomeKind::NoAlarm),
            (Some(5), OutcomeKind::FalseAlarm),
            (Some(20), OutcomeKind::Detection),
        ];
        for (alarm, kind) in cases {
            let o = TrialOutcome::new(alarm, 20);
            assert_eq!(o.kind(), kind);
            assert_eq!(o.detection_delay.is_some(), kind == OutcomeKind::Detection);
        }
        assert_eq!(TrialOutcome::new(Some(27), 20).detection_delay, Some(7));
    }

    #[test]
    fn huge_evidence_gives_zero_delay() {
        let sc = shift_scenario(50.0);
        let prepared = DetectorSpec::OracleCusum.prepare(&sc, 1).unwrap();
        let r = run_trials("oracle", &prepared, &sc, &[5.0], 30, 1, 1).unwrap();
        assert_eq!(r.rows[0].mean_delay, Some(0.0));
        assert_eq!(r.rows[0].far, 0.0);
    }

    #[test]
    fn infinite_threshold_censors_everything() {
        let sc = shift_scenario(2.0);
        let prepared = DetectorSpec::OracleCusum.prepare(&sc, 1).unwrap();
        let r = run_trials("oracle", &prepared, &sc, &[f64::INFINITY], 10, 1, 1).unwrap();
        let row = &r.rows[0];
        assert_eq!((row.far, row.censored, row.mean_delay), (0.0, 10, None));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "h,mean_delay,far,censored,n_trials\ninf,,0,10,10\n"
        );
    }

    #[test]
    fn frontier_is_monotone_in_h() {
        let sc = shift_scenario(1.0);
        let prepared = DetectorSpec::OracleCusum.prepare(&sc, 3).unwrap();
        let grid = geometric_thresholds(0.5, 20.0, 8).unwrap();
        let r = run_trials("oracle", &prepared, &sc, &grid, 100, 2, 3).unwrap();
        for w in r.rows.windows(2) {
            assert!(w[1].far <= w[0].far);
            assert!(w[1].censored >= w[0].censored);
        }
    }

    #[test]
    fn reports_do_not_depend_on_jobs() {
        let sc = shift_scenario(1.0);
        let prepared = DetectorSpec::GCusum {
            n_nominal: 500,
            shift_sigmas: 3.0,
        }
        .prepare(&sc, 9)
        .unwrap();
        let grid = [1.0, 4.0, 16.0];
        let a = run_trials("g", &prepared, &sc, &grid, 40, 1, 9).unwrap();
        let b = run_trials("g", &prepared, &sc, &grid, 40, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_passage_and_early_stop() {
        let mut det = Constant(2.0);
        let stream = Dataset::from_flat("s", Label::Nominal, 1, vec![0.0; 10]).unwrap();
        let path = statistic_path(&mut det, &stream, 1.0).unwrap();
        assert_eq!(path.len(), 1);
        assert_eq!(first_passage(&[0.0, 1.0, 3.0], 2.0), Some(3));
        assert_eq!(first_passage(&[0.0, 1.0], 2.0), None);
    }

    #[test]
    fn perfect_separation_has_unit_auc() {
        let trials: Vec<LocalizationTrial> = (0..5)
            .map(|i| LocalizationTrial::new(vec![10.0 + i as f64, 9.0, -1.0, 0.5], &[0, 1]))
            .collect();
        let roc = full_roc(&trials);
        assert!((auc(&roc) - 1.0).abs() < 1e-12);
        assert_eq!(tpr_at_fpr(&roc, 0.0), 1.0);
    }

    #[test]
    fn random_scores_follow_the_diagonal() {
        let mut rng = rng_from_seed(4);
        let trials: Vec<LocalizationTrial> = (0..400)
            .map(|_| {
                LocalizationTrial::new((0..10).map(|_| rng.gen::<f64>()).collect(), &[0, 1, 2])
            })
            .collect();
        let roc = roc_points(&trials, &[0.2, 0.5, 0.8]);
        for p in &roc {
            assert!((p.tpr - p.fpr).abs() < 0.05, "{p:?}");
        }
        assert!((auc(&full_roc(&trials)) - 0.5).abs() < 0.03);
    }

    #[test]
    fn confusion_rates() {
        let c = Confusion::from_flags(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(c.rates(), (0.5, 0.5));
    }

    #[test]
    fn effective_delay_arithmetic() {
        assert!((effective_delay(0.0, 1.0, 0.0054).unwrap() - 0.0054).abs() < 1e-15);
        assert!((effective_delay(2.0, 0.01, 0.0054).unwrap() - 0.0254).abs() < 1e-15);
        assert!(effective_delay(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn slow_detector_enters_staircase_regime() {
        assert_eq!(
            sampling_regime(0.01, 0.005).unwrap(),
            SamplingRegime::RealTime
        );
        assert_eq!(
            sampling_regime(0.01, 0.075).unwrap(),
            SamplingRegime::Staircase {
                missed_per_sample: 7
            }
        );
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_thresholds(1.0, 1000.0, 4).unwrap();
        assert_eq!(g[0], 1.0);
        assert_eq!(g[3], 1000.0);
        assert!((g[1] - 10.0).abs() < 1e-9 && (g[2] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_matches_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn bootstrap_interval_brackets_mean() {
        let v: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let (lo, hi) = bootstrap_mean_ci(&v, 0.95, 500, 1).unwrap();
        assert!(lo < 24.5 && 24.5 < hi);
    }

    #[test]
    fn shifted_dimension_has_the_largest_t_statistic() {
        let sc = Scenario::MeanShift(MeanShiftScenario {
            d: 10,
            shift_sigmas: 5.0,
            affected: vec![2],
            change_time_tau: 10,
            horizon: 60,
        });
        let config = DetectorConfig {
            k: 5,
            ..DetectorConfig::default()
        };
        let prepared = DetectorSpec::Odit {
            config,
            backend: Backend::Exact,
            n_nominal: 5000,
        }
        .prepare(&sc, 5)
        .unwrap();
        let cfg = LocalizationConfig {
            samples: 10,
            beta: 0.05,
        };
        let run = localization_trials(&prepared, &sc, 15.0, &cfg, 60, 2, 5).unwrap();
        assert!(run.trials.len() >= 50);
        let top = run
            .trials
            .iter()
            .filter(|t| (0..10).all(|i| i == 2 || t.scores[i] < t.scores[2]))
            .count();
        assert!(
            top as f64 >= 0.9 * run.trials.len() as f64,
            "{top} of {}",
            run.trials.len()
        );
        let roc = roc_over_betas(&run.trials, &[0.05], 10).unwrap();
        assert_eq!(roc[0].tpr, 1.0);
    }

    #[test]
    fn experiment_round_trip_and_validation() {
        let text = r#"{
            "name": "smoke",
            "scenario": {"type": "mean_shift", "d": 3, "shift_sigmas": 3.0, "affected": [0], "change_time_tau": 10, "horizon": 30},
            "detectors": [
                {"name": "odit", "kind": "odit", "n_nominal": 500},
                {"name": "gcusum", "kind": "g_cusum", "n_nominal": 500, "thresholds": [2.0]},
                {"name": "oracle", "kind": "oracle_cusum"}
            ],
            "thresholds": [1.0, 5.0],
            "include_infinite": true,
            "n_trials": 5,
            "false_alarm_horizon": 50
        }"#;
        let exp = Experiment::from_json(text).unwrap();
        let results = exp.run(2, 1).unwrap();
        assert_eq!(results.len(), 3);
        assert_eq!(results[0].report.rows.len(), 3);
        assert_eq!(results[1].report.rows.len(), 2);
        assert!(results[0].false_alarm_period.is_some());
        let dir = tempfile::tempdir().unwrap();
        let paths = write_experiment_outputs(&exp, &results, 2, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);

        let dup = text.replace("\"name\": \"gcusum\"", "\"name\": \"odit\"");
        assert!(Experiment::from_json(&dup).is_err());
    }
}
