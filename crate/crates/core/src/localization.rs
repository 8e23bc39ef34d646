//! Post-alarm localization of anomalous dimensions.
//!
//! Each sample after the onset estimate contributes a per-dimension squared
//! gap to its nearest neighbors. Dimensions whose mean contribution is
//! significantly above the nominal mean (one-sided t-test) are flagged.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::detectors::{DetectorState, Odit2Model, TrainedModel};
use crate::error::{Error, Result};
use crate::knn::NeighborResult;
use crate::scalar::{to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationConfig {
    /// Number of samples after the onset estimate.
    pub samples: usize,
    /// Significance level of the one-sided test.
    pub beta: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            samples: 2,
            beta: 0.05,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::InvalidParameter(format!(
                "localization needs S >= 2 samples, got {}",
                self.samples
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta = {} must lie in (0, 1)",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Per-dimension squared gaps carried by a neighbor query.
pub fn contribution_decompose<T: Scalar>(neighbors: &NeighborResult<T>) -> Result<Vec<T>> {
    neighbors
        .per_dimension_sq
        .clone()
        .ok_or(Error::MissingDecomposition)
}

/// Upper `beta` quantile of Student's t with `dof` degrees of freedom.
pub fn student_t_threshold(beta: f64, dof: usize) -> Result<f64> {
    if dof < 1 {
        return Err(Error::InvalidParameter(
            "degrees of freedom must be at least 1".into(),
        ));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta = {beta} must lie in (0, 1)"
        )));
    }
    let p = 1.0 - beta;
    if p == 0.5 {
        return Ok(0.0);
    }
    let dist =
        StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while dist.cdf(lo) > p {
        lo *= 2.0;
    }
    while dist.cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionResult {
    pub dimension: usize,
    pub t_stat: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    pub per_dimension: Vec<DimensionResult>,
    pub tau_hat: u64,
    pub mu_baseline: Vec<f64>,
    pub threshold: f64,
    pub config: LocalizationConfig,
    /// Contributions of the `S` samples used, one row per sample.
    pub samples: Vec<Vec<f64>>,
}

impl LocalizationReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.per_dimension
            .iter()
            .filter(|r| r.flagged)
            .map(|r| r.dimension)
            .collect()
    }

    /// Writes `dimension,t_stat,flagged`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["dimension", "t_stat", "flagged"])?;
        for r in &self.per_dimension {
            wtr.write_record([
                r.dimension.to_string(),
                r.t_stat.to_string(),
                u8::from(r.flagged).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Which baseline a localization run compares against.
#[derive(Debug, Clone, Copy)]
pub enum Variant<'a, T> {
    Odit(&'a TrainedModel<T>),
    Odit2(&'a Odit2Model<T>),
}

/// One-sided t statistic of `samples` against `mu`; infinite when the spread is zero.
pub fn t_statistic(samples: &[f64], mu: f64) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return if mean > mu {
            f64::INFINITY
        } else if mean < mu {
            f64::NEG_INFINITY
        } else {
            0.0
        };
    }
    (mean - mu) / (sd / n.sqrt())
}

/// Tests each column of `samples` against `mu` at the given threshold.
pub fn t_test_columns(samples: &[Vec<f64>], mu: &[f64], threshold: f64) -> Vec<DimensionResult> {
    (0..mu.len())
        .map(|i| {
            let col: Vec<f64> = samples.iter().map(|r| r[i]).collect();
            let t_stat = t_statistic(&col, mu[i]);
            DimensionResult {
                dimension: i,
                t_stat,
                flagged: t_stat >= threshold,
            }
        })
        .collect()
}

/// Localizes from contributions already gathered and an explicit baseline.
pub fn localize_samples<T: Scalar>(
    samples: &[&[T]],
    baseline: &[T],
    tau_hat: u64,
    config: &LocalizationConfig,
) -> Result<LocalizationReport> {
    config.validate()?;
    if samples.len() < config.samples {
        return Err(Error::InsufficientLocalizationSamples {
            needed: config.samples,
            available: samples.len(),
        });
    }
    let samples: Vec<Vec<f64>> = samples[..config.samples]
        .iter()
        .map(|r| {
            if r.len() != baseline.len() {
                return Err(Error::DimensionMismatch {
                    expected: baseline.len(),
                    found: r.len(),
                });
            }
            Ok(r.iter().map(|&v| to_f64(v)).collect())
        })
        .collect::<Result<_>>()?;
    let mu: Vec<f64> = baseline.iter().map(|&v| to_f64(v)).collect();
    let threshold = student_t_threshold(config.beta, config.samples - 1)?;
    Ok(LocalizationReport {
        per_dimension: t_test_columns(&samples, &mu, threshold),
        tau_hat,
        mu_baseline: mu,
        threshold,
        config: *config,
        samples,
    })
}

/// Flags dimensions from the `S` logged samples following the onset estimate.
pub fn localize<T: Scalar>(
    variant: Variant<'_, T>,
    state: &DetectorState<T>,
    config: &LocalizationConfig,
) -> Result<LocalizationReport> {
    let tau_hat = state.tau_hat().ok_or(Error::NoAlarm)?;
    let baseline = match variant {
        Variant::Odit(m) => m.contribution_baseline(),
        Variant::Odit2(m) => m.contribution_baseline()?,
    };
    let samples = state.contributions_after(tau_hat, config.samples);
    localize_samples(&samples, baseline, tau_hat, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group_id: usize,
    pub dimensions: Range<usize>,
    pub t_stat: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub groups: Vec<GroupResult>,
    pub tau_hat: u64,
    pub threshold: f64,
}

impl GroupReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.flagged)
            .map(|g| g.group_id)
            .collect()
    }

    /// Writes `group_id,dimension,t_stat,flagged`; `dimension` is the member range.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["group_id", "dimension", "t_stat", "flagged"])?;
        for g in &self.groups {
            wtr.write_record([
                g.group_id.to_string(),
                format!("{}-{}", g.dimensions.start, g.dimensions.end - 1),
                g.t_stat.to_string(),
                u8::from(g.flagged).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Contiguous equal-width groups, e.g. one per device.
pub fn uniform_groups(d: usize, width: usize) -> Vec<Range<usize>> {
    (0..d)
        .step_by(width.max(1))
        .map(|s| s..(s + width).min(d))
        .collect()
}

/// Re-runs the test on group sums of contributions and baselines.
pub fn aggregate_dimensions(
    report: &LocalizationReport,
    groups: &[Range<usize>],
) -> Result<GroupReport> {
    let d = report.mu_baseline.len();
    let mut sorted: Vec<&Range<usize>> = groups.iter().collect();
    sorted.sort_by_key(|g| g.start);
    let mut next = 0;
    for g in &sorted {
        if g.start != next || g.end <= g.start {
            return Err(Error::InvalidGroups(format!(
                "groups must partition 0..{d} without gaps or overlaps (at {next})"
            )));
        }
        next = g.end;
    }
    if next != d {
        return Err(Error::InvalidGroups(format!(
            "groups cover 0..{next}, expected 0..{d}"
        )));
    }
    let groups = groups
        .iter()
        .enumerate()
        .map(|(group_id, g)| {
            let col: Vec<f64> = report
                .samples
                .iter()
                .map(|r| r[g.clone()].iter().sum())
                .collect();
            let mu: f64 = report.mu_baseline[g.clone()].iter().sum();
            let t_stat = t_statistic(&col, mu);
            GroupResult {
                group_id,
                dimensions: g.clone(),
                t_stat,
                flagged: t_stat >= report.threshold,
            }
        })
        .collect();
    Ok(GroupReport {
        groups,
        tau_hat: report.tau_hat,
        threshold: report.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Label};
    use crate::knn::exact_knn;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Bisection on the closed-form CDF for two degrees of freedom.
    fn t2_oracle(p: f64) -> f64 {
        let cdf = |t: f64| 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if cdf(m) < p {
                lo = m;
            } else {
                hi = m;
            }
        }
        lo
    }

    #[test]
    fn thresholds_match_reference_values() {
        assert!((student_t_threshold(0.05, 1).unwrap() - 6.314).abs() < 1e-3);
        let t2 = student_t_threshold(0.05, 2).unwrap();
        assert!((t2 - t2_oracle(0.95)).abs() < 1e-9);
        assert!((t2 - 2.920).abs() < 1e-3);
        assert_eq!(student_t_threshold(0.5, 7).unwrap(), 0.0);
        assert!(student_t_threshold(0.05, 0).is_err());
        // One degree of freedom is Cauchy: tan(pi (p - 1/2)).
        let cauchy = (std::f64::consts::PI * 0.45).tan();
        assert!((student_t_threshold(0.05, 1).unwrap() - cauchy).abs() < 1e-9);
    }

    #[test]
    fn thresholds_decrease_in_dof_and_beta() {
        let mut prev = f64::INFINITY;
        for dof in 1..30 {
            let t = student_t_threshold(0.05, dof).unwrap();
            assert!(t < prev);
            prev = t;
        }
        let mut prev = f64::INFINITY;
        for b in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let t = student_t_threshold(b, 3).unwrap();
            assert!(t < prev);
            prev = t;
        }
    }

    #[test]
    fn decomposition_examples() {
        let r = Dataset::from_flat("r", Label::Nominal, 2, vec![0.0, 0.0]).unwrap();
        let nb = exact_knn(&[1.0, 0.0], &r, 1, Some(1), None).unwrap();
        assert_eq!(contribution_decompose(&nb).unwrap(), vec![1.0, 0.0]);
        let nb = exact_knn(&[0.0, 0.0], &r, 1, Some(1), None).unwrap();
        assert_eq!(contribution_decompose(&nb).unwrap(), vec![0.0, 0.0]);
        let nb = exact_knn(&[0.0, 0.0], &r, 1, None, None).unwrap();
        assert!(matches!(
            contribution_decompose(&nb),
            Err(Error::MissingDecomposition)
        ));
    }

    #[test]
    fn zero_spread_flags_by_sign() {
        let a = [2.0, 2.0];
        let b = [1.0, 1.0];
        let rows: Vec<&[f64]> = vec![&a, &b];
        let rep = localize_samples(&rows, &[0.5, 1.5], 0, &LocalizationConfig::default()).unwrap();
        assert!((rep.per_dimension[0].t_stat - 2.0).abs() < 1e-12);
        let same = [1.0, 3.0];
        let rows: Vec<&[f64]> = vec![&same, &same];
        let rep = localize_samples(&rows, &[0.5, 3.5], 0, &LocalizationConfig::default()).unwrap();
        assert_eq!(rep.per_dimension[0].t_stat, f64::INFINITY);
        assert_eq!(rep.per_dimension[1].t_stat, f64::NEG_INFINITY);
        assert_eq!(rep.flagged(), vec![0]);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let a = [1.0];
        let rows: Vec<&[f64]> = vec![&a];
        let err = localize_samples(&rows, &[0.0], 0, &LocalizationConfig::default()).unwrap_err();
        assert!(err
            .to_string()
            .contains("extend observation before localizing"));
    }

    #[test]
    fn null_calibration() {
        let mut rng = rng_from_seed(3);
        let cfg = LocalizationConfig {
            samples: 2,
            beta: 0.05,
        };
        let (mut flagged, mut total) = (0usize, 0usize);
        for _ in 0..4000 {
            let a: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let rows: Vec<&[f64]> = vec![&a, &b];
            let rep = localize_samples(&rows, &[0.0; 5], 0, &cfg).unwrap();
            flagged += rep.flagged().len();
            total += 5;
        }
        let rate = flagged as f64 / total as f64;
        assert!((rate - 0.05).abs() <= 0.02, "false flag rate {rate}");
    }

    #[test]
    fn singleton_groups_reproduce_dimensions() {
        let a = [1.0, 4.0, 0.2];
        let b = [1.5, 4.4, 0.1];
        let rows: Vec<&[f64]> = vec![&a, &b];
        let rep =
            localize_samples(&rows, &[0.5, 0.5, 0.5], 0, &LocalizationConfig::default()).unwrap();
        let g = aggregate_dimensions(&rep, &uniform_groups(3, 1)).unwrap();
        for (x, y) in rep.per_dimension.iter().zip(&g.groups) {
            assert_eq!((x.t_stat, x.flagged), (y.t_stat, y.flagged));
        }
    }

    #[test]
    fn groups_must_partition() {
        let a = [1.0; 4];
        let rows: Vec<&[f64]> = vec![&a, &a];
        let rep = localize_samples(&rows, &[0.0; 4], 0, &LocalizationConfig::default()).unwrap();
        assert!(aggregate_dimensions(&rep, &[0..2, 1..4]).is_err());
        assert!(aggregate_dimensions(&rep, std::slice::from_ref(&(0..2))).is_err());
        assert_eq!(
            aggregate_dimensions(&rep, &[2..4, 0..2])
                .unwrap()
                .groups
                .len(),
            2
        );
        assert_eq!(uniform_groups(1035, 115).len(), 9);
    }

    #[test]
    fn report_csv_header() {
        let a = [1.0, 2.0];
        let rows: Vec<&[f64]> = vec![&a, &a];
        let rep = localize_samples(&rows, &[0.0, 3.0], 0, &LocalizationConfig::default()).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "dimension,t_stat,flagged\n0,inf,1\n1,-inf,0\n"
        );
    }
}
