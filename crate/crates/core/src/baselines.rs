//! Comparison detectors: oracle CUSUM, independent-stream CUSUM, a windowed
//! Rényi-divergence detector and a per-node rate filter.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detectors::{Evidence, EvidenceSource, SequentialDetector};
use crate::error::{Error, Result};
use crate::scalar::{cast, to_f64, Scalar};

/// Multivariate Gaussian with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianModel {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        let sym_err = (&covariance - covariance.transpose()).abs().max();
        if sym_err > 1e-9 * covariance.abs().max().max(1.0) {
            return Err(Error::InvalidParameter(
                "covariance is not symmetric".into(),
            ));
        }
        let chol = Cholesky::new(covariance.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    /// Diagonal covariance from per-stream variances.
    pub fn independent(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        if let Some(stream) = variances.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::ZeroVariance { stream });
        }
        Self::new(
            mean,
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    /// Sample mean and covariance of a dataset.
    pub fn fit<T: Scalar>(data: &Dataset<T>) -> Result<Self> {
        let (mean, cov) = sample_moments(data);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(self.log_norm - 0.5 * z.norm_squared())
    }
}

fn sample_moments<T: Scalar>(data: &Dataset<T>) -> (Vec<f64>, DMatrix<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for r in data.rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += to_f64(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::zeros(d, d);
    for r in data.rows() {
        let c = DVector::from_iterator(d, r.iter().zip(&mean).map(|(&v, m)| to_f64(v) - m));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1.0).max(1.0);
    (mean, cov)
}

/// Per-stream sample mean and variance.
pub fn stream_moments<T: Scalar>(data: &Dataset<T>) -> (Vec<f64>, Vec<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for r in data.rows() {
        for i in 0..d {
            mean[i] += to_f64(r[i]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for r in data.rows() {
        for i in 0..d {
            let c = to_f64(r[i]) - mean[i];
            sq[i] += c * c;
        }
    }
    let var = sq.iter().map(|s| s / (n - 1.0).max(1.0)).collect();
    (mean, var)
}

/// One CUSUM step `max(0, S + ln f1(x) - ln f0(x))`.
pub fn cusum_step(state: f64, x: &[f64], f0: &GaussianModel, f1: &GaussianModel) -> Result<f64> {
    Ok((state + f1.log_density(x)? - f0.log_density(x)?).max(0.0))
}

/// Exact log-likelihood ratio between two known Gaussians.
#[derive(Debug, Clone)]
pub struct GaussianLlr {
    pub f0: GaussianModel,
    pub f1: GaussianModel,
}

impl GaussianLlr {
    pub fn new(f0: GaussianModel, f1: GaussianModel) -> Result<Self> {
        if f0.dim() != f1.dim() {
            return Err(Error::DimensionMismatch {
                expected: f0.dim(),
                found: f1.dim(),
            });
        }
        Ok(Self { f0, f1 })
    }

    pub fn llr(&self, x: &[f64]) -> Result<f64> {
        Ok(self.f1.log_density(x)? - self.f0.log_density(x)?)
    }
}

impl<T: Scalar> EvidenceSource<T> for GaussianLlr {
    fn dim(&self) -> usize {
        self.f0.dim()
    }

    fn evidence(&self, x: &[T], _with_contributions: bool) -> Result<Evidence<T>> {
        let x: Vec<f64> = x.iter().map(|&v| to_f64(v)).collect();
        Ok(Evidence {
            value: cast(self.llr(&x)?),
            contributions: None,
        })
    }
}

/// Oracle CUSUM: the optimal test when both distributions are known.
pub type OracleCusum = crate::detectors::CusumDetector<GaussianLlr>;

/// Per-stream nominal parameters and the assumed post-change shift in units of sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCusumParams {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub shift_sigmas: f64,
}

impl GCusumParams {
    pub fn new(mean: Vec<f64>, variances: &[f64], shift_sigmas: f64) -> Result<Self> {
        if let Some(stream) = variances.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::ZeroVariance { stream });
        }
        if mean.len() != variances.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: variances.len(),
            });
        }
        Ok(Self {
            mean,
            sd: variances.iter().map(|v| v.sqrt()).collect(),
            shift_sigmas,
        })
    }

    pub fn fit<T: Scalar>(data: &Dataset<T>, shift_sigmas: f64) -> Result<Self> {
        let (mean, var) = stream_moments(data);
        Self::new(mean, &var, shift_sigmas)
    }

    /// Log-likelihood ratio of N(mu + shift sigma, sigma^2) against N(mu, sigma^2).
    #[inline]
    pub fn increment(&self, i: usize, x: f64) -> f64 {
        let z = (x - self.mean[i]) / self.sd[i];
        let a = self.shift_sigmas;
        a * z - 0.5 * a * a
    }
}

/// Updates every per-stream CUSUM and returns their sum.
pub fn gcusum_step(states: &mut [f64], x: &[f64], params: &GCusumParams) -> Result<f64> {
    if x.len() != states.len() || x.len() != params.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: params.mean.len(),
            found: x.len(),
        });
    }
    let mut sum = 0.0;
    for (i, s) in states.iter_mut().enumerate() {
        *s = (*s + params.increment(i, x[i])).max(0.0);
        sum += *s;
    }
    Ok(sum)
}

/// Independent-stream CUSUM with a summed global statistic.
#[derive(Debug, Clone)]
pub struct GCusum {
    params: GCusumParams,
    states: Vec<f64>,
}

impl GCusum {
    pub fn new(params: GCusumParams) -> Self {
        let d = params.mean.len();
        Self {
            params,
            states: vec![0.0; d],
        }
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }
}

impl<T: Scalar> SequentialDetector<T> for GCusum {
    fn dim(&self) -> usize {
        self.states.len()
    }

    fn step(&mut self, x: &[T]) -> Result<T> {
        let x: Vec<f64> = x.iter().map(|&v| to_f64(v)).collect();
        Ok(cast(gcusum_step(&mut self.states, &x, &self.params)?))
    }

    fn reset(&mut self) {
        self.states.iter_mut().for_each(|s| *s = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowDetectorConfig {
    pub window: usize,
    pub renyi_alpha: f64,
    /// Bins span `0..=ceil(mu + support_sigmas * sigma)` per stream.
    pub support_sigmas: f64,
}

impl Default for WindowDetectorConfig {
    fn default() -> Self {
        Self {
            window: 5,
            renyi_alpha: 0.5,
            support_sigmas: 10.0,
        }
    }
}

impl WindowDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidParameter(
                "window W must be at least 2".into(),
            ));
        }
        if !(self.renyi_alpha > 0.0) || self.renyi_alpha == 1.0 {
            return Err(Error::InvalidParameter(format!(
                "renyi_alpha = {} must be positive and differ from 1",
                self.renyi_alpha
            )));
        }
        if !(self.support_sigmas > 0.0) {
            return Err(Error::InvalidParameter(
                "support_sigmas must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-masses so they sum to one.
fn normalize_log(v: &mut [f64]) {
    let z = log_sum_exp(v.iter().copied());
    v.iter_mut().for_each(|x| *x -= z);
}

/// `D_alpha(P || Q)` for distributions given as log-masses on a shared support.
pub fn renyi_divergence(log_p: &[f64], log_q: &[f64], alpha: f64) -> f64 {
    let terms = log_p.iter().zip(log_q).map(|(&p, &q)| {
        if p == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            alpha * p + (1.0 - alpha) * q
        }
    });
    (log_sum_exp(terms) / (alpha - 1.0)).max(0.0)
}

/// `D_alpha(P || Q) + D_alpha(Q || P)`.
pub fn symmetric_renyi(log_p: &[f64], log_q: &[f64], alpha: f64) -> f64 {
    renyi_divergence(log_p, log_q, alpha) + renyi_divergence(log_q, log_p, alpha)
}

/// Training Gaussian of one stream discretized on its integer support.
#[derive(Debug, Clone)]
struct StreamModel {
    log_q: Vec<f64>,
    log_factorial: Vec<f64>,
}

impl StreamModel {
    fn new(mean: f64, var: f64, support_sigmas: f64) -> Self {
        let sd = var.sqrt();
        let top = (mean + support_sigmas * sd).ceil().max(1.0) as usize;
        let mut log_q: Vec<f64> = (0..=top)
            .map(|j| {
                let z = (j as f64 - mean) / sd;
                -0.5 * z * z
            })
            .collect();
        normalize_log(&mut log_q);
        let mut log_factorial = Vec::with_capacity(top + 1);
        let mut acc = 0.0;
        for j in 0..=top {
            if j > 0 {
                acc += (j as f64).ln();
            }
            log_factorial.push(acc);
        }
        Self {
            log_q,
            log_factorial,
        }
    }

    fn poisson_log_masses(&self, rate: f64) -> Vec<f64> {
        let ln_rate = rate.ln();
        let mut p: Vec<f64> = self
            .log_factorial
            .iter()
            .enumerate()
            .map(|(j, lf)| j as f64 * ln_rate - rate - lf)
            .collect();
        normalize_log(&mut p);
        p
    }
}

/// One information-metric evaluation over a full window.
pub fn info_metric_step<T: Scalar>(
    mean: &[f64],
    var: &[f64],
    window: &[&[T]],
    config: &WindowDetectorConfig,
) -> Result<f64> {
    let models: Vec<StreamModel> = mean
        .iter()
        .zip(var)
        .map(|(&m, &v)| StreamModel::new(m, v, config.support_sigmas))
        .collect();
    window_statistic(
        &models,
        window
            .iter()
            .map(|r| r.iter().map(|&v| to_f64(v)).collect())
            .collect(),
        config,
    )
}

fn window_statistic(
    models: &[StreamModel],
    window: Vec<Vec<f64>>,
    config: &WindowDetectorConfig,
) -> Result<f64> {
    let w = window.len() as f64;
    let mut total = 0.0;
    for (i, model) in models.iter().enumerate() {
        let rate = window.iter().map(|r| r[i]).sum::<f64>() / w;
        if !(rate > 0.0) {
            return Err(Error::NonPositiveRate {
                stream: i,
                mean: rate,
            });
        }
        let log_p = model.poisson_log_masses(rate);
        total += symmetric_renyi(&log_p, &model.log_q, config.renyi_alpha);
    }
    Ok(total)
}

/// Sliding-window Rényi detector summed over streams; zero until the window fills.
#[derive(Debug, Clone)]
pub struct InfoMetric {
    config: WindowDetectorConfig,
    models: Vec<StreamModel>,
    window: VecDeque<Vec<f64>>,
}

impl InfoMetric {
    pub fn new(mean: &[f64], var: &[f64], config: WindowDetectorConfig) -> Result<Self> {
        config.validate()?;
        if let Some(stream) = var.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::ZeroVariance { stream });
        }
        Ok(Self {
            config,
            models: mean
                .iter()
                .zip(var)
                .map(|(&m, &v)| StreamModel::new(m, v, config.support_sigmas))
                .collect(),
            window: VecDeque::with_capacity(config.window),
        })
    }

    pub fn fit<T: Scalar>(data: &Dataset<T>, config: WindowDetectorConfig) -> Result<Self> {
        let (mean, var) = stream_moments(data);
        Self::new(&mean, &var, config)
    }
}

impl<T: Scalar> SequentialDetector<T> for InfoMetric {
    fn dim(&self) -> usize {
        self.models.len()
    }

    fn step(&mut self, x: &[T]) -> Result<T> {
        if x.len() != self.models.len() {
            return Err(Error::DimensionMismatch {
                expected: self.models.len(),
                found: x.len(),
            });
        }
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window
            .push_back(x.iter().map(|&v| to_f64(v)).collect());
        if self.window.len() < self.config.window {
            return Ok(T::zero());
        }
        let w: Vec<Vec<f64>> = self.window.iter().cloned().collect();
        Ok(cast(window_statistic(&self.models, w, &self.config)?))
    }

    fn reset(&mut self) {
        self.window.clear();
    }
}

/// Flags node `i` iff `x_i > threshold_i`.
pub fn data_filter(x: &[f64], thresholds: &[f64]) -> Vec<bool> {
    x.iter().zip(thresholds).map(|(v, t)| v > t).collect()
}

/// Per-node rate thresholds at a nominal quantile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFilter {
    pub thresholds: Vec<f64>,
}

impl DataFilter {
    /// Thresholds at the empirical `quantile` of each training stream.
    pub fn fit<T: Scalar>(data: &Dataset<T>, quantile: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quantile) {
            return Err(Error::InvalidParameter(format!(
                "quantile {quantile} not in [0, 1]"
            )));
        }
        let n = data.len();
        let thresholds = (0..data.dim())
            .map(|i| {
                let mut col: Vec<f64> = data.rows().map(|r| to_f64(r[i])).collect();
                col.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let pos = ((n - 1) as f64 * quantile).round() as usize;
                col[pos]
            })
            .collect();
        Ok(Self { thresholds })
    }

    pub fn flags<T: Scalar>(&self, x: &[T]) -> Vec<bool> {
        let x: Vec<f64> = x.iter().map(|&v| to_f64(v)).collect();
        data_filter(&x, &self.thresholds)
    }
}
