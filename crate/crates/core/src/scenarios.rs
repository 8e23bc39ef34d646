//! Synthetic streams with a known change point, and device-data assembly.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::GaussianModel;
use crate::data::{save_csv, stack_devices, Dataset, Label};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, rng_from_seed, Rng};
use crate::scalar::Scalar;

/// Change point and affected dimensions of a generated stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Time index of the first post-change sample (samples are numbered from 1).
    pub tau: u64,
    pub affected: Vec<usize>,
    pub horizon: usize,
    pub dim: usize,
}

/// Covariance change: an equicorrelated block appears at `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationScenario {
    pub d: usize,
    pub mu: f64,
    pub sigma: f64,
    pub rho: f64,
    pub affected_fraction: f64,
    pub change_time_tau: u64,
    pub horizon: usize,
    pub affected_set_seed: u64,
    /// Explicit affected set; overrides the seeded choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affected: Option<Vec<usize>>,
}

impl CorrelationScenario {
    /// `d = 100, mu = 20, sigma = 10, rho = 0.6`, half the streams affected, change at 100 of 200.
    pub fn reference(affected_set_seed: u64) -> Self {
        Self {
            d: 100,
            mu: 20.0,
            sigma: 10.0,
            rho: 0.6,
            affected_fraction: 0.5,
            change_time_tau: 100,
            horizon: 200,
            affected_set_seed,
            affected: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma = {} must be positive", self.sigma));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho = {} must lie in (-1, 1)", self.rho));
        }
        if !(self.affected_fraction > 0.0 && self.affected_fraction <= 1.0) {
            return bad(format!(
                "affected_fraction = {} must lie in (0, 1]",
                self.affected_fraction
            ));
        }
        if self.change_time_tau < 1 || self.change_time_tau as usize > self.horizon {
            return bad(format!(
                "change time {} must lie in [1, horizon = {}]",
                self.change_time_tau, self.horizon
            ));
        }
        let m = self.affected_set()?.len();
        // Eigenvalues of the block: sigma^2 (1 - rho) and sigma^2 (1 + (m - 1) rho).
        if 1.0 + (m as f64 - 1.0) * self.rho <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }

    fn block_size(&self) -> usize {
        ((self.affected_fraction * self.d as f64).round() as usize).clamp(1, self.d)
    }

    /// Affected indices in ascending order.
    pub fn affected_set(&self) -> Result<Vec<usize>> {
        if let Some(a) = &self.affected {
            let mut a = a.clone();
            a.sort_unstable();
            a.dedup();
            if a.is_empty() || a.iter().any(|&i| i >= self.d) {
                return Err(Error::InvalidParameter(
                    "affected set must be non-empty and within 0..d".into(),
                ));
            }
            return Ok(a);
        }
        let mut rng = rng_from_seed(self.affected_set_seed);
        let mut a = sample(&mut rng, self.d, self.block_size()).into_vec();
        a.sort_unstable();
        Ok(a)
    }

    fn draw(&self, rng: &mut Rng, block: Option<&[usize]>, out: &mut Vec<f64>) {
        let start = out.len();
        for _ in 0..self.d {
            let z: f64 = StandardNormal.sample(rng);
            out.push(self.mu + self.sigma * z);
        }
        if let Some(block) = block {
            let z0: f64 = StandardNormal.sample(rng);
            let (a, b) = ((1.0 - self.rho).sqrt(), self.rho.sqrt());
            for &i in block {
                let zi = (out[start + i] - self.mu) / self.sigma;
                out[start + i] = self.mu + self.sigma * (a * zi + b * z0);
            }
        }
    }

    fn sample(&self, n: usize, seed: u64, post: bool) -> Result<Dataset<f64>> {
        self.validate()?;
        if self.rho < 0.0 && post {
            return Err(Error::InvalidParameter(
                "the block generator needs rho >= 0".into(),
            ));
        }
        let block = self.affected_set()?;
        let mut rng = rng_from_seed(seed);
        let mut v = Vec::with_capacity(n * self.d);
        for _ in 0..n {
            self.draw(&mut rng, post.then_some(block.as_slice()), &mut v);
        }
        let label = if post {
            Label::Anomalous
        } else {
            Label::Nominal
        };
        Dataset::from_flat("correlation", label, self.d, v)
    }

    pub fn sample_nominal(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        self.sample(n, seed, false)
    }

    pub fn sample_anomalous(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        self.sample(n, seed, true)
    }

    /// Pre- and post-change Gaussians.
    pub fn oracle_models(&self) -> Result<(GaussianModel, GaussianModel)> {
        self.validate()?;
        let s2 = self.sigma * self.sigma;
        let f0 = GaussianModel::independent(vec![self.mu; self.d], &vec![s2; self.d])?;
        let mut cov = DMatrix::from_diagonal_element(self.d, self.d, s2);
        let block = self.affected_set()?;
        for &i in &block {
            for &j in &block {
                if i != j {
                    cov[(i, j)] = self.rho * s2;
                }
            }
        }
        let f1 = GaussianModel::new(vec![self.mu; self.d], cov)?;
        Ok((f0, f1))
    }
}

/// Nominal before `tau`, post-change from `tau` to the horizon.
pub fn gen_correlation_stream(
    sc: &CorrelationScenario,
    seed: u64,
) -> Result<(Dataset<f64>, GroundTruth)> {
    sc.validate()?;
    if sc.rho < 0.0 {
        return Err(Error::InvalidParameter(
            "the block generator needs rho >= 0".into(),
        ));
    }
    let block = sc.affected_set()?;
    let mut rng = rng_from_seed(seed);
    let mut v = Vec::with_capacity(sc.horizon * sc.d);
    for t in 1..=sc.horizon as u64 {
        let post = t >= sc.change_time_tau;
        sc.draw(&mut rng, post.then_some(block.as_slice()), &mut v);
    }
    let truth = GroundTruth {
        tau: sc.change_time_tau,
        affected: block,
        horizon: sc.horizon,
        dim: sc.d,
    };
    Ok((
        Dataset::from_flat("correlation", Label::Nominal, sc.d, v)?,
        truth,
    ))
}

/// Same scenario with an affected set sharing exactly `overlap` indices with the original.
pub fn gen_mismatch_variant(
    sc: &CorrelationScenario,
    overlap: usize,
    seed: u64,
) -> Result<CorrelationScenario> {
    let original = sc.affected_set()?;
    let m = original.len();
    if overlap > m || m - overlap > sc.d - m {
        return Err(Error::InvalidParameter(format!(
            "cannot keep {overlap} of {m} affected streams with {} unaffected available",
            sc.d - m
        )));
    }
    if overlap == m {
        return Ok(sc.clone());
    }
    let mut rng = rng_from_seed(seed);
    let mut kept = original.clone();
    kept.shuffle(&mut rng);
    kept.truncate(overlap);
    let mut outside: Vec<usize> = (0..sc.d)
        .filter(|i| original.binary_search(i).is_err())
        .collect();
    outside.shuffle(&mut rng);
    kept.extend_from_slice(&outside[..m - overlap]);
    kept.sort_unstable();
    Ok(CorrelationScenario {
        affected: Some(kept),
        ..sc.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeviceProfile {
    /// Alternates between two rates with equal probability at every step.
    Bimodal {
        inactive_mean: f64,
        active_mean: f64,
    },
    Single {
        mean: f64,
    },
}

impl DeviceProfile {
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Bimodal {
                inactive_mean,
                active_mean,
            } => 0.5 * (inactive_mean + active_mean),
            Self::Single { mean } => mean,
        }
    }
}

/// Low-rate DDoS: compromised devices raise their rate from `tau` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdosScenario {
    pub d: usize,
    pub bimodal_fraction: f64,
    pub inactive_mean_range: [f64; 2],
    pub active_mean_range: [f64; 2],
    pub single_mean_range: [f64; 2],
    pub sigma2: f64,
    pub attack_shift_sigmas: f64,
    pub compromised_set: Vec<usize>,
    pub change_time_tau: u64,
    pub horizon: usize,
    /// Seed for device modes and mean rates.
    pub device_seed: u64,
}

impl DdosScenario {
    /// 50 devices, 30% bimodal, rates `U[10,50]` / `U[50,90]` / `U[10,100]`, variance 5,
    /// a 5 sigma attack from `tau = 101`, with `compromised` devices chosen at random.
    pub fn reference(compromised: usize, seed: u64) -> Self {
        let d = 50;
        let mut rng = rng_from_seed(derive_seed_str(seed, "compromised"));
        let mut set = sample(&mut rng, d, compromised.min(d)).into_vec();
        set.sort_unstable();
        Self {
            d,
            bimodal_fraction: 0.3,
            inactive_mean_range: [10.0, 50.0],
            active_mean_range: [50.0, 90.0],
            single_mean_range: [10.0, 100.0],
            sigma2: 5.0,
            attack_shift_sigmas: 5.0,
            compromised_set: set,
            change_time_tau: 101,
            horizon: 200,
            device_seed: derive_seed_str(seed, "devices"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bimodal_fraction) {
            return bad(format!(
                "bimodal_fraction = {} must lie in [0, 1]",
                self.bimodal_fraction
            ));
        }
        for (name, r) in [
            ("inactive_mean_range", self.inactive_mean_range),
            ("active_mean_range", self.active_mean_range),
            ("single_mean_range", self.single_mean_range),
        ] {
            if !(r[0] <= r[1]) {
                return bad(format!("{name} must be ordered, got {r:?}"));
            }
        }
        if !(self.sigma2 > 0.0) {
            return bad(format!("sigma2 = {} must be positive", self.sigma2));
        }
        if self.compromised_set.iter().any(|&i| i >= self.d) {
            return bad("compromised_set must lie within 0..d".into());
        }
        if self.change_time_tau < 1 || self.change_time_tau as usize > self.horizon {
            return bad(format!(
                "change time {} must lie in [1, horizon = {}]",
                self.change_time_tau, self.horizon
            ));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn devices(&self) -> Vec<DeviceProfile> {
        let mut rng = rng_from_seed(self.device_seed);
        let n_bimodal = (self.bimodal_fraction * self.d as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.d).collect();
        order.shuffle(&mut rng);
        let mut bimodal = vec![false; self.d];
        for &i in &order[..n_bimodal] {
            bimodal[i] = true;
        }
        let u = |rng: &mut Rng, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.gen::<f64>();
        bimodal
            .into_iter()
            .map(|b| {
                if b {
                    DeviceProfile::Bimodal {
                        inactive_mean: u(&mut rng, self.inactive_mean_range),
                        active_mean: u(&mut rng, self.active_mean_range),
                    }
                } else {
                    DeviceProfile::Single {
                        mean: u(&mut rng, self.single_mean_range),
                    }
                }
            })
            .collect()
    }

    fn draw(&self, devices: &[DeviceProfile], rng: &mut Rng, attacked: bool, out: &mut Vec<f64>) {
        let noise = Normal::new(0.0, self.sigma()).expect("positive sigma");
        let shift = self.attack_shift_sigmas * self.sigma();
        let start = out.len();
        for dev in devices {
            let mean = match *dev {
                DeviceProfile::Bimodal {
                    inactive_mean,
                    active_mean,
                } => {
                    if rng.gen::<bool>() {
                        active_mean
                    } else {
                        inactive_mean
                    }
                }
                DeviceProfile::Single { mean } => mean,
            };
            out.push(mean + noise.sample(rng));
        }
        if attacked {
            for &i in &self.compromised_set {
                out[start + i] += shift;
            }
        }
    }

    fn sample(&self, n: usize, seed: u64, attacked: bool) -> Result<Dataset<f64>> {
        self.validate()?;
        let devices = self.devices();
        let mut rng = rng_from_seed(seed);
        let mut v = Vec::with_capacity(n * self.d);
        for _ in 0..n {
            self.draw(&devices, &mut rng, attacked, &mut v);
        }
        let label = if attacked {
            Label::Anomalous
        } else {
            Label::Nominal
        };
        Dataset::from_flat("ddos", label, self.d, v)
    }

    pub fn sample_nominal(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        self.sample(n, seed, false)
    }

    pub fn sample_anomalous(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        self.sample(n, seed, true)
    }
}

pub fn gen_ddos_stream(sc: &DdosScenario, seed: u64) -> Result<(Dataset<f64>, GroundTruth)> {
    sc.validate()?;
    let devices = sc.devices();
    let mut rng = rng_from_seed(seed);
    let mut v = Vec::with_capacity(sc.horizon * sc.d);
    for t in 1..=sc.horizon as u64 {
        sc.draw(&devices, &mut rng, t >= sc.change_time_tau, &mut v);
    }
    let mut affected = sc.compromised_set.clone();
    affected.sort_unstable();
    let truth = GroundTruth {
        tau: sc.change_time_tau,
        affected,
        horizon: sc.horizon,
        dim: sc.d,
    };
    Ok((Dataset::from_flat("ddos", Label::Nominal, sc.d, v)?, truth))
}

/// Standard Gaussian streams whose affected dimensions shift in mean at `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftScenario {
    pub d: usize,
    pub shift_sigmas: f64,
    pub affected: Vec<usize>,
    pub change_time_tau: u64,
    pub horizon: usize,
}

impl MeanShiftScenario {
    /// Shift on the first `round(fraction * d)` dimensions.
    pub fn leading(d: usize, fraction: f64, shift_sigmas: f64, tau: u64, horizon: usize) -> Self {
        let m = ((fraction * d as f64).round() as usize).clamp(1, d);
        Self {
            d,
            shift_sigmas,
            affected: (0..m).collect(),
            change_time_tau: tau,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.affected.iter().any(|&i| i >= self.d) {
            return Err(Error::InvalidParameter(
                "affected dimensions must lie within 0..d".into(),
            ));
        }
        if self.change_time_tau < 1 || self.change_time_tau as usize > self.horizon {
            return Err(Error::InvalidParameter(format!(
                "change time {} must lie in [1, horizon = {}]",
                self.change_time_tau, self.horizon
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut Rng, post: bool, out: &mut Vec<f64>) {
        let start = out.len();
        for _ in 0..self.d {
            out.push(StandardNormal.sample(rng));
        }
        if post {
            for &i in &self.affected {
                out[start + i] += self.shift_sigmas;
            }
        }
    }

    fn sample(&self, n: usize, seed: u64, post: bool) -> Result<Dataset<f64>> {
        self.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut v = Vec::with_capacity(n * self.d);
        for _ in 0..n {
            self.draw(&mut rng, post, &mut v);
        }
        let label = if post {
            Label::Anomalous
        } else {
            Label::Nominal
        };
        Dataset::from_flat("mean_shift", label, self.d, v)
    }

    pub fn sample_nominal(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        self.sample(n, seed, false)
    }

    pub fn sample_anomalous(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        self.sample(n, seed, true)
    }
}

pub fn gen_mean_shift_stream(
    sc: &MeanShiftScenario,
    seed: u64,
) -> Result<(Dataset<f64>, GroundTruth)> {
    sc.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut v = Vec::with_capacity(sc.horizon * sc.d);
    for t in 1..=sc.horizon as u64 {
        sc.draw(&mut rng, t >= sc.change_time_tau, &mut v);
    }
    let mut affected = sc.affected.clone();
    affected.sort_unstable();
    let truth = GroundTruth {
        tau: sc.change_time_tau,
        affected,
        horizon: sc.horizon,
        dim: sc.d,
    };
    Ok((
        Dataset::from_flat("mean_shift", Label::Nominal, sc.d, v)?,
        truth,
    ))
}

/// Any supported scenario, tagged by `type` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scenario {
    Correlation(CorrelationScenario),
    Ddos(DdosScenario),
    MeanShift(MeanShiftScenario),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Correlation(s) => s.validate(),
            Self::Ddos(s) => s.validate(),
            Self::MeanShift(s) => s.validate(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Correlation(s) => s.d,
            Self::Ddos(s) => s.d,
            Self::MeanShift(s) => s.d,
        }
    }

    pub fn tau(&self) -> u64 {
        match self {
            Self::Correlation(s) => s.change_time_tau,
            Self::Ddos(s) => s.change_time_tau,
            Self::MeanShift(s) => s.change_time_tau,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::Correlation(s) => s.horizon,
            Self::Ddos(s) => s.horizon,
            Self::MeanShift(s) => s.horizon,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<(Dataset<f64>, GroundTruth)> {
        match self {
            Self::Correlation(s) => gen_correlation_stream(s, seed),
            Self::Ddos(s) => gen_ddos_stream(s, seed),
            Self::MeanShift(s) => gen_mean_shift_stream(s, seed),
        }
    }

    pub fn sample_nominal(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        match self {
            Self::Correlation(s) => s.sample_nominal(n, seed),
            Self::Ddos(s) => s.sample_nominal(n, seed),
            Self::MeanShift(s) => s.sample_nominal(n, seed),
        }
    }

    pub fn sample_anomalous(&self, n: usize, seed: u64) -> Result<Dataset<f64>> {
        match self {
            Self::Correlation(s) => s.sample_anomalous(n, seed),
            Self::Ddos(s) => s.sample_anomalous(n, seed),
            Self::MeanShift(s) => s.sample_anomalous(n, seed),
        }
    }

    /// Affected dimensions in ascending order.
    pub fn affected(&self) -> Result<Vec<usize>> {
        match self {
            Self::Correlation(s) => s.affected_set(),
            Self::Ddos(s) => {
                let mut a = s.compromised_set.clone();
                a.sort_unstable();
                Ok(a)
            }
            Self::MeanShift(s) => {
                let mut a = s.affected.clone();
                a.sort_unstable();
                Ok(a)
            }
        }
    }

    /// Exact pre- and post-change densities, where both are Gaussian.
    pub fn oracle_models(&self) -> Result<(GaussianModel, GaussianModel)> {
        match self {
            Self::Correlation(s) => s.oracle_models(),
            Self::MeanShift(s) => {
                s.validate()?;
                let ones = vec![1.0; s.d];
                let mut shifted = vec![0.0; s.d];
                for &i in &s.affected {
                    shifted[i] = s.shift_sigmas;
                }
                Ok((
                    GaussianModel::independent(vec![0.0; s.d], &ones)?,
                    GaussianModel::independent(shifted, &ones)?,
                ))
            }
            Self::Ddos(_) => Err(Error::InvalidParameter(
                "the device scenario has no Gaussian oracle".into(),
            )),
        }
    }
}

/// Writes `<stem>.csv` plus `<stem>.truth.json`.
pub fn save_stream(
    dataset: &Dataset<f64>,
    truth: &GroundTruth,
    csv_path: &Path,
) -> Result<std::path::PathBuf> {
    save_csv(dataset, csv_path)?;
    let sidecar = csv_path.with_extension("truth.json");
    let mut f = File::create(&sidecar)?;
    serde_json::to_writer_pretty(&mut f, truth)?;
    f.write_all(b"\n")?;
    Ok(sidecar)
}

/// `n` rows drawn uniformly without replacement, kept in their original order.
pub fn sample_rows<T: Scalar>(data: &Dataset<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n > data.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot draw {n} rows from {} without replacement",
            data.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut idx = sample(&mut rng, data.len(), n).into_vec();
    idx.sort_unstable();
    data.subset(&idx)
}

/// Samples `n` rows from each device table and stacks them into one vector per row.
pub fn assemble_devices<T: Scalar>(
    per_device: &[Dataset<T>],
    n: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    let sampled = per_device
        .iter()
        .enumerate()
        .map(|(i, d)| sample_rows(d, n, crate::rng::derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    stack_devices(&sampled)
}
