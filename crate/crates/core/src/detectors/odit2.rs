use std::sync::Arc;

use rayon::prelude::*;

use super::model::total_of;
use super::{Evidence, EvidenceSource, TrainedModel};
use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::knn::SearchIndex;
use crate::rng::derive_seed_str;
use crate::scalar::{cast, Scalar};

/// Drops every anomaly point whose nominal total distance is within the borderline.
pub fn clean_anomaly_set<T: Scalar>(
    nominal: &TrainedModel<T>,
    raw_anomaly: &Dataset<T>,
) -> Result<Dataset<T>> {
    if raw_anomaly.dim() != nominal.dim() {
        return Err(Error::DimensionMismatch {
            expected: nominal.dim(),
            found: raw_anomaly.dim(),
        });
    }
    let keep: Vec<bool> = (0..raw_anomaly.len())
        .into_par_iter()
        .map(|i| Ok(nominal.total(raw_anomaly.row(i))? > nominal.borderline()))
        .collect::<Result<_>>()?;
    let kept: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::AnomalySetIndistinguishable);
    }
    Ok(raw_anomaly
        .subset(&kept)?
        .with_label(Label::Anomalous)
        .with_name(format!("{}:cleaned", raw_anomaly.name())))
}

/// Nominal model paired with an anomaly reference set.
#[derive(Debug, Clone)]
pub struct Odit2Model<T> {
    nominal: Arc<TrainedModel<T>>,
    anomaly: Arc<SearchIndex<T>>,
    nominal_size: usize,
    correction: T,
    baseline: Option<Vec<T>>,
}

impl<T: Scalar> Odit2Model<T> {
    /// Uses `anomaly_reference` as given, without cleaning.
    pub fn new(nominal: Arc<TrainedModel<T>>, anomaly_reference: Dataset<T>) -> Result<Self> {
        if anomaly_reference.dim() != nominal.dim() {
            return Err(Error::DimensionMismatch {
                expected: nominal.dim(),
                found: anomaly_reference.dim(),
            });
        }
        let k = nominal.config().k;
        if k > anomaly_reference.len() {
            return Err(Error::NotEnoughReferencePoints {
                k,
                available: anomaly_reference.len(),
            });
        }
        let seed = derive_seed_str(nominal.config().rng_seed, "anomaly-tree");
        let anomaly = nominal
            .backend()
            .index(anomaly_reference.with_label(Label::Anomalous), seed)?;
        let nominal_size = nominal.index().len();
        let mut out = Self {
            correction: T::zero(),
            nominal,
            anomaly: Arc::new(anomaly),
            nominal_size,
            baseline: None,
        };
        out.correction = out.compute_correction();
        Ok(out)
    }

    /// Cleans `raw_anomaly` at significance level `alpha_clean`, then builds the model.
    ///
    /// `alpha_clean` defaults to the nominal model's own level.
    pub fn train(
        nominal: Arc<TrainedModel<T>>,
        raw_anomaly: &Dataset<T>,
        alpha_clean: Option<f64>,
    ) -> Result<Self> {
        let cleaned = match alpha_clean {
            Some(a) => clean_anomaly_set(&nominal.retarget_alpha(a)?, raw_anomaly)?,
            None => clean_anomaly_set(&nominal, raw_anomaly)?,
        };
        let mut model = Self::new(nominal, cleaned)?;
        model.refresh_baseline()?;
        Ok(model)
    }

    fn compute_correction(&self) -> T {
        cast::<T>(self.nominal_size as f64).ln() - cast::<T>(self.anomaly.len() as f64).ln()
    }

    pub fn nominal(&self) -> &TrainedModel<T> {
        &self.nominal
    }

    pub fn nominal_arc(&self) -> Arc<TrainedModel<T>> {
        Arc::clone(&self.nominal)
    }

    pub fn anomaly_reference(&self) -> &Dataset<T> {
        self.anomaly.reference()
    }

    /// Size N of the nominal reference set searched at test time.
    pub fn nominal_size(&self) -> usize {
        self.nominal_size
    }

    pub fn anomaly_size(&self) -> usize {
        self.anomaly.len()
    }

    /// `ln(N / M)`.
    pub fn imbalance_correction(&self) -> T {
        self.correction
    }

    /// Appends detected anomalous samples to the reference set.
    ///
    /// With `reclean`, samples inside the nominal borderline are dropped first.
    /// Returns the number of rows actually added.
    pub fn augment(&mut self, rows: &[Vec<T>], reclean: bool) -> Result<usize> {
        let mut reference = self.anomaly.reference().clone();
        let mut added = 0;
        for r in rows {
            if reclean && self.nominal.total(r)? <= self.nominal.borderline() {
                continue;
            }
            reference.push_row(r)?;
            added += 1;
        }
        if added > 0 {
            self.anomaly = Arc::new(self.anomaly.rebuild(reference)?);
            self.correction = self.compute_correction();
            self.baseline = None;
        }
        Ok(added)
    }

    /// Recomputes the localization baseline `mean(delta) - mean(delta')` over part 1.
    pub fn refresh_baseline(&mut self) -> Result<()> {
        let part1 = self.nominal.part1();
        let cfg = self.nominal.config();
        let dim = part1.dim();
        let rows: Vec<Vec<T>> = (0..part1.len())
            .into_par_iter()
            .map(|i| {
                let nb = self.anomaly.query(part1.row(i), cfg.k, Some(cfg.s), None)?;
                nb.per_dimension_sq.ok_or(Error::MissingDecomposition)
            })
            .collect::<Result<_>>()?;
        let mut mean = vec![T::zero(); dim];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n: T = cast(part1.len() as f64);
        let baseline = self
            .nominal
            .contribution_baseline()
            .iter()
            .zip(&mean)
            .map(|(&mu, &m)| mu - m / n)
            .collect();
        self.baseline = Some(baseline);
        Ok(())
    }

    pub fn contribution_baseline(&self) -> Result<&[T]> {
        self.baseline.as_deref().ok_or(Error::StaleBaseline)
    }

    /// Total distance to the anomaly reference, clamped like the nominal one.
    pub fn anomaly_total(&self, x: &[T]) -> Result<T> {
        let cfg = self.nominal.config();
        let nb = self.anomaly.query(x, cfg.k, None, None)?;
        Ok(self.nominal.clamp(total_of(&nb, cfg.s, cast(cfg.gamma))))
    }
}

/// `D_t = d (ln L_t - ln L'_t) + ln(N / M)`.
pub fn odit2_evidence<T: Scalar>(model: &Odit2Model<T>, x: &[T]) -> Result<T> {
    Ok(model.evidence(x, false)?.value)
}

impl<T: Scalar> EvidenceSource<T> for Odit2Model<T> {
    fn dim(&self) -> usize {
        self.nominal.dim()
    }

    fn evidence(&self, x: &[T], with_contributions: bool) -> Result<Evidence<T>> {
        let cfg = self.nominal.config();
        let gamma: T = cast(cfg.gamma);
        let s = with_contributions.then_some(cfg.s);
        let nb = self.nominal.index().query(x, cfg.k, s, None)?;
        let nb2 = self.anomaly.query(x, cfg.k, s, None)?;
        let l = self.nominal.clamp(total_of(&nb, cfg.s, gamma));
        let l2 = self.nominal.clamp(total_of(&nb2, cfg.s, gamma));
        let d: T = cast(x.len() as f64);
        let contributions = match (nb.per_dimension_sq, nb2.per_dimension_sq) {
            (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(&p, &q)| p - q).collect()),
            _ => None,
        };
        Ok(Evidence {
            value: d * (l.ln() - l2.ln()) + self.correction,
            contributions,
        })
    }
}
