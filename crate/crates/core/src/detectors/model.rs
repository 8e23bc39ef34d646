use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Evidence, EvidenceSource};
use crate::data::{partition_dataset, Dataset, DetectorConfig, Label};
use crate::error::{Error, Result};
use crate::knn::{NeighborResult, SearchIndex, TreeParams};
use crate::rng::derive_seed_str;
use crate::scalar::{cast, Scalar};

/// Nearest-neighbor backend used for every query of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum Backend {
    #[default]
    Exact,
    Approximate {
        branching: usize,
        max_iters: usize,
        max_examined: usize,
    },
}

impl Backend {
    pub(crate) fn index<T: Scalar>(
        &self,
        reference: Dataset<T>,
        seed: u64,
    ) -> Result<SearchIndex<T>> {
        match *self {
            Self::Exact => Ok(SearchIndex::exact(reference)),
            Self::Approximate {
                branching,
                max_iters,
                max_examined,
            } => SearchIndex::approximate(
                reference,
                &TreeParams {
                    branching,
                    max_iters,
                    seed,
                },
                max_examined,
            ),
        }
    }
}

/// Nominal model: reference set, ranked training totals and the borderline `L_(K)`.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    config: DetectorConfig,
    backend: Backend,
    index: Arc<SearchIndex<T>>,
    part1: Arc<Dataset<T>>,
    part1_indices: Vec<usize>,
    part2_indices: Vec<usize>,
    sorted_totals: Vec<T>,
    k_rank: usize,
    borderline: T,
    floor: T,
    baseline: Vec<T>,
}

/// `sum over n = k-s+1..=k of g_n^gamma`.
pub fn total_of<T: Scalar>(nb: &NeighborResult<T>, s: usize, gamma: T) -> T {
    let k = nb.k();
    let tail = &nb.distances[k - s..];
    if gamma == T::one() {
        tail.iter().copied().sum()
    } else {
        tail.iter().map(|g| g.powf(gamma)).sum()
    }
}

/// Total distance of `x` to its neighbors in `index`.
pub fn total_distance<T: Scalar>(
    x: &[T],
    index: &SearchIndex<T>,
    k: usize,
    s: usize,
    gamma: f64,
) -> Result<T> {
    let nb = index.query(x, k, None, None)?;
    Ok(total_of(&nb, s, cast(gamma)))
}

/// `K = floor(N1 (1 - alpha))`, guarded against representation error.
pub(crate) fn rank_for(n1: usize, alpha: f64) -> usize {
    (n1 as f64 * (1.0 - alpha) + 1e-9).floor() as usize
}

/// Trains with the exact backend.
pub fn train_odit<T: Scalar>(
    nominal: &Dataset<T>,
    config: &DetectorConfig,
) -> Result<TrainedModel<T>> {
    train_odit_with(nominal, config, Backend::Exact)
}

/// Partitions the nominal set, scores part 1 against part 2 and ranks the totals.
///
/// A partition ratio of 1 disables the split: every point is scored against
/// the full set with itself excluded.
pub fn train_odit_with<T: Scalar>(
    nominal: &Dataset<T>,
    config: &DetectorConfig,
    backend: Backend,
) -> Result<TrainedModel<T>> {
    config.validate()?;
    if nominal.label() != Label::Nominal {
        return Err(Error::InvalidParameter(
            "training data must be nominal".into(),
        ));
    }
    let (part1_indices, part2_indices) = if config.partition_ratio >= 1.0 {
        let all: Vec<usize> = (0..nominal.len()).collect();
        (all.clone(), all)
    } else {
        let p = partition_dataset(
            nominal,
            config.partition_ratio,
            derive_seed_str(config.rng_seed, "partition"),
        )?;
        (p.part1_indices, p.part2_indices)
    };
    train_odit_partitioned(nominal, config, backend, part1_indices, part2_indices)
}

/// Trains on an explicit partition of `nominal` into row index sets.
///
/// Identical index sets mean no split: each point is scored with itself excluded.
pub fn train_odit_partitioned<T: Scalar>(
    nominal: &Dataset<T>,
    config: &DetectorConfig,
    backend: Backend,
    part1_indices: Vec<usize>,
    part2_indices: Vec<usize>,
) -> Result<TrainedModel<T>> {
    config.validate()?;
    if nominal.label() != Label::Nominal {
        return Err(Error::InvalidParameter(
            "training data must be nominal".into(),
        ));
    }
    let no_split = part1_indices == part2_indices;
    if no_split && backend != Backend::Exact {
        return Err(Error::InvalidParameter(
            "training without a partition requires the exact backend".into(),
        ));
    }
    if part1_indices.is_empty() || part2_indices.is_empty() {
        return Err(Error::InvalidParameter(
            "both partition parts must be non-empty".into(),
        ));
    }
    if !no_split {
        let mut seen = vec![false; nominal.len()];
        for &i in part1_indices.iter().chain(&part2_indices) {
            if i >= nominal.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidParameter(format!(
                    "partition index {i} is out of range or repeated"
                )));
            }
        }
    }
    let part1 = nominal.subset(&part1_indices)?;
    let part2 = nominal.subset(&part2_indices)?;
    let n1 = part1.len();
    let available = part2.len() - usize::from(no_split);
    if config.k > available {
        return Err(Error::NotEnoughReferencePoints {
            k: config.k,
            available,
        });
    }
    let k_rank = rank_for(n1, config.alpha);
    if k_rank < 1 {
        return Err(Error::EmptyMinimumVolumeSet {
            n1,
            alpha: config.alpha,
        });
    }
    let index = backend.index(part2, derive_seed_str(config.rng_seed, "tree"))?;
    let gamma: T = cast(config.gamma);
    let scored: Vec<(T, Vec<T>)> = (0..n1)
        .into_par_iter()
        .map(|i| {
            let exclude = no_split.then_some(i);
            let nb = index.query(part1.row(i), config.k, Some(config.s), exclude)?;
            let total = total_of(&nb, config.s, gamma);
            Ok((total, nb.per_dimension_sq.expect("requested")))
        })
        .collect::<Result<_>>()?;
    let mut sorted_totals: Vec<T> = scored.iter().map(|s| s.0).collect();
    sorted_totals.sort_by(|a, b| a.partial_cmp(b).expect("finite totals"));
    let floor = *sorted_totals
        .iter()
        .find(|&&v| v > T::zero())
        .ok_or(Error::DegenerateTraining)?;
    let borderline = sorted_totals[k_rank - 1].max(floor);

    let dim = nominal.dim();
    let mut baseline = vec![T::zero(); dim];
    for (_, delta) in &scored {
        for (b, &v) in baseline.iter_mut().zip(delta) {
            *b += v;
        }
    }
    let n1_t: T = cast(n1 as f64);
    baseline.iter_mut().for_each(|b| *b = *b / n1_t);

    Ok(TrainedModel {
        config: config.clone(),
        backend,
        index: Arc::new(index),
        part1: Arc::new(part1),
        part1_indices,
        part2_indices,
        sorted_totals,
        k_rank,
        borderline,
        floor,
        baseline,
    })
}

impl<T: Scalar> TrainedModel<T> {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn index(&self) -> &SearchIndex<T> {
        &self.index
    }

    pub fn part1(&self) -> &Dataset<T> {
        &self.part1
    }

    pub fn part1_indices(&self) -> &[usize] {
        &self.part1_indices
    }

    pub fn part2_indices(&self) -> &[usize] {
        &self.part2_indices
    }

    /// Whether training scored the full set against itself.
    pub fn is_unsplit(&self) -> bool {
        self.config.partition_ratio >= 1.0
    }

    /// Training totals `L_m`, ascending.
    pub fn sorted_totals(&self) -> &[T] {
        &self.sorted_totals
    }

    pub fn k_rank(&self) -> usize {
        self.k_rank
    }

    /// Borderline total distance `L_(K)`.
    pub fn borderline(&self) -> T {
        self.borderline
    }

    /// Smallest positive training total; zero totals are clamped up to it.
    pub fn floor(&self) -> T {
        self.floor
    }

    /// Mean per-dimension contribution over part 1.
    pub fn contribution_baseline(&self) -> &[T] {
        &self.baseline
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    /// Rank and borderline that a different significance level would give.
    pub fn borderline_at(&self, alpha: f64) -> Result<(usize, T)> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha = {alpha} must lie in [0, 1)"
            )));
        }
        let k = rank_for(self.sorted_totals.len(), alpha);
        if k < 1 {
            return Err(Error::EmptyMinimumVolumeSet {
                n1: self.sorted_totals.len(),
                alpha,
            });
        }
        Ok((k, self.sorted_totals[k - 1].max(self.floor)))
    }

    /// Same model with the borderline moved to significance level `alpha`.
    pub fn retarget_alpha(&self, alpha: f64) -> Result<Self> {
        let (k_rank, borderline) = self.borderline_at(alpha)?;
        let mut out = self.clone();
        out.config.alpha = alpha;
        out.k_rank = k_rank;
        out.borderline = borderline;
        Ok(out)
    }

    pub(crate) fn neighbors(&self, x: &[T], with_contributions: bool) -> Result<NeighborResult<T>> {
        self.index.query(
            x,
            self.config.k,
            with_contributions.then_some(self.config.s),
            None,
        )
    }

    /// Total distance of `x` against the nominal reference, before clamping.
    pub fn total(&self, x: &[T]) -> Result<T> {
        let nb = self.neighbors(x, false)?;
        Ok(total_of(&nb, self.config.s, cast(self.config.gamma)))
    }

    pub(crate) fn clamp(&self, total: T) -> T {
        total.max(self.floor)
    }
}

/// `D_t = d (ln L_t - ln L_(K))`.
pub fn odit_evidence<T: Scalar>(model: &TrainedModel<T>, x: &[T]) -> Result<T> {
    Ok(model.evidence(x, false)?.value)
}

impl<T: Scalar> EvidenceSource<T> for TrainedModel<T> {
    fn dim(&self) -> usize {
        self.index.dim()
    }

    fn evidence(&self, x: &[T], with_contributions: bool) -> Result<Evidence<T>> {
        let nb = self.neighbors(x, with_contributions)?;
        let total = self.clamp(total_of(&nb, self.config.s, cast(self.config.gamma)));
        let d: T = cast(x.len() as f64);
        Ok(Evidence {
            value: d * (total.ln() - self.borderline.ln()),
            contributions: nb.per_dimension_sq,
        })
    }
}
