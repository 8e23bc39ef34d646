//! Exact and approximate k-nearest-neighbor queries.
//!
//! Distances are Euclidean. Internally everything is ranked on squared
//! distances with ties broken by the lower reference index, so the exact and
//! tree backends agree bit for bit whenever they examine the same points.

mod tree;

pub use tree::{approx_knn, build_kmeans_tree, KMeansTree, TreeParams};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Neighbors of one query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult<T> {
    /// `g_1 <= g_2 <= ... <= g_k`.
    pub distances: Vec<T>,
    pub neighbor_indices: Vec<usize>,
    /// Entry `i` is `sum over n = k-s+1..=k of (x_i - y_n_i)^2`.
    pub per_dimension_sq: Option<Vec<T>>,
    /// Number of reference points whose distance was evaluated.
    pub examined: usize,
}

impl<T: Scalar> NeighborResult<T> {
    pub fn k(&self) -> usize {
        self.distances.len()
    }
}

/// Squared Euclidean distance, or `None` once a partial sum exceeds `bound`.
///
/// The accumulation order is fixed, so a completed result is identical for
/// every `bound`.
#[inline]
pub fn sq_dist_bounded<T: Scalar>(a: &[T], b: &[T], bound: T) -> Option<T> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        for l in 0..4 {
            let t = a[i + l] - b[i + l];
            acc[l] += t * t;
        }
        if c % 4 == 3 && (acc[0] + acc[1]) + (acc[2] + acc[3]) > bound {
            return None;
        }
    }
    for i in chunks * 4..a.len() {
        let t = a[i] - b[i];
        acc[i % 4] += t * t;
    }
    let total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    if total > bound {
        None
    } else {
        Some(total)
    }
}

#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    sq_dist_bounded(a, b, T::infinity()).expect("unbounded")
}

/// Bounded buffer of the k best `(squared distance, index)` pairs.
#[derive(Debug, Clone)]
pub(crate) struct TopK<T> {
    k: usize,
    items: Vec<(T, usize)>,
}

impl<T: Scalar> TopK<T> {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn is_full(&self) -> bool {
        self.items.len() >= self.k
    }

    pub(crate) fn len(&self) -> usize {
        self.items.len()
    }

    /// Pruning bound for new candidates.
    #[inline]
    pub(crate) fn bound(&self) -> T {
        if self.is_full() {
            self.items[self.k - 1].0
        } else {
            T::infinity()
        }
    }

    #[inline]
    fn precedes(a: (T, usize), b: (T, usize)) -> bool {
        a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    pub(crate) fn offer(&mut self, d: T, idx: usize) {
        if self.is_full() && !Self::precedes((d, idx), self.items[self.k - 1]) {
            return;
        }
        let pos = self
            .items
            .partition_point(|&it| Self::precedes(it, (d, idx)));
        self.items.insert(pos, (d, idx));
        self.items.truncate(self.k);
    }

    /// Scans `indices` of `reference`, skipping `exclude`.
    #[inline]
    pub(crate) fn scan(
        &mut self,
        query: &[T],
        reference: &Dataset<T>,
        indices: impl Iterator<Item = usize>,
        exclude: Option<usize>,
    ) -> usize {
        let mut examined = 0;
        for i in indices {
            if Some(i) == exclude {
                continue;
            }
            examined += 1;
            let bound = self.bound();
            if let Some(d) = sq_dist_bounded(query, reference.row(i), bound) {
                self.offer(d, i);
            }
        }
        examined
    }

    pub(crate) fn finish(
        self,
        query: &[T],
        reference: &Dataset<T>,
        decompose_s: Option<usize>,
        examined: usize,
    ) -> NeighborResult<T> {
        let per_dimension_sq = decompose_s.map(|s| {
            let mut acc = vec![T::zero(); query.len()];
            for &(_, idx) in &self.items[self.items.len() - s..] {
                for (a, (&x, &y)) in acc.iter_mut().zip(query.iter().zip(reference.row(idx))) {
                    let t = x - y;
                    *a += t * t;
                }
            }
            acc
        });
        NeighborResult {
            distances: self.items.iter().map(|&(d, _)| d.sqrt()).collect(),
            neighbor_indices: self.items.iter().map(|&(_, i)| i).collect(),
            per_dimension_sq,
            examined,
        }
    }
}

pub(crate) fn check_query<T: Scalar>(
    query: &[T],
    reference: &Dataset<T>,
    k: usize,
    decompose_s: Option<usize>,
    exclude: Option<usize>,
) -> Result<()> {
    if query.len() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            found: query.len(),
        });
    }
    let available = reference.len() - usize::from(exclude.is_some_and(|e| e < reference.len()));
    if k == 0 || k > available {
        return Err(Error::NotEnoughReferencePoints { k, available });
    }
    if let Some(s) = decompose_s {
        if s == 0 || s > k {
            return Err(Error::InvalidParameter(format!(
                "s = {s} must lie in [1, k = {k}]"
            )));
        }
    }
    Ok(())
}

/// Brute-force k nearest neighbors of `query` in `reference`.
///
/// `decompose_s` requests the per-dimension squared gaps of the `s` farthest
/// of the `k` neighbors; `exclude` skips one reference row (self-exclusion).
pub fn exact_knn<T: Scalar>(
    query: &[T],
    reference: &Dataset<T>,
    k: usize,
    decompose_s: Option<usize>,
    exclude: Option<usize>,
) -> Result<NeighborResult<T>> {
    check_query(query, reference, k, decompose_s, exclude)?;
    let mut top = TopK::new(k);
    let examined = top.scan(query, reference, 0..reference.len(), exclude);
    Ok(top.finish(query, reference, decompose_s, examined))
}

/// Query backend over a fixed reference set.
#[derive(Debug, Clone)]
pub enum SearchIndex<T> {
    Exact(Dataset<T>),
    Approximate {
        tree: KMeansTree<T>,
        max_examined: usize,
    },
}

impl<T: Scalar> SearchIndex<T> {
    pub fn exact(reference: Dataset<T>) -> Self {
        Self::Exact(reference)
    }

    pub fn approximate(
        reference: Dataset<T>,
        params: &TreeParams,
        max_examined: usize,
    ) -> Result<Self> {
        Ok(Self::Approximate {
            tree: build_kmeans_tree(reference, params)?,
            max_examined,
        })
    }

    /// Rebuilds the same kind of index over new reference data.
    pub fn rebuild(&self, reference: Dataset<T>) -> Result<Self> {
        match self {
            Self::Exact(_) => Ok(Self::Exact(reference)),
            Self::Approximate { tree, max_examined } => {
                Self::approximate(reference, tree.params(), *max_examined)
            }
        }
    }

    pub fn reference(&self) -> &Dataset<T> {
        match self {
            Self::Exact(d) => d,
            Self::Approximate { tree, .. } => tree.reference(),
        }
    }

    pub fn len(&self) -> usize {
        self.reference().len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference().is_empty()
    }

    pub fn dim(&self) -> usize {
        self.reference().dim()
    }

    pub fn query(
        &self,
        query: &[T],
        k: usize,
        decompose_s: Option<usize>,
        exclude: Option<usize>,
    ) -> Result<NeighborResult<T>> {
        match self {
            Self::Exact(d) => exact_knn(query, d, k, decompose_s, exclude),
            Self::Approximate { tree, max_examined } => {
                if exclude.is_some() {
                    return Err(Error::InvalidParameter(
                        "self-exclusion is only supported by the exact backend".into(),
                    ));
                }
                approx_knn(query, tree, k, *max_examined, decompose_s)
            }
        }
    }
}
