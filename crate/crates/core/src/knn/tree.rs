//! Hierarchical k-means tree with best-bin-first priority search.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{check_query, sq_dist_bounded, NeighborResult, TopK};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Branching factor C.
    pub branching: usize,
    /// Lloyd iterations per node, I_max.
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            branching: 32,
            max_iters: 11,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf(Vec<usize>),
    Inner(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    center: Vec<T>,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct KMeansTree<T> {
    reference: Dataset<T>,
    params: TreeParams,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> KMeansTree<T> {
    pub fn reference(&self) -> &Dataset<T> {
        &self.reference
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        fn walk<T>(nodes: &[Node<T>], id: usize) -> usize {
            match &nodes[id].kind {
                NodeKind::Leaf(_) => 0,
                NodeKind::Inner(ch) => 1 + ch.iter().map(|&c| walk(nodes, c)).max().unwrap_or(0),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf(_)))
            .count()
    }

    /// Leaf point lists in depth-first order.
    pub fn leaves(&self) -> Vec<&[usize]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Leaf(p) => Some(p.as_slice()),
                NodeKind::Inner(_) => None,
            })
            .collect()
    }
}

fn mean_of<T: Scalar>(data: &Dataset<T>, points: &[usize]) -> Vec<T> {
    let mut c = vec![T::zero(); data.dim()];
    for &p in points {
        for (a, &v) in c.iter_mut().zip(data.row(p)) {
            *a += v;
        }
    }
    let n = T::from_usize(points.len()).expect("count");
    c.iter_mut().for_each(|a| *a = *a / n);
    c
}

/// Index of the nearest center, lowest index on ties.
#[inline]
fn nearest<T: Scalar>(x: &[T], centers: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centers.iter().enumerate() {
        if let Some(d) = sq_dist_bounded(x, c, best.1) {
            if d < best.1 {
                best = (j, d);
            }
        }
    }
    best
}

/// Lloyd iterations over `points`; returns cluster memberships.
fn kmeans<T: Scalar>(
    data: &Dataset<T>,
    points: &[usize],
    c: usize,
    max_iters: usize,
    seed: u64,
) -> (Vec<Vec<T>>, Vec<Vec<usize>>) {
    let mut rng = rng_from_seed(seed);
    let mut centers: Vec<Vec<T>> = sample(&mut rng, points.len(), c)
        .into_iter()
        .map(|i| data.row(points[i]).to_vec())
        .collect();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, &p) in assign.iter_mut().zip(points) {
            let (j, _) = nearest(data.row(p), &centers);
            changed |= *a != j;
            *a = j;
        }
        if !changed {
            break;
        }
        let mut members = vec![Vec::new(); c];
        for (&a, &p) in assign.iter().zip(points) {
            members[a].push(p);
        }
        // Refill empty clusters from the farthest point of the largest one.
        while let Some(empty) = members.iter().position(Vec::is_empty) {
            let largest = (0..c)
                .max_by_key(|&j| (members[j].len(), Reverse(j)))
                .expect("c >= 1");
            if members[largest].len() < 2 {
                break;
            }
            let center = mean_of(data, &members[largest]);
            let (pos, _) = members[largest]
                .iter()
                .enumerate()
                .map(|(pos, &p)| {
                    (
                        pos,
                        OrderedFloat(to_f64(super::sq_dist(data.row(p), &center))),
                    )
                })
                .max_by_key(|&(pos, d)| (d, Reverse(pos)))
                .expect("non-empty");
            let moved = members[largest].remove(pos);
            members[empty].push(moved);
        }
        for (j, m) in members.iter().enumerate() {
            if !m.is_empty() {
                centers[j] = mean_of(data, m);
            }
        }
    }
    // Final pass so every point sits under its nearest center.
    let mut members = vec![Vec::new(); c];
    for &p in points {
        members[nearest(data.row(p), &centers).0].push(p);
    }
    (centers, members)
}

/// Builds a k-means tree; nodes holding at most `branching` points are leaves.
pub fn build_kmeans_tree<T: Scalar>(
    reference: Dataset<T>,
    params: &TreeParams,
) -> Result<KMeansTree<T>> {
    if params.branching < 2 {
        return Err(Error::InvalidParameter(format!(
            "branching factor C = {} must be at least 2",
            params.branching
        )));
    }
    if params.max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be positive".into()));
    }
    let all: Vec<usize> = (0..reference.len()).collect();
    let mut nodes = vec![Node {
        center: mean_of(&reference, &all),
        kind: NodeKind::Leaf(Vec::new()),
    }];
    let mut stack = vec![(0usize, all)];
    while let Some((id, points)) = stack.pop() {
        if points.len() <= params.branching {
            nodes[id].kind = NodeKind::Leaf(points);
            continue;
        }
        let seed = derive_seed(params.seed, id as u64);
        let (centers, members) = kmeans(
            &reference,
            &points,
            params.branching,
            params.max_iters,
            seed,
        );
        let nonempty = members.iter().filter(|m| !m.is_empty()).count();
        if nonempty < 2 {
            nodes[id].kind = NodeKind::Leaf(points);
            continue;
        }
        let mut children = Vec::with_capacity(nonempty);
        for (center, m) in centers.into_iter().zip(members) {
            if m.is_empty() {
                continue;
            }
            let child = nodes.len();
            nodes.push(Node {
                center,
                kind: NodeKind::Leaf(Vec::new()),
            });
            children.push(child);
            stack.push((child, m));
        }
        nodes[id].kind = NodeKind::Inner(children);
    }
    Ok(KMeansTree {
        reference,
        params: *params,
        nodes,
    })
}

/// Approximate k nearest neighbors examining at most about `max_examined` points.
///
/// Leaves are visited in order of query-to-center distance. The first leaf is
/// always scanned; afterwards a leaf is skipped once `k` candidates are held
/// and scanning it would exceed the budget.
pub fn approx_knn<T: Scalar>(
    query: &[T],
    tree: &KMeansTree<T>,
    k: usize,
    max_examined: usize,
    decompose_s: Option<usize>,
) -> Result<NeighborResult<T>> {
    check_query(query, &tree.reference, k, decompose_s, None)?;
    if max_examined < k {
        return Err(Error::InvalidParameter(format!(
            "budget B = {max_examined} is smaller than k = {k}"
        )));
    }
    let mut top = TopK::new(k);
    let mut examined = 0usize;
    let mut heap: BinaryHeap<Reverse<(OrderedFloat<f64>, usize)>> = BinaryHeap::new();
    heap.push(Reverse((OrderedFloat(0.0), 0)));
    'search: while let Some(Reverse((_, start))) = heap.pop() {
        let mut id = start;
        loop {
            match &tree.nodes[id].kind {
                NodeKind::Inner(children) => {
                    let mut best: Option<(f64, usize)> = None;
                    for &c in children {
                        let d = to_f64(super::sq_dist(query, &tree.nodes[c].center));
                        match best {
                            Some((bd, _)) if d >= bd => heap.push(Reverse((OrderedFloat(d), c))),
                            _ => {
                                if let Some((bd, bc)) = best {
                                    heap.push(Reverse((OrderedFloat(bd), bc)));
                                }
                                best = Some((d, c));
                            }
                        }
                    }
                    id = best.expect("inner nodes have children").1;
                }
                NodeKind::Leaf(points) => {
                    if top.len() >= k && examined + points.len() > max_examined {
                        break 'search;
                    }
                    examined += top.scan(query, &tree.reference, points.iter().copied(), None);
                    if examined >= max_examined && top.len() >= k {
                        break 'search;
                    }
                    break;
                }
            }
        }
    }
    Ok(top.finish(query, &tree.reference, decompose_s, examined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::knn::exact_knn;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Dataset<f64> {
        let mut rng = rng_from_seed(seed);
        let v: Vec<f64> = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Dataset::from_flat("g", Label::Nominal, d, v).unwrap()
    }

    fn params(c: usize) -> TreeParams {
        TreeParams {
            branching: c,
            max_iters: 11,
            seed: 5,
        }
    }

    #[test]
    fn small_set_is_a_single_leaf() {
        let t = build_kmeans_tree(gaussian(10, 3, 1), &params(10)).unwrap();
        assert_eq!((t.height(), t.leaf_count()), (0, 1));
        assert!(build_kmeans_tree(gaussian(10, 3, 1), &params(1)).is_err());
    }

    #[test]
    fn every_point_in_exactly_one_leaf() {
        let t = build_kmeans_tree(gaussian(2000, 4, 2), &params(8)).unwrap();
        let mut all: Vec<usize> = t.leaves().concat();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }

    #[test]
    fn height_is_logarithmic() {
        let t = build_kmeans_tree(gaussian(10_000, 5, 3), &params(100)).unwrap();
        let bound = ((1e4f64).ln() / (100f64).ln()).ceil() as usize + 1;
        assert!(t.height() <= bound, "height {}", t.height());
        assert!(t.height() >= 1);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_kmeans_tree(gaussian(3000, 6, 4), &params(10)).unwrap();
        let b = build_kmeans_tree(gaussian(3000, 6, 4), &params(10)).unwrap();
        assert_eq!(a.leaves(), b.leaves());
    }

    #[test]
    fn duplicates_terminate() {
        let d = Dataset::from_flat("dup", Label::Nominal, 2, vec![1.0; 2 * 50]).unwrap();
        let t = build_kmeans_tree(d, &params(4)).unwrap();
        assert_eq!(t.leaves().concat().len(), 50);
    }

    #[test]
    fn full_budget_reduces_to_exact() {
        let r = gaussian(3000, 8, 6);
        let t = build_kmeans_tree(r.clone(), &params(16)).unwrap();
        let q = gaussian(100, 8, 7);
        for query in q.rows() {
            let a = approx_knn(query, &t, 3, r.len(), Some(2)).unwrap();
            let mut e = exact_knn(query, &r, 3, Some(2), None).unwrap();
            e.examined = a.examined;
            assert_eq!(a, e);
        }
    }

    #[test]
    fn approximate_never_beats_exact() {
        let r = gaussian(5000, 10, 8);
        let t = build_kmeans_tree(r.clone(), &params(16)).unwrap();
        for query in gaussian(200, 10, 9).rows() {
            let a = approx_knn(query, &t, 4, 100, None).unwrap();
            let e = exact_knn(query, &r, 4, None, None).unwrap();
            assert!(
                a.examined <= 100
                    || a.examined <= t.leaves().iter().map(|l| l.len()).max().unwrap()
            );
            for (x, y) in a.distances.iter().zip(&e.distances) {
                assert!(x >= y);
            }
        }
    }

    #[test]
    fn reference_point_finds_itself() {
        let r = gaussian(4000, 12, 10);
        let t = build_kmeans_tree(r.clone(), &params(20)).unwrap();
        for i in (0..4000).step_by(37) {
            let a = approx_knn(r.row(i), &t, 1, 1, None).unwrap();
            assert_eq!(a.distances[0], 0.0);
        }
    }

    #[test]
    fn budget_must_cover_k() {
        let t = build_kmeans_tree(gaussian(100, 2, 1), &params(4)).unwrap();
        assert!(approx_knn(&[0.0, 0.0], &t, 5, 4, None).is_err());
    }

    #[test]
    fn recall_is_high_in_low_dimension() {
        let reference = gaussian(100_000, 5, 11);
        let tree = build_kmeans_tree(reference.clone(), &params(32)).unwrap();
        let queries = gaussian(200, 5, 12);
        let hits = queries
            .rows()
            .filter(|q| {
                let a = approx_knn(q, &tree, 1, 1000, None).unwrap();
                let e = exact_knn(q, &reference, 1, None, None).unwrap();
                a.neighbor_indices[0] == e.neighbor_indices[0]
            })
            .count();
        assert!(
            hits as f64 / 200.0 >= 0.9,
            "recall@1 = {}",
            hits as f64 / 200.0
        );
    }
}
