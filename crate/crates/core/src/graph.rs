//! Exact k-NN graph construction: full-image baseline and per-partition
//! parallel variant, with work/span instrumentation and a recall metric for
//! the partitioning approximation.
//!
//! Similarity is squared Euclidean distance on raw feature rows. The
//! self-loop occupies one of the K slots: node v's list has min(K, |cands|)
//! entries and always starts with (v, 0). Note this differs from the "K
//! neighbors plus self" convention. Remaining entries are sorted ascending
//! by distance, ties broken by ascending node id.

use rayon::prelude::*;

use crate::cluster::PartitionSet;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

/// Per-node sorted neighbor lists; entries are (node id, squared distance).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList<F: Scalar> {
    pub neighbors: Vec<Vec<(u32, F)>>,
}

impl<F: Scalar> EdgeList<F> {
    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn k_effective(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// Neighbor id lists without distances, for the tape's segment ops.
    pub fn id_lists(&self) -> Vec<Vec<u32>> {
        self.neighbors
            .iter()
            .map(|l| l.iter().map(|&(u, _)| u).collect())
            .collect()
    }
}

/// How pairwise distances were enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    /// Every (v, u) pair evaluated, N^2 per candidate set.
    Naive,
}

/// Wait-free instrumentation of distance-evaluation work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkCounter {
    pub distance_ops: u64,
    pub per_partition_ops: Vec<u64>,
    /// max over partitions: the parallel critical path
    pub span_ops: u64,
    pub mode: DistanceMode,
}

impl WorkCounter {
    fn from_parts(per_partition_ops: Vec<u64>) -> Self {
        let distance_ops = per_partition_ops.iter().sum();
        let span_ops = per_partition_ops.iter().copied().max().unwrap_or(0);
        WorkCounter {
            distance_ops,
            per_partition_ops,
            span_ops,
            mode: DistanceMode::Naive,
        }
    }
}

fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s = s + d * d;
    }
    s
}

/// k-NN over one candidate set with local row indices; returns lists plus
/// the distance-evaluation count (n^2).
pub fn knn_local<F: Scalar>(x: &Tensor<F>, k: usize) -> Result<(Vec<Vec<(u32, F)>>, u64)> {
    let (n, _c) = x.dims2()?;
    if n == 0 {
        return Err(Error::InvalidArg("k-NN over zero nodes".into()));
    }
    if k < 1 {
        return Err(Error::InvalidArg("K must be >= 1".into()));
    }
    let keep = k.min(n);
    let mut lists = Vec::with_capacity(n);
    for v in 0..n {
        let row = x.row(v);
        let mut cands: Vec<(F, u32)> = Vec::with_capacity(n - 1);
        for u in 0..n {
            let d = sq_dist(row, x.row(u));
            if u != v {
                cands.push((d, u as u32));
            }
        }
        let others = keep - 1;
        let cmp = |a: &(F, u32), b: &(F, u32)| {
            a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1))
        };
        if others > 0 && others < cands.len() {
            cands.select_nth_unstable_by(others - 1, cmp);
            cands.truncate(others);
        }
        cands.sort_unstable_by(cmp);
        let mut list = Vec::with_capacity(keep);
        list.push((v as u32, F::zero()));
        list.extend(cands.into_iter().take(others).map(|(d, u)| (u, d)));
        lists.push(list);
    }
    Ok((lists, (n * n) as u64))
}

/// Exact K nearest over all N nodes, self included as nearest.
pub fn knn_full<F: Scalar>(x: &Tensor<F>, k: usize) -> Result<(EdgeList<F>, WorkCounter)> {
    let (lists, ops) = knn_local(x, k)?;
    Ok((EdgeList { neighbors: lists }, WorkCounter::from_parts(vec![ops])))
}

/// Per-partition exact k-NN: node v's candidates are restricted to its
/// partition. Partitions run in parallel; the merge is a deterministic fold
/// over partition index.
pub fn knn_partitioned<F: Scalar>(
    x: &Tensor<F>,
    parts: &PartitionSet<F>,
    k: usize,
) -> Result<(EdgeList<F>, WorkCounter)> {
    let (n, c) = x.dims2()?;
    parts.validate(n)?;
    if k < 1 {
        return Err(Error::InvalidArg("K must be >= 1".into()));
    }
    let results: Vec<(Vec<Vec<(u32, F)>>, u64)> = parts
        .members
        .par_iter()
        .map(|members| {
            let mut data = Vec::with_capacity(members.len() * c);
            for &v in members {
                data.extend_from_slice(x.row(v));
            }
            let local = Tensor::new(vec![members.len(), c], data)?;
            knn_local(&local, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut neighbors = vec![Vec::new(); n];
    let mut per_partition_ops = Vec::with_capacity(parts.kappa);
    for (members, (lists, ops)) in parts.members.iter().zip(results) {
        per_partition_ops.push(ops);
        for (local_v, list) in lists.into_iter().enumerate() {
            neighbors[members[local_v]] = list
                .into_iter()
                .map(|(u, d)| (members[u as usize] as u32, d))
                .collect();
        }
    }
    Ok((
        EdgeList { neighbors },
        WorkCounter::from_parts(per_partition_ops),
    ))
}

/// Mean fraction of a node's true global neighbors preserved under
/// partition-restricted search. Self-loops are excluded from both sets; a
/// node whose full list holds only itself contributes 1.0.
pub fn neighbor_recall<F: Scalar>(
    x: &Tensor<F>,
    parts: &PartitionSet<F>,
    k: usize,
) -> Result<f64> {
    let (full, _) = knn_full(x, k)?;
    let (part, _) = knn_partitioned(x, parts, k)?;
    let n = full.n_nodes();
    let mut total = 0.0;
    for v in 0..n {
        let truth: Vec<u32> = full.neighbors[v]
            .iter()
            .map(|&(u, _)| u)
            .filter(|&u| u as usize != v)
            .collect();
        if truth.is_empty() {
            total += 1.0;
            continue;
        }
        let hit = part.neighbors[v]
            .iter()
            .filter(|&&(u, _)| u as usize != v && truth.contains(&u))
            .count();
        total += hit as f64 / truth.len() as f64;
    }
    Ok(total / n as f64)
}
