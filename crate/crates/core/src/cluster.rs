//! Batched k-Means partitioning of image patches (Lloyd's algorithm).
//!
//! Determinism contract: squared-Euclidean assignment with ties going to the
//! lower centroid index, centroid updates accumulated in ascending node
//! order, and all randomness drawn from the seeded splitmix64 stream. Any
//! empty cluster is re-seeded with the point farthest from its current
//! centroid (ties to the lowest index), so no partition is ever empty on
//! return.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmeansInit {
    /// Centroid j starts at feature row floor(j*N/kappa).
    Stride,
    /// Centroids start at kappa distinct rows drawn from a splitmix64 stream.
    Seeded(u64),
}

/// Result of partitioning N nodes into kappa clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSet<F: Scalar> {
    pub kappa: usize,
    /// Per-node partition id in [0, kappa).
    pub labels: Vec<usize>,
    /// Per-partition node index lists, each sorted ascending.
    pub members: Vec<Vec<usize>>,
    /// [kappa, C]; row i is the mean of partition i's feature rows.
    pub centroids: Tensor<F>,
    pub sizes: Vec<usize>,
}

impl<F: Scalar> PartitionSet<F> {
    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Structural consistency check used by consumers that accept a
    /// caller-provided partitioning.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(Error::InvalidArg(format!(
                "partition covers {} nodes, expected {}",
                self.labels.len(),
                n
            )));
        }
        if self.members.len() != self.kappa || self.sizes.len() != self.kappa {
            return Err(Error::InvalidArg("partition list count != kappa".into()));
        }
        let total: usize = self.sizes.iter().sum();
        if total != n {
            return Err(Error::InvalidArg("partition sizes do not sum to N".into()));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::EmptyPartition(i));
            }
            if m.len() != self.sizes[i] {
                return Err(Error::InvalidArg("member list length != size".into()));
            }
            for w in m.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidArg("member list not sorted".into()));
                }
            }
            for &v in m {
                if v >= n || self.labels[v] != i {
                    return Err(Error::InvalidArg("member/label disagreement".into()));
                }
            }
        }
        Ok(())
    }

    /// Build from explicit labels, recomputing members and exact mean
    /// centroids. Used for forced-balanced benchmark labelings.
    pub fn from_labels(x: &Tensor<F>, labels: Vec<usize>, kappa: usize) -> Result<Self> {
        let (n, c) = x.dims2()?;
        if labels.len() != n {
            return Err(Error::InvalidArg("labels length != N".into()));
        }
        let mut members = vec![Vec::new(); kappa];
        for (v, &l) in labels.iter().enumerate() {
            if l >= kappa {
                return Err(Error::InvalidArg(format!("label {} out of range", l)));
            }
            members[l].push(v);
        }
        if let Some(i) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::EmptyPartition(i));
        }
        let centroids = exact_centroids(x, &members, c);
        let sizes = members.iter().map(|m| m.len()).collect();
        Ok(PartitionSet {
            kappa,
            labels,
            members,
            centroids,
            sizes,
        })
    }
}

fn exact_centroids<F: Scalar>(x: &Tensor<F>, members: &[Vec<usize>], c: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); members.len() * c];
    for (i, m) in members.iter().enumerate() {
        for &v in m {
            let row = x.row(v);
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + row[j];
            }
        }
        let nf = F::from_usize(m.len());
        for j in 0..c {
            data[i * c + j] = data[i * c + j] / nf;
        }
    }
    Tensor::new(vec![members.len(), c], data).expect("centroid shape")
}

fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s = s + d * d;
    }
    s
}

/// Lloyd's algorithm. Returns the partitioning plus the per-iteration SSE
/// trace (computed after each centroid update, in f64).
pub fn kmeans_traced<F: Scalar>(
    x: &Tensor<F>,
    kappa: usize,
    max_iters: usize,
    init: KmeansInit,
) -> Result<(PartitionSet<F>, Vec<f64>)> {
    let (n, c) = x.dims2()?;
    if kappa < 1 || kappa > n {
        return Err(Error::InvalidArg(format!(
            "kappa {} outside [1, {}]",
            kappa, n
        )));
    }
    if max_iters < 1 {
        return Err(Error::InvalidArg("max_iters must be >= 1".into()));
    }
    x.ensure_finite("kmeans input")?;

    let seed_rows = match init {
        KmeansInit::Stride => (0..kappa).map(|j| j * n / kappa).collect::<Vec<_>>(),
        KmeansInit::Seeded(seed) => {
            let mut rng = SplitMix64::new(seed);
            let mut rows = Vec::with_capacity(kappa);
            while rows.len() < kappa {
                let r = rng.next_below(n);
                if !rows.contains(&r) {
                    rows.push(r);
                }
            }
            rows
        }
    };
    let mut centroids: Vec<Vec<F>> = seed_rows.iter().map(|&r| x.row(r).to_vec()).collect();
    let mut labels = vec![usize::MAX; n];
    let mut sse_trace = Vec::new();

    for _iter in 0..max_iters {
        // assignment: nearest centroid, ties to the lower index
        let mut new_labels = vec![0usize; n];
        let mut sizes = vec![0usize; kappa];
        for v in 0..n {
            let row = x.row(v);
            let mut best = sq_dist(row, &centroids[0]);
            let mut bi = 0;
            for (i, cen) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(row, cen);
                if d < best {
                    best = d;
                    bi = i;
                }
            }
            new_labels[v] = bi;
            sizes[bi] += 1;
        }
        // empty-cluster rule: re-seed with the farthest point from its own
        // centroid, never draining a singleton cluster
        for i in 0..kappa {
            if sizes[i] > 0 {
                continue;
            }
            let mut best_v = usize::MAX;
            let mut best_d = F::neg_infinity();
            for v in 0..n {
                if sizes[new_labels[v]] < 2 {
                    continue;
                }
                let d = sq_dist(x.row(v), &centroids[new_labels[v]]);
                if d > best_d {
                    best_d = d;
                    best_v = v;
                }
            }
            let v = best_v;
            sizes[new_labels[v]] -= 1;
            new_labels[v] = i;
            sizes[i] = 1;
            centroids[i] = x.row(v).to_vec();
        }
        // centroid update, ascending node order
        let mut sums = vec![vec![F::zero(); c]; kappa];
        for v in 0..n {
            let row = x.row(v);
            let acc = &mut sums[new_labels[v]];
            for j in 0..c {
                acc[j] = acc[j] + row[j];
            }
        }
        for i in 0..kappa {
            let nf = F::from_usize(sizes[i]);
            for j in 0..c {
                centroids[i][j] = sums[i][j] / nf;
            }
        }
        let mut sse = 0.0f64;
        for v in 0..n {
            sse += sq_dist(x.row(v), &centroids[new_labels[v]]).to_f64();
        }
        sse_trace.push(sse);
        let converged = new_labels == labels;
        labels = new_labels;
        if converged {
            break;
        }
    }

    let mut members = vec![Vec::new(); kappa];
    for (v, &l) in labels.iter().enumerate() {
        members[l].push(v);
    }
    let centroids = exact_centroids(x, &members, c);
    let sizes = members.iter().map(|m| m.len()).collect();
    Ok((
        PartitionSet {
            kappa,
            labels,
            members,
            centroids,
            sizes,
        },
        sse_trace,
    ))
}

pub fn kmeans<F: Scalar>(
    x: &Tensor<F>,
    kappa: usize,
    max_iters: usize,
    init: KmeansInit,
) -> Result<PartitionSet<F>> {
    kmeans_traced(x, kappa, max_iters, init).map(|(p, _)| p)
}

/// Independent per-image clustering of [B,N,C]; image b's result is bitwise
/// identical to the unbatched call on x[b]. Images run in parallel.
pub fn kmeans_batched<F: Scalar>(
    x: &Tensor<F>,
    kappa: usize,
    max_iters: usize,
    init: KmeansInit,
) -> Result<(Vec<PartitionSet<F>>, Tensor<F>)> {
    let (b, n, c) = match x.shape() {
        [b, n, c] => (*b, *n, *c),
        s => return Err(Error::shape("kmeans_batched", format!("{:?}", s))),
    };
    let parts: Vec<PartitionSet<F>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let img = Tensor::new(
                vec![n, c],
                x.data()[bi * n * c..(bi + 1) * n * c].to_vec(),
            )?;
            kmeans(&img, kappa, max_iters, init)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut label_data = Vec::with_capacity(b * n);
    for p in &parts {
        label_data.extend(p.labels.iter().map(|&l| F::from_usize(l)));
    }
    Ok((parts, Tensor::new(vec![b, n], label_data)?))
}
