//! Reverse-mode differentiation tape.
//!
//! The tape is append-only during the forward pass and single-writer; one
//! tape per forward. Backward walks nodes in strict reverse insertion order
//! and produces a gradient for every registered parameter.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::ops;
use crate::numeric::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running batch-norm statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> BnStats<F> {
    pub fn identity(c: usize) -> Self {
        BnStats {
            mean: vec![F::zero(); c],
            var: vec![F::one(); c],
        }
    }
}

/// Per-node adjacency: neighbor lists of local node ids, self first.
pub type Neighbors = Vec<Vec<u32>>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op<F: Scalar> {
    Leaf,
    Matmul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    AddBias(VarId, VarId),
    Scale(VarId, F),
    ScalarMul {
        x: VarId,
        s: VarId,
        offset: F,
    },
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    Reduce {
        x: VarId,
        kind: ReduceKind,
        axis: usize,
        arg: Option<Vec<usize>>,
    },
    Gelu(VarId),
    LeakyRelu(VarId, F),
    SoftmaxRows(VarId),
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Conv3x3 {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
    },
    DwConv3x3 {
        x: VarId,
        w: VarId,
    },
    GatherRows {
        x: VarId,
        idx: Arc<Vec<usize>>,
    },
    RepeatRow {
        x: VarId,
        n: usize,
    },
    SegmentMean {
        x: VarId,
        labels: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
    NbMaxDiff {
        x: VarId,
        // retained so the op records the graph it ran over
        #[allow(dead_code)]
        edges: Arc<Neighbors>,
        arg: Vec<u32>,
    },
    NbMax {
        x: VarId,
        #[allow(dead_code)]
        edges: Arc<Neighbors>,
        arg: Vec<u32>,
    },
    NbSum {
        x: VarId,
        edges: Arc<Neighbors>,
    },
    SegmentMaxContig {
        m: VarId,
        #[allow(dead_code)]
        offsets: Arc<Vec<usize>>,
        arg: Vec<u32>,
    },
    Reshape(VarId),
    SumAll(VarId),
    PairwiseAdd(VarId, VarId),
    SoftmaxCrossEntropy {
        logits: VarId,
        targets: Arc<Vec<usize>>,
        probs: Tensor<F>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, VarId)>,
}

/// Parameter gradients keyed by registration name.
#[derive(Debug)]
pub struct Grads<F: Scalar> {
    by_name: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.by_name.iter()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Saved argmax indices of a max-reduction node.
    pub fn reduce_arg(&self, id: VarId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::Reduce { arg: Some(a), .. } => Some(a),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Result<VarId> {
        value.ensure_finite("tape op")?;
        self.nodes.push(Node { op, value });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<VarId> {
        self.push(Op::Leaf, value)
    }

    /// Register a trainable parameter; its gradient appears in [`Grads`]
    /// under `name` after backward.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> Result<VarId> {
        let id = self.push(Op::Leaf, value.clone())?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul(a, b), v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Sub(a, b), v)
    }

    /// x [n,c] plus a bias row of c entries.
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (n, c) = self.value(x).dims2()?;
        if self.value(b).len() != c {
            return Err(Error::shape("add_bias", "bias width"));
        }
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + bd[j];
            }
        }
        let v = Tensor::new(vec![n, c], data)?;
        self.push(Op::AddBias(x, b), v)
    }

    pub fn scale(&mut self, x: VarId, k: F) -> Result<VarId> {
        let v = self.value(x).map(|e| e * k);
        self.push(Op::Scale(x, k), v)
    }

    /// y = (offset + s) * x with a learnable scalar s (1-element tensor).
    pub fn scalar_mul(&mut self, x: VarId, s: VarId, offset: F) -> Result<VarId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scalar_mul", "s must be a scalar"));
        }
        let k = offset + self.value(s).data()[0];
        let v = self.value(x).map(|e| e * k);
        self.push(Op::ScalarMul { x, s, offset }, v)
    }

    /// Append 2-d tensors column-wise; all parts share the leading extent.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero parts".into()));
        }
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::shape("concat_features", "leading extent mismatch"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![n, total], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Stack 2-d tensors row-wise; all parts share the column extent.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero parts".into()));
        }
        let c = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pn, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", "column extent mismatch"));
            }
            rows += pn;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    /// Reduce a 2-d tensor along `axis`. Max saves first-occurrence argmax
    /// indices for the backward rule.
    pub fn reduce(&mut self, kind: ReduceKind, x: VarId, axis: usize) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if axis > 1 {
            return Err(Error::InvalidArg(format!("axis {} out of range", axis)));
        }
        let (red_len, out_len) = if axis == 0 { (r, c) } else { (c, r) };
        if red_len == 0 {
            return Err(Error::InvalidArg("empty reduction axis".into()));
        }
        let xd = self.value(x).data();
        let at = |i: usize, o: usize| -> F {
            if axis == 0 {
                xd[i * c + o]
            } else {
                xd[o * c + i]
            }
        };
        let mut out = vec![F::zero(); out_len];
        let mut arg = None;
        match kind {
            ReduceKind::Max => {
                let mut args = vec![0usize; out_len];
                for o in 0..out_len {
                    let mut best = at(0, o);
                    let mut bi = 0;
                    for i in 1..red_len {
                        let v = at(i, o);
                        if v > best {
                            best = v;
                            bi = i;
                        }
                    }
                    out[o] = best;
                    args[o] = bi;
                }
                arg = Some(args);
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..out_len {
                    let mut s = F::zero();
                    for i in 0..red_len {
                        s = s + at(i, o);
                    }
                    if kind == ReduceKind::Mean {
                        s = s / F::from_usize(red_len);
                    }
                    out[o] = s;
                }
            }
        }
        let shape = if axis == 0 { vec![1, c] } else { vec![r, 1] };
        let v = Tensor::new(shape, out)?;
        self.push(Op::Reduce { x, kind, axis, arg }, v)
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let v = self.value(x).map(ops::gelu);
        self.push(Op::Gelu(x), v)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: F) -> Result<VarId> {
        let v = self.value(x).map(|e| ops::leaky_relu(e, slope));
        self.push(Op::LeakyRelu(x, slope), v)
    }

    /// Stable softmax along rows of a 2-d tensor.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let v = ops::softmax_rows(self.value(x))?;
        self.push(Op::SoftmaxRows(x), v)
    }

    /// Batch normalization over rows of [n,c]. Train mode uses batch
    /// statistics (n >= 2 required) and updates `running` in place with
    /// momentum 0.1; infer mode normalizes with the running statistics.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: &mut BnStats<F>,
        mode: BnMode,
    ) -> Result<VarId> {
        let (n, c) = self.value(x).dims2()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batchnorm", "gamma/beta width"));
        }
        if running.mean.len() != c {
            return Err(Error::shape("batchnorm", "running stats width"));
        }
        let eps = F::from_f64(BN_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArg("batchnorm train mode needs n >= 2".into()));
                }
                let xd = self.value(x).data();
                let nf = F::from_usize(n);
                let mut mean = vec![F::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        mean[j] = mean[j] + xd[i * c + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / nf;
                }
                let mut var = vec![F::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        let d = xd[i * c + j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / nf;
                }
                let mom = F::from_f64(BN_MOMENTUM);
                for j in 0..c {
                    running.mean[j] = (F::one() - mom) * running.mean[j] + mom * mean[j];
                    running.var[j] = (F::one() - mom) * running.var[j] + mom * var[j];
                }
                (mean, var, true)
            }
            BnMode::Infer => (running.mean.clone(), running.var.clone(), false),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![F::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = gd[j] * (xd[i * c + j] - mean[j]) * inv_std[j] + bd[j];
            }
        }
        let v = Tensor::new(vec![n, c], out)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            v,
        )
    }

    pub fn conv3x3(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> Result<VarId> {
        let v = ops::conv3x3(self.value(x), self.value(w), self.value(b), stride)?;
        self.push(Op::Conv3x3 { x, w, b, stride }, v)
    }

    pub fn dwconv3x3(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let v = ops::dwconv3x3(self.value(x), self.value(w))?;
        self.push(Op::DwConv3x3 { x, w }, v)
    }

    /// out[i] = x[idx[i]] for a 2-d x.
    pub fn gather_rows(&mut self, x: VarId, idx: Arc<Vec<usize>>) -> Result<VarId> {
        let (n, c) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::InvalidArg(format!("gather index {} out of {}", i, n)));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        self.push(Op::GatherRows { x, idx }, v)
    }

    /// Broadcast a single row (shape [c] or [1,c]) to n rows.
    pub fn repeat_row(&mut self, x: VarId, n: usize) -> Result<VarId> {
        let t = self.value(x);
        let c = match t.shape() {
            [c] => *c,
            [1, c] => *c,
            s => return Err(Error::shape("repeat_row", format!("{:?}", s))),
        };
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&t.data()[..c]);
        }
        let v = Tensor::new(vec![n, c], data)?;
        self.push(Op::RepeatRow { x, n }, v)
    }

    /// Segment means of rows grouped by label; every segment must be
    /// non-empty. Accumulation runs in ascending row order.
    pub fn segment_mean(
        &mut self,
        x: VarId,
        labels: Arc<Vec<usize>>,
        n_segments: usize,
    ) -> Result<VarId> {
        let (n, c) = self.value(x).dims2()?;
        if labels.len() != n {
            return Err(Error::shape("segment_mean", "labels length"));
        }
        let mut counts = vec![0usize; n_segments];
        for &l in labels.iter() {
            if l >= n_segments {
                return Err(Error::InvalidArg(format!("label {} out of {}", l, n_segments)));
            }
            counts[l] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyPartition(empty));
        }
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); n_segments * c];
        for i in 0..n {
            let l = labels[i];
            for j in 0..c {
                out[l * c + j] = out[l * c + j] + xd[i * c + j];
            }
        }
        for s in 0..n_segments {
            let cf = F::from_usize(counts[s]);
            for j in 0..c {
                out[s * c + j] = out[s * c + j] / cf;
            }
        }
        let v = Tensor::new(vec![n_segments, c], out)?;
        self.push(Op::SegmentMean { x, labels, counts }, v)
    }

    /// y[v] = max_{u in N(v)} (x[u] - x[v]) elementwise, first occurrence on
    /// ties in neighbor-list order.
    pub fn nb_max_diff(&mut self, x: VarId, edges: Arc<Neighbors>) -> Result<VarId> {
        let (n, c) = self.check_edges(x, &edges)?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); n * c];
        let mut arg = vec![0u32; n * c];
        for v in 0..n {
            let nbrs = &edges[v];
            for j in 0..c {
                let xv = xd[v * c + j];
                let mut best = xd[nbrs[0] as usize * c + j] - xv;
                let mut bu = nbrs[0];
                for &u in &nbrs[1..] {
                    let d = xd[u as usize * c + j] - xv;
                    if d > best {
                        best = d;
                        bu = u;
                    }
                }
                out[v * c + j] = best;
                arg[v * c + j] = bu;
            }
        }
        let val = Tensor::new(vec![n, c], out)?;
        self.push(Op::NbMaxDiff { x, edges, arg }, val)
    }

    /// y[v] = max_{u in N(v)} x[u] elementwise.
    pub fn nb_max(&mut self, x: VarId, edges: Arc<Neighbors>) -> Result<VarId> {
        let (n, c) = self.check_edges(x, &edges)?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); n * c];
        let mut arg = vec![0u32; n * c];
        for v in 0..n {
            let nbrs = &edges[v];
            for j in 0..c {
                let mut best = xd[nbrs[0] as usize * c + j];
                let mut bu = nbrs[0];
                for &u in &nbrs[1..] {
                    let d = xd[u as usize * c + j];
                    if d > best {
                        best = d;
                        bu = u;
                    }
                }
                out[v * c + j] = best;
                arg[v * c + j] = bu;
            }
        }
        let val = Tensor::new(vec![n, c], out)?;
        self.push(Op::NbMax { x, edges, arg }, val)
    }

    /// y[v] = sum_{u in N(v)} x[u].
    pub fn nb_sum(&mut self, x: VarId, edges: Arc<Neighbors>) -> Result<VarId> {
        let (n, c) = self.check_edges(x, &edges)?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); n * c];
        for v in 0..n {
            for &u in &edges[v] {
                for j in 0..c {
                    out[v * c + j] = out[v * c + j] + xd[u as usize * c + j];
                }
            }
        }
        let val = Tensor::new(vec![n, c], out)?;
        self.push(Op::NbSum { x, edges }, val)
    }

    fn check_edges(&self, x: VarId, edges: &Neighbors) -> Result<(usize, usize)> {
        let (n, c) = self.value(x).dims2()?;
        if edges.len() != n {
            return Err(Error::shape("neighbor op", "edge list length"));
        }
        for (v, nbrs) in edges.iter().enumerate() {
            if nbrs.is_empty() {
                return Err(Error::InvalidArg(format!("node {} has no neighbors", v)));
            }
            if nbrs.iter().any(|&u| u as usize >= n) {
                return Err(Error::InvalidArg(format!("node {} has out-of-range neighbor", v)));
            }
        }
        Ok((n, c))
    }

    /// Per-segment max over contiguous row ranges of m ([E,c]); offsets has
    /// n+1 entries and every segment must be non-empty.
    pub fn segment_max_contig(&mut self, m: VarId, offsets: Arc<Vec<usize>>) -> Result<VarId> {
        let (e, c) = self.value(m).dims2()?;
        let n = offsets.len().saturating_sub(1);
        if offsets.first() != Some(&0) || offsets.last() != Some(&e) {
            return Err(Error::shape("segment_max", "offsets do not cover rows"));
        }
        let md = self.value(m).data();
        let mut out = vec![F::zero(); n * c];
        let mut arg = vec![0u32; n * c];
        for v in 0..n {
            let (lo, hi) = (offsets[v], offsets[v + 1]);
            if lo >= hi {
                return Err(Error::InvalidArg(format!("empty segment {}", v)));
            }
            for j in 0..c {
                let mut best = md[lo * c + j];
                let mut br = lo;
                for r in lo + 1..hi {
                    let d = md[r * c + j];
                    if d > best {
                        best = d;
                        br = r;
                    }
                }
                out[v * c + j] = best;
                arg[v * c + j] = br as u32;
            }
        }
        let val = Tensor::new(vec![n, c], out)?;
        self.push(Op::SegmentMaxContig { m, offsets, arg }, val)
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape(x), v)
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let mut s = F::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// out[i*q+j] = a[i] + b[j] for a [p,c], b [q,c].
    pub fn pairwise_add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (p, c) = self.value(a).dims2()?;
        let (q, cb) = self.value(b).dims2()?;
        if c != cb {
            return Err(Error::shape("pairwise_add", "column widths differ"));
        }
        let mut data = Vec::with_capacity(p * q * c);
        for i in 0..p {
            let ar = self.value(a).row(i).to_vec();
            for j in 0..q {
                let br = self.value(b).row(j);
                data.extend(ar.iter().zip(br).map(|(&x, &y)| x + y));
            }
        }
        let v = Tensor::new(vec![p * q, c], data)?;
        self.push(Op::PairwiseAdd(a, b), v)
    }

    /// Mean softmax cross-entropy loss over rows; returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, targets: Arc<Vec<usize>>) -> Result<VarId> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", "targets length"));
        }
        if targets.iter().any(|&t| t >= k) {
            return Err(Error::InvalidArg("target class out of range".into()));
        }
        let probs = ops::softmax_rows(self.value(logits))?;
        let mut loss = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss = loss - probs.at2(i, t).max(F::from_f64(1e-300)).ln();
        }
        loss = loss / F::from_usize(n);
        self.push(
            Op::SoftmaxCrossEntropy { logits, targets, probs },
            Tensor::scalar(loss),
        )
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// registered parameter (zero if the loss does not depend on it).
    pub fn backward(&self, loss: VarId) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), F::one()));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut by_name = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape().to_vec()));
            by_name.insert(name.clone(), g);
        }
        Ok(Grads { by_name })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<F>>], id: VarId, g: Tensor<F>) {
        match &mut grads[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = ops::matmul_nt(g, self.value(*b))?;
                let db = ops::matmul_tn(self.value(*a), g)?;
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::AddBias(x, b) => {
                let (n, c) = g.dims2()?;
                let mut db = vec![F::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        db[j] = db[j] + g.at2(i, j);
                    }
                }
                self.add_grad(grads, *x, g.clone());
                self.add_grad(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
            }
            Op::Scale(x, k) => {
                self.add_grad(grads, *x, g.map(|v| v * *k));
            }
            Op::ScalarMul { x, s, offset } => {
                let k = *offset + self.value(*s).data()[0];
                self.add_grad(grads, *x, g.map(|v| v * k));
                let mut ds = F::zero();
                for (gv, xv) in g.data().iter().zip(self.value(*x).data()) {
                    ds = ds + *gv * *xv;
                }
                self.add_grad(grads, *s, Tensor::scalar(ds));
            }
            Op::ConcatCols(parts) => {
                let n = g.dims2()?.0;
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).dims2()?.1;
                    let mut data = Vec::with_capacity(n * pc);
                    for r in 0..n {
                        data.extend_from_slice(&g.row(r)[col..col + pc]);
                    }
                    self.add_grad(grads, p, Tensor::new(vec![n, pc], data)?);
                    col += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.dims2()?.1;
                let mut row = 0;
                for &p in parts {
                    let pn = self.value(p).dims2()?.0;
                    let data = g.data()[row * c..(row + pn) * c].to_vec();
                    self.add_grad(grads, p, Tensor::new(vec![pn, c], data)?);
                    row += pn;
                }
            }
            Op::Reduce { x, kind, axis, arg } => {
                let (r, c) = self.value(*x).dims2()?;
                let red_len = if *axis == 0 { r } else { c };
                let mut dx = Tensor::zeros(vec![r, c]);
                let gd = g.data();
                match kind {
                    ReduceKind::Max => {
                        let arg = arg.as_ref().expect("max reduce saves argmax");
                        for (o, &a) in arg.iter().enumerate() {
                            let (ri, ci) = if *axis == 0 { (a, o) } else { (o, a) };
                            dx.data_mut()[ri * c + ci] = gd[o];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let scale = if *kind == ReduceKind::Mean {
                            F::one() / F::from_usize(red_len)
                        } else {
                            F::one()
                        };
                        for o in 0..gd.len() {
                            for i in 0..red_len {
                                let (ri, ci) = if *axis == 0 { (i, o) } else { (o, i) };
                                dx.data_mut()[ri * c + ci] = gd[o] * scale;
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * ops::gelu_grad(xv))
                    .collect();
                self.add_grad(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * ops::leaky_relu_grad(xv, *slope))
                    .collect();
                self.add_grad(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot = dot + g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..c {
                        dx[i * c + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                    }
                }
                self.add_grad(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let gr = g.data();
                let nf = F::from_usize(n);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                        dgamma[j] = dgamma[j] + gr[i * c + j] * xhat;
                        dbeta[j] = dbeta[j] + gr[i * c + j];
                    }
                }
                let mut dx = vec![F::zero(); n * c];
                if *batch_stats {
                    // full backward through the batch mean and variance
                    for j in 0..c {
                        let mut sum_dy = F::zero();
                        let mut sum_dy_xhat = F::zero();
                        for i in 0..n {
                            let dy = gr[i * c + j] * gd[j];
                            let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xhat;
                        }
                        for i in 0..n {
                            let dy = gr[i * c + j] * gd[j];
                            let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                            dx[i * c + j] =
                                inv_std[j] * (dy - sum_dy / nf - xhat * sum_dy_xhat / nf);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..c {
                            dx[i * c + j] = gr[i * c + j] * gd[j] * inv_std[j];
                        }
                    }
                }
                self.add_grad(grads, *x, Tensor::new(vec![n, c], dx)?);
                self.add_grad(
                    grads,
                    *gamma,
                    Tensor::new(self.value(*gamma).shape().to_vec(), dgamma)?,
                );
                self.add_grad(
                    grads,
                    *beta,
                    Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?,
                );
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let (dx, dw, db) =
                    ops::conv3x3_backward(self.value(*x), self.value(*w), g, *stride)?;
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *w, dw);
                self.add_grad(grads, *b, db.reshaped(self.value(*b).shape().to_vec())?);
            }
            Op::DwConv3x3 { x, w } => {
                let (dx, dw) = ops::dwconv3x3_backward(self.value(*x), self.value(*w), g)?;
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *w, dw);
            }
            Op::GatherRows { x, idx } => {
                let (n, c) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(vec![n, c]);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        let slot = &mut dx.data_mut()[src * c + j];
                        *slot = *slot + g.at2(r, j);
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::RepeatRow { x, n } => {
                let c = g.dims2()?.1;
                let mut dx = vec![F::zero(); c];
                for i in 0..*n {
                    for j in 0..c {
                        dx[j] = dx[j] + g.at2(i, j);
                    }
                }
                self.add_grad(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::SegmentMean { x, labels, counts } => {
                let (n, c) = self.value(*x).dims2()?;
                let mut dx = vec![F::zero(); n * c];
                for i in 0..n {
                    let l = labels[i];
                    let cf = F::from_usize(counts[l]);
                    for j in 0..c {
                        dx[i * c + j] = g.at2(l, j) / cf;
                    }
                }
                self.add_grad(grads, *x, Tensor::new(vec![n, c], dx)?);
            }
            Op::NbMaxDiff { x, arg, .. } => {
                let (n, c) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(vec![n, c]);
                for v in 0..n {
                    for j in 0..c {
                        let gv = g.at2(v, j);
                        let u = arg[v * c + j] as usize;
                        let d = dx.data_mut();
                        d[u * c + j] = d[u * c + j] + gv;
                        d[v * c + j] = d[v * c + j] - gv;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::NbMax { x, arg, .. } => {
                let (n, c) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(vec![n, c]);
                for v in 0..n {
                    for j in 0..c {
                        let u = arg[v * c + j] as usize;
                        let d = dx.data_mut();
                        d[u * c + j] = d[u * c + j] + g.at2(v, j);
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::NbSum { x, edges } => {
                let (n, c) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(vec![n, c]);
                for v in 0..n {
                    for &u in &edges[v] {
                        for j in 0..c {
                            let d = dx.data_mut();
                            d[u as usize * c + j] = d[u as usize * c + j] + g.at2(v, j);
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::SegmentMaxContig { m, arg, .. } => {
                let (e, c) = self.value(*m).dims2()?;
                let n = g.dims2()?.0;
                let mut dm = Tensor::zeros(vec![e, c]);
                for v in 0..n {
                    for j in 0..c {
                        let r = arg[v * c + j] as usize;
                        let d = dm.data_mut();
                        d[r * c + j] = d[r * c + j] + g.at2(v, j);
                    }
                }
                self.add_grad(grads, *m, dm);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(self.value(*x).shape().to_vec())?;
                self.add_grad(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.add_grad(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::PairwiseAdd(a, b) => {
                let (p, c) = self.value(*a).dims2()?;
                let (q, _) = self.value(*b).dims2()?;
                let mut da = Tensor::zeros(vec![p, c]);
                let mut db = Tensor::zeros(vec![q, c]);
                for i in 0..p {
                    for j in 0..q {
                        for k in 0..c {
                            let gv = g.at2(i * q + j, k);
                            da.data_mut()[i * c + k] = da.data_mut()[i * c + k] + gv;
                            db.data_mut()[j * c + k] = db.data_mut()[j * c + k] + gv;
                        }
                    }
                }
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (n, k) = probs.dims2()?;
                let gv = g.data()[0];
                let nf = F::from_usize(n);
                let mut dl = vec![F::zero(); n * k];
                for i in 0..n {
                    for j in 0..k {
                        let ind = if targets[i] == j { F::one() } else { F::zero() };
                        dl[i * k + j] = gv * (probs.at2(i, j) - ind) / nf;
                    }
                }
                self.add_grad(grads, *logits, Tensor::new(vec![n, k], dl)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::fd;
    use crate::rng::SplitMix64;
    use std::collections::BTreeMap;

    type Params = BTreeMap<String, Tensor<f64>>;

    fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// FD-verify one op. `build` registers every map entry as a named param
    /// and returns a scalar loss; rebuilt from scratch per FD evaluation.
    fn fd_check(
        params: &Params,
        build: impl Fn(&mut Tape<f64>, &Params) -> VarId,
        tol: f64,
        what: &str,
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        let grads = tape.backward(loss).unwrap();
        let analytic: Params = grads.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let reference = fd::central_diff(
            params,
            |m| {
                let mut t = Tape::new();
                let l = build(&mut t, m);
                t.value(l).data()[0]
            },
            1e-6,
        );
        let err = fd::max_rel_err(&analytic, &reference);
        assert!(err < tol, "{}: max rel err {}", what, err);
    }

    /// Rank-one weighted sum of a 2-d output so every element carries a
    /// distinct gradient weight: loss = L @ out @ R with constant L, R.
    fn weighted_sum(tape: &mut Tape<f64>, out: VarId, seed: u64) -> VarId {
        let (n, c) = tape.value(out).dims2().unwrap();
        let mut rng = SplitMix64::new(seed ^ 0xdead);
        let l = tape.constant(rand_tensor(&mut rng, vec![1, n])).unwrap();
        let r = tape.constant(rand_tensor(&mut rng, vec![c, 1])).unwrap();
        let lo = tape.matmul(l, out).unwrap();
        let lor = tape.matmul(lo, r).unwrap();
        tape.sum_all(lor).unwrap()
    }

    fn one_param(rng: &mut SplitMix64, shape: Vec<usize>) -> Params {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), rand_tensor(rng, shape));
        m
    }

    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-6;

    #[test]
    fn fd_elementwise_ops() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let p = one_param(&mut rng, vec![3, 4]);
            for (name, f) in [
                ("gelu", Tape::gelu as fn(&mut Tape<f64>, VarId) -> Result<VarId>),
                ("softmax_rows", Tape::softmax_rows),
            ] {
                fd_check(
                    &p,
                    |t, m| {
                        let x = t.param("x", &m["x"]).unwrap();
                        let y = f(t, x).unwrap();
                        weighted_sum(t, y, seed)
                    },
                    TOL,
                    name,
                );
            }
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let y = t.leaky_relu(x, 0.2).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "leaky_relu",
            );
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let y = t.scale(x, -1.7).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "scale",
            );
        }
    }

    #[test]
    fn fd_binary_and_bias_ops() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let mut p = BTreeMap::new();
            p.insert("a".to_string(), rand_tensor(&mut rng, vec![3, 4]));
            p.insert("b".to_string(), rand_tensor(&mut rng, vec![3, 4]));
            p.insert("bias".to_string(), rand_tensor(&mut rng, vec![4]));
            p.insert("s".to_string(), rand_tensor(&mut rng, vec![1]));
            fd_check(
                &p,
                |t, m| {
                    let a = t.param("a", &m["a"]).unwrap();
                    let b = t.param("b", &m["b"]).unwrap();
                    let bias = t.param("bias", &m["bias"]).unwrap();
                    let s = t.param("s", &m["s"]).unwrap();
                    let sum = t.add(a, b).unwrap();
                    let diff = t.sub(sum, b).unwrap();
                    let biased = t.add_bias(diff, bias).unwrap();
                    let scaled = t.scalar_mul(biased, s, 1.0).unwrap();
                    weighted_sum(t, scaled, seed)
                },
                TOL,
                "add/sub/add_bias/scalar_mul",
            );
        }
    }

    #[test]
    fn fd_matmul_concat_gather_ops() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let mut p = BTreeMap::new();
            p.insert("a".to_string(), rand_tensor(&mut rng, vec![3, 4]));
            p.insert("b".to_string(), rand_tensor(&mut rng, vec![4, 2]));
            fd_check(
                &p,
                |t, m| {
                    let a = t.param("a", &m["a"]).unwrap();
                    let b = t.param("b", &m["b"]).unwrap();
                    let y = t.matmul(a, b).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "matmul",
            );
            let mut rng = SplitMix64::new(seed ^ 5);
            let mut p = BTreeMap::new();
            p.insert("a".to_string(), rand_tensor(&mut rng, vec![3, 2]));
            p.insert("b".to_string(), rand_tensor(&mut rng, vec![3, 4]));
            fd_check(
                &p,
                |t, m| {
                    let a = t.param("a", &m["a"]).unwrap();
                    let b = t.param("b", &m["b"]).unwrap();
                    let y = t.concat_cols(&[a, b, a]).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "concat_cols",
            );
            fd_check(
                &p,
                |t, m| {
                    let a = t.param("a", &m["a"]).unwrap();
                    let b = t.param("b", &m["b"]).unwrap();
                    let ar = t.reshape(a, vec![2, 3]).unwrap();
                    let br = t.reshape(b, vec![4, 3]).unwrap();
                    let y = t.concat_rows(&[ar, br, ar]).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "concat_rows/reshape",
            );
            let mut pp = BTreeMap::new();
            pp.insert("a".to_string(), rand_tensor(&mut rng, vec![3, 4]));
            pp.insert("b".to_string(), rand_tensor(&mut rng, vec![2, 4]));
            fd_check(
                &pp,
                |t, m| {
                    let a = t.param("a", &m["a"]).unwrap();
                    let b = t.param("b", &m["b"]).unwrap();
                    let y = t.pairwise_add(a, b).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "pairwise_add",
            );
            fd_check(
                &p,
                |t, m| {
                    let a = t.param("a", &m["a"]).unwrap();
                    // repeated and skipped indices exercise accumulation
                    let y = t.gather_rows(a, Arc::new(vec![2, 0, 2, 2])).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "gather_rows",
            );
            let mut p1 = BTreeMap::new();
            p1.insert("row".to_string(), rand_tensor(&mut rng, vec![1, 4]));
            fd_check(
                &p1,
                |t, m| {
                    let r = t.param("row", &m["row"]).unwrap();
                    let y = t.repeat_row(r, 3).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "repeat_row",
            );
        }
    }

    #[test]
    fn fd_reduction_ops() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let p = one_param(&mut rng, vec![4, 3]);
            for kind in [ReduceKind::Max, ReduceKind::Sum, ReduceKind::Mean] {
                for axis in [0usize, 1] {
                    fd_check(
                        &p,
                        |t, m| {
                            let x = t.param("x", &m["x"]).unwrap();
                            let y = t.reduce(kind, x, axis).unwrap();
                            weighted_sum(t, y, seed)
                        },
                        TOL,
                        &format!("reduce {:?} axis {}", kind, axis),
                    );
                }
            }
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    t.sum_all(x).unwrap()
                },
                TOL,
                "sum_all",
            );
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let y = t.segment_mean(x, Arc::new(vec![1, 0, 1, 1]), 2).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "segment_mean",
            );
        }
    }

    #[test]
    fn fd_neighbor_ops() {
        // 4 nodes, self-first adjacency with asymmetric lists
        let edges: Arc<Neighbors> = Arc::new(vec![
            vec![0, 1, 2],
            vec![1, 0],
            vec![2, 3, 0, 1],
            vec![3, 2],
        ]);
        let offsets = Arc::new(vec![0usize, 2, 3, 6]);
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let p = one_param(&mut rng, vec![4, 3]);
            for (name, f) in [
                (
                    "nb_max_diff",
                    Tape::nb_max_diff as fn(&mut Tape<f64>, VarId, Arc<Neighbors>) -> Result<VarId>,
                ),
                ("nb_max", Tape::nb_max),
                ("nb_sum", Tape::nb_sum),
            ] {
                fd_check(
                    &p,
                    |t, m| {
                        let x = t.param("x", &m["x"]).unwrap();
                        let y = f(t, x, Arc::clone(&edges)).unwrap();
                        weighted_sum(t, y, seed)
                    },
                    TOL,
                    name,
                );
            }
            let pm = one_param(&mut rng, vec![6, 3]);
            fd_check(
                &pm,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let y = t.segment_max_contig(x, Arc::clone(&offsets)).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "segment_max_contig",
            );
        }
    }

    #[test]
    fn fd_conv_ops() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let mut p = BTreeMap::new();
            p.insert("x".to_string(), rand_tensor(&mut rng, vec![4, 4, 2]));
            p.insert("w".to_string(), rand_tensor(&mut rng, vec![3, 3, 2, 3]));
            p.insert("b".to_string(), rand_tensor(&mut rng, vec![3]));
            for stride in [1usize, 2] {
                fd_check(
                    &p,
                    |t, m| {
                        let x = t.param("x", &m["x"]).unwrap();
                        let w = t.param("w", &m["w"]).unwrap();
                        let b = t.param("b", &m["b"]).unwrap();
                        let y = t.conv3x3(x, w, b, stride).unwrap();
                        let hw = t.value(y).shape()[0] * t.value(y).shape()[1];
                        let y2 = t.reshape(y, vec![hw, 3]).unwrap();
                        weighted_sum(t, y2, seed)
                    },
                    TOL,
                    &format!("conv3x3 stride {}", stride),
                );
            }
            let mut p = BTreeMap::new();
            p.insert("x".to_string(), rand_tensor(&mut rng, vec![4, 4, 2]));
            p.insert("w".to_string(), rand_tensor(&mut rng, vec![3, 3, 2]));
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let w = t.param("w", &m["w"]).unwrap();
                    let y = t.dwconv3x3(x, w).unwrap();
                    let y2 = t.reshape(y, vec![16, 2]).unwrap();
                    weighted_sum(t, y2, seed)
                },
                TOL,
                "dwconv3x3",
            );
        }
    }

    #[test]
    fn fd_batchnorm_train() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let mut p = BTreeMap::new();
            p.insert("x".to_string(), rand_tensor(&mut rng, vec![5, 3]));
            p.insert("gamma".to_string(), rand_tensor(&mut rng, vec![3]));
            p.insert("beta".to_string(), rand_tensor(&mut rng, vec![3]));
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let g = t.param("gamma", &m["gamma"]).unwrap();
                    let b = t.param("beta", &m["beta"]).unwrap();
                    let mut stats = BnStats::identity(3);
                    let y = t.batchnorm(x, g, b, &mut stats, BnMode::Train).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "batchnorm train",
            );
            // infer mode: fixed statistics, gradients flow through x/gamma/beta
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    let g = t.param("gamma", &m["gamma"]).unwrap();
                    let b = t.param("beta", &m["beta"]).unwrap();
                    let mut stats = BnStats {
                        mean: vec![0.3, -0.1, 0.0],
                        var: vec![1.5, 0.7, 1.0],
                    };
                    let y = t.batchnorm(x, g, b, &mut stats, BnMode::Infer).unwrap();
                    weighted_sum(t, y, seed)
                },
                TOL,
                "batchnorm infer",
            );
        }
    }

    #[test]
    fn fd_cross_entropy() {
        let targets = Arc::new(vec![2usize, 0, 1]);
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::new(seed);
            let p = one_param(&mut rng, vec![3, 4]);
            fd_check(
                &p,
                |t, m| {
                    let x = t.param("x", &m["x"]).unwrap();
                    t.softmax_cross_entropy(x, Arc::clone(&targets)).unwrap()
                },
                TOL,
                "softmax_cross_entropy",
            );
        }
    }

    #[test]
    fn sum_wx_gradient_is_outer_product() {
        // loss = sum(W @ x) with constant x gives dL/dW = ones @ x^T, i.e.
        // dL/dW[i][j] = sum_k x[j][k]
        let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5]).unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param("w", &w).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dw = grads.get("w").unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let expect: f64 = x.at2(j, 0) + x.at2(j, 1);
                assert!((dw.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape
            .param("used", &Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let _unused = tape
            .param("unused", &Tensor::new(vec![2, 2], vec![3.0; 4]).unwrap())
            .unwrap();
        let loss = tape.sum_all(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn max_ties_route_to_first_occurrence() {
        // column 0 ties across rows 0 and 2: gradient must go to row 0 only
        let x = Tensor::new(vec![3, 2], vec![5.0, 1.0, 4.0, 2.0, 5.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param("x", &x).unwrap();
        let y = tape.reduce(ReduceKind::Max, xv, 0).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

        // nb_max with a tie: first neighbor in list order wins
        let mut tape = Tape::new();
        let xv = tape
            .param("x", &Tensor::new(vec![2, 1], vec![7.0, 7.0]).unwrap())
            .unwrap();
        let edges: Arc<Neighbors> = Arc::new(vec![vec![0, 1], vec![1, 0]]);
        let y = tape.nb_max(xv, edges).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // node 0 routes to node 0 (listed first), node 1 routes to node 1
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn batchnorm_train_hand_case() {
        // x = [[1],[3]]: mean 2, biased var 1; out = gamma*(x-2)/sqrt(1+eps)+beta
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap())
            .unwrap();
        let g = tape.constant(Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let mut stats = BnStats::identity(1);
        let y = tape.batchnorm(x, g, b, &mut stats, BnMode::Train).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).at2(0, 0) - (0.5 - 2.0 * scale)).abs() < 1e-12);
        assert!((tape.value(y).at2(1, 0) - (0.5 + 2.0 * scale)).abs() < 1e-12);
        // momentum-0.1 update from the identity stats
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1)).abs() < 1e-12);
        // train mode requires at least two rows
        let mut tape: Tape<f64> = Tape::new();
        let x1 = tape
            .constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        let g1 = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let b1 = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut s1 = BnStats::identity(1);
        assert!(tape.batchnorm(x1, g1, b1, &mut s1, BnMode::Train).is_err());
    }

    #[test]
    fn non_finite_op_results_are_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        assert!(tape
            .constant(Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap())
            .is_err());
        let big = tape
            .constant(Tensor::new(vec![1, 1], vec![1e308]).unwrap())
            .unwrap();
        assert!(tape.matmul(big, big).is_err());
    }
}
