//! Dynamic Efficient Graph Convolution: global centroid attention, the
//! globally-aware local update, and the batched scatter/gather execution
//! plan.
//!
//! Partition labels and k-NN edge lists are non-differentiable selections:
//! they are computed from forward values and treated as constants of the
//! pass, so gradients flow through features and parameters only.

use std::sync::Arc;

use crate::cluster::{self, KmeansInit, PartitionSet};
use crate::error::{Error, Result};
use crate::graph;
use crate::numeric::{Neighbors, Tape, Tensor, VarId};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// LeakyReLU slope used in attention scores.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GcnVariant {
    GEdgeConv,
    GMrgcn,
    GGraphSage,
    GGin,
    EdgeConv,
    Mrgcn,
    GraphSage,
    Gin,
}

impl GcnVariant {
    pub fn is_global(self) -> bool {
        matches!(
            self,
            GcnVariant::GEdgeConv | GcnVariant::GMrgcn | GcnVariant::GGraphSage | GcnVariant::GGin
        )
    }

    /// Width multiplier of the concatenated MLP input (1 means additive).
    pub fn concat_arity(self) -> usize {
        match self {
            GcnVariant::GEdgeConv | GcnVariant::GMrgcn | GcnVariant::GGraphSage => 3,
            GcnVariant::EdgeConv | GcnVariant::Mrgcn | GcnVariant::GraphSage => 2,
            GcnVariant::GGin | GcnVariant::Gin => 1,
        }
    }

    pub fn uses_phi(self) -> bool {
        matches!(self, GcnVariant::GGraphSage | GcnVariant::GraphSage)
    }

    pub fn parse(s: &str) -> Option<GcnVariant> {
        match s {
            "g-edgeconv" => Some(GcnVariant::GEdgeConv),
            "g-mrgcn" => Some(GcnVariant::GMrgcn),
            "g-graphsage" => Some(GcnVariant::GGraphSage),
            "g-gin" => Some(GcnVariant::GGin),
            "edgeconv" => Some(GcnVariant::EdgeConv),
            "mrgcn" => Some(GcnVariant::Mrgcn),
            "graphsage" => Some(GcnVariant::GraphSage),
            "gin" => Some(GcnVariant::Gin),
            _ => None,
        }
    }
}

/// Single-head GATv2 attention weights over partition centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttentionParams<F: Scalar> {
    pub lin_l_w: Tensor<F>,
    pub lin_l_b: Tensor<F>,
    pub lin_r_w: Tensor<F>,
    pub lin_r_b: Tensor<F>,
    pub a: Tensor<F>,
}

pub struct GlobalAttentionVars {
    pub lin_l_w: VarId,
    pub lin_l_b: VarId,
    pub lin_r_w: VarId,
    pub lin_r_b: VarId,
    pub a: VarId,
}

impl<F: Scalar> GlobalAttentionParams<F> {
    pub fn init(c: usize, c_tilde: usize, rng: &mut SplitMix64) -> Self {
        GlobalAttentionParams {
            lin_l_w: glorot(c, c_tilde, rng),
            lin_l_b: Tensor::zeros(vec![c_tilde]),
            lin_r_w: glorot(c, c_tilde, rng),
            lin_r_b: Tensor::zeros(vec![c_tilde]),
            a: glorot_flat(c_tilde, 1, vec![c_tilde], rng),
        }
    }

    pub fn c_tilde(&self) -> usize {
        self.a.len()
    }

    pub fn register(&self, tape: &mut Tape<F>, prefix: &str) -> Result<GlobalAttentionVars> {
        Ok(GlobalAttentionVars {
            lin_l_w: tape.param(&format!("{prefix}.lin_l_w"), &self.lin_l_w)?,
            lin_l_b: tape.param(&format!("{prefix}.lin_l_b"), &self.lin_l_b)?,
            lin_r_w: tape.param(&format!("{prefix}.lin_r_w"), &self.lin_r_w)?,
            lin_r_b: tape.param(&format!("{prefix}.lin_r_b"), &self.lin_r_b)?,
            a: tape.param(&format!("{prefix}.a"), &self.a)?,
        })
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.lin_l_w"), &self.lin_l_w);
        f(format!("{prefix}.lin_l_b"), &self.lin_l_b);
        f(format!("{prefix}.lin_r_w"), &self.lin_r_w);
        f(format!("{prefix}.lin_r_b"), &self.lin_r_b);
        f(format!("{prefix}.a"), &self.a);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.lin_l_w"), &mut self.lin_l_w);
        f(format!("{prefix}.lin_l_b"), &mut self.lin_l_b);
        f(format!("{prefix}.lin_r_w"), &mut self.lin_r_w);
        f(format!("{prefix}.lin_r_b"), &mut self.lin_r_b);
        f(format!("{prefix}.a"), &mut self.a);
    }
}

/// Weights of one (G-)GCN local update. The MLP is a single affine layer;
/// phi weights exist only for the GraphSAGE variants.
#[derive(Debug, Clone, PartialEq)]
pub struct GgcnParams<F: Scalar> {
    pub variant: GcnVariant,
    pub mlp_w: Tensor<F>,
    pub mlp_b: Tensor<F>,
    pub phi_w: Option<Tensor<F>>,
    pub phi_b: Option<Tensor<F>>,
    pub epsilon: Tensor<F>,
    pub delta: Tensor<F>,
}

pub struct GgcnVars {
    pub mlp_w: VarId,
    pub mlp_b: VarId,
    pub phi_w: Option<VarId>,
    pub phi_b: Option<VarId>,
    pub epsilon: VarId,
    pub delta: VarId,
}

impl<F: Scalar> GgcnParams<F> {
    /// `c` is the node feature width, `c_out` the update output width
    /// (2c inside the model).
    pub fn init(variant: GcnVariant, c: usize, c_out: usize, rng: &mut SplitMix64) -> Self {
        let c_in = variant.concat_arity() * c;
        let (phi_w, phi_b) = if variant.uses_phi() {
            (Some(glorot(c, c, rng)), Some(Tensor::zeros(vec![c])))
        } else {
            (None, None)
        };
        GgcnParams {
            variant,
            mlp_w: glorot(c_in, c_out, rng),
            mlp_b: Tensor::zeros(vec![c_out]),
            phi_w,
            phi_b,
            epsilon: Tensor::scalar(F::zero()),
            delta: Tensor::scalar(F::zero()),
        }
    }

    pub fn c_in(&self) -> usize {
        self.mlp_w.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.mlp_w.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape<F>, prefix: &str) -> Result<GgcnVars> {
        Ok(GgcnVars {
            mlp_w: tape.param(&format!("{prefix}.mlp_w"), &self.mlp_w)?,
            mlp_b: tape.param(&format!("{prefix}.mlp_b"), &self.mlp_b)?,
            phi_w: match &self.phi_w {
                Some(w) => Some(tape.param(&format!("{prefix}.phi_w"), w)?),
                None => None,
            },
            phi_b: match &self.phi_b {
                Some(b) => Some(tape.param(&format!("{prefix}.phi_b"), b)?),
                None => None,
            },
            epsilon: tape.param(&format!("{prefix}.epsilon"), &self.epsilon)?,
            delta: tape.param(&format!("{prefix}.delta"), &self.delta)?,
        })
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.mlp_w"), &self.mlp_w);
        f(format!("{prefix}.mlp_b"), &self.mlp_b);
        if let Some(w) = &self.phi_w {
            f(format!("{prefix}.phi_w"), w);
        }
        if let Some(b) = &self.phi_b {
            f(format!("{prefix}.phi_b"), b);
        }
        f(format!("{prefix}.epsilon"), &self.epsilon);
        f(format!("{prefix}.delta"), &self.delta);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.mlp_w"), &mut self.mlp_w);
        f(format!("{prefix}.mlp_b"), &mut self.mlp_b);
        if let Some(w) = &mut self.phi_w {
            f(format!("{prefix}.phi_w"), w);
        }
        if let Some(b) = &mut self.phi_b {
            f(format!("{prefix}.phi_b"), b);
        }
        f(format!("{prefix}.epsilon"), &mut self.epsilon);
        f(format!("{prefix}.delta"), &mut self.delta);
    }
}

/// All weights of one DEGC block.
#[derive(Debug, Clone, PartialEq)]
pub struct DegcParams<F: Scalar> {
    pub attention: GlobalAttentionParams<F>,
    pub ggcn: GgcnParams<F>,
}

pub struct DegcVars {
    pub attention: GlobalAttentionVars,
    pub ggcn: GgcnVars,
}

impl<F: Scalar> DegcParams<F> {
    pub fn init(
        variant: GcnVariant,
        c: usize,
        c_tilde: usize,
        c_out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        DegcParams {
            attention: GlobalAttentionParams::init(c, c_tilde, rng),
            ggcn: GgcnParams::init(variant, c, c_out, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape<F>, prefix: &str) -> Result<DegcVars> {
        Ok(DegcVars {
            attention: self.attention.register(tape, &format!("{prefix}.att"))?,
            ggcn: self.ggcn.register(tape, &format!("{prefix}.ggcn"))?,
        })
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        self.attention.for_each(&format!("{prefix}.att"), f);
        self.ggcn.for_each(&format!("{prefix}.ggcn"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        self.attention.for_each_mut(&format!("{prefix}.att"), f);
        self.ggcn.for_each_mut(&format!("{prefix}.ggcn"), f);
    }
}

pub fn glorot<F: Scalar>(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor<F> {
    glorot_flat(fan_in, fan_out, vec![fan_in, fan_out], rng)
}

/// Uniform(+-sqrt(6/(fan_in+fan_out))) fill with an explicit shape.
pub fn glorot_flat<F: Scalar>(
    fan_in: usize,
    fan_out: usize,
    shape: Vec<usize>,
    rng: &mut SplitMix64,
) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::new(shape, data).expect("glorot shape")
}

/// Exact per-partition feature means.
pub fn centroid_features<F: Scalar>(
    x: &Tensor<F>,
    parts: &PartitionSet<F>,
) -> Result<Tensor<F>> {
    let (n, c) = x.dims2()?;
    parts.validate(n)?;
    let mut data = vec![F::zero(); parts.kappa * c];
    for (i, members) in parts.members.iter().enumerate() {
        for &v in members {
            let row = x.row(v);
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + row[j];
            }
        }
        let nf = F::from_usize(members.len());
        for j in 0..c {
            data[i * c + j] = data[i * c + j] / nf;
        }
    }
    Tensor::new(vec![parts.kappa, c], data)
}

/// GATv2 update of the centroid features: z'_i = sum_j alpha_ji LIN_L(z_j),
/// attention over all kappa centroids including self, softmax stabilized by
/// max subtraction.
pub fn global_update<F: Scalar>(
    tape: &mut Tape<F>,
    z: VarId,
    vars: &GlobalAttentionVars,
) -> Result<VarId> {
    let (kappa, _c) = tape.value(z).dims2()?;
    if kappa < 1 {
        return Err(Error::InvalidArg("no centroids".into()));
    }
    let c_tilde = tape.value(vars.a).len();
    let l = tape.matmul(z, vars.lin_l_w)?;
    let l = tape.add_bias(l, vars.lin_l_b)?;
    let r = tape.matmul(z, vars.lin_r_w)?;
    let r = tape.add_bias(r, vars.lin_r_b)?;
    // row i*kappa+j holds LIN_R(z_i) + LIN_L(z_j)
    let t = tape.pairwise_add(r, l)?;
    let t = tape.leaky_relu(t, F::from_f64(LEAKY_SLOPE))?;
    let a_col = tape.reshape(vars.a, vec![c_tilde, 1])?;
    let s = tape.matmul(t, a_col)?;
    let s = tape.reshape(s, vec![kappa, kappa])?;
    let alpha = tape.softmax_rows(s)?;
    tape.matmul(alpha, l)
}

/// The local (G-)GCN update on one partition's nodes. `edges` carries local
/// node ids with the self-loop first; `z_prime` (a single row) is ignored by
/// the base variants.
pub fn ggcn_update<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    edges: &Arc<Neighbors>,
    z_prime: VarId,
    vars: &GgcnVars,
    variant: GcnVariant,
) -> Result<VarId> {
    let (n, c) = tape.value(x).dims2()?;
    let c_in = tape.value(vars.mlp_w).dims2()?.0;
    if c_in != variant.concat_arity() * c {
        return Err(Error::shape(
            "ggcn_update",
            format!("mlp expects {} inputs, variant needs {}", c_in, variant.concat_arity() * c),
        ));
    }
    if variant.is_global() {
        let zc = match tape.value(z_prime).shape() {
            [c] => *c,
            [1, c] => *c,
            s => return Err(Error::shape("ggcn_update", format!("z' shape {:?}", s))),
        };
        // concat-style variants catch a bad C~ via the mlp width check; the
        // additive G-GIN must match C exactly
        if variant == GcnVariant::GGin && zc != c {
            return Err(Error::shape("ggcn_update", "G-GIN needs C~ = C"));
        }
    }
    let h = match variant {
        GcnVariant::GMrgcn | GcnVariant::Mrgcn => {
            let m = tape.nb_max_diff(x, Arc::clone(edges))?;
            if variant == GcnVariant::GMrgcn {
                let zr = tape.repeat_row(z_prime, n)?;
                tape.concat_cols(&[x, m, zr])?
            } else {
                tape.concat_cols(&[x, m])?
            }
        }
        GcnVariant::GGraphSage | GcnVariant::GraphSage => {
            let (pw, pb) = (
                vars.phi_w.ok_or_else(|| Error::InvalidArg("missing phi weights".into()))?,
                vars.phi_b.ok_or_else(|| Error::InvalidArg("missing phi bias".into()))?,
            );
            let p = tape.matmul(x, pw)?;
            let p = tape.add_bias(p, pb)?;
            let m = tape.nb_max(p, Arc::clone(edges))?;
            if variant == GcnVariant::GGraphSage {
                let zr = tape.repeat_row(z_prime, n)?;
                tape.concat_cols(&[x, m, zr])?
            } else {
                tape.concat_cols(&[x, m])?
            }
        }
        GcnVariant::GGin | GcnVariant::Gin => {
            let s = tape.nb_sum(x, Arc::clone(edges))?;
            let xe = tape.scalar_mul(x, vars.epsilon, F::one())?;
            let h = tape.add(xe, s)?;
            if variant == GcnVariant::GGin {
                let zr = tape.repeat_row(z_prime, n)?;
                let zd = tape.scalar_mul(zr, vars.delta, F::one())?;
                tape.add(h, zd)?
            } else {
                h
            }
        }
        GcnVariant::GEdgeConv | GcnVariant::EdgeConv => {
            // materialized per-edge messages, max over each node's segment
            let mut targets = Vec::new();
            let mut sources = Vec::new();
            let mut offsets = Vec::with_capacity(n + 1);
            offsets.push(0);
            for (v, nbrs) in edges.iter().enumerate() {
                for &u in nbrs {
                    targets.push(v);
                    sources.push(u as usize);
                }
                offsets.push(targets.len());
            }
            let xv = tape.gather_rows(x, Arc::new(targets))?;
            let xu = tape.gather_rows(x, Arc::new(sources))?;
            let diff = tape.sub(xu, xv)?;
            let h = if variant == GcnVariant::GEdgeConv {
                let zr = tape.repeat_row(z_prime, tape.value(xv).dims2()?.0)?;
                tape.concat_cols(&[xv, diff, zr])?
            } else {
                tape.concat_cols(&[xv, diff])?
            };
            let m = tape.matmul(h, vars.mlp_w)?;
            let m = tape.add_bias(m, vars.mlp_b)?;
            return tape.segment_max_contig(m, Arc::new(offsets));
        }
    };
    let out = tape.matmul(h, vars.mlp_w)?;
    tape.add_bias(out, vars.mlp_b)
}

/// Node ordering that arranges a batch contiguously by (image, partition,
/// original node index), with its inverse and per-partition extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterPlan {
    pub b: usize,
    pub n: usize,
    pub kappa: usize,
    /// row r of the arranged tensor comes from unrolled row permutation[r]
    pub permutation: Vec<usize>,
    pub inverse: Vec<usize>,
    /// global partition id in [0, B*kappa) per arranged row; non-decreasing
    pub batch: Vec<usize>,
    /// B*kappa+1 segment boundaries into the arranged rows
    pub segment_offsets: Vec<usize>,
}

/// Build the plan from per-image labels (values must be integers in
/// [0, kappa)).
pub fn build_scatter_plan<F: Scalar>(labels: &Tensor<F>, kappa: usize) -> Result<ScatterPlan> {
    let (b, n) = labels.dims2()?;
    let mut lab = Vec::with_capacity(b * n);
    for &v in labels.data() {
        let f = v.to_f64();
        let l = f as usize;
        if f != l as f64 || l >= kappa {
            return Err(Error::InvalidArg(format!("label {} out of [0, {})", f, kappa)));
        }
        lab.push(l);
    }
    let mut order: Vec<usize> = (0..b * n).collect();
    order.sort_by_key(|&r| (r / n, lab[r], r));
    let mut inverse = vec![0usize; b * n];
    for (pos, &src) in order.iter().enumerate() {
        inverse[src] = pos;
    }
    let batch: Vec<usize> = order.iter().map(|&r| (r / n) * kappa + lab[r]).collect();
    let mut segment_offsets = vec![0usize; b * kappa + 1];
    for &g in &batch {
        segment_offsets[g + 1] += 1;
    }
    for i in 0..b * kappa {
        segment_offsets[i + 1] += segment_offsets[i];
    }
    Ok(ScatterPlan {
        b,
        n,
        kappa,
        permutation: order,
        inverse,
        batch,
        segment_offsets,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DegcConfig {
    pub kappa: usize,
    pub k: usize,
    pub max_iters: usize,
    pub init: KmeansInit,
}

impl DegcConfig {
    pub fn new(kappa: usize, k: usize) -> Self {
        DegcConfig {
            kappa,
            k,
            max_iters: cluster::DEFAULT_MAX_ITERS,
            init: KmeansInit::Stride,
        }
    }
}

/// The frozen non-differentiable structure of one DEGC application:
/// partition labels, the scatter plan, and per-partition local edge lists.
#[derive(Debug, Clone)]
pub struct DegcStructure<F: Scalar> {
    pub parts: Vec<PartitionSet<F>>,
    pub plan: ScatterPlan,
    /// local-id neighbor lists per global partition, rows in arranged order
    pub edges: Vec<Arc<Neighbors>>,
}

impl<F: Scalar> DegcStructure<F> {
    /// Recomputed from feature values on every DEGC call.
    pub fn compute(x: &Tensor<F>, b: usize, n: usize, cfg: &DegcConfig) -> Result<Self> {
        let (rows, c) = x.dims2()?;
        if rows != b * n {
            return Err(Error::shape("degc", "row count != B*N"));
        }
        if cfg.kappa > n {
            return Err(Error::InvalidArg(format!(
                "kappa {} exceeds N {}",
                cfg.kappa, n
            )));
        }
        let batched = x.clone().reshaped(vec![b, n, c])?;
        let (parts, labels) = cluster::kmeans_batched(&batched, cfg.kappa, cfg.max_iters, cfg.init)?;
        let plan = build_scatter_plan(&labels, cfg.kappa)?;
        let mut edges = Vec::with_capacity(b * cfg.kappa);
        for p in 0..b * cfg.kappa {
            let (lo, hi) = (plan.segment_offsets[p], plan.segment_offsets[p + 1]);
            let mut data = Vec::with_capacity((hi - lo) * c);
            for r in lo..hi {
                data.extend_from_slice(x.row(plan.permutation[r]));
            }
            let local = Tensor::new(vec![hi - lo, c], data)?;
            let (lists, _) = graph::knn_local(&local, cfg.k)?;
            edges.push(Arc::new(
                lists
                    .into_iter()
                    .map(|l| l.into_iter().map(|(u, _)| u).collect())
                    .collect::<Neighbors>(),
            ));
        }
        Ok(DegcStructure { parts, plan, edges })
    }
}

/// Apply DEGC with a fixed structure. `x` holds the unrolled batch
/// [B*N, C]; the result is [B*N, C'] in original row order.
pub fn degc_apply<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    structure: &DegcStructure<F>,
    vars: &DegcVars,
    variant: GcnVariant,
) -> Result<VarId> {
    let plan = &structure.plan;
    let (b, kappa) = (plan.b, plan.kappa);
    // global partition id per original row, for the centroid means
    let mut row_part = vec![0usize; b * plan.n];
    for (bi, parts) in structure.parts.iter().enumerate() {
        for (v, &l) in parts.labels.iter().enumerate() {
            row_part[bi * plan.n + v] = bi * kappa + l;
        }
    }
    let z_u = tape.segment_mean(x, Arc::new(row_part), b * kappa)?;
    // attention runs per image over its own kappa centroids
    let mut z_prime_rows = Vec::with_capacity(b);
    for bi in 0..b {
        let idx: Vec<usize> = (bi * kappa..(bi + 1) * kappa).collect();
        let zb = tape.gather_rows(z_u, Arc::new(idx))?;
        z_prime_rows.push(global_update(tape, zb, &vars.attention)?);
    }
    let z_prime_u = tape.concat_rows(&z_prime_rows)?;
    // scatter, per-partition local updates, gather
    let x_ua = tape.gather_rows(x, Arc::new(plan.permutation.clone()))?;
    let mut outputs = Vec::with_capacity(b * kappa);
    for p in 0..b * kappa {
        let (lo, hi) = (plan.segment_offsets[p], plan.segment_offsets[p + 1]);
        let xp = tape.gather_rows(x_ua, Arc::new((lo..hi).collect()))?;
        let zp = tape.gather_rows(z_prime_u, Arc::new(vec![p]))?;
        outputs.push(ggcn_update(
            tape,
            xp,
            &structure.edges[p],
            zp,
            &vars.ggcn,
            variant,
        )?);
    }
    let x_ua_out = tape.concat_rows(&outputs)?;
    tape.gather_rows(x_ua_out, Arc::new(plan.inverse.clone()))
}

/// Full DEGC: recompute partitions and graphs from the current values of
/// `x`, then apply. Returns the output node and the structure used.
pub fn degc_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    b: usize,
    n: usize,
    cfg: &DegcConfig,
    vars: &DegcVars,
    variant: GcnVariant,
) -> Result<(VarId, DegcStructure<F>)> {
    let structure = DegcStructure::compute(tape.value(x), b, n, cfg)?;
    let out = degc_apply(tape, x, &structure, vars, variant)?;
    Ok((out, structure))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ops;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn centroid_features_cases() {
        let x = t2(&[&[1.0, 1.0], &[3.0, 3.0], &[7.0, -1.0]]);
        let parts = PartitionSet::from_labels(&x, vec![0, 0, 1], 2).unwrap();
        let z = centroid_features(&x, &parts).unwrap();
        assert_eq!(z.row(0), &[2.0, 2.0]);
        assert_eq!(z.row(1), &[7.0, -1.0]);
    }

    #[test]
    fn centroid_features_random_vs_mean_oracle() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::new(vec![12, 3], (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..12).map(|v| v % 3).collect();
        let parts = PartitionSet::from_labels(&x, labels.clone(), 3).unwrap();
        let z = centroid_features(&x, &parts).unwrap();
        for i in 0..3 {
            let members: Vec<usize> = (0..12).filter(|&v| labels[v] == i).collect();
            for j in 0..3 {
                let mean: f64 =
                    members.iter().map(|&v| x.at2(v, j)).sum::<f64>() / members.len() as f64;
                assert!((z.at2(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    fn att_params(c: usize, ct: usize, seed: u64) -> GlobalAttentionParams<f64> {
        let mut rng = SplitMix64::new(seed);
        GlobalAttentionParams {
            lin_l_w: glorot(c, ct, &mut rng),
            lin_l_b: glorot_flat(ct, 1, vec![ct], &mut rng),
            lin_r_w: glorot(c, ct, &mut rng),
            lin_r_b: glorot_flat(ct, 1, vec![ct], &mut rng),
            a: glorot_flat(ct, 1, vec![ct], &mut rng),
        }
    }

    #[test]
    fn global_update_singleton_is_lin_l() {
        let p = att_params(3, 2, 1);
        let z = t2(&[&[0.5, -1.0, 2.0]]);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone()).unwrap();
        let vars = p.register(&mut tape, "att").unwrap();
        let out = global_update(&mut tape, zv, &vars).unwrap();
        let expect = {
            let m = ops::matmul(&z, &p.lin_l_w).unwrap();
            let mut d = m.into_data();
            for (j, v) in d.iter_mut().enumerate() {
                *v += p.lin_l_b.data()[j];
            }
            d
        };
        assert_eq!(tape.value(out).data(), &expect[..]);
    }

    #[test]
    fn global_update_identical_centroids_uniform_attention() {
        let p = att_params(3, 3, 2);
        let zbar = [0.3, 0.7, -0.2];
        let z = t2(&[&zbar, &zbar, &zbar, &zbar]);
        let mut tape = Tape::new();
        let zv = tape.constant(z).unwrap();
        let vars = p.register(&mut tape, "att").unwrap();
        let out = global_update(&mut tape, zv, &vars).unwrap();
        let row0 = tape.value(out).row(0).to_vec();
        for i in 1..4 {
            assert_eq!(tape.value(out).row(i), &row0[..]);
        }
    }

    #[test]
    fn global_update_matches_dense_transcription() {
        // independently coded dense attention evaluation
        let (kappa, c, ct) = (3, 4, 2);
        let p = att_params(c, ct, 9);
        let mut rng = SplitMix64::new(33);
        let z = Tensor::new(
            vec![kappa, c],
            (0..kappa * c).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone()).unwrap();
        let vars = p.register(&mut tape, "att").unwrap();
        let out = global_update(&mut tape, zv, &vars).unwrap();

        let lin = |w: &Tensor<f64>, bias: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
            (0..ct)
                .map(|j| {
                    bias.data()[j]
                        + (0..c).map(|k| row[k] * w.at2(k, j)).sum::<f64>()
                })
                .collect()
        };
        let lrelu = |v: f64| if v >= 0.0 { v } else { 0.2 * v };
        for i in 0..kappa {
            let ri = lin(&p.lin_r_w, &p.lin_r_b, z.row(i));
            let scores: Vec<f64> = (0..kappa)
                .map(|j| {
                    let lj = lin(&p.lin_l_w, &p.lin_l_b, z.row(j));
                    (0..ct).map(|t| p.a.data()[t] * lrelu(ri[t] + lj[t])).sum()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut expect = vec![0.0; ct];
            for j in 0..kappa {
                let lj = lin(&p.lin_l_w, &p.lin_l_b, z.row(j));
                for t in 0..ct {
                    expect[t] += exps[j] / sum * lj[t];
                }
            }
            for t in 0..ct {
                assert!(
                    (tape.value(out).at2(i, t) - expect[t]).abs() < 1e-12,
                    "i={} t={}",
                    i,
                    t
                );
            }
        }
    }

    fn ggcn_out(
        x: &Tensor<f64>,
        edges: Neighbors,
        z: &Tensor<f64>,
        params: &GgcnParams<f64>,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let zv = tape.constant(z.clone()).unwrap();
        let vars = params.register(&mut tape, "g").unwrap();
        let out = ggcn_update(&mut tape, xv, &Arc::new(edges), zv, &vars, params.variant).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn gmrgcn_equal_features_zero_difference_term() {
        let mut rng = SplitMix64::new(6);
        let c = 3;
        let params = GgcnParams::init(GcnVariant::GMrgcn, c, 2 * c, &mut rng);
        let xbar = [0.4, -0.9, 0.1];
        let x = t2(&[&xbar, &xbar, &xbar]);
        let z = t2(&[&[1.0, 2.0, 3.0]]);
        let edges: Neighbors = vec![vec![0, 1], vec![1, 0], vec![2, 1]];
        let out = ggcn_out(&x, edges, &z, &params);
        // every row = MLP(xbar | 0 | z')
        let mut h = xbar.to_vec();
        h.extend([0.0; 3]);
        h.extend(z.data());
        let hrow = Tensor::new(vec![1, 3 * c], h).unwrap();
        let mut expect = ops::matmul(&hrow, &params.mlp_w).unwrap().into_data();
        for (j, v) in expect.iter_mut().enumerate() {
            *v += params.mlp_b.data()[j];
        }
        for v in 0..3 {
            assert_eq!(out.row(v), &expect[..]);
        }
    }

    #[test]
    fn ggin_single_node_self_loop() {
        let mut rng = SplitMix64::new(8);
        let c = 3;
        let params = GgcnParams::init(GcnVariant::GGin, c, 2 * c, &mut rng);
        let x = t2(&[&[0.5, -0.25, 1.0]]);
        let z = t2(&[&[0.1, 0.2, 0.3]]);
        let out = ggcn_out(&x, vec![vec![0]], &z, &params);
        // eps = delta = 0: MLP(x + x + z') = MLP(2x + z')
        let h: Vec<f64> = (0..c).map(|j| 2.0 * x.at2(0, j) + z.at2(0, j)).collect();
        let hrow = Tensor::new(vec![1, c], h).unwrap();
        let mut expect = ops::matmul(&hrow, &params.mlp_w).unwrap().into_data();
        for (j, v) in expect.iter_mut().enumerate() {
            *v += params.mlp_b.data()[j];
        }
        assert_eq!(out.row(0), &expect[..]);
    }

    #[test]
    fn gedgeconv_path_hand_case() {
        // 3-node path 0-1-2, neighborhoods {self, adjacent}, 1-d features,
        // hand-set MLP collapsing [x_v | x_u - x_v | z'] to x_v + 2(x_u-x_v) + z'
        let x = t2(&[&[1.0], &[4.0], &[6.0]]);
        let z = t2(&[&[10.0]]);
        let params = GgcnParams {
            variant: GcnVariant::GEdgeConv,
            mlp_w: t2(&[&[1.0], &[2.0], &[1.0]]),
            mlp_b: Tensor::zeros(vec![1]),
            phi_w: None,
            phi_b: None,
            epsilon: Tensor::scalar(0.0),
            delta: Tensor::scalar(0.0),
        };
        let edges: Neighbors = vec![vec![0, 1], vec![1, 0, 2], vec![2, 1]];
        let out = ggcn_out(&x, edges, &z, &params);
        // node 0: messages {1+0+10, 1+2*3+10} -> max 17
        // node 1: messages {14, 4-6+10=8, 4+4+10=18} -> 18
        // node 2: messages {16, 6-4+10=12} -> 16
        assert_eq!(out.data(), &[17.0, 18.0, 16.0]);
    }

    #[test]
    fn scatter_plan_examples() {
        // all labels 0, B=2
        let labels = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let plan = build_scatter_plan(&labels, 2).unwrap();
        assert_eq!(plan.permutation, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(plan.batch, vec![0, 0, 0, 2, 2, 2]);
        // B=1, N=4, labels [1,0,1,0], kappa=2
        let labels = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let plan = build_scatter_plan(&labels, 2).unwrap();
        assert_eq!(plan.permutation, vec![1, 3, 0, 2]);
        assert_eq!(plan.batch, vec![0, 0, 1, 1]);
        for (src, &pos) in plan.inverse.iter().enumerate() {
            assert_eq!(plan.permutation[pos], src);
        }
    }

    #[test]
    fn scatter_plan_rejects_bad_labels() {
        let labels = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        assert!(build_scatter_plan(&labels, 2).is_err());
        let labels = Tensor::new(vec![1, 2], vec![0.5, 0.0]).unwrap();
        assert!(build_scatter_plan(&labels, 2).is_err());
    }

    #[test]
    fn degc_forward_shapes_and_determinism() {
        let mut rng = SplitMix64::new(12);
        let (b, n, c) = (2, 12, 4);
        let x = Tensor::new(
            vec![b * n, c],
            (0..b * n * c).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut prng = SplitMix64::new(5);
        let params = DegcParams::init(GcnVariant::GMrgcn, c, c, 2 * c, &mut prng);
        let cfg = DegcConfig::new(3, 2);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let vars = params.register(&mut tape, "degc").unwrap();
            let (out, _) =
                degc_forward(&mut tape, xv, b, n, &cfg, &vars, GcnVariant::GMrgcn).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[b * n, 2 * c]);
        assert_eq!(a, run());
    }

    #[test]
    fn attention_rows_normalized() {
        let p = att_params(4, 3, 14);
        let mut rng = SplitMix64::new(15);
        let z = Tensor::new(vec![5, 4], (0..20).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z).unwrap();
        let vars = p.register(&mut tape, "att").unwrap();
        // reach into the pipeline: softmax output is two nodes before the end
        let out = global_update(&mut tape, zv, &vars).unwrap();
        let _ = out;
        // normalization is asserted through the dense-transcription test and
        // the acceptance suite; here check the output is finite
        assert!(tape.value(out).all_finite());
    }
}
