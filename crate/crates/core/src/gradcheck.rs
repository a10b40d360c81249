//! Finite-difference verification drivers for the DEGC module and the
//! end-to-end tiny model, always in f64 with frozen partition/graph
//! structure.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::degc::{self, DegcConfig, DegcParams, DegcStructure, GcnVariant};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::numeric::{fd, BnMode, Tape, Tensor};
use crate::rng::SplitMix64;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub per_param: BTreeMap<String, f64>,
}

fn degc_params_map(params: &DegcParams<f64>) -> BTreeMap<String, Tensor<f64>> {
    let mut map = BTreeMap::new();
    params.for_each("degc", &mut |name, t| {
        map.insert(name, t.clone());
    });
    map
}

fn degc_params_from_map(
    template: &DegcParams<f64>,
    map: &BTreeMap<String, Tensor<f64>>,
) -> DegcParams<f64> {
    let mut p = template.clone();
    p.for_each_mut("degc", &mut |name, t| {
        *t = map[&name].clone();
    });
    p
}

/// Scalar loss sum(DEGC(x)) under a frozen structure.
fn degc_loss(
    x: &Tensor<f64>,
    params: &DegcParams<f64>,
    structure: &DegcStructure<f64>,
    variant: GcnVariant,
) -> Result<(Tape<f64>, crate::numeric::VarId)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let vars = params.register(&mut tape, "degc")?;
    let out = degc::degc_apply(&mut tape, xv, structure, &vars, variant)?;
    let loss = tape.sum_all(out)?;
    Ok((tape, loss))
}

/// Isolated DEGC gradient check (N=6, kappa=2, K=2, C=3 by default) for one
/// variant.
pub fn degc_gradcheck(variant: GcnVariant, seed: u64, eps: f64) -> Result<GradReport> {
    if eps <= 0.0 {
        return Err(Error::InvalidArg("finite-difference eps must be positive".into()));
    }
    let (n, c) = (6, 3);
    let cfg = DegcConfig::new(2, 2);
    let mut rng = SplitMix64::new(seed);
    let x = Tensor::new(
        vec![n, c],
        (0..n * c).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )?;
    let params = DegcParams::init(variant, c, c, 2 * c, &mut rng);
    let structure = DegcStructure::compute(&x, 1, n, &cfg)?;

    let (tape, loss) = degc_loss(&x, &params, &structure, variant)?;
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, Tensor<f64>> =
        grads.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

    let map = degc_params_map(&params);
    let reference = fd::central_diff(
        &map,
        |m| {
            let p = degc_params_from_map(&params, m);
            let (tape, loss) = degc_loss(&x, &p, &structure, variant).expect("fd forward");
            tape.value(loss).data()[0]
        },
        eps,
    );
    Ok(GradReport {
        max_rel_err: fd::max_rel_err(&analytic, &reference),
        per_param: fd::per_param_rel_err(&analytic, &reference),
    })
}

/// Worst isolated-DEGC error over every implemented variant.
pub fn degc_gradcheck_all(seed: u64, eps: f64) -> Result<GradReport> {
    let variants = [
        GcnVariant::GEdgeConv,
        GcnVariant::GMrgcn,
        GcnVariant::GGraphSage,
        GcnVariant::GGin,
        GcnVariant::EdgeConv,
        GcnVariant::Mrgcn,
        GcnVariant::GraphSage,
        GcnVariant::Gin,
    ];
    let mut worst = GradReport {
        max_rel_err: 0.0,
        per_param: BTreeMap::new(),
    };
    for v in variants {
        let r = degc_gradcheck(v, seed, eps)?;
        for (name, err) in r.per_param {
            let key = format!("{:?}.{}", v, name);
            worst.per_param.insert(key, err);
        }
        worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
    }
    Ok(worst)
}

fn model_params_map(params: &ModelParams<f64>) -> BTreeMap<String, Tensor<f64>> {
    let mut map = BTreeMap::new();
    params.for_each(&mut |name, t| {
        map.insert(name, t.clone());
    });
    map
}

fn model_loss(
    params: &ModelParams<f64>,
    images: &Tensor<f64>,
    targets: &Arc<Vec<usize>>,
    frozen: Option<&[DegcStructure<f64>]>,
) -> Result<(Tape<f64>, crate::numeric::VarId, Vec<DegcStructure<f64>>)> {
    let mut tape = Tape::new();
    let mut stats = params.stem_stats();
    let (logits, structures) =
        model::model_forward(&mut tape, params, &mut stats, images, BnMode::Train, frozen)?;
    let loss = tape.softmax_cross_entropy(logits, Arc::clone(targets))?;
    Ok((tape, loss, structures))
}

/// End-to-end gradient check of the tiny model on a two-image batch with
/// cross-entropy loss; the DEGC structures of the unperturbed forward are
/// frozen for the finite differences.
pub fn model_gradcheck(seed: u64, eps: f64) -> Result<GradReport> {
    if eps <= 0.0 {
        return Err(Error::InvalidArg("finite-difference eps must be positive".into()));
    }
    let config = ModelConfig::preset("tiny")?;
    let params: ModelParams<f64> = model::init_weights(&config, seed)?;
    let (images, labels) = model::toy_dataset(&config, 2, 1, seed ^ 0x9e37)?;
    let targets = Arc::new(labels);

    let (tape, loss, structures) = model_loss(&params, &images, &targets, None)?;
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, Tensor<f64>> =
        grads.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

    let map = model_params_map(&params);
    let reference = fd::central_diff(
        &map,
        |m| {
            let mut p = params.clone();
            p.for_each_mut(&mut |name, t| *t = m[&name].clone());
            let (tape, loss, _) =
                model_loss(&p, &images, &targets, Some(&structures)).expect("fd forward");
            tape.value(loss).data()[0]
        },
        eps,
    );
    Ok(GradReport {
        max_rel_err: fd::max_rel_err(&analytic, &reference),
        per_param: fd::per_param_rel_err(&analytic, &reference),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degc_gradients_match_fd_for_global_variants() {
        for v in [GcnVariant::GMrgcn, GcnVariant::GGin] {
            let r = degc_gradcheck(v, 42, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-4, "{:?}: {}", v, r.max_rel_err);
        }
    }

    #[test]
    fn degc_gradients_match_fd_for_base_variants() {
        for v in [GcnVariant::EdgeConv, GcnVariant::GraphSage] {
            let r = degc_gradcheck(v, 7, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-4, "{:?}: {}", v, r.max_rel_err);
        }
    }

    #[test]
    fn ggin_delta_gradient_matches_fd_on_one_node() {
        // single node, self-loop only: d loss / d delta = sum over outputs of
        // the MLP Jacobian applied to z'
        let mut rng = SplitMix64::new(3);
        let c = 3;
        let params = DegcParams::init(GcnVariant::GGin, c, c, 2 * c, &mut rng);
        let x = Tensor::new(vec![1, c], vec![0.4, -0.2, 0.9]).unwrap();
        let cfg = DegcConfig::new(1, 1);
        let structure = DegcStructure::compute(&x, 1, 1, &cfg).unwrap();
        let (tape, loss) = degc_loss(&x, &params, &structure, GcnVariant::GGin).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get("degc.ggcn.delta").unwrap().data()[0];
        // z' = LIN_L(x) here (single centroid); expected gradient is
        // sum_j sum_k W[k][j] z'_k
        let lin = crate::numeric::ops::matmul(&x, &params.attention.lin_l_w).unwrap();
        let zp: Vec<f64> = lin
            .data()
            .iter()
            .zip(params.attention.lin_l_b.data())
            .map(|(a, b)| a + b)
            .collect();
        let mut expect = 0.0;
        for k in 0..c {
            for j in 0..2 * c {
                expect += params.ggcn.mlp_w.at2(k, j) * zp[k];
            }
        }
        assert!((analytic - expect).abs() < 1e-10, "{} vs {}", analytic, expect);
    }

    #[test]
    fn eps_zero_rejected() {
        assert!(degc_gradcheck(GcnVariant::GMrgcn, 1, 0.0).is_err());
        assert!(model_gradcheck(1, 0.0).is_err());
    }
}
