//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate. Always evaluated in f64.

use std::collections::BTreeMap;

use crate::numeric::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradients of `eval` with respect to every entry of
/// every tensor in `params`.
pub fn central_diff<E>(
    params: &BTreeMap<String, Tensor<f64>>,
    eval: E,
    h: f64,
) -> BTreeMap<String, Tensor<f64>>
where
    E: Fn(&BTreeMap<String, Tensor<f64>>) -> f64,
{
    let mut out = BTreeMap::new();
    for (name, t) in params {
        let mut grad = Tensor::zeros(t.shape().to_vec());
        for i in 0..t.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        out.insert(name.clone(), grad);
    }
    out
}

/// Elementwise relative error |a - b| / max(|a|, |b|, 1), maximized over all
/// shared entries. The unit floor makes near-zero gradients compare
/// absolutely, where finite differences bottom out in rounding noise.
pub fn max_rel_err(
    analytic: &BTreeMap<String, Tensor<f64>>,
    reference: &BTreeMap<String, Tensor<f64>>,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic {
        let b = &reference[name];
        assert_eq!(a.shape(), b.shape(), "gradient shape for {}", name);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Like [`max_rel_err`] but reported per parameter name.
pub fn per_param_rel_err(
    analytic: &BTreeMap<String, Tensor<f64>>,
    reference: &BTreeMap<String, Tensor<f64>>,
) -> BTreeMap<String, f64> {
    analytic
        .iter()
        .map(|(name, a)| {
            let b = &reference[name];
            let mut worst = 0.0f64;
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let denom = x.abs().max(y.abs()).max(1.0);
                worst = worst.max((x - y).abs() / denom);
            }
            (name.clone(), worst)
        })
        .collect()
}
