//! AdamW and the toy trainer on synthetic separable blob images.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::{model_forward, model_forward_eval};
use crate::model::params::ModelParams;
use crate::numeric::{BnMode, Tape, Tensor};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Decoupled-weight-decay Adam with the documented defaults.
pub struct AdamW<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every trainable tensor of the model.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &crate::numeric::Grads<F>) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let lr = F::from_f64(self.lr);
        let wd = F::from_f64(self.weight_decay);
        let eps = F::from_f64(self.eps);
        let c1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut(&mut |name, p| {
            let g = match grads.get(&name) {
                Some(g) => g,
                None => return,
            };
            let m = m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = v
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (F::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (F::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                let pd = &mut p.data_mut()[i];
                *pd = *pd - lr * (update + wd * *pd);
            }
        });
    }
}

/// Deterministic 3-class (or m-class) blob images: each class has a fixed
/// base color; pixels are the base plus small gaussian noise, so classes
/// are linearly separable in mean color.
pub fn toy_dataset<F: Scalar>(
    config: &ModelConfig,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<(Tensor<F>, Vec<usize>)> {
    if classes < 1 || per_class < 1 {
        return Err(Error::InvalidArg("empty toy dataset".into()));
    }
    let sz = config.img_size();
    let mut rng = SplitMix64::new(seed);
    let mut bases = Vec::with_capacity(classes);
    for c in 0..classes {
        // well-separated corners of the color cube
        bases.push([
            if c % 2 == 0 { 0.8 } else { 0.2 },
            if (c / 2) % 2 == 0 { 0.8 } else { 0.2 },
            if (c / 4) % 2 == 0 { 0.8 } else { 0.2 },
        ]);
        if c >= 8 {
            return Err(Error::InvalidArg("toy dataset supports at most 8 classes".into()));
        }
    }
    let total = classes * per_class;
    let mut data = Vec::with_capacity(total * sz * sz * 3);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % classes;
        labels.push(class);
        for _ in 0..sz * sz {
            for ch in 0..3 {
                data.push(F::from_f64(bases[class][ch] + 0.1 * rng.next_normal()));
            }
        }
    }
    Ok((Tensor::new(vec![total, sz, sz, 3], data)?, labels))
}

/// Cross-entropy training with AdamW; partition/graph structure is
/// recomputed on every forward. Returns the loss before each update plus
/// the final loss (`steps + 1` entries).
pub fn train_toy<F: Scalar>(
    params: &mut ModelParams<F>,
    images: &Tensor<F>,
    labels: &[usize],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if images.shape()[0] != labels.len() {
        return Err(Error::shape("train_toy", "labels length"));
    }
    let targets = Arc::new(labels.to_vec());
    let mut opt = AdamW::new(lr);
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let mut stats = params.stem_stats();
        let run = (|| -> Result<f64> {
            let (logits, _) =
                model_forward(&mut tape, params, &mut stats, images, BnMode::Train, None)?;
            let loss = tape.softmax_cross_entropy(logits, Arc::clone(&targets))?;
            let loss_val = tape.value(loss).data()[0].to_f64();
            if step < steps {
                let grads = tape.backward(loss)?;
                opt.step(params, &grads);
            }
            Ok(loss_val)
        })();
        let loss_val = run.map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            other => other,
        })?;
        params.set_stem_stats(stats);
        trace.push(loss_val);
    }
    Ok(trace)
}

/// Fraction of images whose argmax logit matches the label (infer mode).
pub fn accuracy<F: Scalar>(
    params: &ModelParams<F>,
    images: &Tensor<F>,
    labels: &[usize],
) -> Result<f64> {
    let logits = model_forward_eval(params, images)?;
    let (n, k) = logits.dims2()?;
    let mut correct = 0usize;
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}
