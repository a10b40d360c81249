//! Forward composition: Stem -> n_b x (Grapher -> FFN) -> Head.

use std::sync::Arc;

use rayon::prelude::*;

use crate::degc::{self, DegcConfig, DegcStructure, GcnVariant};
use crate::error::{Error, Result};
use crate::model::params::{GrapherVars, HeadVars, ModelParams, StemVars};
use crate::numeric::{BnMode, BnStats, Tape, Tensor, VarId};
use crate::scalar::Scalar;

fn slice_image<F: Scalar>(images: &Tensor<F>, bi: usize) -> Result<Tensor<F>> {
    let s = images.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let stride = h * w * c;
    Tensor::new(
        vec![h, w, c],
        images.data()[bi * stride..(bi + 1) * stride].to_vec(),
    )
}

/// Run the stem on a batch of images [B,H,W,3]; returns tokens [B*N, C].
/// BN statistics are shared across the whole batch in train mode.
pub fn stem_forward<F: Scalar>(
    tape: &mut Tape<F>,
    images: &Tensor<F>,
    strides: &[usize],
    vars: &StemVars,
    stats: &mut [BnStats<F>],
    mode: BnMode,
) -> Result<VarId> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("stem", format!("expected [B,H,W,3], got {:?}", s)));
    }
    let b = s[0];
    if strides.len() != vars.convs.len() || stats.len() != vars.convs.len() {
        return Err(Error::shape("stem", "conv stage count"));
    }
    let mut grids: Vec<VarId> = (0..b)
        .map(|bi| tape.constant(slice_image(images, bi)?))
        .collect::<Result<_>>()?;
    for ((cv, &stride), st) in vars.convs.iter().zip(strides).zip(stats.iter_mut()) {
        let mut flats = Vec::with_capacity(b);
        let mut dims = (0, 0, 0);
        for g in &grids {
            let y = tape.conv3x3(*g, cv.w, cv.b, stride)?;
            let sh = tape.value(y).shape().to_vec();
            dims = (sh[0], sh[1], sh[2]);
            flats.push(tape.reshape(y, vec![sh[0] * sh[1], sh[2]])?);
        }
        let (h, w, c) = dims;
        let joined = if b == 1 {
            flats[0]
        } else {
            tape.concat_rows(&flats)?
        };
        let normed = tape.batchnorm(joined, cv.gamma, cv.beta, st, mode)?;
        let act = tape.gelu(normed)?;
        grids = (0..b)
            .map(|bi| {
                let rows = if b == 1 {
                    act
                } else {
                    tape.gather_rows(act, Arc::new((bi * h * w..(bi + 1) * h * w).collect()))?
                };
                tape.reshape(rows, vec![h, w, c])
            })
            .collect::<Result<_>>()?;
    }
    let mut tokens = Vec::with_capacity(b);
    for g in &grids {
        let y = tape.conv3x3(*g, vars.final_w, vars.final_b, 1)?;
        let sh = tape.value(y).shape().to_vec();
        tokens.push(tape.reshape(y, vec![sh[0] * sh[1], sh[2]])?);
    }
    if b == 1 {
        Ok(tokens[0])
    } else {
        tape.concat_rows(&tokens)
    }
}

/// Eq. 5: Y = GeLU(DEGC((CPE(X)+X) W1)) W2 + X on tokens [B*N, C].
/// Partition/graph structure is recomputed from the current values unless a
/// frozen structure is supplied (gradient checks).
pub fn grapher_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    b: usize,
    grid: usize,
    vars: &GrapherVars,
    variant: GcnVariant,
    kappa: usize,
    k: usize,
    frozen: Option<&DegcStructure<F>>,
) -> Result<(VarId, DegcStructure<F>)> {
    let n = grid * grid;
    let mut cpe_parts = Vec::with_capacity(b);
    for bi in 0..b {
        let rows = if b == 1 {
            x
        } else {
            tape.gather_rows(x, Arc::new((bi * n..(bi + 1) * n).collect()))?
        };
        let g = tape.reshape(rows, vec![grid, grid, tape.value(x).dims2()?.1])?;
        let g = tape.dwconv3x3(g, vars.cpe)?;
        let sh = tape.value(g).shape().to_vec();
        cpe_parts.push(tape.reshape(g, vec![sh[0] * sh[1], sh[2]])?);
    }
    let cpe_out = if b == 1 {
        cpe_parts[0]
    } else {
        tape.concat_rows(&cpe_parts)?
    };
    let x1 = tape.add(cpe_out, x)?;
    let y = tape.matmul(x1, vars.w1)?;
    let y = tape.add_bias(y, vars.b1)?;
    let cfg = DegcConfig::new(kappa, k);
    let (d, structure) = match frozen {
        Some(s) => (degc::degc_apply(tape, y, s, &vars.degc, variant)?, s.clone()),
        None => degc::degc_forward(tape, y, b, n, &cfg, &vars.degc, variant)?,
    };
    let g = tape.gelu(d)?;
    let y2 = tape.matmul(g, vars.w2)?;
    let y2 = tape.add_bias(y2, vars.b2)?;
    tape.add(y2, x).map(|out| (out, structure))
}

/// Eq. 6: Z = GeLU(Y W'1) W'2 + Y.
pub fn ffn_forward<F: Scalar>(
    tape: &mut Tape<F>,
    y: VarId,
    vars: &crate::model::params::FfnVars,
) -> Result<VarId> {
    let h = tape.matmul(y, vars.w1p)?;
    let h = tape.add_bias(h, vars.b1p)?;
    let h = tape.gelu(h)?;
    let z = tape.matmul(h, vars.w2p)?;
    let z = tape.add_bias(z, vars.b2p)?;
    tape.add(z, y)
}

/// Mean over each image's tokens, then the two-FC head.
pub fn head_forward<F: Scalar>(
    tape: &mut Tape<F>,
    z: VarId,
    b: usize,
    n: usize,
    vars: &HeadVars,
) -> Result<VarId> {
    let labels: Vec<usize> = (0..b * n).map(|r| r / n).collect();
    let pooled = tape.segment_mean(z, Arc::new(labels), b)?;
    let h = tape.matmul(pooled, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.gelu(h)?;
    let logits = tape.matmul(h, vars.w2)?;
    tape.add_bias(logits, vars.b2)
}

/// Full forward pass on one tape. `stats` is the working stem BN state
/// (see [`ModelParams::stem_stats`]); in train mode it is updated in place.
/// Returns the logits node and the DEGC structures used per block.
pub fn model_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    stats: &mut [BnStats<F>],
    images: &Tensor<F>,
    mode: BnMode,
    frozen: Option<&[DegcStructure<F>]>,
) -> Result<(VarId, Vec<DegcStructure<F>>)> {
    let cfg = &params.config;
    let s = images.shape().to_vec();
    if s.len() != 4 || s[1] != cfg.img_size() || s[2] != cfg.img_size() || s[3] != 3 {
        return Err(Error::shape(
            "model_forward",
            format!(
                "expected [B,{sz},{sz},3], got {:?}",
                s,
                sz = cfg.img_size()
            ),
        ));
    }
    if let Some(f) = frozen {
        if f.len() != cfg.n_b {
            return Err(Error::shape("model_forward", "frozen structure count"));
        }
    }
    let b = s[0];
    let vars = params.register(tape)?;
    let strides: Vec<usize> = params.stem.convs.iter().map(|cb| cb.stride).collect();
    let mut x = stem_forward(tape, images, &strides, &vars.stem, stats, mode)?;
    let grid = cfg.h_iso();
    let mut structures = Vec::with_capacity(cfg.n_b);
    for (l, blk) in vars.blocks.iter().enumerate() {
        let (y, st) = grapher_forward(
            tape,
            x,
            b,
            grid,
            &blk.grapher,
            cfg.variant,
            cfg.kappa,
            cfg.k_schedule[l],
            frozen.map(|f| &f[l]),
        )?;
        structures.push(st);
        x = ffn_forward(tape, y, &blk.ffn)?;
    }
    let logits = head_forward(tape, x, b, cfg.n_iso, &vars.head)?;
    Ok((logits, structures))
}

/// Inference path: one throwaway tape per image, images in parallel.
/// Bitwise identical to the single-tape batched forward in infer mode.
pub fn model_forward_eval<F: Scalar>(
    params: &ModelParams<F>,
    images: &Tensor<F>,
) -> Result<Tensor<F>> {
    let b = images.shape()[0];
    let rows: Vec<Vec<F>> = (0..b)
        .into_par_iter()
        .map(|bi| -> Result<Vec<F>> {
            let img = slice_image(images, bi)?;
            let sh = img.shape().to_vec();
            let img = img.reshaped(vec![1, sh[0], sh[1], sh[2]])?;
            let mut tape = Tape::new();
            let mut stats = params.stem_stats();
            let (logits, _) =
                model_forward(&mut tape, params, &mut stats, &img, BnMode::Infer, None)?;
            Ok(tape.value(logits).row(0).to_vec())
        })
        .collect::<Result<_>>()?;
    let classes = params.config.num_classes;
    let mut data = Vec::with_capacity(b * classes);
    for r in rows {
        data.extend(r);
    }
    Tensor::new(vec![b, classes], data)
}
