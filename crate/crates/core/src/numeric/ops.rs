//! Raw dense kernels shared by the tape forward and backward passes.
//!
//! Every reduction here accumulates in ascending inner index order so results
//! are bitwise reproducible for any worker count.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;
use crate::scalar::Scalar;

/// c = a @ b, shapes [m,k] x [k,n].
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner extents {} vs {}", ka, kb),
        ));
    }
    let mut c = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for k in 0..ka {
            let aik = ad[i * ka + k];
            let brow = &bd[k * n..(k + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// c = a @ b^T, shapes [m,k] x [n,k].
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape(
            "matmul_nt",
            format!("inner extents {} vs {}", ka, kb),
        ));
    }
    let mut c = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bd[j * ka..(j + 1) * ka];
            let mut s = F::zero();
            for k in 0..ka {
                s = s + arow[k] * brow[k];
            }
            c[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], c)
}

/// c = a^T @ b, shapes [k,m] x [k,n].
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (ka, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape(
            "matmul_tn",
            format!("inner extents {} vs {}", ka, kb),
        ));
    }
    let mut c = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for k in 0..ka {
        let arow = &ad[k * m..(k + 1) * m];
        let brow = &bd[k * n..(k + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aki * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (F::one() + (x * inv_sqrt2).erf())
}

/// d/dx of the exact-erf gelu.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi = F::from_f64((-(x.to_f64() * x.to_f64()) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt());
    half * (F::one() + (x * inv_sqrt2).erf()) + x * phi
}

pub fn leaky_relu<F: Scalar>(x: F, slope: F) -> F {
    if x >= F::zero() {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad<F: Scalar>(x: F, slope: F) -> F {
    if x >= F::zero() {
        F::one()
    } else {
        slope
    }
}

/// Row-wise stable softmax on a 2-d tensor.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = x.dims2()?;
    if c == 0 {
        return Err(Error::shape("softmax_rows", "empty rows"));
    }
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        let row = x.row(i);
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for j in 0..c {
            let e = (row[j] - mx).exp();
            out[i * c + j] = e;
            sum = sum + e;
        }
        for j in 0..c {
            out[i * c + j] = out[i * c + j] / sum;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// 3x3 convolution, padding 1, on an [H,W,Cin] grid with [3,3,Cin,Cout] weights.
pub fn conv3x3<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
) -> Result<Tensor<F>> {
    let (h, wi, cin, cout) = conv_shapes(x, w)?;
    if b.len() != cout {
        return Err(Error::shape("conv3x3", "bias width"));
    }
    let ho = (h + 2 - 3) / stride + 1;
    let wo = (wi + 2 - 3) / stride + 1;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![F::zero(); ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for co in 0..cout {
                orow[co] = bd[co];
            }
            for kh in 0..3 {
                let iy = (oy * stride + kh) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kw in 0..3 {
                    let ix = (ox * stride + kw) as isize - 1;
                    if ix < 0 || ix >= wi as isize {
                        continue;
                    }
                    let xrow = &xd[((iy as usize) * wi + ix as usize) * cin..];
                    let wbase = (kh * 3 + kw) * cin * cout;
                    for ci in 0..cin {
                        let xv = xrow[ci];
                        let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for co in 0..cout {
                            orow[co] = orow[co] + xv * wrow[co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out)
}

/// Gradients of [`conv3x3`] with respect to input, weights and bias.
pub fn conv3x3_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (h, wi, cin, cout) = conv_shapes(x, w)?;
    let ho = dy.shape()[0];
    let wo = dy.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();
    let mut dx = vec![F::zero(); h * wi * cin];
    let mut dw = vec![F::zero(); 9 * cin * cout];
    let mut db = vec![F::zero(); cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let grow = &gd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for co in 0..cout {
                db[co] = db[co] + grow[co];
            }
            for kh in 0..3 {
                let iy = (oy * stride + kh) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kw in 0..3 {
                    let ix = (ox * stride + kw) as isize - 1;
                    if ix < 0 || ix >= wi as isize {
                        continue;
                    }
                    let xoff = ((iy as usize) * wi + ix as usize) * cin;
                    let wbase = (kh * 3 + kw) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let dwrow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let mut acc = F::zero();
                        for co in 0..cout {
                            acc = acc + grow[co] * wrow[co];
                            dwrow[co] = dwrow[co] + grow[co] * xv;
                        }
                        dx[xoff + ci] = dx[xoff + ci] + acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h, wi, cin], dx)?,
        Tensor::new(vec![3, 3, cin, cout], dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

fn conv_shapes<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        ([h, wi, cin], [3, 3, wcin, cout]) if cin == wcin => Ok((*h, *wi, *cin, *cout)),
        _ => Err(Error::shape(
            "conv3x3",
            format!("x {:?} w {:?}", x.shape(), w.shape()),
        )),
    }
}

/// Depthwise 3x3 convolution, stride 1, padding 1; weights [3,3,C].
pub fn dwconv3x3<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, wi, c) = dw_shapes(x, w)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![F::zero(); h * wi * c];
    for oy in 0..h {
        for ox in 0..wi {
            let orow = &mut out[(oy * wi + ox) * c..(oy * wi + ox + 1) * c];
            for kh in 0..3 {
                let iy = (oy + kh) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kw in 0..3 {
                    let ix = (ox + kw) as isize - 1;
                    if ix < 0 || ix >= wi as isize {
                        continue;
                    }
                    let xrow = &xd[((iy as usize) * wi + ix as usize) * c..];
                    let wrow = &wd[(kh * 3 + kw) * c..(kh * 3 + kw + 1) * c];
                    for ch in 0..c {
                        orow[ch] = orow[ch] + xrow[ch] * wrow[ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, wi, c], out)
}

pub fn dwconv3x3_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (h, wi, c) = dw_shapes(x, w)?;
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();
    let mut dx = vec![F::zero(); h * wi * c];
    let mut dw = vec![F::zero(); 9 * c];
    for oy in 0..h {
        for ox in 0..wi {
            let grow = &gd[(oy * wi + ox) * c..(oy * wi + ox + 1) * c];
            for kh in 0..3 {
                let iy = (oy + kh) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kw in 0..3 {
                    let ix = (ox + kw) as isize - 1;
                    if ix < 0 || ix >= wi as isize {
                        continue;
                    }
                    let xoff = ((iy as usize) * wi + ix as usize) * c;
                    let woff = (kh * 3 + kw) * c;
                    for ch in 0..c {
                        dx[xoff + ch] = dx[xoff + ch] + grow[ch] * wd[woff + ch];
                        dw[woff + ch] = dw[woff + ch] + grow[ch] * xd[xoff + ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h, wi, c], dx)?,
        Tensor::new(vec![3, 3, c], dw)?,
    ))
}

fn dw_shapes<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        ([h, wi, c], [3, 3, wc]) if c == wc => Ok((*h, *wi, *c)),
        _ => Err(Error::shape(
            "dwconv3x3",
            format!("x {:?} w {:?}", x.shape(), w.shape()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t2(&[&[3.0, -1.0], &[2.0, 5.0]]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0], &[6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::<f64>::zeros(vec![2, 2]);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&z, &a).unwrap(), Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t2(&[&[7.0, 8.0, 9.0], &[1.0, 2.0, 3.0]]);
        // a @ b^T
        let c = matmul_nt(&a, &b).unwrap();
        assert_eq!(c.data(), &[50.0, 14.0, 122.0, 32.0]);
        // a^T @ a
        let d = matmul_tn(&a, &a).unwrap();
        assert_eq!(d.at2(0, 0), 17.0);
        assert_eq!(d.at2(2, 2), 45.0);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // gelu(x) -> x for large x, -> 0 for very negative x
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0f64).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={}", x);
        }
    }

    #[test]
    fn leaky_relu_slope() {
        assert_eq!(leaky_relu(-1.0f64, 0.2), -0.2);
        assert_eq!(leaky_relu(3.0f64, 0.2), 3.0);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let x = t2(&[&[0.0, 0.0, 0.0]]);
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = t2(&[&[1.0, -2.0, 0.5]]);
        let b = t2(&[&[101.0, 98.0, 100.5]]);
        assert_eq!(softmax_rows(&a).unwrap(), softmax_rows(&b).unwrap());
    }

    #[test]
    fn conv3x3_shapes_and_identity_kernel() {
        let x = Tensor::new(vec![4, 4, 1], (0..16).map(|v| v as f64).collect()).unwrap();
        // kernel that picks the center pixel
        let mut w = Tensor::zeros(vec![3, 3, 1, 1]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(vec![1]);
        let y = conv3x3(&x, &w, &b, 1).unwrap();
        assert_eq!(y, x);
        let y2 = conv3x3(&x, &w, &b, 2).unwrap();
        assert_eq!(y2.shape(), &[2, 2, 1]);
        assert_eq!(y2.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv3x3_backward_matches_fd() {
        let mut rng = crate::rng::SplitMix64::new(3);
        let x = Tensor::new(vec![3, 4, 2], (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 3, 2, 2], (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv3x3(x, w, b, 1).unwrap().data().iter().sum()
        };
        let dy = Tensor::full(vec![3, 4, 2], 1.0);
        let (dx, dw, db) = conv3x3_backward(&x, &w, &dy, 1).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((dx.data()[idx] - fd).abs() < 1e-6);
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((dw.data()[idx] - fd).abs() < 1e-6);
        }
        assert_eq!(db.data(), &[12.0, 12.0]);
    }

    #[test]
    fn dwconv_backward_matches_fd() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let x = Tensor::new(vec![3, 3, 2], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 3, 2], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            dwconv3x3(x, w).unwrap().data().iter().sum()
        };
        let dy = Tensor::full(vec![3, 3, 2], 1.0);
        let (dx, dw) = dwconv3x3_backward(&x, &w, &dy).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((dx.data()[idx] - fd).abs() < 1e-6);
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((dw.data()[idx] - fd).abs() < 1e-6);
        }
    }
}
