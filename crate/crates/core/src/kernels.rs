//! Dense math kernels shared by the forward and backward passes.
//!
//! All routines are plain loops over row-major data; the tape in
//! [`crate::autodiff`] is the only caller that composes them into graphs.

use crate::error::{Result, SamError};
use crate::tensor::{DenseArray, Scalar};

/// `a [m,k] * b [k,n] -> [m,n]`
pub fn matmul<F: Scalar>(a: &DenseArray<F>, b: &DenseArray<F>) -> Result<DenseArray<F>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(SamError::ShapeMismatch(format!(
            "matmul [{m},{k}] x [{k2},{n}]"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row(p);
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    DenseArray::new(vec![m, n], out)
}

/// `a [m,k] * b^T [n,k] -> [m,n]`
pub fn matmul_nt<F: Scalar>(a: &DenseArray<F>, b: &DenseArray<F>) -> Result<DenseArray<F>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(SamError::ShapeMismatch(format!(
            "matmul_nt [{m},{k}] x [{n},{k2}]^T"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    DenseArray::new(vec![m, n], out)
}

/// `a^T [k,m] * b [k,n] -> [m,n]`
pub fn matmul_tn<F: Scalar>(a: &DenseArray<F>, b: &DenseArray<F>) -> Result<DenseArray<F>> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(SamError::ShapeMismatch(format!(
            "matmul_tn [{k},{m}]^T x [{k2},{n}]"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    DenseArray::new(vec![m, n], out)
}

/// Numerically stabilized softmax of one row, in place.
pub fn softmax_row_inplace<F: Scalar>(row: &mut [F]) {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise layer normalization (no affine part). Returns the normalized
/// array plus per-row `1/sqrt(var + eps)` needed for the backward pass.
pub fn layer_norm_rows<F: Scalar>(x: &DenseArray<F>, eps: F) -> (DenseArray<F>, Vec<F>) {
    let (n, c) = (x.rows(), x.cols());
    let cn = F::from_f64(c as f64);
    let mut out = Vec::with_capacity(n * c);
    let mut inv_stds = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().cloned().sum::<F>() / cn;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<F>()
            / cn;
        let inv_std = (var + eps).sqrt().recip();
        inv_stds.push(inv_std);
        out.extend(row.iter().map(|&v| (v - mean) * inv_std));
    }
    (DenseArray::new(vec![n, c], out).unwrap(), inv_stds)
}

/// Cross-correlation (conv) over an `[H,W,Cin]` input with kernel
/// `[KH,KW,Cin,Cout]`, optional per-channel bias.
pub fn conv2d<F: Scalar>(
    x: &DenseArray<F>,
    w: &DenseArray<F>,
    b: Option<&DenseArray<F>>,
    stride: usize,
    pad: usize,
) -> Result<DenseArray<F>> {
    let (h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cin2, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if cin != cin2 {
        return Err(SamError::ShapeMismatch(format!(
            "conv2d input channels {cin} vs kernel {cin2}"
        )));
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(SamError::InvalidArgument("conv2d stride/kernel must be positive".into()));
    }
    if h + 2 * pad < kh || wid + 2 * pad < kw {
        return Err(SamError::ShapeMismatch(format!(
            "conv2d spatial dims {h}x{wid} (pad {pad}) smaller than kernel {kh}x{kw}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![F::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            if let Some(bias) = b {
                orow.copy_from_slice(bias.data());
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wid as isize {
                        continue;
                    }
                    let xoff = (iy as usize * wid + ix as usize) * cin;
                    let woff = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = x.data()[xoff + ic];
                        let wrow = &w.data()[woff + ic * cout..woff + (ic + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + xv * wv;
                        }
                    }
                }
            }
        }
    }
    DenseArray::new(vec![oh, ow, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<F: Scalar>(
    x: &DenseArray<F>,
    w: &DenseArray<F>,
    dy: &DenseArray<F>,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (DenseArray<F>, DenseArray<F>, Option<DenseArray<F>>) {
    let (h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = vec![F::zero(); h * wid * cin];
    let mut dw = vec![F::zero(); kh * kw * cin * cout];
    let mut db = vec![F::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let drow = &dy.data()[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for (acc, &d) in db.iter_mut().zip(drow) {
                *acc = *acc + d;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wid as isize {
                        continue;
                    }
                    let xoff = (iy as usize * wid + ix as usize) * cin;
                    let woff = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = x.data()[xoff + ic];
                        let wrow = &w.data()[woff + ic * cout..woff + (ic + 1) * cout];
                        let dwrow = &mut dw[woff + ic * cout..woff + (ic + 1) * cout];
                        let mut dxv = F::zero();
                        for ((&wv, dwv), &d) in wrow.iter().zip(dwrow.iter_mut()).zip(drow) {
                            dxv = dxv + wv * d;
                            *dwv = *dwv + xv * d;
                        }
                        dx[xoff + ic] = dx[xoff + ic] + dxv;
                    }
                }
            }
        }
    }
    (
        DenseArray::new(vec![h, wid, cin], dx).unwrap(),
        DenseArray::new(vec![kh, kw, cin, cout], dw).unwrap(),
        if with_bias {
            Some(DenseArray::from_vec(db))
        } else {
            None
        },
    )
}

/// Nearest-neighbour 2x upsampling of an `[H,W,C]` map.
pub fn upsample2x<F: Scalar>(x: &DenseArray<F>) -> DenseArray<F> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![F::zero(); 4 * h * w * c];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = (y / 2 * w + xx / 2) * c;
            let dst = (y * 2 * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    DenseArray::new(vec![2 * h, 2 * w, c], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_variants_agree() {
        let a = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseArray::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.data(), &[19.0, 22.0, 43.0, 50.0]);
        // a * b == a * (b^T)^T
        let bt = DenseArray::from_rows(&[vec![5.0, 7.0], vec![6.0, 8.0]]).unwrap();
        assert_eq!(matmul_nt(&a, &bt).unwrap().data(), ab.data());
        let at = DenseArray::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(matmul_tn(&at, &b).unwrap().data(), ab.data());
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let x = DenseArray::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = DenseArray::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_sum_kernel_on_constant_image() {
        let c = 2.5f64;
        let x = DenseArray::new(vec![5, 5, 1], vec![c; 25]).unwrap();
        let w = DenseArray::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        for &v in y.data() {
            assert_relative_eq!(v, 9.0 * c);
        }
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        // f64 sliding-window oracle over a random 5x5x2 input, 3x3 kernel.
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let x = DenseArray::new(vec![5, 5, 2], (0..50).map(|_| next()).collect()).unwrap();
        let w = DenseArray::new(vec![3, 3, 2, 3], (0..54).map(|_| next()).collect()).unwrap();
        let b = DenseArray::from_vec((0..3).map(|_| next()).collect());
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        let (oh, ow) = (y.shape()[0], y.shape()[1]);
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..3 {
                    let mut acc = b.data()[oc];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                continue;
                            }
                            for ic in 0..2 {
                                acc += x.at3(iy as usize, ix as usize, ic)
                                    * w.data()[((ky * 3 + kx) * 2 + ic) * 3 + oc];
                            }
                        }
                    }
                    assert_relative_eq!(y.at3(oy, ox, oc), acc, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_repeats_blocks() {
        let x = DenseArray::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let y = upsample2x(&x);
        assert_eq!(y.shape(), &[2, 4, 1]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
