//! Standalone neural primitives.
//!
//! Thin wrappers over the tape kernels for callers that only need a single
//! forward evaluation (tests, evaluation code, oracles on the other side of
//! a check live elsewhere).

use crate::error::{Result, SamError};
use crate::kernels;
use crate::tensor::{DenseArray, Scalar};

/// Stabilized softmax of a vector. Errors on empty input.
pub fn softmax<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(SamError::EmptyInput("softmax over empty vector".into()));
    }
    let mut out = v.to_vec();
    kernels::softmax_row_inplace(&mut out);
    Ok(out)
}

/// `y = W x + b` with `W` in `[out,in]` layout.
pub fn linear<F: Scalar>(x: &[F], w: &DenseArray<F>, b: &[F]) -> Result<Vec<F>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(SamError::ShapeMismatch(format!(
            "linear W[{},{}] x[{}] b[{}]",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    Ok((0..w.rows())
        .map(|r| {
            w.row(r)
                .iter()
                .zip(x)
                .map(|(&wv, &xv)| wv * xv)
                .sum::<F>()
                + b[r]
        })
        .collect())
}

/// Layer normalization of a vector with affine gain/bias.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F) -> Result<Vec<F>> {
    if x.len() < 2 {
        return Err(SamError::InvalidArgument(
            "layer_norm needs at least 2 elements".into(),
        ));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(SamError::ShapeMismatch("layer_norm affine dims".into()));
    }
    let arr = DenseArray::new(vec![1, x.len()], x.to_vec())?;
    let (norm, _) = kernels::layer_norm_rows(&arr, eps);
    Ok(norm
        .data()
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&n, (&g, &b))| n * g + b)
        .collect())
}

/// Cross-correlation; see [`kernels::conv2d`].
pub fn conv2d<F: Scalar>(
    input: &DenseArray<F>,
    kernel: &DenseArray<F>,
    bias: Option<&DenseArray<F>>,
    stride: usize,
    pad: usize,
) -> Result<DenseArray<F>> {
    kernels::conv2d(input, kernel, bias, stride, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&[0.0f64, 0.0]).unwrap();
        assert_relative_eq!(s[0], 0.5);
        assert_relative_eq!(s[1], 0.5);
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax(&[2.0f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(s[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_matches_f64_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f32> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let got = softmax(&v).unwrap();
        // naive f64 formula, no stabilization
        let exps: Vec<f64> = v.iter().map(|&x| (x as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (g, e) in got.iter().zip(&exps) {
            assert!((*g as f64 - e / total).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn linear_identity_and_swap() {
        let id = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(linear(&[1.0, 2.0], &id, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let swap = DenseArray::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(linear(&[1.0, 0.0], &swap, &[1.0, 1.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let w = DenseArray::zeros(vec![2, 3]);
        assert!(linear(&[1.0f64, 2.0], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn linear_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = DenseArray::new(vec![8, 8], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = linear(&x, &w, &b).unwrap();
        for r in 0..8 {
            let mut acc = b[r] as f64;
            for c in 0..8 {
                acc += w.at2(r, c) as f64 * x[c] as f64;
            }
            assert!((got[r] as f64 - acc).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let out = layer_norm(&[1.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        for v in out {
            assert_relative_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let out = layer_norm(&[-1.0f64, 1.0], &[1.0; 2], &[0.0; 2], 1e-6).unwrap();
        assert_relative_eq!(out[0], -1.0, epsilon = 1e-5);
        assert_relative_eq!(out[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn layer_norm_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gain: Vec<f64> = (0..10).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bias: Vec<f64> = (0..10).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let eps = 1e-6;
        let got = layer_norm(&x, &gain, &bias, eps).unwrap();
        let mean: f64 = x.iter().sum::<f64>() / 10.0;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
        for i in 0..10 {
            let expect = (x[i] - mean) / (var + eps).sqrt() * gain[i] + bias[i];
            assert_relative_eq!(got[i], expect, epsilon = 1e-12);
        }
    }

    proptest! {
        /// Softmax sums to one and is shift-invariant.
        #[test]
        fn softmax_props(v in proptest::collection::vec(-10.0f64..10.0, 1..24), shift in -5.0f64..5.0) {
            let s = softmax(&v).unwrap();
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
