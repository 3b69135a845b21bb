//! Forward-only kernels shared by the tape and by inference code.

use super::tensor::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// `y = x W + b` for `x: n x d_in`, `W: d_in x d_out`, `b: d_out`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = x.dims2();
    let (win, dout) = w.dims2();
    if din != win || w.shape().len() != 2 {
        return Err(Error::dim("affine", x.shape(), w.shape()));
    }
    if b.len() != dout {
        return Err(Error::dim("affine bias", w.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, din, dout, x.data(), false, w.data(), false, 1.0, &mut out);
    Tensor::matrix(n, dout, out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2();
    let (bk, m) = b.dims2();
    if k != bk {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::matrix(n, m, out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, d) = x.dims2();
    let mut out = x.clone().into_data();
    for r in 0..n {
        let row = &mut out[r * d..(r + 1) * d];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(n, d, out).expect("softmax keeps shape")
}

/// Column-wise maximum over the rows of a point set.
///
/// Returns the pooled `1 x d` row and, per column, the row that attained
/// the maximum. Ties go to the lowest row index.
pub fn max_pool_set(features: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (m, d) = features.dims2();
    if m == 0 || features.is_empty() {
        return Err(Error::EmptySet("max_pool_set"));
    }
    let mut pooled = features.row(0).to_vec();
    let mut argmax = vec![0usize; d];
    for r in 1..m {
        for (k, &v) in features.row(r).iter().enumerate() {
            if v > pooled[k] {
                pooled[k] = v;
                argmax[k] = r;
            }
        }
    }
    Ok((Tensor::matrix(1, d, pooled)?, argmax))
}

/// Window `[lo, hi)` of source indices covered by destination cell `i`.
pub(crate) fn area_window(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let lo = i * src / dst;
    let hi = ((i + 1) * src).div_ceil(dst);
    (lo, hi.max(lo + 1))
}

/// Area-average resampling of a pixel-major map (`h*w` rows, `c` columns).
pub fn area_pool(x: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    let (rows, c) = x.dims2();
    if rows != from.0 * from.1 || to.0 == 0 || to.1 == 0 {
        return Err(Error::dim("area_pool", x.shape(), &[from.0, from.1, c]));
    }
    let mut out = vec![0.0; to.0 * to.1 * c];
    for i in 0..to.0 {
        let (r0, r1) = area_window(i, from.0, to.0);
        for j in 0..to.1 {
            let (c0, c1) = area_window(j, from.1, to.1);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            let dst = &mut out[(i * to.1 + j) * c..(i * to.1 + j + 1) * c];
            for r in r0..r1 {
                for cc in c0..c1 {
                    for (o, v) in dst.iter_mut().zip(x.row(r * from.1 + cc)) {
                        *o += v;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o /= count;
            }
        }
    }
    Tensor::matrix(to.0 * to.1, c, out)
}

/// Nearest-neighbour source pixel for destination pixel `i`.
pub(crate) fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

/// Nearest-neighbour resampling of a pixel-major map.
pub fn upsample_nearest(x: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    let (rows, c) = x.dims2();
    if rows != from.0 * from.1 || to.0 == 0 || to.1 == 0 {
        return Err(Error::dim("upsample_nearest", x.shape(), &[from.0, from.1, c]));
    }
    let mut out = Vec::with_capacity(to.0 * to.1 * c);
    for i in 0..to.0 {
        let si = nearest_index(i, from.0, to.0);
        for j in 0..to.1 {
            let sj = nearest_index(j, from.1, to.1);
            out.extend_from_slice(x.row(si * from.1 + sj));
        }
    }
    Tensor::matrix(to.0 * to.1, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_and_sum() {
        let y = affine(
            &t(&[&[1.0, 2.0]]),
            &t(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &Tensor::vector(vec![0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = affine(
            &t(&[&[1.0, 1.0]]),
            &t(&[&[2.0], &[3.0]]),
            &Tensor::vector(vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn affine_reports_both_shapes() {
        let err = affine(
            &t(&[&[1.0, 2.0, 3.0]]),
            &t(&[&[1.0], &[1.0]]),
            &Tensor::vector(vec![0.0]).unwrap(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let r = relu(&Tensor::vector(vec![-3.2, 3.2]).unwrap());
        assert_eq!(r.data(), &[0.0, 3.2]);
        let s = softmax_rows(&t(&[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[1000.0, -1000.0, 3.0], &[0.1, 0.2, 0.3]]));
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let big = sigmoid(&Tensor::vector(vec![-800.0, 800.0, 30.0]).unwrap());
        assert!(big.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn max_pool_basic_cases() {
        let (p, arg) = max_pool_set(&t(&[&[1.0, 5.0], &[3.0, 2.0]])).unwrap();
        assert_eq!(p.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let (p, _) = max_pool_set(&t(&[&[4.0, -1.0]])).unwrap();
        assert_eq!(p.data(), &[4.0, -1.0]);
        let (_, arg) = max_pool_set(&t(&[&[2.0], &[2.0]])).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn area_pool_averages_blocks() {
        // 2x2 map, one channel, pooled to 1x1.
        let x = t(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let y = area_pool(&x, (2, 2), (1, 1)).unwrap();
        assert_eq!(y.data(), &[2.5]);
        // 3 -> 2 uses overlapping windows [0,2) and [1,3).
        let x = t(&[&[1.0], &[2.0], &[4.0]]);
        let y = area_pool(&x, (1, 3), (1, 2)).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = t(&[&[1.0], &[2.0]]);
        let y = upsample_nearest(&x, (1, 2), (2, 4)).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
