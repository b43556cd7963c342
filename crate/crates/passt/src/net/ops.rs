//! Numeric primitives and their hand-written reverse-mode derivatives.
//!
//! Every forward either is pure (linear, GELU, softmax) or returns the
//! cache its backward needs (layer norm). Backwards return fresh gradient
//! matrices; callers accumulate them into parameter-shaped holders.

use crate::linalg::{Mat, Scalar};

/// `y = x W + b` where `x` is n x in, `W` is in x out.
pub fn linear<T: Scalar>(x: &Mat<T>, w: &Mat<T>, b: &[T]) -> Mat<T> {
    let mut y = x.matmul(w);
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
            *v = *v + *bj;
        }
    }
    y
}

/// Gradients of `linear`: returns (dx, dW, db).
pub fn linear_backward<T: Scalar>(
    x: &Mat<T>,
    w: &Mat<T>,
    d_y: &Mat<T>,
) -> (Mat<T>, Mat<T>, Vec<T>) {
    let d_x = d_y.matmul_nt(w);
    let d_w = x.matmul_tn(d_y);
    let d_b = d_y.col_sums();
    (d_x, d_w, d_b)
}

const LN_EPS: f64 = 1e-5;

/// Per-row normalization state kept for the backward pass.
pub struct LnCache<T: Scalar> {
    /// Normalized rows before scale/shift.
    pub xhat: Mat<T>,
    /// Reciprocal standard deviation per row.
    pub rstd: Vec<T>,
}

/// Row-wise layer norm: each row is shifted to mean 0, scaled to unit
/// variance (biased estimate), then scaled by `gamma` and shifted by `beta`.
pub fn layernorm<T: Scalar>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> (Mat<T>, LnCache<T>) {
    let (n, e) = (x.rows(), x.cols());
    let inv_e = T::from_f64(1.0 / e as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Mat::zeros(n, e);
    let mut rstd = Vec::with_capacity(n);
    let mut y = Mat::zeros(n, e);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_e;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_e;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let (xh, yr) = (xhat.row_mut(i), y.row_mut(i));
        for j in 0..e {
            xh[j] = (row[j] - mean) * r;
            yr[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Gradients of `layernorm`: returns (dx, dgamma, dbeta).
pub fn layernorm_backward<T: Scalar>(
    d_y: &Mat<T>,
    cache: &LnCache<T>,
    gamma: &[T],
) -> (Mat<T>, Vec<T>, Vec<T>) {
    let (n, e) = (d_y.rows(), d_y.cols());
    let inv_e = T::from_f64(1.0 / e as f64);
    let mut d_x = Mat::zeros(n, e);
    let mut d_gamma = vec![T::zero(); e];
    let mut d_beta = vec![T::zero(); e];
    for i in 0..n {
        let (dy, xh) = (d_y.row(i), cache.xhat.row(i));
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..e {
            d_gamma[j] = d_gamma[j] + dy[j] * xh[j];
            d_beta[j] = d_beta[j] + dy[j];
            let dxh = dy[j] * gamma[j];
            mean_dxh = mean_dxh + dxh;
            mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
        }
        mean_dxh = mean_dxh * inv_e;
        mean_dxh_xh = mean_dxh_xh * inv_e;
        let r = cache.rstd[i];
        let dx = d_x.row_mut(i);
        for j in 0..e {
            let dxh = dy[j] * gamma[j];
            dx[j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (d_x, d_gamma, d_beta)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU, elementwise.
pub fn gelu<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
    let half = T::from_f64(0.5);
    x.map(|v| {
        let u = c * (v + a * v * v * v);
        half * v * (T::one() + u.tanh())
    })
}

/// Exact derivative of the tanh-form GELU, applied to upstream `d_y`.
pub fn gelu_backward<T: Scalar>(x: &Mat<T>, d_y: &Mat<T>) -> Mat<T> {
    let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let mut d_x = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (xr, dyr, dxr) = (x.row(i), d_y.row(i), d_x.row_mut(i));
        for j in 0..xr.len() {
            let v = xr[j];
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (T::one() + three * a * v * v);
            let grad = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
            dxr[j] = dyr[j] * grad;
        }
    }
    d_x
}

/// Row-wise softmax in place, with the usual max subtraction for stability.
pub fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Gradient through a row-wise softmax whose output was `y`:
/// `dx_j = y_j * (dy_j - sum_k dy_k y_k)` per row.
pub fn softmax_backward<T: Scalar>(y: &Mat<T>, d_y: &Mat<T>) -> Mat<T> {
    let mut d_x = Mat::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), d_y.row(i));
        let mut dot = T::zero();
        for j in 0..yr.len() {
            dot = dot + dyr[j] * yr[j];
        }
        let dxr = d_x.row_mut(i);
        for j in 0..yr.len() {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Mat<f64> {
        Mat::from_fn(rows, cols, f)
    }

    /// Central finite difference of `loss` w.r.t. one entry of `x`.
    fn fd(loss: &dyn Fn(&Mat<f64>) -> f64, x: &Mat<f64>, i: usize, j: usize) -> f64 {
        let h = 1e-5;
        let mut hi = x.clone();
        hi.set(i, j, x.get(i, j) + h);
        let mut lo = x.clone();
        lo.set(i, j, x.get(i, j) - h);
        (loss(&hi) - loss(&lo)) / (2.0 * h)
    }

    fn weighted_sum(m: &Mat<f64>) -> f64 {
        // Fixed, non-uniform weights so gradients are distinguishable.
        let mut s = 0.0;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                s += m.get(i, j) * ((i * m.cols() + j) as f64 * 0.17 - 0.4);
            }
        }
        s
    }

    fn upstream(rows: usize, cols: usize) -> Mat<f64> {
        mat(rows, cols, |i, j| (i * cols + j) as f64 * 0.17 - 0.4)
    }

    #[test]
    fn linear_matches_by_hand() {
        let x = mat(1, 2, |_, j| [2.0, 3.0][j]);
        let w = mat(2, 2, |i, j| [[1.0, 2.0], [3.0, 4.0]][i][j]);
        let y = linear(&x, &w, &[10.0, 20.0]);
        assert_eq!(y.row(0), &[2.0 + 9.0 + 10.0, 4.0 + 12.0 + 20.0]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let x = mat(3, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5);
        let w = mat(4, 2, |i, j| ((i + 2 * j) % 7) as f64 * 0.2 - 0.4);
        let b = vec![0.1, -0.2];
        let dy = upstream(3, 2);
        let (dx, dw, db) = linear_backward(&x, &w, &dy);

        let loss_x = |xx: &Mat<f64>| weighted_sum(&linear(xx, &w, &b));
        for i in 0..3 {
            for j in 0..4 {
                assert!((dx.get(i, j) - fd(&loss_x, &x, i, j)).abs() < 1e-8);
            }
        }
        let loss_w = |ww: &Mat<f64>| weighted_sum(&linear(&x, ww, &b));
        for i in 0..4 {
            for j in 0..2 {
                assert!((dw.get(i, j) - fd(&loss_w, &w, i, j)).abs() < 1e-8);
            }
        }
        // Bias gradient = column sums of upstream.
        assert!((db[0] - (0..3).map(|i| dy.get(i, 0)).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn layernorm_standardizes_rows() {
        let x = mat(2, 8, |i, j| (i * 8 + j) as f64 * 1.3 - 4.0);
        let gamma = vec![1.0; 8];
        let beta = vec![0.0; 8];
        let (y, _) = layernorm(&x, &gamma, &beta);
        for i in 0..2 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 8.0;
            let var: f64 = y.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let x = mat(3, 6, |i, j| ((i * 11 + j * 5) % 9) as f64 * 0.4 - 1.2);
        let gamma: Vec<f64> = (0..6).map(|j| 0.5 + 0.1 * j as f64).collect();
        let beta: Vec<f64> = (0..6).map(|j| -0.3 + 0.05 * j as f64).collect();
        let dy = upstream(3, 6);
        let (_, cache) = layernorm(&x, &gamma, &beta);
        let (dx, dgamma, dbeta) = layernorm_backward(&dy, &cache, &gamma);

        let loss = |xx: &Mat<f64>| weighted_sum(&layernorm(xx, &gamma, &beta).0);
        for i in 0..3 {
            for j in 0..6 {
                assert!(
                    (dx.get(i, j) - fd(&loss, &x, i, j)).abs() < 1e-7,
                    "dx[{i}][{j}]"
                );
            }
        }
        for j in 0..6 {
            let mut gp = gamma.clone();
            gp[j] += 1e-5;
            let mut gm = gamma.clone();
            gm[j] -= 1e-5;
            let num = (weighted_sum(&layernorm(&x, &gp, &beta).0)
                - weighted_sum(&layernorm(&x, &gm, &beta).0))
                / 2e-5;
            assert!((dgamma[j] - num).abs() < 1e-7, "dgamma[{j}]");

            let mut bp = beta.clone();
            bp[j] += 1e-5;
            let mut bm = beta.clone();
            bm[j] -= 1e-5;
            let num = (weighted_sum(&layernorm(&x, &gamma, &bp).0)
                - weighted_sum(&layernorm(&x, &gamma, &bm).0))
                / 2e-5;
            assert!((dbeta[j] - num).abs() < 1e-7, "dbeta[{j}]");
        }
    }

    #[test]
    fn gelu_known_values() {
        let x = mat(1, 3, |_, j| [-1.0, 0.0, 1.0][j]);
        let y = gelu(&x);
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.get(0, 2) - 0.841192).abs() < 1e-5);
        assert!((y.get(0, 0) + 0.158808).abs() < 1e-5);
        // Odd-plus-identity structure: gelu(x) + gelu(-x) = x * tanh(u).
        assert!(
            (y.get(0, 2) + y.get(0, 0) - 1.0 * (0.7978845608028654f64 * 1.044715).tanh()).abs()
                < 1e-9
        );
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x = mat(2, 5, |i, j| (i as f64 - 0.5) * 1.7 + j as f64 * 0.6 - 1.5);
        let dy = upstream(2, 5);
        let dx = gelu_backward(&x, &dy);
        let loss = |xx: &Mat<f64>| weighted_sum(&gelu(xx));
        for i in 0..2 {
            for j in 0..5 {
                assert!((dx.get(i, j) - fd(&loss, &x, i, j)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut m = mat(3, 4, |i, j| (i * 4 + j) as f64 * 0.9 - 2.0);
        softmax_rows(&mut m);
        for i in 0..3 {
            let sum: f64 = m.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(m.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = mat(1, 4, |_, j| j as f64);
        let mut b = mat(1, 4, |_, j| j as f64 + 1000.0);
        softmax_rows(&mut a);
        softmax_rows(&mut b);
        for j in 0..4 {
            assert!((a.get(0, j) - b.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let x = mat(2, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let dy = upstream(2, 5);
        let softmax_of = |xx: &Mat<f64>| {
            let mut m = xx.clone();
            softmax_rows(&mut m);
            m
        };
        let y = softmax_of(&x);
        let dx = softmax_backward(&y, &dy);
        let loss = |xx: &Mat<f64>| weighted_sum(&softmax_of(xx));
        for i in 0..2 {
            for j in 0..5 {
                assert!((dx.get(i, j) - fd(&loss, &x, i, j)).abs() < 1e-7);
            }
        }
    }
}
