//! Transformer block: multi-head self-attention plus a GELU MLP, both in
//! pre-norm residual form, with hand-written backward passes.
//!
//! One clip is processed at a time, so activations are plain n x E
//! matrices. Heads live in contiguous column ranges of the fused Q/K/V
//! projections; per-head slices are copied out densely before the n x n
//! score products.

use super::ops::{
    gelu, gelu_backward, layernorm, layernorm_backward, linear, linear_backward, softmax_backward,
    softmax_rows, LnCache,
};
use super::params::BlockParams;
use super::{AttentionTrace, LayerTrace};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Scalar};

/// Columns `[h0, h0 + hd)` of `m` as a dense matrix.
fn head_cols<T: Scalar>(m: &Mat<T>, h0: usize, hd: usize) -> Mat<T> {
    Mat::from_fn(m.rows(), hd, |i, j| m.get(i, h0 + j))
}

/// Add `src` into columns `[h0, h0 + src.cols())` of `dst`.
fn add_head_cols<T: Scalar>(dst: &mut Mat<T>, src: &Mat<T>, h0: usize) {
    for i in 0..src.rows() {
        let (d, s) = (dst.row_mut(i), src.row(i));
        for j in 0..s.len() {
            d[h0 + j] = d[h0 + j] + s[j];
        }
    }
}

/// Everything the attention backward needs from the forward pass.
pub struct MhaCache<T: Scalar> {
    /// Input to the Q/K/V projections.
    x: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Post-softmax attention matrix per head, each n x n.
    attn: Vec<Mat<T>>,
    /// Merged head outputs before the output projection.
    concat: Mat<T>,
}

fn check_attn_input<T: Scalar>(x: &Mat<T>, p: &BlockParams<T>, n_heads: usize) -> Result<usize> {
    let e = x.cols();
    if e != p.wq.rows() || p.wq.cols() != e {
        return Err(Error::shape(format!(
            "attention expects {}x{} projections, input is {}-dim",
            p.wq.rows(),
            p.wq.cols(),
            e
        )));
    }
    if !e.is_multiple_of(n_heads) {
        return Err(Error::shape(format!(
            "{}-dim embeddings cannot split into {} heads",
            e, n_heads
        )));
    }
    if !x.is_finite() {
        return Err(Error::numeric("non-finite attention input"));
    }
    Ok(e / n_heads)
}

/// Attention scores for one head: `Q_h K_h^T / sqrt(head_dim)`, softmaxed.
fn head_attention<T: Scalar>(qh: &Mat<T>, kh: &Mat<T>) -> Mat<T> {
    let scale = T::from_f64(1.0 / (qh.cols() as f64).sqrt());
    let mut scores = qh.matmul_nt(kh);
    scores.scale(scale);
    softmax_rows(&mut scores);
    scores
}

/// Self-attention without caching, for inference and benchmarking. Appends
/// one record to `trace` when given.
pub fn mha_forward<T: Scalar>(
    x: &Mat<T>,
    p: &BlockParams<T>,
    n_heads: usize,
    trace: Option<&mut AttentionTrace>,
) -> Result<Mat<T>> {
    let hd = check_attn_input(x, p, n_heads)?;
    let n = x.rows();
    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);
    let mut concat = Mat::zeros(n, x.cols());
    for h in 0..n_heads {
        let h0 = h * hd;
        let attn = head_attention(&head_cols(&q, h0, hd), &head_cols(&k, h0, hd));
        let out_h = attn.matmul(&head_cols(&v, h0, hd));
        add_head_cols(&mut concat, &out_h, h0);
    }
    if let Some(t) = trace {
        t.layers
            .push(LayerTrace::for_attention::<T>(n, n_heads, x.cols()));
    }
    Ok(linear(&concat, &p.wo, &p.bo))
}

/// Self-attention retaining every intermediate the backward needs.
pub fn mha_forward_cached<T: Scalar>(
    x: &Mat<T>,
    p: &BlockParams<T>,
    n_heads: usize,
) -> Result<(Mat<T>, MhaCache<T>)> {
    let hd = check_attn_input(x, p, n_heads)?;
    let n = x.rows();
    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);
    let mut concat = Mat::zeros(n, x.cols());
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let h0 = h * hd;
        let a = head_attention(&head_cols(&q, h0, hd), &head_cols(&k, h0, hd));
        let out_h = a.matmul(&head_cols(&v, h0, hd));
        add_head_cols(&mut concat, &out_h, h0);
        attn.push(a);
    }
    let out = linear(&concat, &p.wo, &p.bo);
    let cache = MhaCache {
        x: x.clone(),
        q,
        k,
        v,
        attn,
        concat,
    };
    Ok((out, cache))
}

/// Backward through [`mha_forward_cached`]. Accumulates parameter gradients
/// into `grad` and returns the gradient w.r.t. the input.
pub fn mha_backward<T: Scalar>(
    d_out: &Mat<T>,
    cache: &MhaCache<T>,
    p: &BlockParams<T>,
    n_heads: usize,
    grad: &mut BlockParams<T>,
) -> Mat<T> {
    let e = cache.x.cols();
    let hd = e / n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let (d_concat, d_wo, d_bo) = linear_backward(&cache.concat, &p.wo, d_out);
    grad.wo.add_assign(&d_wo);
    acc(&mut grad.bo, &d_bo);

    let n = cache.x.rows();
    let mut d_q = Mat::zeros(n, e);
    let mut d_k = Mat::zeros(n, e);
    let mut d_v = Mat::zeros(n, e);
    for h in 0..n_heads {
        let h0 = h * hd;
        let a = &cache.attn[h];
        let qh = head_cols(&cache.q, h0, hd);
        let kh = head_cols(&cache.k, h0, hd);
        let vh = head_cols(&cache.v, h0, hd);
        let d_outh = head_cols(&d_concat, h0, hd);

        // out_h = A V_h
        let d_a = d_outh.matmul_nt(&vh);
        let d_vh = a.matmul_tn(&d_outh);
        // scores = Q_h K_h^T * scale, then softmax
        let mut d_scores = softmax_backward(a, &d_a);
        d_scores.scale(scale);
        let d_qh = d_scores.matmul(&kh);
        let d_kh = d_scores.matmul_tn(&qh);

        add_head_cols(&mut d_q, &d_qh, h0);
        add_head_cols(&mut d_k, &d_kh, h0);
        add_head_cols(&mut d_v, &d_vh, h0);
    }

    let (d_x_q, d_wq, d_bq) = linear_backward(&cache.x, &p.wq, &d_q);
    let (d_x_k, d_wk, d_bk) = linear_backward(&cache.x, &p.wk, &d_k);
    let (d_x_v, d_wv, d_bv) = linear_backward(&cache.x, &p.wv, &d_v);
    grad.wq.add_assign(&d_wq);
    grad.wk.add_assign(&d_wk);
    grad.wv.add_assign(&d_wv);
    acc(&mut grad.bq, &d_bq);
    acc(&mut grad.bk, &d_bk);
    acc(&mut grad.bv, &d_bv);

    let mut d_x = d_x_q;
    d_x.add_assign(&d_x_k);
    d_x.add_assign(&d_x_v);
    d_x
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Forward state of one block, for the backward pass.
pub struct BlockCache<T: Scalar> {
    ln1: LnCache<T>,
    mha: MhaCache<T>,
    ln2: LnCache<T>,
    ln2_out: Mat<T>,
    h_pre: Mat<T>,
    h_act: Mat<T>,
}

/// Pre-norm residual block: `x + MHA(LN1(x))`, then `+ MLP(LN2(.))` where
/// the MLP is linear-GELU-linear. No caching; optionally traces attention.
pub fn block_forward<T: Scalar>(
    x: &Mat<T>,
    p: &BlockParams<T>,
    n_heads: usize,
    trace: Option<&mut AttentionTrace>,
) -> Result<Mat<T>> {
    let (ln1_out, _) = layernorm(x, &p.ln1_gamma, &p.ln1_beta);
    let attn_out = mha_forward(&ln1_out, p, n_heads, trace)?;
    let mut mid = x.clone();
    mid.add_assign(&attn_out);
    let (ln2_out, _) = layernorm(&mid, &p.ln2_gamma, &p.ln2_beta);
    let ffn = linear(&gelu(&linear(&ln2_out, &p.w1, &p.b1)), &p.w2, &p.b2);
    mid.add_assign(&ffn);
    Ok(mid)
}

/// [`block_forward`] retaining intermediates for [`block_backward`].
pub fn block_forward_cached<T: Scalar>(
    x: &Mat<T>,
    p: &BlockParams<T>,
    n_heads: usize,
) -> Result<(Mat<T>, BlockCache<T>)> {
    let (ln1_out, ln1) = layernorm(x, &p.ln1_gamma, &p.ln1_beta);
    let (attn_out, mha) = mha_forward_cached(&ln1_out, p, n_heads)?;
    let mut mid = x.clone();
    mid.add_assign(&attn_out);
    let (ln2_out, ln2) = layernorm(&mid, &p.ln2_gamma, &p.ln2_beta);
    let h_pre = linear(&ln2_out, &p.w1, &p.b1);
    let h_act = gelu(&h_pre);
    let ffn = linear(&h_act, &p.w2, &p.b2);
    mid.add_assign(&ffn);
    Ok((
        mid,
        BlockCache {
            ln1,
            mha,
            ln2,
            ln2_out,
            h_pre,
            h_act,
        },
    ))
}

/// Backward through one block. Accumulates parameter gradients into `grad`
/// and returns the gradient w.r.t. the block input.
pub fn block_backward<T: Scalar>(
    d_out: &Mat<T>,
    cache: &BlockCache<T>,
    p: &BlockParams<T>,
    n_heads: usize,
    grad: &mut BlockParams<T>,
) -> Mat<T> {
    // MLP branch: out = mid + W2(gelu(W1 ln2(mid))).
    let (d_hact, d_w2, d_b2) = linear_backward(&cache.h_act, &p.w2, d_out);
    grad.w2.add_assign(&d_w2);
    acc(&mut grad.b2, &d_b2);
    let d_hpre = gelu_backward(&cache.h_pre, &d_hact);
    let (d_ln2out, d_w1, d_b1) = linear_backward(&cache.ln2_out, &p.w1, &d_hpre);
    grad.w1.add_assign(&d_w1);
    acc(&mut grad.b1, &d_b1);
    let (d_mid_ln, d_g2, d_be2) = layernorm_backward(&d_ln2out, &cache.ln2, &p.ln2_gamma);
    acc(&mut grad.ln2_gamma, &d_g2);
    acc(&mut grad.ln2_beta, &d_be2);
    let mut d_mid = d_out.clone();
    d_mid.add_assign(&d_mid_ln);

    // Attention branch: mid = x + MHA(ln1(x)).
    let d_ln1out = mha_backward(&d_mid, &cache.mha, p, n_heads, grad);
    let (d_x_ln, d_g1, d_be1) = layernorm_backward(&d_ln1out, &cache.ln1, &p.ln1_gamma);
    acc(&mut grad.ln1_gamma, &d_g1);
    acc(&mut grad.ln1_beta, &d_be1);
    let mut d_x = d_mid;
    d_x.add_assign(&d_x_ln);
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_block(e: usize, hidden: usize, seed: u64) -> BlockParams<f64> {
        let mut r = rng::seeded(seed);
        let mut draw = move || -> f64 { r.random_range(-0.2..0.2) };
        let mut m = |rows: usize, cols: usize| Mat::from_fn(rows, cols, |_, _| draw());
        BlockParams {
            ln1_gamma: vec![1.0; e],
            ln1_beta: vec![0.0; e],
            wq: m(e, e),
            bq: vec![0.01; e],
            wk: m(e, e),
            bk: vec![-0.01; e],
            wv: m(e, e),
            bv: vec![0.02; e],
            wo: m(e, e),
            bo: vec![0.0; e],
            ln2_gamma: vec![1.0; e],
            ln2_beta: vec![0.0; e],
            w1: m(e, hidden),
            b1: vec![0.0; hidden],
            w2: m(hidden, e),
            b2: vec![0.0; e],
        }
    }

    /// Random block with the two projections that close its residual
    /// branches zeroed out, making the whole block an identity map.
    fn identity_block(e: usize, hidden: usize) -> BlockParams<f64> {
        let mut b = random_block(e, hidden, 0);
        b.wo = Mat::zeros(e, e);
        b.bo = vec![0.0; e];
        b.w2 = Mat::zeros(hidden, e);
        b.b2 = vec![0.0; e];
        b
    }

    fn random_x(n: usize, e: usize, seed: u64) -> Mat<f64> {
        let mut r = rng::seeded(seed);
        Mat::from_fn(n, e, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // With one token the attention weight is exactly 1, so the output is
        // Wo(Wv x + bv) + bo.
        let e = 8;
        let p = random_block(e, 16, 1);
        let x = random_x(1, e, 2);
        let out = mha_forward(&x, &p, 2, None).unwrap();
        let want = linear(&linear(&x, &p.wv, &p.bv), &p.wo, &p.bo);
        for j in 0..e {
            assert!((out.get(0, j) - want.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_get_identical_rows() {
        let e = 8;
        let p = random_block(e, 16, 3);
        let x = Mat::from_fn(5, e, |_, j| (j as f64 * 0.3).sin());
        let out = mha_forward(&x, &p, 4, None).unwrap();
        for i in 1..5 {
            for j in 0..e {
                assert!((out.get(i, j) - out.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_projections_make_the_block_an_identity() {
        let e = 8;
        let p = identity_block(e, 16);
        let x = random_x(6, e, 4);
        let out = block_forward(&x, &p, 2, None).unwrap();
        for i in 0..6 {
            for j in 0..e {
                assert!((out.get(i, j) - x.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cached_and_lean_forwards_agree() {
        let e = 12;
        let p = random_block(e, 24, 5);
        let x = random_x(7, e, 6);
        let lean = block_forward(&x, &p, 3, None).unwrap();
        let (cached, _) = block_forward_cached(&x, &p, 3).unwrap();
        assert_eq!(lean.data(), cached.data());
    }

    #[test]
    fn output_keeps_input_shape_and_stays_finite() {
        let e = 8;
        let p = random_block(e, 16, 7);
        for n in [1, 2, 9, 33] {
            let x = random_x(n, e, n as u64);
            let out = block_forward(&x, &p, 2, None).unwrap();
            assert_eq!((out.rows(), out.cols()), (n, e));
            assert!(out.is_finite());
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let e = 8;
        let p = random_block(e, 16, 8);
        let mut x = random_x(3, e, 9);
        x.set(1, 2, f64::NAN);
        assert!(mha_forward(&x, &p, 2, None).is_err());
        assert!(block_forward(&x, &p, 2, None).is_err());
    }

    #[test]
    fn trace_counts_are_quadratic_in_sequence_length() {
        let e = 8;
        let p = random_block(e, 16, 10);
        let mut trace = AttentionTrace::default();
        for n in [10, 20, 40] {
            let x = random_x(n, e, n as u64);
            block_forward(&x, &p, 2, Some(&mut trace)).unwrap();
        }
        let elems: Vec<u64> = trace.layers.iter().map(|l| l.attn_matrix_elems).collect();
        assert_eq!(elems, vec![2 * 100, 2 * 400, 2 * 1600]);
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let (e, hidden, heads, n) = (6, 12, 2, 4);
        let p = random_block(e, hidden, 11);
        let x = random_x(n, e, 12);

        // Scalar loss: fixed-weight sum of the block output.
        let weight = |i: usize, j: usize| ((i * e + j) as f64 * 0.23).cos();
        let loss = |xx: &Mat<f64>, pp: &BlockParams<f64>| -> f64 {
            let out = block_forward(xx, pp, heads, None).unwrap();
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..e {
                    s += out.get(i, j) * weight(i, j);
                }
            }
            s
        };

        let (out, cache) = block_forward_cached(&x, &p, heads).unwrap();
        let d_out = Mat::from_fn(out.rows(), out.cols(), weight);
        let mut grad = BlockParams::zeros(e, hidden);
        let d_x = block_backward(&d_out, &cache, &p, heads, &mut grad);

        let h = 1e-5;
        let check = |got: f64, num: f64, what: &str| {
            let denom = got.abs().max(num.abs()).max(1e-6);
            assert!(
                ((got - num) / denom).abs() < 1e-6,
                "{what}: analytic {got} vs numeric {num}"
            );
        };

        // Input gradient.
        for i in 0..n {
            for j in 0..e {
                let mut hi = x.clone();
                hi.set(i, j, x.get(i, j) + h);
                let mut lo = x.clone();
                lo.set(i, j, x.get(i, j) - h);
                check(
                    d_x.get(i, j),
                    (loss(&hi, &p) - loss(&lo, &p)) / (2.0 * h),
                    "d_x",
                );
            }
        }

        // A representative sample of each parameter tensor.
        type SetEntry = dyn Fn(&mut BlockParams<f64>, usize, usize, f64);
        let probe_mat = |get: &dyn Fn(&BlockParams<f64>) -> &Mat<f64>,
                         set: &SetEntry,
                         gm: &Mat<f64>,
                         what: &str| {
            let m = get(&p).clone();
            for (i, j) in [(0, 0), (1, 2), (m.rows() - 1, m.cols() - 1)] {
                let mut hi = p.clone();
                set(&mut hi, i, j, m.get(i, j) + h);
                let mut lo = p.clone();
                set(&mut lo, i, j, m.get(i, j) - h);
                check(
                    gm.get(i, j),
                    (loss(&x, &hi) - loss(&x, &lo)) / (2.0 * h),
                    what,
                );
            }
        };
        probe_mat(&|b| &b.wq, &|b, i, j, v| b.wq.set(i, j, v), &grad.wq, "wq");
        probe_mat(&|b| &b.wk, &|b, i, j, v| b.wk.set(i, j, v), &grad.wk, "wk");
        probe_mat(&|b| &b.wv, &|b, i, j, v| b.wv.set(i, j, v), &grad.wv, "wv");
        probe_mat(&|b| &b.wo, &|b, i, j, v| b.wo.set(i, j, v), &grad.wo, "wo");
        probe_mat(&|b| &b.w1, &|b, i, j, v| b.w1.set(i, j, v), &grad.w1, "w1");
        probe_mat(&|b| &b.w2, &|b, i, j, v| b.w2.set(i, j, v), &grad.w2, "w2");

        for j in 0..e {
            let mut hi = p.clone();
            hi.ln1_gamma[j] += h;
            let mut lo = p.clone();
            lo.ln1_gamma[j] -= h;
            check(
                grad.ln1_gamma[j],
                (loss(&x, &hi) - loss(&x, &lo)) / (2.0 * h),
                "ln1_gamma",
            );
            let mut hi = p.clone();
            hi.bq[j] += h;
            let mut lo = p.clone();
            lo.bq[j] -= h;
            check(
                grad.bq[j],
                (loss(&x, &hi) - loss(&x, &lo)) / (2.0 * h),
                "bq",
            );
        }
    }
}
