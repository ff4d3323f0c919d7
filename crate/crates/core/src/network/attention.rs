//! Additive attention with one score column per label.
//!
//! `A = tanh(H W_u)`, `E = A W_a`, `alpha = softmax over t of E` (per
//! column) and `C = H^T alpha`. `H` is time-major `T x D`; `C` is `D x K`.

use super::params::AttentionParams;
use crate::scalar::{axpy, dot, Scalar};

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    pub len: usize,
    pub dim: usize,
    pub hidden: usize,
    pub labels: usize,
    /// `T x n_a` tanh activations.
    act: Vec<S>,
    /// `T x K` attention weights; each column sums to 1.
    pub alpha: Vec<S>,
    /// `D x K` context.
    pub context: Vec<S>,
}

pub fn attention_forward<S: Scalar>(h: &[S], dim: usize, p: &AttentionParams<S>) -> AttentionCache<S> {
    let len = h.len() / dim;
    let hidden = p.w_hidden.shape[1];
    let labels = p.w_score.shape[1];

    let mut act = vec![S::zero(); len * hidden];
    for t in 0..len {
        let row = &mut act[t * hidden..(t + 1) * hidden];
        for d in 0..dim {
            axpy(h[t * dim + d], &p.w_hidden.data[d * hidden..(d + 1) * hidden], row);
        }
        row.iter_mut().for_each(|v| *v = v.tanh());
    }
    let mut alpha = vec![S::zero(); len * labels];
    for t in 0..len {
        let row = &mut alpha[t * labels..(t + 1) * labels];
        for a in 0..hidden {
            axpy(act[t * hidden + a], &p.w_score.data[a * labels..(a + 1) * labels], row);
        }
    }
    for k in 0..labels {
        let max = (0..len).map(|t| alpha[t * labels + k]).fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for t in 0..len {
            let e = (alpha[t * labels + k] - max).exp();
            alpha[t * labels + k] = e;
            sum += e;
        }
        for t in 0..len {
            alpha[t * labels + k] /= sum;
        }
    }
    let mut context = vec![S::zero(); dim * labels];
    for t in 0..len {
        let a = &alpha[t * labels..(t + 1) * labels];
        for d in 0..dim {
            axpy(h[t * dim + d], a, &mut context[d * labels..(d + 1) * labels]);
        }
    }
    AttentionCache {
        len,
        dim,
        hidden,
        labels,
        act,
        alpha,
        context,
    }
}

/// Accumulates parameter gradients from `d_context` (`D x K`) and returns
/// the gradient w.r.t. `h` (`T x D`).
pub fn attention_backward<S: Scalar>(
    h: &[S],
    cache: &AttentionCache<S>,
    p: &AttentionParams<S>,
    d_context: &[S],
    grads: &mut AttentionParams<S>,
) -> Vec<S> {
    let (len, dim, hidden, labels) = (cache.len, cache.dim, cache.hidden, cache.labels);
    let mut d_h = vec![S::zero(); len * dim];
    let mut d_score = vec![S::zero(); len * labels];
    for t in 0..len {
        let a = &cache.alpha[t * labels..(t + 1) * labels];
        let ds = &mut d_score[t * labels..(t + 1) * labels];
        for d in 0..dim {
            let dc = &d_context[d * labels..(d + 1) * labels];
            d_h[t * dim + d] += dot(a, dc);
            axpy(h[t * dim + d], dc, ds);
        }
    }
    // Softmax Jacobian per column; `d_score` holds d alpha on entry.
    for k in 0..labels {
        let inner: S = (0..len)
            .map(|t| cache.alpha[t * labels + k] * d_score[t * labels + k])
            .sum();
        for t in 0..len {
            let i = t * labels + k;
            d_score[i] = cache.alpha[i] * (d_score[i] - inner);
        }
    }
    let mut d_pre = vec![S::zero(); hidden];
    for t in 0..len {
        let ds = &d_score[t * labels..(t + 1) * labels];
        let act = &cache.act[t * hidden..(t + 1) * hidden];
        for a in 0..hidden {
            axpy(act[a], ds, &mut grads.w_score.data[a * labels..(a + 1) * labels]);
            d_pre[a] = dot(&p.w_score.data[a * labels..(a + 1) * labels], ds) * (S::one() - act[a] * act[a]);
        }
        for d in 0..dim {
            axpy(
                h[t * dim + d],
                &d_pre,
                &mut grads.w_hidden.data[d * hidden..(d + 1) * hidden],
            );
            d_h[t * dim + d] += dot(&p.w_hidden.data[d * hidden..(d + 1) * hidden], &d_pre);
        }
    }
    d_h
}
