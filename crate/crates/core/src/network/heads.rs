//! Classification and localization heads over the `D x K` context.

use std::ops::Range;

use super::params::{HeadBlock, HeadParams};
use crate::scalar::{axpy, dot, Scalar};

/// Flattens `c` (`D x K`) label-major: `v[k * D + d] = c[d * K + k]`.
pub fn flatten_context<S: Scalar>(c: &[S], dim: usize, labels: usize) -> Vec<S> {
    let mut v = vec![S::zero(); dim * labels];
    for d in 0..dim {
        for k in 0..labels {
            v[k * dim + d] = c[d * labels + k];
        }
    }
    v
}

fn context_column<S: Scalar>(c: &[S], dim: usize, labels: usize, k: usize) -> Vec<S> {
    (0..dim).map(|d| c[d * labels + k]).collect()
}

fn affine<S: Scalar>(w: &[S], b: &[S], input: &[S], out: &mut [S]) {
    let n = input.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * n..(r + 1) * n], input) + b[r];
    }
}

/// Accumulates `dW += g x^T`, `db += g` and adds `W^T g` into `d_input`.
fn affine_backward<S: Scalar>(w: &[S], input: &[S], g: &[S], d_w: &mut [S], d_b: &mut [S], d_input: &mut [S]) {
    let n = input.len();
    for (r, &gr) in g.iter().enumerate() {
        d_b[r] += gr;
        axpy(gr, input, &mut d_w[r * n..(r + 1) * n]);
        axpy(gr, &w[r * n..(r + 1) * n], d_input);
    }
}

/// Logits (`N_d x K`) and encoded offsets (`N_d x 2`) for all windows.
///
/// `class_ranges[e]` lists the windows of the `e`-th detected class; the
/// depthwise variant computes them from context column `e + 1` only.
pub fn heads_forward<S: Scalar>(
    c: &[S],
    dim: usize,
    labels: usize,
    class_ranges: &[Range<usize>],
    p: &HeadParams<S>,
) -> (Vec<S>, Vec<S>) {
    let n_windows = class_ranges.last().map_or(0, |r| r.end);
    let mut logits = vec![S::zero(); n_windows * labels];
    let mut loc = vec![S::zero(); n_windows * 2];
    match p {
        HeadParams::Dense(h) => {
            let v = flatten_context(c, dim, labels);
            affine(&h.clf_weight.data, &h.clf_bias.data, &v, &mut logits);
            affine(&h.loc_weight.data, &h.loc_bias.data, &v, &mut loc);
        }
        HeadParams::Depthwise(blocks) => {
            for (e, (h, r)) in blocks.iter().zip(class_ranges).enumerate() {
                let col = context_column(c, dim, labels, e + 1);
                affine(
                    &h.clf_weight.data,
                    &h.clf_bias.data,
                    &col,
                    &mut logits[r.start * labels..r.end * labels],
                );
                affine(
                    &h.loc_weight.data,
                    &h.loc_bias.data,
                    &col,
                    &mut loc[r.start * 2..r.end * 2],
                );
            }
        }
    }
    (logits, loc)
}

fn block_backward<S: Scalar>(
    h: &HeadBlock<S>,
    input: &[S],
    d_logits: &[S],
    d_loc: &[S],
    g: &mut HeadBlock<S>,
) -> Vec<S> {
    let mut d_input = vec![S::zero(); input.len()];
    affine_backward(
        &h.clf_weight.data,
        input,
        d_logits,
        &mut g.clf_weight.data,
        &mut g.clf_bias.data,
        &mut d_input,
    );
    affine_backward(
        &h.loc_weight.data,
        input,
        d_loc,
        &mut g.loc_weight.data,
        &mut g.loc_bias.data,
        &mut d_input,
    );
    d_input
}

/// Accumulates head gradients and returns the context gradient (`D x K`).
#[allow(clippy::too_many_arguments)]
pub fn heads_backward<S: Scalar>(
    c: &[S],
    dim: usize,
    labels: usize,
    class_ranges: &[Range<usize>],
    p: &HeadParams<S>,
    d_logits: &[S],
    d_loc: &[S],
    grads: &mut HeadParams<S>,
) -> Vec<S> {
    let mut d_c = vec![S::zero(); dim * labels];
    match (p, grads) {
        (HeadParams::Dense(h), HeadParams::Dense(g)) => {
            let v = flatten_context(c, dim, labels);
            let d_v = block_backward(h, &v, d_logits, d_loc, g);
            for d in 0..dim {
                for k in 0..labels {
                    d_c[d * labels + k] = d_v[k * dim + d];
                }
            }
        }
        (HeadParams::Depthwise(blocks), HeadParams::Depthwise(gs)) => {
            for (e, ((h, g), r)) in blocks.iter().zip(gs.iter_mut()).zip(class_ranges).enumerate() {
                let col = context_column(c, dim, labels, e + 1);
                let d_col = block_backward(
                    h,
                    &col,
                    &d_logits[r.start * labels..r.end * labels],
                    &d_loc[r.start * 2..r.end * 2],
                    g,
                );
                for d in 0..dim {
                    d_c[d * labels + e + 1] += d_col[d];
                }
            }
        }
        _ => panic!("head gradient variant does not match parameters"),
    }
    d_c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(windows: usize, labels: usize, input: usize, rng: &mut ChaCha8Rng) -> HeadBlock<f64> {
        let mut t = |shape: &[usize]| Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        };
        HeadBlock {
            clf_weight: t(&[windows * labels, input]),
            clf_bias: t(&[windows * labels]),
            loc_weight: t(&[windows * 2, input]),
            loc_bias: t(&[windows * 2]),
        }
    }

    const DIM: usize = 3;
    const LABELS: usize = 3;

    fn ranges() -> Vec<Range<usize>> {
        vec![0..2, 2..5]
    }

    fn changed_windows(p: &HeadParams<f64>, col: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c: Vec<f64> = (0..DIM * LABELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (s0, _) = heads_forward(&c, DIM, LABELS, &ranges(), p);
        let mut c1 = c.clone();
        for d in 0..DIM {
            c1[d * LABELS + col] += 0.5;
        }
        let (s1, _) = heads_forward(&c1, DIM, LABELS, &ranges(), p);
        (0..5)
            .filter(|&j| (0..LABELS).any(|k| s0[j * LABELS + k] != s1[j * LABELS + k]))
            .collect()
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let p = HeadParams::Dense(HeadBlock {
            clf_weight: Tensor::zeros(&[5 * LABELS, DIM * LABELS]),
            clf_bias: Tensor::zeros(&[5 * LABELS]),
            loc_weight: Tensor::zeros(&[10, DIM * LABELS]),
            loc_bias: Tensor::zeros(&[10]),
        });
        let c = vec![1.0; DIM * LABELS];
        let (s, y) = heads_forward(&c, DIM, LABELS, &ranges(), &p);
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_column_reaches_every_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HeadParams::Dense(block(5, LABELS, DIM * LABELS, &mut rng));
        for col in 0..LABELS {
            assert_eq!(changed_windows(&p, col), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn depthwise_column_reaches_its_class_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = HeadParams::Depthwise(vec![block(2, LABELS, DIM, &mut rng), block(3, LABELS, DIM, &mut rng)]);
        assert!(changed_windows(&p, 0).is_empty());
        assert_eq!(changed_windows(&p, 1), vec![0, 1]);
        assert_eq!(changed_windows(&p, 2), vec![2, 3, 4]);
    }

    #[test]
    fn unused_depthwise_block_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = HeadParams::Depthwise(vec![block(2, LABELS, DIM, &mut rng), block(3, LABELS, DIM, &mut rng)]);
        let mut g = HeadParams::Depthwise(vec![block(2, LABELS, DIM, &mut rng), block(3, LABELS, DIM, &mut rng)]);
        if let HeadParams::Depthwise(gs) = &mut g {
            for b in gs.iter_mut() {
                for t in [&mut b.clf_weight, &mut b.clf_bias, &mut b.loc_weight, &mut b.loc_bias] {
                    t.fill_zero();
                }
            }
        }
        let c: Vec<f64> = (0..DIM * LABELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut d_s = vec![0.0; 5 * LABELS];
        let mut d_y = vec![0.0; 10];
        d_s[3 * LABELS + 1] = 1.0;
        d_y[2 * 2] = -0.5;
        heads_backward(&c, DIM, LABELS, &ranges(), &p, &d_s, &d_y, &mut g);
        let HeadParams::Depthwise(gs) = g else { unreachable!() };
        assert!(gs[0].clf_weight.data.iter().all(|&v| v == 0.0));
        assert!(gs[0].loc_bias.data.iter().all(|&v| v == 0.0));
        assert!(gs[1].clf_weight.data.iter().any(|&v| v != 0.0));
    }
}
