//! Channel mixing (1x1 conv + ReLU) and the strided conv / BN / ReLU block.
//!
//! Feature maps are row-major `features x time`.

use super::params::ConvBlockParams;
use super::Mode;
use crate::scalar::{axpy, dot, Scalar};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-6;
/// Weight of the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

/// `max(0, W x + b)` applied per time column. `x` is `C x T`.
pub fn channel_mixing<S: Scalar>(x: &[S], channels: usize, w: &[S], b: &[S]) -> Vec<S> {
    let t = x.len() / channels;
    let mut out = vec![S::zero(); x.len()];
    for o in 0..channels {
        let row = &mut out[o * t..(o + 1) * t];
        row.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..channels {
            axpy(w[o * channels + i], &x[i * t..(i + 1) * t], row);
        }
        row.iter_mut().for_each(|v| *v = v.max(S::zero()));
    }
    out
}

/// Accumulates mixing-layer gradients. Returns nothing for the input since
/// the mixing layer reads the network input directly.
pub fn channel_mixing_backward<S: Scalar>(
    x: &[S],
    out: &[S],
    d_out: &[S],
    channels: usize,
    d_w: &mut [S],
    d_b: &mut [S],
) {
    let t = x.len() / channels;
    let mut d_pre = vec![S::zero(); t];
    for o in 0..channels {
        let orow = &out[o * t..(o + 1) * t];
        let grow = &d_out[o * t..(o + 1) * t];
        for ((d, &y), &g) in d_pre.iter_mut().zip(orow).zip(grow) {
            *d = if y > S::zero() { g } else { S::zero() };
        }
        d_b[o] += d_pre.iter().copied().sum::<S>();
        for i in 0..channels {
            d_w[o * channels + i] += dot(&d_pre, &x[i * t..(i + 1) * t]);
        }
    }
}

/// Cached state of one conv block forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    pub f_in: usize,
    pub f_out: usize,
    /// Output length (half the input length).
    pub len: usize,
    /// Even- and odd-indexed input samples, each `f_in x len`.
    even: Vec<S>,
    odd: Vec<S>,
    /// Normalized conv output, `f_out x len`.
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    /// Post-ReLU output, `f_out x len`.
    pub out: Vec<S>,
    pub mode: Mode,
}

impl<S: Scalar> ConvCache<S> {
    /// BN output before the ReLU, `gamma * xhat + beta`.
    pub fn pre_activation(&self, p: &ConvBlockParams<S>) -> Vec<S> {
        let mut y = self.xhat.clone();
        for o in 0..self.f_out {
            for v in &mut y[o * self.len..(o + 1) * self.len] {
                *v = p.gamma.data[o] * *v + p.beta.data[o];
            }
        }
        y
    }
}

/// Kernel-3, stride-2, padding-1 convolution without bias, then batch norm
/// over the temporal axis, then ReLU. `input` is `f_in x 2*len`.
pub fn conv_block_forward<S: Scalar>(input: &[S], f_in: usize, p: &ConvBlockParams<S>, mode: Mode) -> ConvCache<S> {
    let t_in = input.len() / f_in;
    assert!(t_in.is_multiple_of(2), "conv block input length {t_in} must be even");
    let len = t_in / 2;
    let f_out = p.kernel.shape[0];
    debug_assert_eq!(p.kernel.shape[1], f_in);

    let mut even = vec![S::zero(); f_in * len];
    let mut odd = vec![S::zero(); f_in * len];
    for i in 0..f_in {
        let src = &input[i * t_in..(i + 1) * t_in];
        for (m, pair) in src.chunks_exact(2).enumerate() {
            even[i * len + m] = pair[0];
            odd[i * len + m] = pair[1];
        }
    }

    let mut z = vec![S::zero(); f_out * len];
    for o in 0..f_out {
        let row = &mut z[o * len..(o + 1) * len];
        for i in 0..f_in {
            let k = &p.kernel.data[(o * f_in + i) * 3..(o * f_in + i) * 3 + 3];
            let ev = &even[i * len..(i + 1) * len];
            let od = &odd[i * len..(i + 1) * len];
            axpy(k[1], ev, row);
            axpy(k[2], od, row);
            axpy(k[0], &od[..len - 1], &mut row[1..]);
        }
    }

    let n = S::of(len as f64);
    let eps = S::of(BN_EPS);
    let mut inv_std = vec![S::zero(); f_out];
    let mut batch_mean = vec![S::zero(); f_out];
    let mut batch_var = vec![S::zero(); f_out];
    for o in 0..f_out {
        let row = &mut z[o * len..(o + 1) * len];
        let (mean, var) = match mode {
            Mode::Training => {
                let mean = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                (mean, var)
            }
            Mode::Inference => (p.running_mean.data[o], p.running_var.data[o]),
        };
        batch_mean[o] = mean;
        batch_var[o] = var;
        let is = S::one() / (var + eps).sqrt();
        inv_std[o] = is;
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
    }
    let xhat = z;
    let mut out = xhat.clone();
    for o in 0..f_out {
        let (g, b) = (p.gamma.data[o], p.beta.data[o]);
        for v in &mut out[o * len..(o + 1) * len] {
            *v = (g * *v + b).max(S::zero());
        }
    }
    ConvCache {
        f_in,
        f_out,
        len,
        even,
        odd,
        xhat,
        inv_std,
        batch_mean,
        batch_var,
        out,
        mode,
    }
}

/// Accumulates block parameter gradients and returns the input gradient
/// (`f_in x 2*len`) when `need_input_grad` is set.
pub fn conv_block_backward<S: Scalar>(
    cache: &ConvCache<S>,
    p: &ConvBlockParams<S>,
    d_out: &[S],
    grads: &mut ConvBlockParams<S>,
    need_input_grad: bool,
) -> Option<Vec<S>> {
    let (f_in, f_out, len) = (cache.f_in, cache.f_out, cache.len);
    let n = S::of(len as f64);
    let mut dz = vec![S::zero(); f_out * len];
    for o in 0..f_out {
        let range = o * len..(o + 1) * len;
        let xhat = &cache.xhat[range.clone()];
        let out = &cache.out[range.clone()];
        let gout = &d_out[range.clone()];
        let dzr = &mut dz[range];
        // Gradient through ReLU into the BN output.
        for ((d, &y), &g) in dzr.iter_mut().zip(out).zip(gout) {
            *d = if y > S::zero() { g } else { S::zero() };
        }
        let sum_dy = dzr.iter().copied().sum::<S>();
        let sum_dy_xhat = dot(dzr, xhat);
        grads.gamma.data[o] += sum_dy_xhat;
        grads.beta.data[o] += sum_dy;
        let scale = p.gamma.data[o] * cache.inv_std[o];
        match cache.mode {
            Mode::Training => {
                let mean_dy = sum_dy / n;
                let mean_dy_xhat = sum_dy_xhat / n;
                for (d, &xh) in dzr.iter_mut().zip(xhat) {
                    *d = scale * (*d - mean_dy - xh * mean_dy_xhat);
                }
            }
            Mode::Inference => dzr.iter_mut().for_each(|d| *d *= scale),
        }
    }

    let mut d_even = vec![S::zero(); if need_input_grad { f_in * len } else { 0 }];
    let mut d_odd = vec![S::zero(); d_even.len()];
    for o in 0..f_out {
        let g = &dz[o * len..(o + 1) * len];
        for i in 0..f_in {
            let base = (o * f_in + i) * 3;
            let ev = &cache.even[i * len..(i + 1) * len];
            let od = &cache.odd[i * len..(i + 1) * len];
            grads.kernel.data[base] += dot(&g[1..], &od[..len - 1]);
            grads.kernel.data[base + 1] += dot(g, ev);
            grads.kernel.data[base + 2] += dot(g, od);
            if need_input_grad {
                let k = &p.kernel.data[base..base + 3];
                axpy(k[1], g, &mut d_even[i * len..(i + 1) * len]);
                let dod = &mut d_odd[i * len..(i + 1) * len];
                axpy(k[2], g, dod);
                axpy(k[0], &g[1..], &mut dod[..len - 1]);
            }
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut d_in = vec![S::zero(); f_in * 2 * len];
    for i in 0..f_in {
        for m in 0..len {
            d_in[i * 2 * len + 2 * m] = d_even[i * len + m];
            d_in[i * 2 * len + 2 * m + 1] = d_odd[i * len + m];
        }
    }
    Some(d_in)
}

/// Exponential update of a block's running statistics from one training pass.
pub fn update_running_stats<S: Scalar>(p: &mut ConvBlockParams<S>, cache: &ConvCache<S>) {
    let m = S::of(BN_MOMENTUM);
    let one_m = S::one() - m;
    for o in 0..cache.f_out {
        p.running_mean.data[o] = m * p.running_mean.data[o] + one_m * cache.batch_mean[o];
        p.running_var.data[o] = m * p.running_var.data[o] + one_m * cache.batch_var[o];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn block(f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> ConvBlockParams<f64> {
        ConvBlockParams {
            kernel: Tensor {
                shape: vec![f_out, f_in, 3],
                data: random(f_out * f_in * 3, rng),
            },
            gamma: Tensor::filled(&[f_out], 1.0),
            beta: Tensor::zeros(&[f_out]),
            running_mean: Tensor::zeros(&[f_out]),
            running_var: Tensor::filled(&[f_out], 1.0),
        }
    }

    #[test]
    fn mixing_identity_and_relu() {
        let x = vec![1.0, 2.0, 3.0, 0.5, 0.0, 4.0];
        let w = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(channel_mixing(&x, 2, &w, &[0.0, 0.0]), x);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(channel_mixing(&neg, 2, &w, &[0.0, 0.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixing_matches_per_column_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, t) = (3, 17);
        let x = random(c * t, &mut rng);
        let w = random(c * c, &mut rng);
        let out = channel_mixing(&x, c, &w, &[0.0; 3]);
        for col in 0..t {
            for o in 0..c {
                let want: f64 = (0..c).map(|i| w[o * c + i] * x[i * t + col]).sum::<f64>().max(0.0);
                assert!((out[o * t + col] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f_in, f_out, t_in) = (2, 3, 16);
        let x = random(f_in * t_in, &mut rng);
        let p = block(f_in, f_out, &mut rng);
        let cache = conv_block_forward(&x, f_in, &p, Mode::Training);
        assert_eq!(cache.len, t_in / 2);
        // Undo BN to recover the raw conv output and compare.
        for o in 0..f_out {
            for t in 0..cache.len {
                let mut want = 0.0;
                for i in 0..f_in {
                    for k in 0..3 {
                        let idx = 2 * t as isize + k as isize - 1;
                        if idx >= 0 && (idx as usize) < t_in {
                            want += p.kernel.data[(o * f_in + i) * 3 + k] * x[i * t_in + idx as usize];
                        }
                    }
                }
                let got = cache.xhat[o * cache.len + t] / cache.inv_std[o] + cache.batch_mean[o];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bn_normalizes_each_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (f_in, f_out, t_in) = (3, 4, 64);
        let x: Vec<f64> = random(f_in * t_in, &mut rng).iter().map(|v| 3.0 * v + 2.0).collect();
        let p = block(f_in, f_out, &mut rng);
        let cache = conv_block_forward(&x, f_in, &p, Mode::Training);
        let pre = cache.pre_activation(&p);
        for o in 0..f_out {
            let row = &pre[o * cache.len..(o + 1) * cache.len];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(2 * 32, &mut rng);
        let mut p = block(2, 2, &mut rng);
        p.gamma = Tensor::zeros(&[2]);
        p.beta = Tensor {
            shape: vec![2],
            data: vec![0.25, -0.5],
        };
        let cache = conv_block_forward(&x, 2, &p, Mode::Training);
        let pre = cache.pre_activation(&p);
        assert!(pre[..16].iter().all(|&v| v == 0.25));
        assert!(pre[16..].iter().all(|&v| v == -0.5));
        assert!(cache.out[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = random(32, &mut rng).iter().map(|v| v + 5.0).collect();
        let mut p = block(1, 1, &mut rng);
        let cache = conv_block_forward(&x, 1, &p, Mode::Training);
        update_running_stats(&mut p, &cache);
        assert!((p.running_mean.data[0] - 0.1 * cache.batch_mean[0]).abs() < 1e-12);
        assert!((p.running_var.data[0] - (0.9 + 0.1 * cache.batch_var[0])).abs() < 1e-12);
    }
}
