//! Gated recurrent unit, one direction at a time.
//!
//! Per step, with gate rows stacked `[u; r; n]`:
//!
//! ```text
//! u = sigmoid(Wu_z z + bu_z + Wu_h h' + bu_h)
//! r = sigmoid(Wr_z z + br_z + Wr_h h' + br_h)
//! n = tanh(Wn_z z + bn_z + r * (Wn_h h' + bn_h))
//! h = (1 - u) * n + u * h'
//! ```
//!
//! where `h'` is the previous state in processing order (zero at the start).
//! Sequences are time-major: `z` is `T x F`.

use super::params::GruParams;
use crate::scalar::{axpy, dot, sigmoid, Scalar};

#[derive(Debug, Clone)]
pub struct GruCache<S> {
    pub len: usize,
    pub hidden: usize,
    pub reverse: bool,
    /// `T x 3H` activated gates `[u, r, n]`, indexed by time.
    gates: Vec<S>,
    /// `T x H` recurrent candidate term `Wn_h h' + bn_h`.
    hidden_n: Vec<S>,
    /// `T x H` hidden states, indexed by time.
    pub states: Vec<S>,
}

impl<S: Scalar> GruCache<S> {
    /// Time index of the step preceding `t` in processing order.
    fn prev_time(&self, t: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < self.len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }

    fn processing_order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.len).rev())
        } else {
            Box::new(0..self.len)
        }
    }
}

/// Runs one direction over `z` (`T x F`). With `reverse`, steps run from
/// the last time index to the first; states are still stored by time.
pub fn gru_forward<S: Scalar>(z: &[S], features: usize, p: &GruParams<S>, reverse: bool) -> GruCache<S> {
    let len = z.len() / features;
    let h3 = p.w_input.shape[0];
    let hidden = h3 / 3;
    debug_assert_eq!(p.w_input.shape[1], features);

    // Input projections for every step.
    let mut xp = vec![S::zero(); len * h3];
    for t in 0..len {
        let zt = &z[t * features..(t + 1) * features];
        let row = &mut xp[t * h3..(t + 1) * h3];
        for g in 0..h3 {
            row[g] = dot(&p.w_input.data[g * features..(g + 1) * features], zt) + p.b_input.data[g];
        }
    }

    let mut cache = GruCache {
        len,
        hidden,
        reverse,
        gates: vec![S::zero(); len * h3],
        hidden_n: vec![S::zero(); len * hidden],
        states: vec![S::zero(); len * hidden],
    };
    let zeros = vec![S::zero(); hidden];
    let mut hp = vec![S::zero(); h3];
    let order: Vec<usize> = cache.processing_order().collect();
    for t in order {
        let prev: Vec<S> = match cache.prev_time(t) {
            Some(tp) => cache.states[tp * hidden..(tp + 1) * hidden].to_vec(),
            None => zeros.clone(),
        };
        for g in 0..h3 {
            hp[g] = dot(&p.w_hidden.data[g * hidden..(g + 1) * hidden], &prev) + p.b_hidden.data[g];
        }
        let x = &xp[t * h3..(t + 1) * h3];
        for j in 0..hidden {
            let u = sigmoid(x[j] + hp[j]);
            let r = sigmoid(x[hidden + j] + hp[hidden + j]);
            let hn = hp[2 * hidden + j];
            let n = (x[2 * hidden + j] + r * hn).tanh();
            cache.gates[t * h3 + j] = u;
            cache.gates[t * h3 + hidden + j] = r;
            cache.gates[t * h3 + 2 * hidden + j] = n;
            cache.hidden_n[t * hidden + j] = hn;
            cache.states[t * hidden + j] = (S::one() - u) * n + u * prev[j];
        }
    }
    cache
}

/// Backpropagation through time for one direction.
///
/// `d_states(t)` yields the loss gradient w.r.t. the output state at time
/// `t`; parameter gradients accumulate into `grads` and the input gradient
/// into `d_z` (`T x F`).
pub fn gru_backward<S: Scalar>(
    z: &[S],
    features: usize,
    cache: &GruCache<S>,
    p: &GruParams<S>,
    d_states: impl Fn(usize) -> Vec<S>,
    grads: &mut GruParams<S>,
    d_z: &mut [S],
) {
    let (len, hidden) = (cache.len, cache.hidden);
    let h3 = 3 * hidden;
    let zeros = vec![S::zero(); hidden];
    let mut d_xp = vec![S::zero(); len * h3];
    let mut carry = vec![S::zero(); hidden];
    let mut d_hp = vec![S::zero(); h3];
    let order: Vec<usize> = cache.processing_order().collect();
    for &t in order.iter().rev() {
        let prev: &[S] = match cache.prev_time(t) {
            Some(tp) => &cache.states[tp * hidden..(tp + 1) * hidden],
            None => &zeros,
        };
        let dh_out = d_states(t);
        let gates = &cache.gates[t * h3..(t + 1) * h3];
        let mut next_carry = vec![S::zero(); hidden];
        for j in 0..hidden {
            let dh = dh_out[j] + carry[j];
            let (u, r, n) = (gates[j], gates[hidden + j], gates[2 * hidden + j]);
            let hn = cache.hidden_n[t * hidden + j];
            let dn_pre = dh * (S::one() - u) * (S::one() - n * n);
            let du_pre = dh * (prev[j] - n) * u * (S::one() - u);
            let dr_pre = dn_pre * hn * r * (S::one() - r);
            d_xp[t * h3 + j] = du_pre;
            d_xp[t * h3 + hidden + j] = dr_pre;
            d_xp[t * h3 + 2 * hidden + j] = dn_pre;
            d_hp[j] = du_pre;
            d_hp[hidden + j] = dr_pre;
            d_hp[2 * hidden + j] = dn_pre * r;
            next_carry[j] = dh * u;
        }
        for g in 0..h3 {
            let dg = d_hp[g];
            grads.b_hidden.data[g] += dg;
            axpy(dg, prev, &mut grads.w_hidden.data[g * hidden..(g + 1) * hidden]);
            axpy(dg, &p.w_hidden.data[g * hidden..(g + 1) * hidden], &mut next_carry);
        }
        carry = next_carry;
    }
    for t in 0..len {
        let zt = &z[t * features..(t + 1) * features];
        let dzt = &mut d_z[t * features..(t + 1) * features];
        for g in 0..h3 {
            let dg = d_xp[t * h3 + g];
            grads.b_input.data[g] += dg;
            axpy(dg, zt, &mut grads.w_input.data[g * features..(g + 1) * features]);
            axpy(dg, &p.w_input.data[g * features..(g + 1) * features], dzt);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(f: usize, h: usize, rng: &mut ChaCha8Rng) -> GruParams<f64> {
        let mut t = |shape: &[usize]| Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        };
        GruParams {
            w_input: t(&[3 * h, f]),
            b_input: t(&[3 * h]),
            w_hidden: t(&[3 * h, h]),
            b_hidden: t(&[3 * h]),
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let (f, h) = (3, 4);
        let p = GruParams {
            w_input: Tensor::zeros(&[3 * h, f]),
            b_input: Tensor::zeros(&[3 * h]),
            w_hidden: Tensor::zeros(&[3 * h, h]),
            b_hidden: Tensor::zeros(&[3 * h]),
        };
        let z: Vec<f64> = (0..f * 9).map(|i| (i as f64).sin()).collect();
        for reverse in [false, true] {
            let c = gru_forward(&z, f, &p, reverse);
            assert!(c.states.iter().all(|&v| v == 0.0));
            assert!(c.gates[..h].iter().all(|&u| u == 0.5));
            assert!(c.gates[h..2 * h].iter().all(|&r| r == 0.5));
            assert!(c.gates[2 * h..3 * h].iter().all(|&n| n == 0.0));
        }
    }

    #[test]
    fn single_step_directions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(3, 4, &mut rng);
        let z = vec![0.3, -0.2, 0.9];
        let a = gru_forward(&z, 3, &p, false);
        let b = gru_forward(&z, 3, &p, true);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn reversed_input_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, h, t) = (3, 4, 7);
        let p = random_params(f, h, &mut rng);
        let z: Vec<f64> = (0..f * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut z_rev = Vec::with_capacity(z.len());
        for step in (0..t).rev() {
            z_rev.extend_from_slice(&z[step * f..(step + 1) * f]);
        }
        let fwd = gru_forward(&z, f, &p, false);
        let bwd_on_rev = gru_forward(&z_rev, f, &p, true);
        for step in 0..t {
            let a = &fwd.states[step * h..(step + 1) * h];
            let b = &bwd_on_rev.states[(t - 1 - step) * h..(t - step) * h];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, h, t) = (3, 2, 5);
        let p = random_params(f, h, &mut rng);
        let z: Vec<f64> = (0..f * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..t * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        for reverse in [false, true] {
            let loss = |p: &GruParams<f64>, z: &[f64]| -> f64 {
                let c = gru_forward(z, f, p, reverse);
                c.states.iter().zip(&weights).map(|(a, b)| a * b).sum()
            };
            let cache = gru_forward(&z, f, &p, reverse);
            let mut grads = GruParams {
                w_input: Tensor::zeros(&[3 * h, f]),
                b_input: Tensor::zeros(&[3 * h]),
                w_hidden: Tensor::zeros(&[3 * h, h]),
                b_hidden: Tensor::zeros(&[3 * h]),
            };
            let mut d_z = vec![0.0; z.len()];
            gru_backward(
                &z,
                f,
                &cache,
                &p,
                |s| weights[s * h..(s + 1) * h].to_vec(),
                &mut grads,
                &mut d_z,
            );
            let step = 1e-6;
            for i in 0..p.w_hidden.data.len() {
                let mut plus = p.clone();
                plus.w_hidden.data[i] += step;
                let mut minus = p.clone();
                minus.w_hidden.data[i] -= step;
                let num = (loss(&plus, &z) - loss(&minus, &z)) / (2.0 * step);
                assert!((num - grads.w_hidden.data[i]).abs() < 1e-8);
            }
            for i in 0..z.len() {
                let mut plus = z.clone();
                plus[i] += step;
                let mut minus = z.clone();
                minus[i] -= step;
                let num = (loss(&p, &plus) - loss(&p, &minus)) / (2.0 * step);
                assert!((num - d_z[i]).abs() < 1e-8);
            }
        }
    }
}
