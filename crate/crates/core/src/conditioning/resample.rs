//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc lowpass.

use crate::error::{Error, Result};

/// Kaiser window shape parameter of the anti-aliasing filter.
pub const KAISER_BETA: f64 = 5.0;

/// Largest denominator accepted when reducing `fs_out / fs_in` to a fraction.
pub const MAX_RATIO_DENOMINATOR: u64 = 1000;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Reduces `fs_out / fs_in` to `(up, down)` in lowest terms.
pub fn rational_ratio(fs_in: f64, fs_out: f64) -> Result<(u64, u64)> {
    let bad = || Error::UnsupportedRatio { fs_in, fs_out };
    if !(fs_in > 0.0 && fs_out > 0.0) || !fs_in.is_finite() || !fs_out.is_finite() {
        return Err(bad());
    }
    let ratio = fs_out / fs_in;
    for down in 1..=MAX_RATIO_DENOMINATOR {
        let up = ratio * down as f64;
        let rounded = up.round();
        if rounded >= 1.0 && (up - rounded).abs() <= 1e-9 * rounded.max(1.0) {
            let (up, down) = (rounded as u64, down);
            let g = gcd(up, down);
            return Ok((up / g, down / g));
        }
    }
    Err(bad())
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let m = (len - 1) as f64;
    let norm = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect()
}

/// Windowed-sinc lowpass with `cutoff` as a fraction of Nyquist, unit DC gain.
pub fn lowpass_taps(num_taps: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let window = kaiser_window(num_taps, beta);
    let mid = (num_taps - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = window
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let t = n as f64 - mid;
            let arg = std::f64::consts::PI * cutoff * t;
            let sinc = if t == 0.0 { 1.0 } else { arg.sin() / arg };
            cutoff * sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Resamples `signal` from `fs_in` to `fs_out`.
///
/// The signal is upsampled by `up`, lowpassed at `min(fs_in, fs_out) / 2`
/// and decimated by `down`. Output length is `ceil(len * up / down)` and the
/// filter delay is compensated so output sample `m` sits at time `m / fs_out`.
pub fn resample(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if fs_in == fs_out {
        rational_ratio(fs_in, fs_out)?;
        return Ok(signal.to_vec());
    }
    let (up, down) = rational_ratio(fs_in, fs_out)?;
    let (up_us, down_us) = (up as usize, down as usize);
    let max_rate = up.max(down) as usize;
    let half_len = 10 * max_rate;
    let taps: Vec<f64> = lowpass_taps(2 * half_len + 1, 1.0 / max_rate as f64, KAISER_BETA)
        .into_iter()
        .map(|h| h * up as f64)
        .collect();

    let n = signal.len();
    let out_len = (n * up_us).div_ceil(down_us);
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Position in the upsampled stream aligned with the filter center.
        let pos = m * down_us + half_len;
        // Only taps hitting non-zero (original) samples contribute: pos - k ≡ 0 (mod up).
        let first_k = pos % up_us;
        let mut acc = 0.0;
        let mut k = first_k;
        while k < taps.len() {
            if pos >= k {
                let idx = (pos - k) / up_us;
                if idx < n {
                    acc += taps[k] * signal[idx];
                }
            } else {
                break;
            }
            k += up_us;
        }
        out.push(acc);
    }
    Ok(out)
}
