//! Butterworth IIR design (bilinear transform with prewarping) as cascaded
//! second-order sections, and forward-backward zero-phase application.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass { low: f64, high: f64 },
    Highpass { cutoff: f64 },
}

/// Filter request. `order` is the analog lowpass prototype order, so a
/// second order bandpass has four poles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
}

impl FilterSpec {
    pub fn bandpass(order: usize, low: f64, high: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass { low, high },
            order,
        }
    }

    pub fn highpass(order: usize, cutoff: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Highpass { cutoff },
            order,
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        match self.kind {
            FilterKind::Bandpass { low, high } => vec![low, high],
            FilterKind::Highpass { cutoff } => vec![cutoff],
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if !matches!(self.order, 2 | 4) {
            return Err(Error::InvalidFilter(format!("order {} not in {{2, 4}}", self.order)));
        }
        let nyquist = fs / 2.0;
        for edge in self.edges() {
            if !(edge > 0.0 && edge < nyquist) {
                return Err(Error::InvalidFilter(format!(
                    "band edge {edge} Hz outside (0, {nyquist}) Hz"
                )));
            }
        }
        if let FilterKind::Bandpass { low, high } = self.kind {
            if low >= high {
                return Err(Error::InvalidFilter(format!("low edge {low} >= high edge {high}")));
            }
        }
        Ok(())
    }
}

/// One biquad, `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad<S> {
    pub b0: S,
    pub b1: S,
    pub b2: S,
    pub a1: S,
    pub a2: S,
}

impl<S: Scalar> Biquad<S> {
    /// Stable iff both roots of `z^2 + a1 z + a2` lie strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        let (a1, a2) = (self.a1.to_f64_lossy(), self.a2.to_f64_lossy());
        a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoeffs<S> {
    pub sections: Vec<Biquad<S>>,
}

impl<S: Scalar> FilterCoeffs<S> {
    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    pub fn cast<T: Scalar>(&self) -> FilterCoeffs<T> {
        let c = |v: S| T::of(v.to_f64_lossy());
        FilterCoeffs {
            sections: self
                .sections
                .iter()
                .map(|s| Biquad {
                    b0: c(s.b0),
                    b1: c(s.b1),
                    b2: c(s.b2),
                    a1: c(s.a1),
                    a2: c(s.a2),
                })
                .collect(),
        }
    }

    /// Single-pass magnitude response at `freq` Hz.
    pub fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| {
                let num = s.b0.to_f64_lossy() + z1 * s.b1.to_f64_lossy() + z2 * s.b2.to_f64_lossy();
                let den = 1.0 + z1 * s.a1.to_f64_lossy() + z2 * s.a2.to_f64_lossy();
                (num / den).norm()
            })
            .product()
    }

    /// Single-pass causal filtering (direct form II transposed).
    pub fn filter(&self, signal: &[S]) -> Vec<S> {
        let mut out = signal.to_vec();
        for s in &self.sections {
            run_section(s, &mut out, S::zero(), S::zero());
        }
        out
    }
}

fn run_section<S: Scalar>(s: &Biquad<S>, data: &mut [S], mut z1: S, mut z2: S) {
    for v in data.iter_mut() {
        let x = *v;
        let y = s.b0 * x + z1;
        z1 = s.b1 * x - s.a1 * y + z2;
        z2 = s.b2 * x - s.a2 * y;
        *v = y;
    }
}

fn prewarp(freq: f64, fs: f64) -> f64 {
    2.0 * fs * (std::f64::consts::PI * freq / fs).tan()
}

/// Poles of the normalized analog Butterworth lowpass of the given order.
fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

/// Groups digital poles into conjugate pairs (or real pairs), one per section.
fn pair_poles(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut real: Vec<Complex64> = poles.iter().copied().filter(|p| p.im.abs() <= 1e-12).collect();
    upper.sort_by(|a, b| a.re.total_cmp(&b.re));
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut pairs: Vec<(Complex64, Complex64)> = upper.into_iter().map(|p| (p, p.conj())).collect();
    for chunk in real.chunks(2) {
        let second = chunk.get(1).copied().unwrap_or(Complex64::new(0.0, 0.0));
        pairs.push((chunk[0], second));
    }
    pairs
}

/// Designs the Butterworth filter as second-order sections.
///
/// Edges are prewarped so the single-pass magnitude at each edge is exactly
/// `1/sqrt(2)`. Passband gain is normalized to 1 at Nyquist (highpass) or at
/// the digital image of the analog center frequency (bandpass).
pub fn design_filter(spec: &FilterSpec, fs: f64) -> Result<FilterCoeffs<f64>> {
    spec.validate(fs)?;
    let proto = prototype_poles(spec.order);
    let (poles, zero_pairs, norm_freq): (Vec<Complex64>, Vec<(f64, f64)>, f64) = match spec.kind {
        FilterKind::Highpass { cutoff } => {
            let wc = prewarp(cutoff, fs);
            let poles = proto.iter().map(|&p| bilinear(wc / p, fs)).collect();
            // All zeros at z = 1.
            let zeros = vec![(1.0, 1.0); spec.order / 2];
            (poles, zeros, fs / 2.0)
        }
        FilterKind::Bandpass { low, high } => {
            let w1 = prewarp(low, fs);
            let w2 = prewarp(high, fs);
            let bw = w2 - w1;
            let w0_sq = w1 * w2;
            let mut poles = Vec::with_capacity(2 * spec.order);
            for &p in &proto {
                let pb = p * bw;
                let disc = (pb * pb - 4.0 * w0_sq).sqrt();
                poles.push(bilinear((pb + disc) / 2.0, fs));
                poles.push(bilinear((pb - disc) / 2.0, fs));
            }
            // `order` zeros at s = 0 (z = 1) and `order` at infinity (z = -1).
            let zeros = vec![(1.0, -1.0); spec.order];
            let center = fs / std::f64::consts::PI * (w0_sq.sqrt() / (2.0 * fs)).atan();
            (poles, zeros, center)
        }
    };
    let pole_pairs = pair_poles(&poles);
    debug_assert_eq!(pole_pairs.len(), zero_pairs.len());
    let mut sections: Vec<Biquad<f64>> = pole_pairs
        .iter()
        .zip(&zero_pairs)
        .map(|(&(p1, p2), &(z1, z2))| Biquad {
            b0: 1.0,
            b1: -(z1 + z2),
            b2: z1 * z2,
            a1: -(p1 + p2).re,
            a2: (p1 * p2).re,
        })
        .collect();
    let unnormalized = FilterCoeffs {
        sections: sections.clone(),
    };
    let gain = unnormalized.magnitude(norm_freq, fs);
    // Spread the gain evenly to keep section magnitudes balanced.
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }
    let coeffs = FilterCoeffs { sections };
    if !coeffs.is_stable() {
        return Err(Error::InvalidFilter("designed filter is unstable".into()));
    }
    Ok(coeffs)
}

/// Steady-state section states for a unit step input, per section.
fn step_initial_states<S: Scalar>(coeffs: &FilterCoeffs<S>) -> Vec<(S, S)> {
    let mut scale = S::one();
    coeffs
        .sections
        .iter()
        .map(|s| {
            let dc = (s.b0 + s.b1 + s.b2) / (S::one() + s.a1 + s.a2);
            let z2 = scale * (s.b2 - s.a2 * dc);
            let z1 = scale * (s.b1 - s.a1 * dc) + z2;
            scale *= dc;
            (z1, z2)
        })
        .collect()
}

/// Edge padding length: three samples per filter pole on each side.
pub fn pad_len<S>(coeffs: &FilterCoeffs<S>) -> usize {
    3 * 2 * coeffs.sections.len()
}

/// Forward-backward filtering with zero net phase and squared magnitude.
///
/// Edges are extended by odd reflection and the section states start at the
/// step-response steady state scaled by the first sample of each pass.
pub fn zero_phase_filter<S: Scalar>(signal: &[S], coeffs: &FilterCoeffs<S>) -> Result<Vec<S>> {
    let pad = pad_len(coeffs);
    if signal.len() <= pad {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            min: pad,
        });
    }
    if coeffs.sections.is_empty() {
        return Ok(signal.to_vec());
    }
    let n = signal.len();
    let two = S::one() + S::one();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (signal[0], signal[n - 1]);
    ext.extend((1..=pad).rev().map(|i| two * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| two * last - signal[n - 1 - i]));

    let zi = step_initial_states(coeffs);
    let x0 = ext[0];
    for (s, &(z1, z2)) in coeffs.sections.iter().zip(&zi) {
        run_section(s, &mut ext, z1 * x0, z2 * x0);
    }
    // The section states above were scaled by the cascade input; each later
    // section sees the filtered signal, which `step_initial_states` accounts for.
    ext.reverse();
    let y0 = ext[0];
    for (s, &(z1, z2)) in coeffs.sections.iter().zip(&zi) {
        run_section(s, &mut ext, z1 * y0, z2 * y0);
    }
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}
