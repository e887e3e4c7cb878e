//! IIR biquad cascades and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

/// Normalized biquad `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

// Q factors of the two sections of a 4th-order Butterworth prototype.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

impl Biquad {
    fn from_unnormalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    /// Bilinear 2nd-order lowpass with quality factor `q`.
    pub fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_unnormalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    /// Bilinear 2nd-order highpass with quality factor `q`.
    pub fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_unnormalized(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    /// Second-order notch at `f0` with quality factor `q`.
    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_unnormalized([1.0, -2.0 * c, 1.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Gain at DC.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at frequency `f`.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0,
            self.b[1] * z1.1 + self.b[2] * z2.1,
        );
        let den = (
            1.0 + self.a[0] * z1.0 + self.a[1] * z2.0,
            self.a[0] * z1.1 + self.a[1] * z2.1,
        );
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

// Autoregressive order used to extrapolate signal edges before filtering.
const EDGE_AR_ORDER: usize = 16;

/// Burg estimate of prediction coefficients `a` such that
/// `x[n] ≈ -Σ_k a[k] x[n-1-k]`. Every reflection coefficient has magnitude
/// at most one, so the predictor is stable.
fn burg(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let order = order.min(n.saturating_sub(1));
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    let mut a: Vec<f64> = Vec::with_capacity(order);
    for m in 0..order {
        let (mut num, mut den) = (0.0, 0.0);
        for i in m + 1..n {
            num += f[i] * b[i - 1];
            den += f[i] * f[i] + b[i - 1] * b[i - 1];
        }
        if den <= f64::MIN_POSITIVE {
            break;
        }
        let k = (-2.0 * num / den).clamp(-1.0, 1.0);
        let prev = a.clone();
        for j in 0..m {
            a[j] = prev[j] + k * prev[m - 1 - j];
        }
        a.push(k);
        for i in (m + 1..n).rev() {
            let fi = f[i];
            f[i] = fi + k * b[i - 1];
            b[i] = b[i - 1] + k * fi;
        }
    }
    a
}

/// `count` samples continuing `x` forward by linear prediction around the
/// mean of `x`.
fn extrapolate(x: &[f64], count: usize) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let a = burg(&centered, EDGE_AR_ORDER);
    let mut hist = centered;
    let start = hist.len();
    for _ in 0..count {
        let len = hist.len();
        let next: f64 = -a
            .iter()
            .enumerate()
            .map(|(k, ak)| ak * hist[len - 1 - k])
            .sum::<f64>();
        hist.push(next);
    }
    hist[start..].iter().map(|v| v + mean).collect()
}

/// A cascade of biquad sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn butterworth4_highpass(fc: f64, fs: f64) -> Self {
        Self {
            sections: BUTTER4_Q.iter().map(|&q| Biquad::highpass(fc, fs, q)).collect(),
        }
    }

    pub fn butterworth4_lowpass(fc: f64, fs: f64) -> Self {
        Self {
            sections: BUTTER4_Q.iter().map(|&q| Biquad::lowpass(fc, fs, q)).collect(),
        }
    }

    pub fn then(mut self, other: SosFilter) -> Self {
        self.sections.extend(other.sections);
        self
    }

    pub fn push(&mut self, section: Biquad) {
        self.sections.push(section);
    }

    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.magnitude(f, fs)).product()
    }

    /// Causal filtering with steady-state initial conditions for a constant
    /// input equal to `x[0]` (transposed direct form II).
    pub fn lfilter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut level = x.first().copied().unwrap_or(0.0);
        for sec in &self.sections {
            let g = sec.dc_gain();
            let s2_unit = sec.b[2] - sec.a[1] * g;
            let s1_unit = sec.b[1] - sec.a[0] * g + s2_unit;
            let (mut s1, mut s2) = (s1_unit * level, s2_unit * level);
            for v in y.iter_mut() {
                let xin = *v;
                let out = sec.b[0] * xin + s1;
                s1 = sec.b[1] * xin - sec.a[0] * out + s2;
                s2 = sec.b[2] * xin - sec.a[1] * out;
                *v = out;
            }
            level *= g;
        }
        y
    }

    /// Zero-phase forward-backward filtering. Each edge is extended by
    /// `padlen` samples of linear prediction fitted to the `padlen` samples
    /// nearest that edge, so stationary oscillations continue without a
    /// phase or level jump. Requires `x.len() > padlen`.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        assert!(n > padlen, "signal shorter than padding");
        let fit = padlen.max(2 * EDGE_AR_ORDER).min(n);
        let head: Vec<f64> = x[..fit].iter().rev().copied().collect();
        let mut ext = extrapolate(&head, padlen);
        ext.reverse();
        ext.extend_from_slice(x);
        ext.extend(extrapolate(&x[n - fit..], padlen));
        let mut fwd = self.lfilter(&ext);
        fwd.reverse();
        let mut back = self.lfilter(&fwd);
        back.reverse();
        back[padlen..padlen + n].to_vec()
    }
}
