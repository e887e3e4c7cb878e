//! Polyphase rational resampling with a Kaiser-windowed sinc anti-alias filter.

use std::f64::consts::PI;

// Zero crossings of the sinc kernel on each side, in units of the coarser rate.
const HALF_ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 8.6;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Up/down factors `(L, M)` with `to / from = L / M`, resolved to 1 mHz.
pub fn rational_factors(from_hz: f64, to_hz: f64) -> (usize, usize) {
    let a = (to_hz * 1000.0).round() as u64;
    let b = (from_hz * 1000.0).round() as u64;
    let g = gcd(a, b).max(1);
    ((a / g) as usize, (b / g) as usize)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Prototype lowpass at the upsampled rate, gain `up`.
fn design_kernel(up: usize, down: usize) -> Vec<f64> {
    let factor = up.max(down);
    let half = HALF_ZERO_CROSSINGS * factor;
    let len = 2 * half + 1;
    // cutoff in cycles/sample at the upsampled rate
    let fc = 0.5 / factor as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..len)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * m).sin() / (PI * m)
            };
            let r = m / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            up as f64 * sinc * w
        })
        .collect()
}

/// A reusable resampler for one rate pair.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    kernel: Vec<f64>,
}

impl Resampler {
    pub fn new(from_hz: f64, to_hz: f64) -> Self {
        let (up, down) = rational_factors(from_hz, to_hz);
        Self {
            up,
            down,
            kernel: design_kernel(up, down),
        }
    }

    pub fn factors(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, n: usize) -> usize {
        n * self.up / self.down
    }

    /// Resample one channel. Output length is `floor(n * L / M)`; the kernel
    /// is centered so there is no group delay. Edges use zero extension.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (up, down) = (self.up as i64, self.down as i64);
        let len = self.kernel.len() as i64;
        let delay = (len - 1) / 2;
        let n = x.len() as i64;
        (0..self.output_len(x.len()) as i64)
            .map(|m| {
                // position in the upsampled stream, shifted by the kernel delay
                let p = m * down + delay;
                let n_lo = ((p - len + 1).max(0) + up - 1) / up;
                let n_hi = (p / up).min(n - 1);
                let mut acc = 0.0;
                let mut k = n_lo;
                while k <= n_hi {
                    acc += self.kernel[(p - k * up) as usize] * x[k as usize];
                    k += 1;
                }
                acc
            })
            .collect()
    }
}
