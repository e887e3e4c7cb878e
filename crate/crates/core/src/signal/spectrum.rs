//! Periodogram and band-power estimates.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// One-sided periodogram `(frequencies, power)` of a real signal with the
/// mean removed. Power is `|X_k|^2 / n`, doubled for interior bins.
pub fn periodogram(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let bins = n / 2 + 1;
    let freqs = (0..bins).map(|k| k as f64 * fs / n as f64).collect();
    let power = (0..bins)
        .map(|k| {
            let p = buf[k].norm_sqr() / n as f64;
            if k == 0 || (n % 2 == 0 && k == n / 2) {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    (freqs, power)
}

/// Frequency of the largest periodogram bin, refined by parabolic
/// interpolation over the neighbouring bins.
pub fn peak_frequency(x: &[f64], fs: f64) -> f64 {
    let (freqs, power) = periodogram(x, fs);
    let (k, _) = power
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::MIN), |(bk, bp), (k, &p)| if p > bp { (k, p) } else { (bk, bp) });
    if k == 0 || k + 1 >= power.len() {
        return freqs[k];
    }
    let (a, b, c) = (power[k - 1].ln(), power[k].ln(), power[k + 1].ln());
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-300 { 0.5 * (a - c) / denom } else { 0.0 };
    freqs[k] + shift * fs / x.len() as f64
}

/// Summed periodogram power over `[lo, hi]` Hz.
pub fn band_power(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
    let (freqs, power) = periodogram(x, fs);
    freqs
        .iter()
        .zip(power.iter())
        .filter(|(f, _)| **f >= lo && **f <= hi)
        .map(|(_, p)| p)
        .sum()
}
