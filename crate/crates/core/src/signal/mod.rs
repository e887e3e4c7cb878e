//! Preprocessing chain: resample → bandpass + notch → z-score → clip → segment.

pub mod filter;
pub mod resample;
pub mod spectrum;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::Recording;
pub use filter::{Biquad, SosFilter};
pub use resample::Resampler;

/// Quality factor of the notch sections.
pub const NOTCH_Q: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub target_rate_hz: f64,
    pub bandpass_lo_hz: f64,
    pub bandpass_hi_hz: f64,
    pub notch_hz: Vec<f64>,
    pub clip_sigma: f64,
    pub segment_length_s: f64,
    /// Window stride; `None` means non-overlapping windows.
    pub segment_stride_s: Option<f64>,
    pub allow_upsample: bool,
    /// Padding of the forward-backward filter, seconds. Recordings must be
    /// longer than this.
    pub filter_warmup_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 200.0,
            bandpass_lo_hz: 0.5,
            bandpass_hi_hz: 99.5,
            notch_hz: vec![50.0, 100.0],
            clip_sigma: 15.0,
            segment_length_s: 4.0,
            segment_stride_s: None,
            allow_upsample: false,
            filter_warmup_s: 3.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.target_rate_hz > 0.0) {
            return bad("target_rate_hz must be positive".into());
        }
        if !(self.bandpass_lo_hz > 0.0
            && self.bandpass_lo_hz < self.bandpass_hi_hz
            && self.bandpass_hi_hz < self.target_rate_hz / 2.0)
        {
            return bad(format!(
                "need 0 < lo ({}) < hi ({}) < Nyquist ({})",
                self.bandpass_lo_hz,
                self.bandpass_hi_hz,
                self.target_rate_hz / 2.0
            ));
        }
        if !(self.clip_sigma > 0.0) {
            return bad("clip_sigma must be positive".into());
        }
        let samples = self.segment_length_s * self.target_rate_hz;
        if !(self.segment_length_s > 0.0) || (samples - samples.round()).abs() > 1e-9 {
            return bad(format!(
                "segment_length_s × target_rate_hz = {samples} is not a positive integer"
            ));
        }
        if let Some(stride) = self.segment_stride_s {
            if !(stride > 0.0) {
                return bad("segment_stride_s must be positive".into());
            }
        }
        Ok(())
    }

    pub fn stride_s(&self) -> f64 {
        self.segment_stride_s.unwrap_or(self.segment_length_s)
    }

    fn warmup_samples(&self) -> usize {
        (self.filter_warmup_s * self.target_rate_hz).round() as usize
    }

    /// The filter cascade at `target_rate_hz`: 4th-order Butterworth
    /// highpass and lowpass, then one notch per frequency below Nyquist.
    pub fn filter(&self) -> SosFilter {
        let fs = self.target_rate_hz;
        let mut sos = SosFilter::butterworth4_highpass(self.bandpass_lo_hz, fs)
            .then(SosFilter::butterworth4_lowpass(self.bandpass_hi_hz, fs));
        for &f0 in &self.notch_hz {
            // a notch at Nyquist degenerates; the lowpass zeros at z = -1 cover it
            if f0 > 0.0 && f0 < fs / 2.0 {
                sos.push(Biquad::notch(f0, fs, NOTCH_Q));
            }
        }
        sos
    }
}

/// Resample every channel to `target_rate_hz`.
pub fn resample(rec: &Recording, target_rate_hz: f64, allow_upsample: bool) -> Result<Recording> {
    if !(target_rate_hz > 0.0) {
        return Err(Error::InvalidConfig("target rate must be positive".into()));
    }
    if rec.sample_rate_hz == target_rate_hz {
        return Ok(rec.clone());
    }
    if target_rate_hz > rec.sample_rate_hz && !allow_upsample {
        return Err(Error::UpsamplingDisabled {
            from: rec.sample_rate_hz,
            to: target_rate_hz,
        });
    }
    let r = Resampler::new(rec.sample_rate_hz, target_rate_hz);
    let n_out = r.output_len(rec.n_samples());
    if n_out == 0 {
        return Err(Error::InvalidRecording("resampled recording is empty".into()));
    }
    let mut out = Array2::zeros((rec.n_channels(), n_out));
    for (row_in, mut row_out) in rec.signal.rows().into_iter().zip(out.rows_mut()) {
        let y = r.process(&row_in.to_vec());
        row_out.assign(&ndarray::ArrayView1::from(&y));
    }
    Ok(rec.with_signal(out, target_rate_hz))
}

/// Zero-phase bandpass and notch filtering.
pub fn filter_chain(rec: &Recording, cfg: &PipelineConfig) -> Result<Recording> {
    if rec.sample_rate_hz != cfg.target_rate_hz {
        return Err(Error::InvalidConfig(format!(
            "recording at {} Hz, filter designed for {} Hz",
            rec.sample_rate_hz, cfg.target_rate_hz
        )));
    }
    let warmup = cfg.warmup_samples();
    if rec.n_samples() <= warmup {
        return Err(Error::TooShortForFilter {
            n_samples: rec.n_samples(),
            warmup,
        });
    }
    let sos = cfg.filter();
    let mut out = Array2::zeros(rec.signal.raw_dim());
    for (row_in, mut row_out) in rec.signal.rows().into_iter().zip(out.rows_mut()) {
        let y = sos.filtfilt(&row_in.to_vec(), warmup);
        row_out.assign(&ndarray::ArrayView1::from(&y));
    }
    Ok(rec.with_signal(out, rec.sample_rate_hz))
}

/// What [`normalize_clip`] did besides scaling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizeReport {
    /// Channels with zero variance, set to all zeros.
    pub zeroed_channels: Vec<usize>,
    pub clipped_samples: usize,
}

/// Per-channel z-score over the whole recording, then clip to
/// `±clip_sigma`.
pub fn normalize_clip(rec: &Recording, clip_sigma: f64) -> (Recording, NormalizeReport) {
    let mut report = NormalizeReport::default();
    let mut out = rec.signal.clone();
    for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            row.fill(0.0);
            report.zeroed_channels.push(c);
            continue;
        }
        for v in row.iter_mut() {
            let z = (*v - mean) / std;
            *v = if z > clip_sigma {
                report.clipped_samples += 1;
                clip_sigma
            } else if z < -clip_sigma {
                report.clipped_samples += 1;
                -clip_sigma
            } else {
                z
            };
        }
    }
    (rec.with_signal(out, rec.sample_rate_hz), report)
}

/// Number of full windows of `len` samples at stride `stride`.
pub fn window_count(n_samples: usize, len: usize, stride: usize) -> usize {
    if n_samples < len || len == 0 || stride == 0 {
        0
    } else {
        (n_samples - len) / stride + 1
    }
}

/// Cut non-padded windows. Each window inherits subject, label and source.
pub fn segment(rec: &Recording, segment_length_s: f64, stride_s: f64) -> Vec<Recording> {
    let len = (segment_length_s * rec.sample_rate_hz).round() as usize;
    let stride = (stride_s * rec.sample_rate_hz).round() as usize;
    (0..window_count(rec.n_samples(), len, stride))
        .map(|w| {
            let start = w * stride;
            let sig = rec.signal.slice(s![.., start..start + len]).to_owned();
            rec.with_signal(sig, rec.sample_rate_hz)
        })
        .collect()
}

/// Resample, filter, normalize and clip one recording (no segmentation).
pub fn preprocess(rec: &Recording, cfg: &PipelineConfig) -> Result<(Recording, NormalizeReport)> {
    cfg.validate()?;
    let r = resample(rec, cfg.target_rate_hz, cfg.allow_upsample)?;
    let f = filter_chain(&r, cfg)?;
    Ok(normalize_clip(&f, cfg.clip_sigma))
}

/// Full pipeline including segmentation.
pub fn preprocess_and_segment(rec: &Recording, cfg: &PipelineConfig) -> Result<Vec<Recording>> {
    let (clean, report) = preprocess(rec, cfg)?;
    if !report.zeroed_channels.is_empty() {
        log::warn!(
            "{}: {} constant channel(s) zeroed",
            rec.subject_id,
            report.zeroed_channels.len()
        );
    }
    Ok(segment(&clean, cfg.segment_length_s, cfg.stride_s()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, fs: f64, seconds: f64, amp: f64) -> Recording {
        let n = (fs * seconds).round() as usize;
        let sig = Array2::from_shape_fn((1, n), |(_, j)| amp * (2.0 * PI * freq * j as f64 / fs).sin());
        Recording::new("s", vec!["Cz".into()], fs, sig, Some(0), "t").unwrap()
    }

    fn rms(x: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = x.collect();
        (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
        let bad = PipelineConfig {
            bandpass_hi_hz: 100.0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            segment_length_s: 3.0025,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let rec = tone(7.0, 200.0, 2.0, 3.0);
        assert_eq!(resample(&rec, 200.0, false).unwrap(), rec);
    }

    #[test]
    fn resample_clinical_rate() {
        let rec = tone(10.0, 256.0, 10.0, 1.0);
        let out = resample(&rec, 200.0, false).unwrap();
        assert_eq!(out.sample_rate_hz, 200.0);
        assert_eq!(out.n_samples(), 2000);
        let peak = spectrum::peak_frequency(&out.signal.row(0).to_vec(), 200.0);
        assert!((peak - 10.0).abs() <= 0.05, "peak {peak}");
    }

    #[test]
    fn upsampling_is_gated() {
        let rec = tone(7.0, 100.0, 2.0, 1.0);
        assert!(matches!(
            resample(&rec, 200.0, false),
            Err(Error::UpsamplingDisabled { .. })
        ));
        assert_eq!(resample(&rec, 200.0, true).unwrap().n_samples(), 400);
    }

    #[test]
    fn notch_removes_line_noise() {
        let cfg = PipelineConfig::default();
        let rec = tone(50.0, 200.0, 10.0, 1.0);
        let out = filter_chain(&rec, &cfg).unwrap();
        let ratio = rms(out.signal.iter().copied()) / rms(rec.signal.iter().copied());
        assert!(ratio <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn nyquist_tone_is_removed() {
        let cfg = PipelineConfig::default();
        // 100 Hz at 200 Hz sampling, phase chosen so samples are nonzero
        let n = 2000;
        let sig = Array2::from_shape_fn((1, n), |(_, j)| if j % 2 == 0 { 1.0 } else { -1.0 });
        let rec = Recording::new("s", vec!["Cz".into()], 200.0, sig, None, "t").unwrap();
        let out = filter_chain(&rec, &cfg).unwrap();
        let ratio = rms(out.signal.iter().copied()) / 1.0;
        assert!(ratio <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn alpha_passes() {
        let cfg = PipelineConfig::default();
        let rec = tone(10.0, 200.0, 10.0, 1.0);
        let out = filter_chain(&rec, &cfg).unwrap();
        let ratio = rms(out.signal.iter().copied()) / rms(rec.signal.iter().copied());
        assert!((ratio - 1.0).abs() <= 0.12, "ratio {ratio}");
    }

    #[test]
    fn passband_ripple_within_one_db() {
        let cfg = PipelineConfig::default();
        let sos = cfg.filter();
        let mut f: f64 = 1.0;
        while f <= 90.0 {
            // notch neighbourhoods are stopband by construction
            if (f - 50.0).abs() > 5.0 {
                // forward-backward squares the magnitude
                let db = 20.0 * sos.magnitude(f, 200.0).powi(2).log10();
                assert!(db.abs() <= 1.0, "{f} Hz: {db} dB");
            }
            f += 0.5;
        }
        let notch_db = 20.0 * sos.magnitude(50.0, 200.0).powi(2).max(1e-300).log10();
        assert!(notch_db <= -20.0);
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = PipelineConfig::default();
        let rec = tone(10.0, 200.0, 5.0, 0.0);
        let out = filter_chain(&rec, &cfg).unwrap();
        assert!(out.signal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_recording_rejected_by_filter() {
        let cfg = PipelineConfig::default();
        let rec = tone(10.0, 200.0, 2.5, 1.0);
        assert!(matches!(
            filter_chain(&rec, &cfg),
            Err(Error::TooShortForFilter { .. })
        ));
    }

    #[test]
    fn zscore_then_clip() {
        let mut sig = Array2::zeros((1, 1000));
        for j in 0..1000 {
            sig[[0, j]] = ((j * 37) % 11) as f64 - 5.0;
        }
        let rec = Recording::new("s", vec!["Cz".into()], 200.0, sig, None, "t").unwrap();
        let (out, report) = normalize_clip(&rec, 15.0);
        assert!(report.zeroed_channels.is_empty());
        let row = out.signal.row(0);
        let mean = row.sum() / 1000.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        // fixed point: a standardized channel is unchanged
        let (again, _) = normalize_clip(&out, 15.0);
        for (a, b) in again.signal.iter().zip(out.signal.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn outlier_clipped_to_fifteen() {
        // z = 20 exactly for the spike: n samples, one at value v, rest at 0;
        // mean = v/n, var = v^2 (n-1)/n^2, z = sqrt(n-1). n = 401 → z = 20.
        let n = 401;
        let mut sig = Array2::zeros((1, n));
        sig[[0, 0]] = 5.0;
        let rec = Recording::new("s", vec!["Cz".into()], 200.0, sig, None, "t").unwrap();
        let (out, report) = normalize_clip(&rec, 15.0);
        assert_eq!(out.signal[[0, 0]], 15.0);
        assert_eq!(report.clipped_samples, 1);
        assert!(out.signal.iter().all(|v| v.abs() <= 15.0));
    }

    #[test]
    fn constant_channel_zeroed_and_flagged() {
        let sig = Array2::from_elem((2, 100), 3.0);
        let mut sig = sig;
        sig[[1, 3]] = 4.0;
        let rec = Recording::new("s", vec!["Cz".into(), "Pz".into()], 200.0, sig, None, "t").unwrap();
        let (out, report) = normalize_clip(&rec, 15.0);
        assert_eq!(report.zeroed_channels, vec![0]);
        assert!(out.signal.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_counts() {
        let rec = tone(10.0, 200.0, 10.0, 1.0);
        let segs = segment(&rec, 3.0, 3.0);
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.n_samples() == 600 && s.label == Some(0)));
        assert_eq!(segs[1].signal.row(0), rec.signal.slice(s![0, 600..1200]));
        let segs = segment(&rec, 4.0, 4.0);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.n_samples() == 800));
        let short = tone(10.0, 200.0, 2.0, 1.0);
        assert!(segment(&short, 3.0, 3.0).is_empty());
    }

    #[test]
    fn window_count_matches_enumeration() {
        for n in 0..300 {
            for len in 1..40 {
                for stride in 1..20 {
                    let enumerated = (0..)
                        .map(|w| w * stride)
                        .take_while(|start| start + len <= n)
                        .count();
                    assert_eq!(window_count(n, len, stride), enumerated);
                }
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let rec = tone(12.0, 256.0, 6.0, 20.0);
        let cfg = PipelineConfig::default();
        let a = preprocess_and_segment(&rec, &cfg).unwrap();
        let b = preprocess_and_segment(&rec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }
}
