//! Synthetic EEG with class-specific oscillations and a per-subject spectral
//! confound.
//!
//! Each subject belongs to one class (`subject % classes`). Every channel of a
//! recording carries the class oscillations, an additive subject fingerprint,
//! and white noise. Class oscillations share one random phase per recording
//! across channels and reach each channel with a random gain, as a single
//! volume-conducted source would. The fingerprint is a tilted spectrum
//! over [`CONFOUND_FREQS_HZ`] whose amplitude profile is drawn once per
//! subject and reused for every recording of that subject, so it identifies
//! the subject without carrying class information.

use std::f64::consts::PI;

use ndarray::Array2;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::montage::STANDARD_1020;
use super::Recording;
use crate::error::{Error, Result};
use crate::seed;

/// Frequencies carrying the per-subject fingerprint.
pub const CONFOUND_FREQS_HZ: [f64; 8] = [4.0, 6.5, 8.0, 13.0, 16.0, 24.0, 29.0, 36.0];
const TILT_REFERENCE_HZ: f64 = 12.0;

/// One oscillatory component of a class signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBand {
    pub center_hz: f64,
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_subjects: usize,
    pub classes: usize,
    /// `class_bands[k]` is the oscillation mixture of class `k`.
    pub class_bands: Vec<Vec<ClassBand>>,
    pub subject_confound_strength: f64,
    pub noise_sigma: f64,
    #[serde(default = "default_recordings_per_subject")]
    pub recordings_per_subject: usize,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_channels")]
    pub channels: Vec<String>,
}

fn default_recordings_per_subject() -> usize {
    2
}
fn default_duration() -> f64 {
    10.0
}
fn default_rate() -> f64 {
    200.0
}
fn default_channels() -> Vec<String> {
    STANDARD_1020.iter().map(|s| s.to_string()).collect()
}

impl SyntheticTaskSpec {
    /// Two classes: 10 Hz versus 20 Hz rhythms.
    pub fn two_class(n_subjects: usize) -> Self {
        Self {
            n_subjects,
            classes: 2,
            class_bands: vec![
                vec![ClassBand {
                    center_hz: 10.0,
                    amplitude_uv: 10.0,
                }],
                vec![ClassBand {
                    center_hz: 20.0,
                    amplitude_uv: 10.0,
                }],
            ],
            subject_confound_strength: 0.0,
            noise_sigma: 2.0,
            recordings_per_subject: default_recordings_per_subject(),
            duration_s: default_duration(),
            sample_rate_hz: default_rate(),
            channels: default_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("classes = {} (need >= 2)", self.classes));
        }
        if self.n_subjects < self.classes {
            return bad(format!(
                "n_subjects = {} is fewer than classes = {}",
                self.n_subjects, self.classes
            ));
        }
        if self.class_bands.len() != self.classes {
            return bad(format!(
                "{} class band mixtures for {} classes",
                self.class_bands.len(),
                self.classes
            ));
        }
        if !(self.subject_confound_strength >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("confound strength and noise sigma must be nonnegative".into());
        }
        if self.recordings_per_subject < 2 {
            return bad("each subject needs at least 2 recordings".into());
        }
        if !(self.sample_rate_hz > 0.0) || !(self.duration_s > 0.0) {
            return bad("sample rate and duration must be positive".into());
        }
        if (self.duration_s * self.sample_rate_hz).round() < 1.0 {
            return bad("recordings would be empty".into());
        }
        if self.channels.is_empty() {
            return bad("no channels".into());
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }
}

struct SubjectFingerprint {
    amplitudes: Vec<f64>,
}

fn fingerprint(spec: &SyntheticTaskSpec, seed: u64, subject: usize) -> SubjectFingerprint {
    let mut rng = seed::rng(seed, "synthetic.subject", &[subject as u64]);
    let tilt: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
    let weight = Uniform::new(0.25, 1.75);
    let amplitudes = CONFOUND_FREQS_HZ
        .iter()
        .map(|&f| {
            spec.subject_confound_strength
                * weight.sample(&mut rng)
                * (f / TILT_REFERENCE_HZ).powf(tilt)
        })
        .collect();
    SubjectFingerprint { amplitudes }
}

/// Generate `n_subjects × recordings_per_subject` recordings, deterministic in
/// `(spec, seed)`. Each (subject, recording) pair draws from its own substream.
pub fn generate_synthetic_dataset(spec: &SyntheticTaskSpec, seed: u64) -> Result<Vec<Recording>> {
    spec.validate()?;
    let n = spec.n_samples();
    let fs = spec.sample_rate_hz;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).unwrap();
    let phase = Uniform::new(0.0, 2.0 * PI);

    let mut out = Vec::with_capacity(spec.n_subjects * spec.recordings_per_subject);
    for subject in 0..spec.n_subjects {
        let class = subject % spec.classes;
        let fp = fingerprint(spec, seed, subject);
        for r in 0..spec.recordings_per_subject {
            let mut rng = seed::rng(seed, "synthetic.recording", &[subject as u64, r as u64]);
            let mut signal = Array2::<f64>::zeros((spec.channels.len(), n));
            let class_phases: Vec<f64> = spec.class_bands[class]
                .iter()
                .map(|_| phase.sample(&mut rng))
                .collect();
            let gain = Uniform::new(0.5, 1.5);
            for mut row in signal.rows_mut() {
                let g = gain.sample(&mut rng);
                let confound_phases: Vec<f64> =
                    CONFOUND_FREQS_HZ.iter().map(|_| phase.sample(&mut rng)).collect();
                for (j, v) in row.iter_mut().enumerate() {
                    let t = j as f64 / fs;
                    let mut x = 0.0;
                    for (band, ph) in spec.class_bands[class].iter().zip(&class_phases) {
                        x += g * band.amplitude_uv * (2.0 * PI * band.center_hz * t + ph).sin();
                    }
                    for ((&f, &a), ph) in CONFOUND_FREQS_HZ
                        .iter()
                        .zip(&fp.amplitudes)
                        .zip(&confound_phases)
                    {
                        if a != 0.0 {
                            x += a * (2.0 * PI * f * t + ph).sin();
                        }
                    }
                    if spec.noise_sigma > 0.0 {
                        x += noise.sample(&mut rng);
                    }
                    // f32-representable so the on-disk round trip is exact
                    *v = f64::from(x as f32);
                }
            }
            out.push(Recording {
                subject_id: format!("sub-{subject:03}"),
                channel_names: spec.channels.clone(),
                sample_rate_hz: fs,
                signal,
                label: Some(class),
                source_tag: "synthetic".into(),
            });
        }
    }
    Ok(out)
}
