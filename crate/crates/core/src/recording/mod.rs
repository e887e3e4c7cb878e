//! Recording data model, on-disk format and synthetic data.
//!
//! A recording directory holds two files:
//!
//! * `header` — TOML with `format_version`, `subject_id`, `sample_rate_hz`,
//!   `channels` (ordered), optional `label`, `source_tag` and `n_samples`.
//! * `signal.f32` — row-major little-endian `f32`, channels × samples, in µV.
//!
//! Signals are held as `f64` in memory and rounded to `f32` on save; a loaded
//! recording saves back to identical bytes.

pub mod channels;
pub mod montage;
pub mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use channels::{canonicalize_channel_name, AliasTable};
pub use montage::{MontageMap, HEAD_RADIUS_CM, STANDARD_1020};
pub use synthetic::{generate_synthetic_dataset, ClassBand, SyntheticTaskSpec};

use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header";
pub const SIGNAL_FILE: &str = "signal.f32";
const FORMAT_VERSION: u32 = 1;

/// A multichannel EEG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    /// `[n_channels × n_samples]`, microvolts (unitless after normalization).
    pub signal: Array2<f64>,
    pub label: Option<usize>,
    pub source_tag: String,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
        sample_rate_hz: f64,
        signal: Array2<f64>,
        label: Option<usize>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            channel_names,
            sample_rate_hz,
            signal,
            label,
            source_tag: source_tag.into(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal.nrows() != self.channel_names.len() {
            return Err(Error::InvalidRecording(format!(
                "{} signal rows for {} channel names",
                self.signal.nrows(),
                self.channel_names.len()
            )));
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::InvalidRecording(format!(
                "sample rate {} is not positive",
                self.sample_rate_hz
            )));
        }
        if self.signal.ncols() == 0 {
            return Err(Error::InvalidRecording("no samples".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.channel_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidRecording(format!("duplicate channel {name}")));
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.signal.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.signal.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    /// Same metadata, new signal (and possibly a new rate).
    pub fn with_signal(&self, signal: Array2<f64>, sample_rate_hz: f64) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            channel_names: self.channel_names.clone(),
            sample_rate_hz,
            signal,
            label: self.label,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Keep only the named channels, in the given order.
    pub fn select_channels(&self, names: &[&str]) -> Result<Self> {
        let mut rows = Vec::with_capacity(names.len());
        for name in names {
            let idx = self
                .channel_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::UnknownChannel((*name).to_string()))?;
            rows.push(idx);
        }
        let signal = self.signal.select(ndarray::Axis(0), &rows);
        let mut out = self.with_signal(signal, self.sample_rate_hz);
        out.channel_names = names.iter().map(|s| s.to_string()).collect();
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    subject_id: String,
    sample_rate_hz: f64,
    channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    source_tag: String,
    n_samples: usize,
}

/// Result of [`load_recording`]: the recording plus how many header channels
/// were dropped as unmappable or duplicate.
#[derive(Debug, Clone)]
pub struct LoadedRecording {
    pub recording: Recording,
    pub dropped_channels: Vec<String>,
}

/// Write `rec` into directory `dir` (created if absent).
pub fn save_recording(rec: &Recording, dir: &Path) -> Result<()> {
    rec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = Header {
        format_version: FORMAT_VERSION,
        subject_id: rec.subject_id.clone(),
        sample_rate_hz: rec.sample_rate_hz,
        channels: rec.channel_names.clone(),
        label: rec.label,
        source_tag: rec.source_tag.clone(),
        n_samples: rec.n_samples(),
    };
    let text = toml::to_string(&header)
        .map_err(|e| Error::InvalidRecording(format!("header serialization: {e}")))?;
    let header_path = dir.join(HEADER_FILE);
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;

    let mut bytes = Vec::with_capacity(rec.signal.len() * 4);
    for &v in rec.signal.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let signal_path = dir.join(SIGNAL_FILE);
    fs::write(&signal_path, bytes).map_err(|e| Error::io(&signal_path, e))?;
    Ok(())
}

/// Read a recording directory, canonicalizing channel names and dropping
/// channels that do not map onto the 10-20 set.
pub fn load_recording(dir: &Path) -> Result<LoadedRecording> {
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: Header = toml::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::MalformedHeader {
            path: header_path,
            reason: format!("unsupported format_version {}", header.format_version),
        });
    }
    if header.n_samples == 0 || !(header.sample_rate_hz > 0.0) {
        return Err(Error::MalformedHeader {
            path: header_path,
            reason: "n_samples and sample_rate_hz must be positive".into(),
        });
    }

    let signal_path = dir.join(SIGNAL_FILE);
    let bytes = fs::read(&signal_path).map_err(|e| Error::io(&signal_path, e))?;
    let n_declared = header.channels.len();
    let expected = n_declared * header.n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::SignalSize {
            expected,
            actual: bytes.len(),
        });
    }

    let mut keep = Vec::new();
    let mut names = Vec::new();
    let mut dropped = Vec::new();
    for (i, raw) in header.channels.iter().enumerate() {
        match canonicalize_channel_name(raw) {
            Some(label) if !names.iter().any(|n: &String| n == label) => {
                keep.push(i);
                names.push(label.to_string());
            }
            _ => dropped.push(raw.clone()),
        }
    }
    if keep.is_empty() {
        return Err(Error::NoChannels);
    }

    let n = header.n_samples;
    let mut signal = Array2::<f64>::zeros((keep.len(), n));
    for (row, &src) in keep.iter().enumerate() {
        let base = src * n * 4;
        for j in 0..n {
            let off = base + j * 4;
            let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
            signal[[row, j]] = f64::from(v);
        }
    }
    if !dropped.is_empty() {
        log::warn!("{}: dropped {} unmappable channel(s)", dir.display(), dropped.len());
    }
    let recording = Recording::new(
        header.subject_id,
        names,
        header.sample_rate_hz,
        signal,
        header.label,
        header.source_tag,
    )?;
    Ok(LoadedRecording {
        recording,
        dropped_channels: dropped,
    })
}

/// Load every recording directory (a directory containing a `header` file)
/// directly under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Recording>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(HEADER_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| load_recording(d).map(|l| l.recording))
        .collect()
}
