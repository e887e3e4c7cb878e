//! Models the harness can evaluate: anything that can be fitted into a
//! sequence of checkpoints, each able to classify a segment.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Segment, SPECTRUM_MAX_HZ};
use crate::adaptation::{adapt, argmax, AdaptationConfig, Classifier, HeadConfig, HeadKind, LabeledSample, Regime};
use crate::error::{Error, Result};
use crate::model::{Model, Sample};
use crate::recording::MontageMap;
use crate::tokenizer::patchify;

/// A fitted checkpoint.
pub trait Predictor: Send + Sync {
    fn predict(&self, seg: &Segment) -> Result<usize>;
}

/// One adaptation choice: head and regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub head: HeadConfig,
    pub regime: Regime,
}

pub trait ModelSpec: Send + Sync {
    fn name(&self) -> String;

    /// The setting used under standardized reporting.
    fn standard(&self, head: &HeadConfig) -> Setting {
        Setting {
            head: *head,
            regime: Regime::LinearProbe,
        }
    }

    /// Settings searched under self-selected reporting.
    fn grid(&self, head: &HeadConfig) -> Vec<Setting> {
        vec![self.standard(head)]
    }

    /// Fit on `train`; returns checkpoints in training order. `val` may be
    /// used for monitoring but never for fitting.
    fn fit(&self, train: &[&Segment], val: &[&Segment], setting: &Setting, seed: u64) -> Result<Vec<Box<dyn Predictor>>>;
}

/// Log power per bin relative to the median bin. The median tracks the
/// broadband floor, so a per-recording gain cancels.
pub fn relative_log_spectrum(seg: &Segment) -> Vec<f64> {
    let logs: Vec<f64> = seg.spectrum.iter().map(|p| (p + 1e-12).ln()).collect();
    let mut sorted = logs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    logs.iter().map(|v| v - median).collect()
}

fn classes_of(train: &[&Segment]) -> Result<usize> {
    train
        .iter()
        .map(|s| s.label)
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| Error::Empty("training split".into()))
}

/// Index of the nearest centroid; ties to the lowest class.
fn nearest(centroids: &[Option<Vec<f64>>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        if let Some(c) = c {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
    }
    best.0
}

fn centroids(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Option<Vec<f64>>> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (r, &y) in rows.iter().zip(labels) {
        counts[y] += 1;
        sums[y].iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Nearest-centroid classifier on relative log power in fixed bands
/// (default: the 9–11 Hz alpha peak). It never sees subject identity and has
/// a single checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandpowerModel {
    /// Inclusive 1 Hz bin ranges.
    pub bands_hz: Vec<(usize, usize)>,
}

impl Default for BandpowerModel {
    fn default() -> Self {
        Self { bands_hz: vec![(9, 11)] }
    }
}

impl BandpowerModel {
    fn features(&self, seg: &Segment) -> Vec<f64> {
        let rel = relative_log_spectrum(seg);
        self.bands_hz
            .iter()
            .map(|&(lo, hi)| rel[lo - 1..hi].iter().sum::<f64>() / (hi - lo + 1) as f64)
            .collect()
    }
}

struct CentroidPredictor {
    model: BandpowerModel,
    centroids: Vec<Option<Vec<f64>>>,
}

impl Predictor for CentroidPredictor {
    fn predict(&self, seg: &Segment) -> Result<usize> {
        Ok(nearest(&self.centroids, &self.model.features(seg)))
    }
}

impl ModelSpec for BandpowerModel {
    fn name(&self) -> String {
        "bandpower".into()
    }

    fn fit(&self, train: &[&Segment], _: &[&Segment], _: &Setting, _: u64) -> Result<Vec<Box<dyn Predictor>>> {
        let classes = classes_of(train)?;
        if self.bands_hz.iter().any(|&(lo, hi)| lo == 0 || lo > hi || hi > SPECTRUM_MAX_HZ) {
            return Err(Error::InvalidConfig(format!("bands {:?} outside 1..={SPECTRUM_MAX_HZ} Hz", self.bands_hz)));
        }
        let rows: Vec<Vec<f64>> = train.iter().map(|s| self.features(s)).collect();
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        Ok(vec![Box::new(CentroidPredictor {
            model: self.clone(),
            centroids: centroids(&rows, &labels, classes),
        })])
    }
}

/// Scripted model whose training trajectory first learns class spectra and
/// then memorizes subjects.
///
/// It combines two votes: a nearest-centroid vote on the most
/// class-discriminative spectral bins, and a nearest-neighbour vote that
/// copies the label of the training segment with the closest subject
/// fingerprint (the most subject-discriminative remaining bins). Checkpoint
/// `e` scores class `k` as `a_e [class vote = k] + b_e [fingerprint vote =
/// k]` with `(a_e, b_e) = schedule[e]`. The fingerprint vote is near perfect
/// for subjects seen in training and uninformative otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectKeyedModel {
    pub class_bins: usize,
    pub fingerprint_bins: usize,
    pub schedule: Vec<(f64, f64)>,
}

impl Default for SubjectKeyedModel {
    fn default() -> Self {
        Self {
            class_bins: 2,
            fingerprint_bins: 8,
            schedule: vec![(0.0, 0.0), (1.0, 0.0), (1.0, 0.5), (0.5, 1.0), (0.0, 1.0)],
        }
    }
}

/// Between-group over within-group sum of squares per column; zero when
/// a column has no within-group spread.
pub fn fisher_scores(rows: &[Vec<f64>], groups: &[usize]) -> Vec<f64> {
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (j, o) in out.iter_mut().enumerate() {
        let mut sum = vec![0.0; n_groups];
        let mut cnt = vec![0usize; n_groups];
        for (r, &g) in rows.iter().zip(groups) {
            sum[g] += r[j];
            cnt[g] += 1;
        }
        let grand = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
        let means: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        let between: f64 = means.iter().zip(&cnt).map(|(m, &c)| c as f64 * (m - grand).powi(2)).sum();
        let within: f64 = rows.iter().zip(groups).map(|(r, &g)| (r[j] - means[g]).powi(2)).sum();
        *o = if within > 0.0 { between / within } else { 0.0 };
    }
    out
}

/// Greedy pick of up to `k` highest-scoring indices among `allowed`, each
/// at least two bins from every earlier pick; ties to the lower index.
fn top_k(scores: &[f64], allowed: impl Fn(usize) -> bool, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| allowed(j)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for j in idx {
        if out.len() == k {
            break;
        }
        if out.iter().all(|&p| p.abs_diff(j) >= 2) {
            out.push(j);
        }
    }
    out
}

struct KeyedFit {
    mean: Vec<f64>,
    sd: Vec<f64>,
    class_bins: Vec<usize>,
    fp_bins: Vec<usize>,
    centroids: Vec<Option<Vec<f64>>>,
    fp_rows: Vec<Vec<f64>>,
    fp_labels: Vec<usize>,
    classes: usize,
}

impl KeyedFit {
    fn standardized(&self, seg: &Segment) -> Vec<f64> {
        relative_log_spectrum(seg)
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn votes(&self, seg: &Segment) -> (usize, usize) {
        let z = self.standardized(seg);
        let cls: Vec<f64> = self.class_bins.iter().map(|&j| z[j]).collect();
        let fp: Vec<f64> = self.fp_bins.iter().map(|&j| z[j]).collect();
        let mut best = (0, f64::INFINITY);
        for (r, &y) in self.fp_rows.iter().zip(&self.fp_labels) {
            let d: f64 = r.iter().zip(&fp).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (y, d);
            }
        }
        (nearest(&self.centroids, &cls), best.0)
    }
}

struct KeyedPredictor {
    fit: Arc<KeyedFit>,
    weights: (f64, f64),
}

impl Predictor for KeyedPredictor {
    fn predict(&self, seg: &Segment) -> Result<usize> {
        let (c, f) = self.fit.votes(seg);
        let mut logits = vec![0.0; self.fit.classes];
        logits[c] += self.weights.0;
        logits[f] += self.weights.1;
        Ok(argmax(&logits))
    }
}

impl ModelSpec for SubjectKeyedModel {
    fn name(&self) -> String {
        "subject_keyed".into()
    }

    fn fit(&self, train: &[&Segment], _: &[&Segment], _: &Setting, _: u64) -> Result<Vec<Box<dyn Predictor>>> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidConfig("empty checkpoint schedule".into()));
        }
        let classes = classes_of(train)?;
        let raw: Vec<Vec<f64>> = train.iter().map(|s| relative_log_spectrum(s)).collect();
        let n = raw.len() as f64;
        let mean: Vec<f64> = (0..SPECTRUM_MAX_HZ).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..SPECTRUM_MAX_HZ)
            .map(|j| {
                let v = raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-9)
            })
            .collect();
        let z: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| r.iter().zip(mean.iter().zip(&sd)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect();
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let mut subject_ids: BTreeMap<&str, usize> = BTreeMap::new();
        for s in train {
            let next = subject_ids.len();
            subject_ids.entry(s.subject.as_str()).or_insert(next);
        }
        let subjects: Vec<usize> = train.iter().map(|s| subject_ids[s.subject.as_str()]).collect();

        let class_bins = top_k(&fisher_scores(&z, &labels), |_| true, self.class_bins);
        // keep a one-bin guard band around the class bins
        let near_class = |j: usize| class_bins.iter().any(|&c| c.abs_diff(j) <= 1);
        let fp_bins = top_k(&fisher_scores(&z, &subjects), |j| !near_class(j), self.fingerprint_bins);
        let cls_rows: Vec<Vec<f64>> = z.iter().map(|r| class_bins.iter().map(|&j| r[j]).collect()).collect();
        let fp_rows = z.iter().map(|r| fp_bins.iter().map(|&j| r[j]).collect()).collect();
        let fit = Arc::new(KeyedFit {
            centroids: centroids(&cls_rows, &labels, classes),
            mean,
            sd,
            class_bins,
            fp_bins,
            fp_rows,
            fp_labels: labels,
            classes,
        });
        Ok(self
            .schedule
            .iter()
            .map(|&weights| {
                Box::new(KeyedPredictor {
                    fit: Arc::clone(&fit),
                    weights,
                }) as Box<dyn Predictor>
            })
            .collect())
    }
}

/// A pretrained backbone adapted per cell through the adaptation module.
#[derive(Debug, Clone)]
pub struct PrismSpec {
    pub name: String,
    pub model: Model,
    /// Schedules; the regime is taken from the setting.
    pub adaptation: AdaptationConfig,
    pub montage: MontageMap,
    /// Searched under self-selected reporting.
    pub heads: Vec<HeadKind>,
    pub regimes: Vec<Regime>,
}

impl PrismSpec {
    pub fn new(name: impl Into<String>, model: Model, adaptation: AdaptationConfig) -> Self {
        Self {
            name: name.into(),
            model,
            adaptation,
            montage: MontageMap::standard_1020(),
            heads: vec![HeadKind::AttentionPool, HeadKind::AveragePool, HeadKind::Mlp],
            regimes: vec![Regime::LinearProbe, Regime::FullDual],
        }
    }

    fn sample(&self, seg: &Segment) -> Result<Sample> {
        let grid = patchify(&seg.data, &self.model.config.tokenizer(), &self.montage)?;
        Ok(Sample::from_grid(&grid))
    }

    fn labeled(&self, segs: &[&Segment]) -> Result<Vec<LabeledSample>> {
        segs.par_iter()
            .map(|s| {
                Ok(LabeledSample {
                    sample: self.sample(s)?,
                    label: s.label,
                    group: s.subject.clone(),
                })
            })
            .collect()
    }
}

struct PrismPredictor {
    spec: Arc<PrismSpec>,
    classifier: Classifier,
}

impl Predictor for PrismPredictor {
    fn predict(&self, seg: &Segment) -> Result<usize> {
        self.classifier.predict(&self.spec.sample(seg)?)
    }
}

impl ModelSpec for PrismSpec {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn standard(&self, head: &HeadConfig) -> Setting {
        Setting {
            head: *head,
            regime: self.adaptation.regime,
        }
    }

    fn grid(&self, head: &HeadConfig) -> Vec<Setting> {
        let mut out = Vec::new();
        for &kind in &self.heads {
            for &regime in &self.regimes {
                out.push(Setting {
                    head: HeadConfig { kind, ..*head },
                    regime,
                });
            }
        }
        out
    }

    fn fit(&self, train: &[&Segment], val: &[&Segment], setting: &Setting, seed: u64) -> Result<Vec<Box<dyn Predictor>>> {
        let clf = Classifier::new(self.model.clone(), setting.head, seed)?;
        let cfg = AdaptationConfig {
            regime: setting.regime,
            ..self.adaptation
        };
        let out = adapt(clf, &self.labeled(train)?, &self.labeled(val)?, &cfg, seed)?;
        let spec = Arc::new(self.clone());
        Ok(out
            .snapshots
            .into_iter()
            .map(|classifier| {
                Box::new(PrismPredictor {
                    spec: Arc::clone(&spec),
                    classifier,
                }) as Box<dyn Predictor>
            })
            .collect())
    }
}
