//! Downstream classification heads, adaptation regimes and metrics.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{encode_all, encoder_prefix, Checkpoint, CheckpointKind, Model, Sample};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{linear_weight, normal_matrix, Bound, ParamStore};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    AttentionPool,
    AveragePool,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub classes: usize,
    pub mlp_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::AveragePool,
            classes: 2,
            mlp_hidden: 64,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("classes = {} (need >= 2)", self.classes)));
        }
        if self.kind == HeadKind::Mlp && self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Insert freshly initialized `head.*` tensors for a `dim`-wide encoder.
pub fn build_head(cfg: &HeadConfig, dim: usize, store: &mut ParamStore, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, "init.head", &[]);
    let c = cfg.classes;
    match cfg.kind {
        HeadKind::AttentionPool => {
            store.insert("head.query", normal_matrix(&mut rng, 1, dim, (dim as f64).powf(-0.5)));
            store.insert("head.wk", linear_weight(&mut rng, dim, dim));
            store.insert("head.wv", linear_weight(&mut rng, dim, dim));
            store.insert("head.out.w", linear_weight(&mut rng, dim, c));
            store.insert("head.out.b", Array2::zeros((1, c)));
        }
        HeadKind::AveragePool => {
            store.insert("head.out.w", linear_weight(&mut rng, dim, c));
            store.insert("head.out.b", Array2::zeros((1, c)));
        }
        HeadKind::Mlp => {
            store.insert("head.mlp.w1", linear_weight(&mut rng, dim, cfg.mlp_hidden));
            store.insert("head.mlp.b1", Array2::zeros((1, cfg.mlp_hidden)));
            store.insert("head.mlp.w2", linear_weight(&mut rng, cfg.mlp_hidden, c));
            store.insert("head.mlp.b2", Array2::zeros((1, c)));
        }
    }
    Ok(())
}

/// Pooled vector (`1 × D`) of token representations `reps` (`N × D`).
pub fn head_pool(tape: &mut Tape, p: &Bound<'_>, cfg: &HeadConfig, reps: Var) -> Var {
    match cfg.kind {
        HeadKind::AttentionPool => {
            let d = tape.shape(reps).1;
            let k = tape.matmul(reps, p.var("head.wk"));
            let v = tape.matmul(reps, p.var("head.wv"));
            let kt = tape.transpose(k);
            let s = tape.matmul(p.var("head.query"), kt);
            let s = tape.scale(s, 1.0 / (d as f64).sqrt());
            let w = tape.softmax_rows(s);
            tape.matmul(w, v)
        }
        HeadKind::AveragePool | HeadKind::Mlp => tape.mean_rows(reps),
    }
}

/// Class logits (`1 × C`) from token representations (`N × D`).
pub fn head_forward(tape: &mut Tape, p: &Bound<'_>, cfg: &HeadConfig, reps: Var) -> Var {
    let pooled = head_pool(tape, p, cfg, reps);
    match cfg.kind {
        HeadKind::AttentionPool | HeadKind::AveragePool => {
            let y = tape.matmul(pooled, p.var("head.out.w"));
            tape.add_row(y, p.var("head.out.b"))
        }
        HeadKind::Mlp => {
            let h = tape.matmul(pooled, p.var("head.mlp.w1"));
            let h = tape.add_row(h, p.var("head.mlp.b1"));
            let h = tape.gelu(h);
            let y = tape.matmul(h, p.var("head.mlp.w2"));
            tape.add_row(y, p.var("head.mlp.b2"))
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    /// Head only; encoder frozen.
    #[serde(rename = "LP")]
    LinearProbe,
    /// Encoder and head trained together from the start.
    #[serde(rename = "Full-Single")]
    FullSingle,
    /// Linear probe, then encoder and head together.
    #[serde(rename = "Full-Dual")]
    FullDual,
    /// Head plus the last `k` encoder layers.
    #[serde(rename = "Partial-Single")]
    PartialSingle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub regime: Regime,
    /// Trailing encoder layers unfrozen under Partial-Single.
    pub k: usize,
    pub stage1: StageSchedule,
    /// Second stage of Full-Dual; ignored by the other regimes.
    pub stage2: StageSchedule,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            regime: Regime::LinearProbe,
            k: 1,
            stage1: StageSchedule { epochs: 10, lr: 1e-2 },
            stage2: StageSchedule { epochs: 5, lr: 1e-4 },
            batch_size: 16,
            weight_decay: 0.0,
        }
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3 }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        if self.regime == Regime::PartialSingle && !(1..=encoder_layers).contains(&self.k) {
            return Err(Error::InvalidConfig(format!(
                "k = {} outside 1..={encoder_layers}",
                self.k
            )));
        }
        if self.batch_size == 0 || !(self.stage1.lr > 0.0) || !(self.stage2.lr > 0.0) {
            return Err(Error::InvalidConfig("batch size and learning rates must be positive".into()));
        }
        Ok(())
    }

    /// `(schedule, trainable set)` per stage.
    fn stages(&self) -> Vec<(StageSchedule, Trainable)> {
        match self.regime {
            Regime::LinearProbe => vec![(self.stage1, Trainable::Head)],
            Regime::FullSingle => vec![(self.stage1, Trainable::All)],
            Regime::FullDual => vec![(self.stage1, Trainable::Head), (self.stage2, Trainable::All)],
            Regime::PartialSingle => vec![(self.stage1, Trainable::LastLayers(self.k))],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trainable {
    Head,
    All,
    LastLayers(usize),
}

impl Trainable {
    fn admits(&self, name: &str, encoder_layers: usize) -> bool {
        if name.starts_with("head.") {
            return true;
        }
        match *self {
            Trainable::Head => false,
            Trainable::All => Model::is_encoder_param(name),
            Trainable::LastLayers(k) => {
                name.starts_with("enc.ln.")
                    || (encoder_layers - k..encoder_layers)
                        .any(|l| name.starts_with(&format!("{}.", encoder_prefix(l))))
            }
        }
    }
}

/// One segment with its class and the recording or subject it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: Sample,
    pub label: usize,
    pub group: String,
}

/// A backbone plus a classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub model: Model,
    pub head: HeadConfig,
}

impl Classifier {
    /// Attach a freshly initialized head to `model`.
    pub fn new(mut model: Model, head: HeadConfig, seed: u64) -> Result<Self> {
        build_head(&head, model.config.dim, &mut model.params, seed)?;
        Ok(Self { model, head })
    }

    pub fn logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, |_| false);
        let reps = encode_all(&mut tape, &p, &self.model, sample)?;
        let y = head_forward(&mut tape, &p, &self.head, reps);
        Ok(tape.value(y).row(0).to_vec())
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        Ok(argmax(&self.logits(sample)?))
    }

    pub fn predict_all(&self, samples: &[LabeledSample]) -> Result<Vec<usize>> {
        samples.par_iter().map(|s| self.predict(&s.sample)).collect()
    }

    /// Rebuild from an adapted checkpoint; the head config lives in its
    /// metadata under `"head"`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Adapted {
            return Err(Error::Checkpoint("not an adapted checkpoint".into()));
        }
        let head: HeadConfig = serde_json::from_value(ck.extra["head"].clone())
            .map_err(|e| Error::Checkpoint(format!("head metadata: {e}")))?;
        head.validate()?;
        let model = ck.model()?;
        let dim = model.config.dim;
        let mut probe = ParamStore::new();
        build_head(&head, dim, &mut probe, 0)?;
        for (name, t) in probe.iter() {
            let have = model.params.require(name)?;
            if have.dim() != t.dim() {
                return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", have.dim(), t.dim())));
            }
        }
        Ok(Self { model, head })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub classifier: Classifier,
    /// Classifier after every epoch of every stage, aligned with `trace`.
    pub snapshots: Vec<Classifier>,
    pub trace: Vec<EpochRecord>,
}

fn check_labels(set: &[LabeledSample], classes: usize, split: &'static str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Empty(format!("{split} split")));
    }
    if let Some(s) = set.iter().find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes,
        });
    }
    Ok(())
}

/// Fit `classifier` under `cfg`, evaluating on `val` after every epoch.
pub fn adapt(
    classifier: Classifier,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    let layers = classifier.model.config.encoder_layers;
    cfg.validate(layers)?;
    classifier.head.validate()?;
    check_labels(train, classifier.head.classes, "train")?;
    check_labels(val, classifier.head.classes, "validation")?;

    let mut clf = classifier;
    let mut snapshots = Vec::new();
    let mut trace = Vec::new();
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    for (stage_idx, (sched, trainable)) in cfg.stages().into_iter().enumerate() {
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
        let mut opt = AdamW::new(AdamWConfig {
            lr: sched.lr,
            weight_decay: cfg.weight_decay,
            warmup_steps: 0,
            total_steps: sched.epochs * steps_per_epoch,
            min_lr_ratio: 1.0,
            ..Default::default()
        });
        let admits = move |n: &str| trainable.admits(n, layers);
        for epoch in 0..sched.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut seed::rng(seed, "adapt.order", &[stage_idx as u64, epoch as u64]));
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let (loss, grads) = batch_grads(&clf, train, batch, &admits)?;
                loss_sum += loss * batch.len() as f64;
                opt.update(&mut clf.model.params, &grads, admits);
            }
            let preds = clf.predict_all(val)?;
            trace.push(EpochRecord {
                stage: stage_idx,
                epoch,
                train_loss: loss_sum / train.len() as f64,
                val_balanced_accuracy: balanced_accuracy(&preds, &val_labels)?,
            });
            snapshots.push(clf.clone());
        }
    }
    Ok(AdaptOutcome {
        classifier: clf,
        snapshots,
        trace,
    })
}

/// Mean cross-entropy of a batch and its gradients; per-sample graphs run
/// in parallel and are reduced in batch order.
fn batch_grads(
    clf: &Classifier,
    data: &[LabeledSample],
    batch: &[usize],
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(f64, ParamStore)> {
    let parts: Vec<Result<(f64, ParamStore)>> = batch
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::new();
            let p = clf.model.params.bind(&mut tape, trainable);
            let reps = encode_all(&mut tape, &p, &clf.model, &data[i].sample)?;
            let logits = head_forward(&mut tape, &p, &clf.head, reps);
            let loss = tape.cross_entropy(logits, &[data[i].label]);
            let g = p.gradients(&tape.backward(loss));
            Ok((tape.scalar(loss), g))
        })
        .collect();
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<ParamStore> = None;
    for part in parts {
        let (l, g) = part?;
        total += w * l;
        match &mut acc {
            None => {
                let mut g = g;
                for (_, t) in g.iter_mut() {
                    *t *= w;
                }
                acc = Some(g);
            }
            Some(a) => {
                for (name, t) in g.iter() {
                    a.get_mut(name).unwrap().scaled_add(w, t);
                }
            }
        }
    }
    Ok((total, acc.unwrap()))
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("balanced accuracy of no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        let e = per_class.entry(y).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    let sum: f64 = per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
    Ok(sum / per_class.len() as f64)
}

/// Most frequent prediction per group (ties to the lowest class), with the
/// group's label. Groups whose segments disagree on the label keep the
/// first one.
pub fn majority_vote(predictions: &[usize], labels: &[usize], groups: &[String]) -> BTreeMap<String, (usize, usize)> {
    let mut votes: BTreeMap<&str, (BTreeMap<usize, usize>, usize)> = BTreeMap::new();
    for ((&p, &y), g) in predictions.iter().zip(labels).zip(groups) {
        let e = votes.entry(g.as_str()).or_insert_with(|| (BTreeMap::new(), y));
        *e.0.entry(p).or_default() += 1;
    }
    votes
        .into_iter()
        .map(|(g, (counts, y))| {
            let best = counts
                .iter()
                .fold((usize::MAX, 0usize), |(bc, bn), (&c, &n)| if n > bn { (c, n) } else { (bc, bn) })
                .0;
            (g.to_string(), (best, y))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub segment_balanced_accuracy: f64,
    /// After majority vote per group.
    pub group_balanced_accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn evaluate(clf: &Classifier, data: &[LabeledSample]) -> Result<EvalReport> {
    let predictions = clf.predict_all(data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let groups: Vec<String> = data.iter().map(|s| s.group.clone()).collect();
    let voted = majority_vote(&predictions, &labels, &groups);
    let (gp, gl): (Vec<usize>, Vec<usize>) = voted.values().copied().unzip();
    Ok(EvalReport {
        segment_balanced_accuracy: balanced_accuracy(&predictions, &labels)?,
        group_balanced_accuracy: balanced_accuracy(&gp, &gl)?,
        predictions,
        labels,
    })
}
