//! Pretraining loop with per-epoch checkpoints, a JSONL metrics log and
//! exact resume.
//!
//! Every random draw is keyed by `(seed, epoch, sample)`, so the state after
//! `s` steps is fully described by the parameters, the optimizer moments and
//! `s` itself.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, write_atomic, Checkpoint, CheckpointKind};
use super::{batch_loss_and_grads, LossReport, Model, Sample};
use crate::error::{Error, Result};
use crate::masking::{plan_mask_with, MaskConfig, MaskPlan};
use crate::optim::{AdamW, AdamWConfig};
use crate::seed;
use crate::tokenizer::TokenGrid;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST: &str = "latest.ckpt";
pub const FINAL: &str = "final.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Where and how a run persists its state.
#[derive(Debug, Clone, Default)]
pub struct PretrainRun {
    /// Checkpoints and metrics go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/latest.ckpt` if it exists.
    pub resume: bool,
    /// Stop (and checkpoint) once this many total steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    /// `(step, losses)` for the steps run in this invocation.
    pub curve: Vec<(usize, LossReport)>,
    pub epoch_checkpoints: Vec<PathBuf>,
    pub steps_done: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_pri: f64,
    pub l_sec: f64,
    pub l_total: f64,
    pub n_masked: usize,
}

#[derive(Serialize)]
struct HashInput<'a> {
    model: &'a super::ModelConfig,
    mask: &'a MaskConfig,
    train: &'a PretrainConfig,
    seed: u64,
    n_samples: usize,
}

/// Keep only metrics lines for steps before `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let m: MetricsLine = serde_json::from_str(&line)?;
        if m.step < step {
            kept.extend_from_slice(line.as_bytes());
            kept.push(b'\n');
        }
    }
    write_atomic(path, &kept)
}

/// Mask plan of sample `idx` in `epoch`.
pub fn epoch_plan(grid: &TokenGrid, mask: &MaskConfig, seed: u64, epoch: usize, idx: usize) -> Result<MaskPlan> {
    let mut rng = seed::rng(seed, "mask", &[mask.rng_seed, epoch as u64, idx as u64]);
    plan_mask_with(grid, mask, &mut rng)
}

/// Train `model` on `grids` for `cfg.steps` optimizer steps.
pub fn pretrain(
    model: Model,
    grids: &[TokenGrid],
    mask: &MaskConfig,
    cfg: &PretrainConfig,
    seed: u64,
    run: &PretrainRun,
) -> Result<PretrainOutcome> {
    if grids.is_empty() {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    mask.validate()?;
    cfg.optimizer.validate()?;
    let hash = config_hash(&HashInput {
        model: &model.config,
        mask,
        train: cfg,
        seed,
        n_samples: grids.len(),
    });
    let samples: Vec<Sample> = grids.iter().map(Sample::from_grid).collect();
    let steps_per_epoch = grids.len().div_ceil(cfg.batch_size);

    let mut model = model;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut step = 0;
    let metrics_path = run.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    if let Some(dir) = &run.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let latest = dir.join(LATEST);
        if run.resume && latest.exists() {
            let ck = Checkpoint::load(&latest)?;
            if ck.config_hash != hash {
                return Err(Error::ConfigMismatch {
                    expected: hash,
                    found: ck.config_hash,
                });
            }
            model = Model::from_params(ck.model_config, ck.params)?;
            opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
            step = ck.step;
            truncate_metrics(metrics_path.as_ref().unwrap(), step)?;
        } else if let Some(p) = &metrics_path {
            write_atomic(p, b"")?;
        }
    }

    let mut log = match &metrics_path {
        Some(p) => Some(
            fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let checkpoint = |model: &Model, opt: &AdamW, step: usize, name: &str| -> Result<PathBuf> {
        let dir = run.out_dir.as_ref().unwrap();
        let path = dir.join(name);
        let ck = Checkpoint {
            kind: CheckpointKind::Pretrain,
            model_config: model.config,
            params: model.params.clone(),
            optimizer: Some(opt.clone()),
            step,
            epoch: step / steps_per_epoch,
            seed,
            config_hash: hash.clone(),
            extra: serde_json::json!({ "steps_per_epoch": steps_per_epoch }),
        };
        ck.save(&path)?;
        if name != LATEST {
            ck.save(&dir.join(LATEST))?;
        }
        Ok(path)
    };

    let mut curve = Vec::new();
    let mut epoch_checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let trainable = |_: &str| true;
    while step < cfg.steps {
        if run.stop_after.is_some_and(|s| step >= s) {
            if run.out_dir.is_some() {
                checkpoint(&model, &opt, step, LATEST)?;
            }
            return Ok(PretrainOutcome {
                model,
                optimizer: opt,
                curve,
                epoch_checkpoints,
                steps_done: step,
                finished: false,
            });
        }
        let epoch = step / steps_per_epoch;
        if epoch != order_epoch {
            order = (0..grids.len()).collect();
            order.shuffle(&mut seed::rng(seed, "data", &[epoch as u64]));
            order_epoch = epoch;
        }
        let b = step % steps_per_epoch;
        let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
        let plans = idx
            .iter()
            .map(|&i| epoch_plan(&grids[i], mask, seed, epoch, i))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<(&Sample, &MaskPlan)> = idx.iter().map(|&i| &samples[i]).zip(plans.iter()).collect();
        let (report, grads) = batch_loss_and_grads(&model, &batch, &trainable)?;
        if !report.l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = cfg.optimizer.lr_at(opt.step);
        opt.update(&mut model.params, &grads, trainable);
        if let Some(f) = &mut log {
            let line = MetricsLine {
                step,
                epoch,
                lr,
                l_pri: report.l_pri,
                l_sec: report.l_sec,
                l_total: report.l_total,
                n_masked: report.n_masked,
            };
            let mut s = serde_json::to_vec(&line)?;
            s.push(b'\n');
            let p = metrics_path.as_ref().unwrap();
            f.write_all(&s).map_err(|e| Error::io(p, e))?;
        }
        log::debug!("step {step} L_pri {:.4} L_sec {:.4}", report.l_pri, report.l_sec);
        curve.push((step, report));
        step += 1;
        if run.out_dir.is_some() && step % steps_per_epoch == 0 {
            epoch_checkpoints.push(checkpoint(&model, &opt, step, &format!("epoch-{:04}.ckpt", step / steps_per_epoch))?);
        }
    }
    if run.out_dir.is_some() {
        epoch_checkpoints.push(checkpoint(&model, &opt, step, FINAL)?);
    }
    Ok(PretrainOutcome {
        model,
        optimizer: opt,
        curve,
        epoch_checkpoints,
        steps_done: step,
        finished: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::recording::{generate_synthetic_dataset, MontageMap, SyntheticTaskSpec};
    use crate::signal::{preprocess_and_segment, PipelineConfig};
    use crate::tokenizer::patchify;

    fn grids() -> Vec<TokenGrid> {
        let spec = SyntheticTaskSpec {
            channels: ["C3", "Cz", "C4", "Pz"].iter().map(|s| s.to_string()).collect(),
            duration_s: 8.0,
            ..SyntheticTaskSpec::two_class(2)
        };
        let montage = MontageMap::standard_1020();
        let tok = ModelConfig::tiny().tokenizer();
        generate_synthetic_dataset(&spec, 5)
            .unwrap()
            .iter()
            .flat_map(|r| preprocess_and_segment(r, &PipelineConfig::default()).unwrap())
            .map(|s| patchify(&s, &tok, &montage).unwrap())
            .collect()
    }

    fn cfg() -> PretrainConfig {
        PretrainConfig {
            steps: 9,
            batch_size: 3,
            optimizer: AdamWConfig {
                warmup_steps: 2,
                total_steps: 9,
                ..Default::default()
            },
        }
    }

    fn run(grids: &[TokenGrid], run: &PretrainRun) -> Result<PretrainOutcome> {
        pretrain(Model::init(ModelConfig::tiny(), 1).unwrap(), grids, &MaskConfig::default(), &cfg(), 7, run)
    }

    fn metrics(dir: &Path) -> Vec<MetricsLine> {
        fs::read_to_string(dir.join(METRICS_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn runs_are_bit_identical() {
        let g = grids();
        let a = run(&g, &PretrainRun::default()).unwrap();
        let b = run(&g, &PretrainRun::default()).unwrap();
        assert_eq!(a.curve.len(), 9);
        let bits = |o: &PretrainOutcome| o.curve.iter().map(|(_, r)| r.l_total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn interrupted_then_resumed_matches_uninterrupted() {
        let g = grids();
        let whole_dir = tempfile::tempdir().unwrap();
        let whole = run(
            &g,
            &PretrainRun {
                out_dir: Some(whole_dir.path().into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(whole.finished);

        let dir = tempfile::tempdir().unwrap();
        let first = run(
            &g,
            &PretrainRun {
                out_dir: Some(dir.path().into()),
                stop_after: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!first.finished);
        assert_eq!(first.steps_done, 4);
        let second = run(
            &g,
            &PretrainRun {
                out_dir: Some(dir.path().into()),
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(second.finished);
        assert_eq!(second.curve.first().unwrap().0, 4);
        assert_eq!(second.model, whole.model);
        assert_eq!(second.optimizer, whole.optimizer);

        let a = metrics(whole_dir.path());
        let b = metrics(dir.path());
        assert_eq!(a.len(), 9);
        assert_eq!(b.len(), 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        }
        // 3 steps per epoch: epochs 1..=3 plus the final checkpoint
        for name in ["epoch-0001.ckpt", "epoch-0002.ckpt", "epoch-0003.ckpt", FINAL, LATEST] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        assert_eq!(Checkpoint::load(&dir.path().join(FINAL)).unwrap().step, 9);
    }

    #[test]
    fn resume_refuses_a_different_configuration() {
        let g = grids();
        let dir = tempfile::tempdir().unwrap();
        let r = PretrainRun {
            out_dir: Some(dir.path().into()),
            stop_after: Some(2),
            ..Default::default()
        };
        run(&g, &r).unwrap();
        let other = pretrain(
            Model::init(ModelConfig::tiny(), 1).unwrap(),
            &g,
            &MaskConfig::default(),
            &cfg(),
            8,
            &PretrainRun {
                resume: true,
                stop_after: None,
                ..r
            },
        );
        assert!(matches!(other, Err(Error::ConfigMismatch { .. })));
    }

    #[test]
    fn masks_differ_across_epochs() {
        let g = grids();
        let m = MaskConfig::default();
        assert_eq!(epoch_plan(&g[0], &m, 1, 0, 0).unwrap(), epoch_plan(&g[0], &m, 1, 0, 0).unwrap());
        let plans: Vec<_> = (0..6).map(|e| epoch_plan(&g[0], &m, 1, e, 0).unwrap().masked).collect();
        assert!(plans.iter().any(|p| *p != plans[0]));
    }

    #[test]
    fn rejects_empty_data() {
        assert!(matches!(run(&[], &PretrainRun::default()), Err(Error::Empty(_))));
    }
}
