//! Command-line orchestration. Every subcommand resolves the experiment
//! config, validates it, writes the frozen copy into its run directory and
//! then drives the library.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::adaptation::{adapt, evaluate, Classifier, HeadConfig, LabeledSample};
use crate::config::{ExperimentConfig, Overrides, Preset};
use crate::error::{Error, Result};
use crate::model::checkpoint::{config_hash, write_atomic};
use crate::model::{pretrain, Checkpoint, CheckpointKind, Model, PretrainRun, Sample};
use crate::protocol::{self, BandpowerModel, ModelSpec, PrismSpec, SplitPolicy, SubjectKeyedModel, SweepReport};
use crate::recording::{generate_synthetic_dataset, load_dataset, save_recording, MontageMap, Recording};
use crate::signal::{preprocess, preprocess_and_segment, window_count};
use crate::tokenizer::{patchify, TokenGrid};

#[derive(Debug, Parser)]
#[command(name = "prism", version, about = "EEG masked-autoencoder pretraining and protocol audits")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Continue pretraining from the latest checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Pretrained checkpoint for adapt and sweep.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint and exit once this many pretraining steps are done.
    #[arg(long, global = true)]
    pub stop_after: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Run the signal pipeline and write cleaned recordings.
    Preprocess,
    /// Masked-reconstruction pretraining.
    Pretrain,
    /// Fit a classification head (and optionally the encoder).
    Adapt,
    /// Score the adapted classifier on held-out subjects.
    Eval,
    /// Run the factorial protocol sweep.
    Sweep,
    /// Render the sweep report.
    Report,
}

/// Process exit code of an error category. Usage errors exit with 2.
pub fn exit_code(category: &str) -> i32 {
    match category {
        "io" => 3,
        "format" => 4,
        "config" => 5,
        "input" => 6,
        "numeric" => 7,
        "checkpoint" => 8,
        _ => 1,
    }
}

pub const PRETRAIN_DIR: &str = "pretrain";
pub const PREPROCESS_DIR: &str = "preprocess";
pub const ADAPT_DIR: &str = "adapt";
pub const EVAL_DIR: &str = "eval";
pub const SWEEP_DIR: &str = "sweep";
pub const REPORT_DIR: &str = "report";
pub const ADAPTED_CKPT: &str = "adapted.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_SVG: &str = "factor_deltas.svg";

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)?
    };
}

/// Resolve the config from flags and the process environment, then run.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let ov = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        output: cli.output.clone(),
        checkpoint: cli.checkpoint.clone(),
    };
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &ov, |k| std::env::var(k).ok())?;
    cfg.validate()?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Preprocess => cmd_preprocess(&cfg, out),
        Command::Pretrain => cmd_pretrain(&cfg, cli.resume, cli.stop_after, out),
        Command::Adapt => cmd_adapt(&cfg, out),
        Command::Eval => cmd_eval(&cfg, out),
        Command::Sweep => cmd_sweep(&cfg, out),
        Command::Report => cmd_report(&cfg, out),
    }
}

/// Directory name of each recording: `<subject>_rec-<k>`, `k` counting
/// that subject's recordings in order.
fn recording_dir_names(recs: &[Recording]) -> Vec<String> {
    let mut seen = std::collections::BTreeMap::<&str, usize>::new();
    recs.iter()
        .map(|r| {
            let k = seen.entry(&r.subject_id).or_default();
            let name = format!("{}_rec-{}", r.subject_id, k);
            *k += 1;
            name
        })
        .collect()
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let spec = &cfg.data.synthetic;
    spec.validate()?;
    let recs = generate_synthetic_dataset(spec, cfg.seed)?;
    let root = cfg.data_path();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let names = recording_dir_names(&recs);
    recs.par_iter()
        .zip(names.par_iter())
        .try_for_each(|(r, n)| save_recording(r, &root.join(n)))?;
    cfg.freeze(&root)?;
    let subjects: BTreeSet<&str> = recs.iter().map(|r| r.subject_id.as_str()).collect();
    say!(
        out,
        "wrote {} recordings from {} subjects to {}",
        recs.len(),
        subjects.len(),
        root.display()
    );
    Ok(())
}

fn load_required(path: &Path) -> Result<Vec<Recording>> {
    ExperimentConfig::require_paths([path])?;
    let recs = load_dataset(path)?;
    if recs.is_empty() {
        return Err(Error::Empty(format!("no recordings under {}", path.display())));
    }
    Ok(recs)
}

#[derive(Serialize)]
struct SegmentCount<'a> {
    recording: &'a str,
    subject: &'a str,
    n_samples: usize,
    segments: usize,
}

pub fn cmd_preprocess(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let recs = load_required(&cfg.data_path())?;
    let dir = cfg.output.join(PREPROCESS_DIR);
    cfg.freeze(&dir)?;
    let names = recording_dir_names(&recs);
    let len = (cfg.pipeline.segment_length_s * cfg.pipeline.target_rate_hz).round() as usize;
    let stride = (cfg.pipeline.stride_s() * cfg.pipeline.target_rate_hz).round() as usize;
    let clean = recs
        .par_iter()
        .zip(names.par_iter())
        .map(|(r, n)| {
            let (c, _) = preprocess(r, &cfg.pipeline)?;
            save_recording(&c, &dir.join(n))?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<SegmentCount> = clean
        .iter()
        .zip(&names)
        .map(|(c, n)| SegmentCount {
            recording: n,
            subject: &c.subject_id,
            n_samples: c.n_samples(),
            segments: window_count(c.n_samples(), len, stride),
        })
        .collect();
    let path = dir.join("segments.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&counts)?)?;
    let total: usize = counts.iter().map(|c| c.segments).sum();
    say!(out, "preprocessed {} recordings into {} segments under {}", clean.len(), total, dir.display());
    Ok(())
}

/// Pipeline, segmentation and tokenization of every recording.
fn token_grids(cfg: &ExperimentConfig, recs: &[Recording]) -> Result<Vec<TokenGrid>> {
    let montage = MontageMap::standard_1020();
    let tok = cfg.tokenizer();
    let per_rec = recs
        .par_iter()
        .map(|r| {
            preprocess_and_segment(r, &cfg.pipeline)?
                .iter()
                .map(|s| patchify(s, &tok, &montage))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rec.into_iter().flatten().collect())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, resume: bool, stop_after: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let paths = cfg.pretrain_paths();
    ExperimentConfig::require_paths(paths.iter().map(PathBuf::as_path))?;
    let mut recs = Vec::new();
    for p in &paths {
        recs.extend(load_required(p)?);
    }
    let grids = token_grids(cfg, &recs)?;
    let dir = cfg.output.join(PRETRAIN_DIR);
    cfg.freeze(&dir)?;
    let model = Model::init(cfg.model, cfg.seed)?;
    let run = PretrainRun {
        out_dir: Some(dir.clone()),
        resume,
        stop_after,
    };
    let outcome = pretrain(model, &grids, &cfg.mask, &cfg.pretrain, cfg.seed, &run)?;
    say!(
        out,
        "pretrained on {} segments from {} recordings: {} / {} steps",
        grids.len(),
        recs.len(),
        outcome.steps_done,
        cfg.pretrain.steps
    );
    if let (Some((_, first)), Some((_, last))) = (outcome.curve.first(), outcome.curve.last()) {
        say!(out, "L_pri {:.6} -> {:.6}", first.l_pri, last.l_pri);
    }
    let state = if outcome.finished { "finished" } else { "interrupted" };
    say!(out, "{state}; checkpoints in {}", dir.display());
    Ok(())
}

fn pretrained_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output.join(PRETRAIN_DIR).join(crate::model::pretrain::FINAL))
}

/// Pretrained backbone whose architecture matches the config.
fn load_backbone(cfg: &ExperimentConfig) -> Result<(Model, String)> {
    let path = pretrained_checkpoint(cfg);
    let ck = Checkpoint::load(&path)?;
    if ck.kind != CheckpointKind::Pretrain {
        return Err(Error::Checkpoint(format!("{} is not a pretraining checkpoint", path.display())));
    }
    if ck.model_config != cfg.model {
        return Err(Error::ConfigMismatch {
            expected: config_hash(&cfg.model),
            found: config_hash(&ck.model_config),
        });
    }
    Ok((ck.model()?, ck.config_hash))
}

/// Labeled, tokenized segments grouped by subject, plus the subject-level
/// split every adaptation run uses.
struct LabeledData {
    samples: Vec<LabeledSample>,
    splits: protocol::Splits,
}

fn labeled_data(cfg: &ExperimentConfig) -> Result<LabeledData> {
    let recs = load_required(&cfg.data_path())?;
    if let Some(r) = recs.iter().find(|r| r.label.is_none()) {
        return Err(Error::InvalidRecording(format!("{} has no label", r.subject_id)));
    }
    let montage = MontageMap::standard_1020();
    let tok = cfg.tokenizer();
    let per_rec = recs
        .par_iter()
        .map(|r| {
            preprocess_and_segment(r, &cfg.pipeline)?
                .iter()
                .map(|s| {
                    Ok(LabeledSample {
                        sample: Sample::from_grid(&patchify(s, &tok, &montage)?),
                        label: r.label.unwrap(),
                        group: r.subject_id.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<LabeledSample> = per_rec.into_iter().flatten().collect();
    let subjects: Vec<&str> = samples.iter().map(|s| s.group.as_str()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let splits = protocol::make_splits(
        &subjects,
        &labels,
        SplitPolicy::SubjectLevelAll,
        &cfg.protocol.options.split,
        cfg.seed,
    )?;
    Ok(LabeledData { samples, splits })
}

/// Everything that fixes an adapted classifier and its test split.
#[derive(Serialize)]
struct AdaptHash<'a> {
    pretrain_hash: &'a str,
    data: &'a Path,
    pipeline: &'a crate::signal::PipelineConfig,
    head: &'a HeadConfig,
    adaptation: &'a crate::adaptation::AdaptationConfig,
    split: &'a protocol::SplitConfig,
    checkpoint_policy: protocol::CheckpointPolicy,
    seed: u64,
}

fn adapt_hash(cfg: &ExperimentConfig, pretrain_hash: &str) -> String {
    config_hash(&AdaptHash {
        pretrain_hash,
        data: &cfg.data_path(),
        pipeline: &cfg.pipeline,
        head: &cfg.head,
        adaptation: &cfg.adaptation,
        split: &cfg.protocol.options.split,
        checkpoint_policy: cfg.protocol.grid.baseline().checkpoint_policy,
        seed: cfg.seed,
    })
}

fn pick(samples: &[LabeledSample], idx: &[usize]) -> Vec<LabeledSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn cmd_adapt(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let (model, pretrain_hash) = load_backbone(cfg)?;
    let data = labeled_data(cfg)?;
    let dir = cfg.output.join(ADAPT_DIR);
    cfg.freeze(&dir)?;
    let train = pick(&data.samples, &data.splits.train);
    let val = pick(&data.samples, &data.splits.val);
    let clf = Classifier::new(model, cfg.head, cfg.seed)?;
    let outcome = adapt(clf, &train, &val, &cfg.adaptation, cfg.seed)?;
    write_jsonl(&dir.join(crate::model::pretrain::METRICS_FILE), &outcome.trace)?;
    let trace: Vec<f64> = outcome.trace.iter().map(|r| r.val_balanced_accuracy).collect();
    let policy = cfg.protocol.grid.baseline().checkpoint_policy;
    let selected = protocol::select_checkpoint(&outcome.snapshots, &trace, policy)?;
    let chosen = &outcome.snapshots[selected];
    let ck = Checkpoint {
        kind: CheckpointKind::Adapted,
        model_config: chosen.model.config,
        params: chosen.model.params.clone(),
        optimizer: None,
        step: selected + 1,
        epoch: selected + 1,
        seed: cfg.seed,
        config_hash: adapt_hash(cfg, &pretrain_hash),
        extra: serde_json::json!({
            "head": chosen.head,
            "adaptation": cfg.adaptation,
            "checkpoint_policy": policy,
            "selected": selected,
            "val_trace": trace,
        }),
    };
    ck.save(&dir.join(ADAPTED_CKPT))?;
    write_atomic(&dir.join(SPLITS_FILE), &serde_json::to_vec_pretty(&data.splits)?)?;
    say!(
        out,
        "adapted on {} train / {} validation segments; selected epoch {} of {} (validation balanced accuracy {:.4})",
        train.len(),
        val.len(),
        selected + 1,
        trace.len(),
        trace[selected]
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub subject: String,
    pub label: usize,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub segment_balanced_accuracy: f64,
    pub subject_balanced_accuracy: f64,
    pub n_segments: usize,
    pub n_subjects: usize,
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let path = cfg.output.join(ADAPT_DIR).join(ADAPTED_CKPT);
    let ck = Checkpoint::load(&path)?;
    let clf = Classifier::from_checkpoint(&ck)?;
    let (_, pretrain_hash) = load_backbone(cfg)?;
    let expected = adapt_hash(cfg, &pretrain_hash);
    if ck.config_hash != expected {
        return Err(Error::ConfigMismatch {
            expected,
            found: ck.config_hash,
        });
    }
    let data = labeled_data(cfg)?;
    let test = pick(&data.samples, &data.splits.test);
    let report = evaluate(&clf, &test)?;
    let dir = cfg.output.join(EVAL_DIR);
    cfg.freeze(&dir)?;
    let rows: Vec<PredictionRow> = data
        .splits
        .test
        .iter()
        .zip(&test)
        .zip(&report.predictions)
        .map(|((&index, s), &prediction)| PredictionRow {
            index,
            subject: s.group.clone(),
            label: s.label,
            prediction,
        })
        .collect();
    write_jsonl(&dir.join(PREDICTIONS_FILE), &rows)?;
    let subjects: BTreeSet<&str> = test.iter().map(|s| s.group.as_str()).collect();
    let summary = EvalSummary {
        segment_balanced_accuracy: report.segment_balanced_accuracy,
        subject_balanced_accuracy: report.group_balanced_accuracy,
        n_segments: test.len(),
        n_subjects: subjects.len(),
    };
    write_atomic(&dir.join(EVAL_FILE), &serde_json::to_vec_pretty(&summary)?)?;
    say!(
        out,
        "test segments {}  subjects {}\nsegment balanced accuracy {:.4}\nsubject balanced accuracy {:.4}",
        summary.n_segments,
        summary.n_subjects,
        summary.segment_balanced_accuracy,
        summary.subject_balanced_accuracy
    );
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let recs = load_required(&cfg.data_path())?;
    let mut specs: Vec<Box<dyn ModelSpec>> = Vec::new();
    for name in &cfg.protocol.models {
        specs.push(match name.as_str() {
            "bandpower" => Box::new(BandpowerModel::default()),
            "subject_keyed" => Box::new(SubjectKeyedModel::default()),
            "prism" => {
                let (model, _) = load_backbone(cfg)?;
                Box::new(PrismSpec::new("prism", model, cfg.adaptation))
            }
            other => return Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
        });
    }
    let data = protocol::prepare(&recs, &cfg.pipeline)?;
    let dir = cfg.output.join(SWEEP_DIR);
    cfg.freeze(&dir)?;
    let refs: Vec<&dyn ModelSpec> = specs.iter().map(|s| s.as_ref()).collect();
    let report = protocol::sweep(&refs, &data, &cfg.protocol.grid, &cfg.protocol.options, &cfg.protocol.seeds)?;
    write_atomic(&dir.join(REPORT_JSON), &serde_json::to_vec_pretty(&report)?)?;
    let failed: usize = report.cells.iter().map(|c| c.errors.len()).sum();
    say!(
        out,
        "{} cells x {} models x {} seeds; {} failed; {} ranking reversals; max discrepancy {:.1} pp",
        report.cells.len(),
        report.models.len(),
        report.seeds.len(),
        failed,
        report.reversal_pairs.len(),
        report.max_discrepancy_pp
    );
    Ok(())
}

pub fn cmd_report(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let src = cfg.output.join(SWEEP_DIR).join(REPORT_JSON);
    if !src.exists() {
        return Err(Error::MissingArtifact(src));
    }
    let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
    let report: SweepReport = serde_json::from_slice(&bytes)?;
    let dir = cfg.output.join(REPORT_DIR);
    cfg.freeze(&dir)?;
    let md = report.to_markdown();
    write_atomic(&dir.join(REPORT_MD), md.as_bytes())?;
    if !report.cells.is_empty() {
        write_atomic(&dir.join(REPORT_SVG), report.factor_delta_svg().as_bytes())?;
    }
    write!(out, "{md}").map_err(stdout_err)?;
    Ok(())
}
