//! End-to-end runs of the `prism` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prism::cli::{EvalSummary, PredictionRow};
use prism::model::Checkpoint;
use prism::protocol::SweepReport;

const TINY: &str = r#"
[data.synthetic]
n_subjects = 12
duration_s = 8.0
channels = ["C3", "Cz", "C4", "Pz"]
[model]
dim = 8
encoder_layers = 2
decoder_layers = 1
heads = 2
[pretrain]
steps = 12
batch_size = 4
[protocol]
seeds = [0, 1]
models = ["bandpower", "subject_keyed"]
"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(body: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let config = dir.path().join("experiment.toml");
        fs::write(&config, format!("output = {:?}\n{body}", out.to_str().unwrap())).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn prism(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_prism"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("PRISM_DATA")
            .env_remove("PRISM_OUTPUT")
            .env_remove("PRISM_CHECKPOINT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.prism(args);
        assert!(
            o.status.success(),
            "prism {args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn recording_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("header").is_file())
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_one_directory_per_recording_deterministically() {
    let run = Run::new(&TINY.replace("n_subjects = 12", "n_subjects = 20"));
    let msg = run.ok(&["synth"]);
    assert!(msg.contains("40 recordings"), "{msg}");
    let dirs = recording_dirs(&run.out().join("data"));
    assert_eq!(dirs.len(), 40);
    let first: Vec<Vec<u8>> = dirs.iter().map(|d| fs::read(d.join("signal.f32")).unwrap()).collect();
    run.ok(&["synth"]);
    let second: Vec<Vec<u8>> = dirs.iter().map(|d| fs::read(d.join("signal.f32")).unwrap()).collect();
    assert_eq!(first, second);
    assert!(run.out().join("data/config.resolved.toml").is_file());
}

#[test]
fn invalid_spec_fails_before_writing() {
    let run = Run::new(&TINY.replace("n_subjects = 12", "n_subjects = 0"));
    let o = run.prism(&["synth"]);
    assert_eq!(o.status.code(), Some(prism::cli::exit_code("config")));
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
    assert!(!run.out().exists());
}

#[test]
fn missing_upstream_artifacts_are_named() {
    let run = Run::new(TINY);
    let o = run.prism(&["pretrain"]);
    assert_eq!(o.status.code(), Some(prism::cli::exit_code("io")));
    assert!(stderr(&o).contains("missing artifact"), "{}", stderr(&o));
    assert!(stderr(&o).contains("data"), "{}", stderr(&o));

    run.ok(&["synth"]);
    let o = run.prism(&["adapt"]);
    assert!(stderr(&o).contains("final.ckpt"), "{}", stderr(&o));
    let o = run.prism(&["report"]);
    assert!(stderr(&o).contains("report.json"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let run = Run::new(TINY);
    let o = run.prism(&["synth", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn interrupted_pretraining_resumes_to_the_same_parameters() {
    let whole = Run::new(TINY);
    whole.ok(&["synth"]);
    whole.ok(&["pretrain"]);

    let split = Run::new(TINY);
    split.ok(&["synth"]);
    let msg = split.ok(&["pretrain", "--stop-after", "5"]);
    assert!(msg.contains("interrupted"), "{msg}");
    split.ok(&["pretrain", "--resume"]);

    let a = Checkpoint::load(&whole.out().join("pretrain/final.ckpt")).unwrap();
    let b = Checkpoint::load(&split.out().join("pretrain/final.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);

    let metrics = fs::read_to_string(split.out().join("pretrain/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    assert_eq!(metrics, fs::read_to_string(whole.out().join("pretrain/metrics.jsonl")).unwrap());
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let run = Run::new(TINY);
    run.ok(&["synth"]);
    run.ok(&["pretrain", "--stop-after", "3"]);
    let o = run.prism(&["pretrain", "--resume", "--seed", "99"]);
    assert_eq!(o.status.code(), Some(prism::cli::exit_code("checkpoint")));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn frozen_config_alone_reproduces_a_run() {
    let run = Run::new(TINY);
    run.ok(&["synth"]);
    run.ok(&["pretrain"]);
    let frozen = run.out().join("pretrain/config.resolved.toml");
    let again = run.dir.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_prism"))
        .arg("--config")
        .arg(&frozen)
        .arg("--output")
        .arg(&again)
        .arg("pretrain")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let a = Checkpoint::load(&run.out().join("pretrain/final.ckpt")).unwrap();
    let b = Checkpoint::load(&again.join("pretrain/final.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
}

/// Balanced accuracy from a prediction dump, by explicit confusion counts.
fn balanced_accuracy_by_hand(rows: &[(usize, usize)]) -> f64 {
    let mut confusion: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(label, pred) in rows {
        *confusion.entry(label).or_default().entry(pred).or_default() += 1;
    }
    let recalls: Vec<f64> = confusion
        .iter()
        .map(|(label, row)| {
            let hits = row.get(label).copied().unwrap_or(0) as f64;
            hits / row.values().sum::<usize>() as f64
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

#[test]
fn eval_on_a_separable_task_reports_perfect_balanced_accuracy() {
    // Disjoint 10 Hz and 20 Hz classes, no subject confound.
    let run = Run::new(
        r#"
seed = 3
[data.synthetic]
n_subjects = 20
duration_s = 12.0
channels = ["C3", "Cz", "C4", "Pz"]
[pretrain]
steps = 30
batch_size = 8
[adaptation]
regime = "LP"
batch_size = 8
stage1 = { epochs = 15, lr = 0.01 }
[head]
kind = "mlp"
"#,
    );
    run.ok(&["synth"]);
    run.ok(&["pretrain"]);
    run.ok(&["adapt"]);
    assert!(run.out().join("adapt/adapted.ckpt").is_file());
    assert!(run.out().join("adapt/metrics.jsonl").is_file());
    let msg = run.ok(&["eval"]);
    assert!(msg.contains("segment balanced accuracy 1.0000"), "{msg}");

    let dump = fs::read_to_string(run.out().join("eval/predictions.jsonl")).unwrap();
    let rows: Vec<PredictionRow> = dump.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!rows.is_empty());
    let pairs: Vec<(usize, usize)> = rows.iter().map(|r| (r.label, r.prediction)).collect();
    assert_eq!(balanced_accuracy_by_hand(&pairs), 1.0);
    let summary: EvalSummary =
        serde_json::from_slice(&fs::read(run.out().join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(summary.segment_balanced_accuracy, balanced_accuracy_by_hand(&pairs));
    assert_eq!(summary.subject_balanced_accuracy, 1.0);
}

#[test]
fn eval_refuses_an_adapted_checkpoint_from_another_config() {
    let run = Run::new(&format!("{TINY}\n[adaptation]\nstage1 = {{ epochs = 2, lr = 0.01 }}\n"));
    run.ok(&["synth"]);
    run.ok(&["pretrain"]);
    run.ok(&["adapt"]);
    run.ok(&["eval"]);
    let o = run.prism(&["eval", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(prism::cli::exit_code("checkpoint")));
}

#[test]
fn sweep_over_a_two_by_two_grid_reports_four_cells() {
    let run = Run::new(&format!(
        "{TINY}\n[protocol.grid]\nsplit_policy = [\"subject_level_all\", \"subject_test_segment_val\"]\nsegment_length_s = [4.0, 2.0]\n"
    ));
    run.ok(&["synth"]);
    let msg = run.ok(&["sweep"]);
    assert!(msg.starts_with("4 cells"), "{msg}");
    let report: SweepReport =
        serde_json::from_slice(&fs::read(run.out().join("sweep/report.json")).unwrap()).unwrap();
    assert_eq!(report.cells.len(), 4);
    let md = run.ok(&["report"]);
    assert!(md.contains("# Protocol sweep"));
    assert!(run.out().join("report/report.md").is_file());
    assert!(run.out().join("report/factor_deltas.svg").is_file());
}

#[test]
fn report_on_an_empty_sweep_says_no_cells() {
    let run = Run::new(TINY);
    let path = run.out().join("sweep/report.json");
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, serde_json::to_vec(&SweepReport::empty()).unwrap()).unwrap();
    let o = run.prism(&["report"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("no cells"));
}

#[test]
fn path_overrides_come_from_the_environment() {
    let run = Run::new(TINY);
    let elsewhere = run.dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_prism"))
        .arg("--config")
        .arg(&run.config)
        .arg("synth")
        .env("PRISM_DATA", &elsewhere)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(recording_dirs(&elsewhere).len(), 24);
    assert!(!run.out().join("data").exists());
}
