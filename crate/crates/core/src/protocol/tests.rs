use super::*;
use crate::adaptation::HeadKind;
use crate::recording::{generate_synthetic_dataset, SyntheticTaskSpec};
use proptest::prelude::*;

fn dataset(n_subjects: usize, duration_s: f64) -> PreparedDataset {
    let spec = SyntheticTaskSpec {
        channels: ["C3", "Cz", "C4", "Pz"].iter().map(|s| s.to_string()).collect(),
        duration_s,
        subject_confound_strength: 8.0,
        ..SyntheticTaskSpec::two_class(n_subjects)
    };
    prepare(&generate_synthetic_dataset(&spec, 3).unwrap(), &PipelineConfig::default()).unwrap()
}

fn grid_items(n_subjects: usize, per_subject: usize) -> (Vec<String>, Vec<usize>) {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for subj in 0..n_subjects {
        for _ in 0..per_subject {
            s.push(format!("s{subj:03}"));
            y.push(subj % 2);
        }
    }
    (s, y)
}

fn subjects_of<'a>(s: &'a [String], idx: &[usize]) -> BTreeSet<&'a str> {
    idx.iter().map(|&i| s[i].as_str()).collect()
}

proptest! {
    #[test]
    fn subject_level_splits_are_disjoint_and_exhaustive(
        n_subjects in 6usize..30, per in 1usize..6, seed in 0u64..1000
    ) {
        let (s, y) = grid_items(n_subjects, per);
        let sp = make_splits(&s, &y, SplitPolicy::SubjectLevelAll, &SplitConfig::default(), seed).unwrap();
        let (a, b, c) = (subjects_of(&s, &sp.train), subjects_of(&s, &sp.val), subjects_of(&s, &sp.test));
        prop_assert_eq!(a.intersection(&b).count(), 0);
        prop_assert_eq!(a.intersection(&c).count(), 0);
        prop_assert_eq!(b.intersection(&c).count(), 0);
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
    }

    #[test]
    fn test_subjects_do_not_depend_on_policy(n_subjects in 6usize..30, seed in 0u64..1000) {
        let (s, y) = grid_items(n_subjects, 3);
        let cfg = SplitConfig::default();
        let a = make_splits(&s, &y, SplitPolicy::SubjectLevelAll, &cfg, seed).unwrap();
        // a random segment split may miss a class; that draw is rejected
        let b = make_splits(&s, &y, SplitPolicy::SubjectTestSegmentVal, &cfg, seed);
        prop_assume!(!matches!(b, Err(Error::MissingClass { .. })));
        prop_assert_eq!(a.test, b.unwrap().test);
    }
}

#[test]
fn clinical_split_shape() {
    let (s, y) = grid_items(200, 2);
    let cfg = SplitConfig {
        val_subject_fraction: 0.05,
        test_subject_fraction: 0.10,
        segment_val_fraction: 0.2,
    };
    let sp = make_splits(&s, &y, SplitPolicy::SubjectLevelAll, &cfg, 9).unwrap();
    for class in 0..2 {
        let count = |idx: &[usize]| idx.iter().filter(|&&i| y[i] == class).map(|&i| s[i].as_str()).collect::<BTreeSet<_>>().len();
        assert_eq!((count(&sp.train), count(&sp.val), count(&sp.test)), (85, 5, 10));
    }
}

#[test]
fn segment_level_validation_shares_subjects_with_train() {
    let (s, y) = grid_items(10, 10);
    for seed in 0..20 {
        let sp = make_splits(&s, &y, SplitPolicy::SubjectTestSegmentVal, &SplitConfig::default(), seed).unwrap();
        let shared = subjects_of(&s, &sp.train).intersection(&subjects_of(&s, &sp.val)).count();
        assert!(shared >= 1, "seed {seed}");
        let non_test = sp.train.len() + sp.val.len();
        assert_eq!(sp.val.len(), (0.2 * non_test as f64).round() as usize);
        assert!(subjects_of(&s, &sp.test).is_disjoint(&subjects_of(&s, &sp.train)));
    }
}

#[test]
fn split_errors() {
    let (s, y) = grid_items(4, 2);
    assert!(matches!(
        make_splits(&s, &y, SplitPolicy::SubjectLevelAll, &SplitConfig::default(), 0),
        Err(Error::InvalidConfig(_))
    ));
    let (s, y) = grid_items(10, 2);
    let cfg = SplitConfig {
        segment_val_fraction: 0.0,
        ..Default::default()
    };
    assert!(matches!(
        make_splits(&s, &y, SplitPolicy::SubjectTestSegmentVal, &cfg, 0),
        Err(Error::MissingClass { split: "validation", .. })
    ));
    assert!(make_splits::<String>(&[], &[], SplitPolicy::SubjectLevelAll, &cfg, 0).is_err());
}

#[test]
fn splits_are_seeded() {
    let (s, y) = grid_items(20, 3);
    let cfg = SplitConfig::default();
    let a = make_splits(&s, &y, SplitPolicy::SubjectTestSegmentVal, &cfg, 1).unwrap();
    assert_eq!(a, make_splits(&s, &y, SplitPolicy::SubjectTestSegmentVal, &cfg, 1).unwrap());
    assert_ne!(a, make_splits(&s, &y, SplitPolicy::SubjectTestSegmentVal, &cfg, 2).unwrap());
}

#[test]
fn checkpoint_selection() {
    let ck = [10, 20, 30];
    let trace = [0.5, 0.7, 0.6];
    assert_eq!(select_checkpoint(&ck, &trace, CheckpointPolicy::BestValidation).unwrap(), 1);
    assert_eq!(select_checkpoint(&ck, &trace, CheckpointPolicy::Last).unwrap(), 2);
    assert_eq!(select_checkpoint(&ck[..2], &[0.6, 0.6], CheckpointPolicy::BestValidation).unwrap(), 0);
    assert!(matches!(
        select_checkpoint(&ck, &[0.1], CheckpointPolicy::Last),
        Err(Error::MisalignedTrace { trace: 1, checkpoints: 3 })
    ));
    assert!(select_checkpoint::<u8>(&[], &[], CheckpointPolicy::Last).is_err());
}

#[test]
fn fisher_scores_by_hand() {
    // column 0 separates the groups perfectly up to spread 1; column 1 is pure noise
    let rows = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![10.0, 1.0], vec![12.0, -1.0]];
    let f = models::fisher_scores(&rows, &[0, 0, 1, 1]);
    // between = 4 * 25 = 100, within = 4 * 1 = 4
    assert!((f[0] - 25.0).abs() < 1e-12);
    assert_eq!(f[1], 0.0);
}

#[test]
fn id_distinguishes_levels() {
    let a = ProtocolConfig::default();
    let b = ProtocolConfig {
        segment_length_s: 3.0,
        ..a
    };
    assert_ne!(a.id(), b.id());
    assert!(a.id().contains("segment_length_s=4s"));
    assert!(ProtocolConfig {
        segment_length_s: 0.0,
        ..a
    }
    .validate()
    .is_err());
}

#[test]
fn segment_counts_follow_window_formula() {
    let data = dataset(6, 10.0);
    for (len, per) in [(4.0, 2), (3.0, 3)] {
        let segs = make_segments(&data, len, NormalizationVariant::PipelineDefault, 15.0).unwrap();
        for r in 0..data.recordings.len() {
            assert_eq!(segs.iter().filter(|s| s.recording == r).count(), per);
        }
    }
    assert!(make_segments(&data, 11.0, NormalizationVariant::PipelineDefault, 15.0).is_err());
}

#[test]
fn per_segment_normalization_standardizes_each_window() {
    let data = dataset(6, 10.0);
    let segs = make_segments(&data, 4.0, NormalizationVariant::PerSegment, 15.0).unwrap();
    for s in &segs {
        for row in s.data.signal.rows() {
            let m = row.sum() / row.len() as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn identical_cells_give_identical_results() {
    let data = dataset(8, 12.0);
    let cfg = ProtocolConfig::default();
    let opts = HarnessOptions::default();
    let m = SubjectKeyedModel::default();
    let a = run_cell(&m, &data, &cfg, &opts, &[1, 2]).unwrap();
    let b = run_cell(&m, &data, &cfg, &opts, &[1, 2]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds.len(), 2);
    assert_eq!(a.seeds[0].val_trace.len(), 5);
}

/// Picks a different scripted model per head kind.
struct Switching;

impl ModelSpec for Switching {
    fn name(&self) -> String {
        "switching".into()
    }

    fn grid(&self, head: &HeadConfig) -> Vec<Setting> {
        [HeadKind::Mlp, HeadKind::AveragePool, HeadKind::AttentionPool]
            .into_iter()
            .map(|kind| Setting {
                head: HeadConfig { kind, ..*head },
                regime: crate::adaptation::Regime::LinearProbe,
            })
            .collect()
    }

    fn fit(&self, train: &[&Segment], val: &[&Segment], setting: &Setting, seed: u64) -> Result<Vec<Box<dyn Predictor>>> {
        match setting.head.kind {
            HeadKind::AveragePool => BandpowerModel::default().fit(train, val, setting, seed),
            HeadKind::AttentionPool => SubjectKeyedModel::default().fit(train, val, setting, seed),
            HeadKind::Mlp => SubjectKeyedModel {
                schedule: vec![(0.0, 0.0)],
                ..Default::default()
            }
            .fit(train, val, setting, seed),
        }
    }
}

#[test]
fn self_selected_dominates_standardized() {
    let data = dataset(8, 12.0);
    let opts = HarnessOptions::default();
    for kind in [HeadKind::Mlp, HeadKind::AveragePool] {
        let std_cfg = ProtocolConfig {
            head: HeadConfig {
                kind,
                ..Default::default()
            },
            ..Default::default()
        };
        let sel_cfg = ProtocolConfig {
            reporting_mode: ReportingMode::SelfSelected,
            ..std_cfg
        };
        let a = run_cell(&Switching, &data, &std_cfg, &opts, &[4, 5]).unwrap();
        let b = run_cell(&Switching, &data, &sel_cfg, &opts, &[4, 5]).unwrap();
        assert!(b.mean_test() >= a.mean_test());
    }
    // the constant predictor is strictly beaten by some grid member
    let cfg = ProtocolConfig {
        head: HeadConfig {
            kind: HeadKind::Mlp,
            ..Default::default()
        },
        reporting_mode: ReportingMode::SelfSelected,
        ..Default::default()
    };
    let r = run_cell(&Switching, &data, &cfg, &opts, &[4]).unwrap();
    assert_ne!(r.setting.head.kind, HeadKind::Mlp);
}

#[test]
fn cell_errors_carry_the_cell_identity() {
    let data = dataset(6, 10.0);
    let cfg = ProtocolConfig {
        segment_length_s: 20.0,
        ..Default::default()
    };
    let err = run_cell(&BandpowerModel::default(), &data, &cfg, &HarnessOptions::default(), &[0]).unwrap_err();
    match err {
        Error::Cell { cell, .. } => assert_eq!(cell, cfg.id()),
        e => panic!("{e:?}"),
    }
}

#[test]
fn sweep_cardinality_and_single_model() {
    let data = dataset(8, 12.0);
    let grid = FactorGrid {
        split_policy: vec![SplitPolicy::SubjectLevelAll, SplitPolicy::SubjectTestSegmentVal],
        segment_length_s: vec![4.0, 3.0],
        ..Default::default()
    };
    let m = SubjectKeyedModel::default();
    let r = sweep(&[&m], &data, &grid, &HarnessOptions::default(), &[0, 1]).unwrap();
    assert_eq!(r.cells.len(), 4);
    assert!(r.reversal_pairs.is_empty());
    // two factors vary: two one-factor deltas and one interaction residual
    assert_eq!(r.attribution.len(), 2);
    assert_eq!(r.interactions.len(), 1);
    let means: Vec<f64> = r.cells.iter().map(|c| c.scores["subject_keyed"].mean).collect();
    let hi = means.iter().copied().fold(f64::MIN, f64::max);
    let lo = means.iter().copied().fold(f64::MAX, f64::min);
    assert!((r.max_discrepancy_pp - 100.0 * (hi - lo)).abs() < 1e-9);
    let md = r.to_markdown();
    assert!(md.contains("Ranking reversals (0)"));
    assert!(r.factor_delta_svg().starts_with("<svg"));
}

#[test]
fn sweep_records_failures_per_cell() {
    let data = dataset(6, 10.0);
    let grid = FactorGrid {
        segment_length_s: vec![4.0, 20.0],
        ..Default::default()
    };
    let r = sweep(&[&BandpowerModel::default()], &data, &grid, &HarnessOptions::default(), &[0]).unwrap();
    assert_eq!(r.cells[0].scores.len(), 1);
    assert_eq!(r.cells[1].errors.len(), 1);
    assert!(r.to_markdown().contains("Failures"));
}

fn fake_cell(split: SplitPolicy, seg: f64, accs: &[(&str, f64)]) -> (ProtocolConfig, BTreeMap<String, std::result::Result<CellRun, String>>) {
    let config = ProtocolConfig {
        split_policy: split,
        segment_length_s: seg,
        ..Default::default()
    };
    let runs = accs
        .iter()
        .map(|(m, a)| {
            let run = CellRun {
                setting: Setting {
                    head: config.head,
                    regime: crate::adaptation::Regime::LinearProbe,
                },
                seeds: vec![SeedOutcome {
                    seed: 0,
                    val_trace: vec![*a],
                    selected: 0,
                    val_accuracy: *a,
                    test_accuracy: *a,
                }],
            };
            (m.to_string(), Ok(run))
        })
        .collect();
    (config, runs)
}

#[test]
fn report_analysis_by_hand() {
    use SplitPolicy::*;
    let cells = vec![
        fake_cell(SubjectLevelAll, 4.0, &[("a", 0.80), ("b", 0.70)]),
        fake_cell(SubjectLevelAll, 3.0, &[("a", 0.75), ("b", 0.72)]),
        fake_cell(SubjectTestSegmentVal, 4.0, &[("a", 0.78), ("b", 0.90)]),
        fake_cell(SubjectTestSegmentVal, 3.0, &[("a", 0.60), ("b", 0.60)]),
    ];
    let base = cells[0].0;
    let r = SweepReport::build(vec!["a".into(), "b".into()], vec![0], &base, cells);
    // a > b in cells 0 and 1, b > a in cell 2, tie in cell 3
    assert_eq!(r.reversal_pairs.len(), 2);
    assert!(r.reversal_pairs.iter().all(|p| p.cell_b == r.cells[2].id && p.first == "a"));
    assert_eq!(r.cells[3].ranking, ["a", "b"]);
    assert_eq!(r.cells[2].ranking, ["b", "a"]);
    assert!((r.max_discrepancy_pp - 30.0).abs() < 1e-9);
    let d = |factor: &str, m: &str| {
        r.attribution
            .iter()
            .find(|d| d.factor == factor && d.model == m)
            .unwrap()
            .delta_pp
    };
    assert!((d("segment_length_s", "a") + 5.0).abs() < 1e-9);
    assert!((d("split_policy", "b") - 20.0).abs() < 1e-9);
    // cell 3 for a: 60 - (80 - 5 - 2) = -13
    let res = r.interactions.iter().find(|x| x.model == "a").unwrap();
    assert!((res.residual_pp + 13.0).abs() < 1e-9);
    let json = serde_json::to_string(&r).unwrap();
    let back: SweepReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn empty_report_renders_a_message() {
    assert_eq!(SweepReport::empty().to_markdown(), "no cells\n");
}
