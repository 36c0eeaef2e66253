mod common;

use std::fs;

use urbanmind::grid::SplitMode;
use urbanmind::pipeline::{
    build_samples, prepare_data, run_pipeline, run_stage1, vocabulary, Stage2Trainer, StageSelection,
};
use urbanmind::Error;

#[test]
fn stage3_without_stage2_is_an_ordering_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::quick();
    let err = run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(3)).err().unwrap();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
    run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(1)).unwrap();
    let err = run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(3)).err().unwrap();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
    assert!(run_pipeline(&cfg, None, StageSelection::Only(2)).is_err());
}

#[test]
fn staged_run_matches_single_run() {
    let cfg = common::quick();
    let whole = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, Some(whole.path()), StageSelection::All).unwrap();
    for s in 1..=3 {
        run_pipeline(&cfg, Some(staged.path()), StageSelection::Only(s)).unwrap();
    }
    let a = fs::read_to_string(whole.path().join("metrics.json")).unwrap();
    let b = fs::read_to_string(staged.path().join("metrics.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rerunning_stage1_with_another_config_is_refused_downstream() {
    let cfg = common::quick();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(1)).unwrap();
    let mut other = cfg.clone();
    other.backbone.lr *= 2.0;
    let err = run_pipeline(&other, Some(dir.path()), StageSelection::Only(2)).err().unwrap();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let cfg = common::quick();
    let data = prepare_data(&cfg.data).unwrap();
    let cache = run_stage1(&cfg, &data).unwrap().cache;
    let vocab = vocabulary(&data);
    let (samples, _) = build_samples(&cfg, &data, &cache, &vocab, &data.train_indices(), data.split.train_days(data.days())).unwrap();
    let mut straight = Stage2Trainer::new(&cfg, vocab, cache.width(), data.side()).unwrap();
    // Stop mid-epoch so the shuffle order and cursor must survive too.
    straight.step(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    straight.save(dir.path()).unwrap();
    let mut resumed = Stage2Trainer::load(dir.path()).unwrap();
    assert_eq!(resumed.model.store, straight.model.store);
    for _ in 0..4 {
        let a = straight.step(&samples).unwrap();
        let b = resumed.step(&samples).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(resumed.model.store, straight.model.store);
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let cfg = common::quick();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(1)).unwrap();
    run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(2)).unwrap();
    let params = dir.path().join("stage2/checkpoint/params.f32");
    let mut bytes = fs::read(&params).unwrap();
    bytes[17] ^= 0x40;
    fs::write(&params, bytes).unwrap();
    let err = run_pipeline(&cfg, Some(dir.path()), StageSelection::Only(3)).err().unwrap();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn zero_shot_regions_are_disjoint_and_standard_days_are() {
    let cfg = common::quick();
    let out = run_pipeline(&cfg, None, StageSelection::All).unwrap();
    let report = out.report.unwrap();
    assert!(report.disjoint_regions);
    assert_eq!(report.cells.len(), cfg.heads.m);
    assert!(report.cells.iter().all(|c| c.rmse >= c.mae && c.mae >= 0.0));

    let mut std_cfg = cfg.clone();
    std_cfg.data.mode = SplitMode::Standard;
    let out = run_pipeline(&std_cfg, None, StageSelection::All).unwrap();
    let train = out.data.split.train_days(out.data.days());
    assert!(out.test_samples.iter().all(|s| !train.contains(&s.day)));
    assert!(!out.report.unwrap().disjoint_regions);
}
