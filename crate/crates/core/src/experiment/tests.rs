use super::*;

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn partial_tables_keep_remaining_defaults() {
    let cfg = ExperimentConfig::from_toml("seed = 9\nsigma_min = 0.06\n[lesion]\nload = 30\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.sigma_min, Some(0.06));
    assert_eq!(cfg.sigma_max, None);
    assert_eq!(cfg.lesion.load, 30);
    assert_eq!(cfg.lesion.factor, LesionSpec::default().factor);
    assert_eq!(cfg.phantom, PhantomConfig::default());
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["sigma = 1.0", "[lesion]\nsize = 3", "[phantom]\nradius = 2.0"] {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn validation_names_the_problem() {
    let cases = [
        "patch_size = 5",
        "d_pos = 6",
        "levels = 1",
        "checkpoint_every = 0",
        "baseline_components = 0",
        "calibration_subsample = 1",
        "sigma_max = -1.0",
        "train_size = 1",
    ];
    for text in cases {
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        let key = text.split(' ').next().unwrap();
        assert!(err.to_string().contains(key), "{text}: {err}");
    }
}

#[test]
fn stage_seeds_are_distinct_and_follow_the_master_seed() {
    let stages = [
        Stage::Data,
        Stage::Calibration,
        Stage::ScoreInit,
        Stage::ScoreTrain,
        Stage::EncoderInit,
        Stage::FlowInit,
        Stage::FlowTrain,
        Stage::Baseline,
    ];
    let mut seeds: Vec<u64> = stages.iter().map(|&s| stage_seed(3, s)).collect();
    assert_ne!(seeds[0], stage_seed(4, Stage::Data));
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), stages.len());
}

#[test]
fn layout_paths_are_relative_to_root() {
    let layout = Layout::new(Path::new("/tmp/run"));
    assert_eq!(layout.relative(&layout.image(Role::Train, 7)), "data/train/0007.dtf");
    assert_eq!(layout.relative(&layout.mask(Role::TestLesioned, 0)), "data/test_lesioned/0000_gt.pgm");
    assert_eq!(layout.relative(&layout.mask(Role::Val, 1)), "data/val/0001_fg.pgm");
    let (dtf, pgm) = layout.heatmap(Method::Baseline, 2);
    assert_eq!(layout.relative(&dtf), "eval/heatmaps/baseline/0002.dtf");
    assert_eq!(layout.relative(&pgm), "eval/heatmaps/baseline/0002.pgm");
}

#[test]
fn method_selection() {
    assert_eq!(MethodSelection::Both.methods(), vec![Method::Spatial, Method::Baseline]);
    assert_eq!(MethodSelection::Baseline.methods(), vec![Method::Baseline]);
}

#[test]
fn curves_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let values = vec![0.1 + 0.2, 1e-300, 12345.678901234567, -3.0];
    write_curve(&path, ["iteration", "loss"], &values).unwrap();
    assert_eq!(read_curve(&path).unwrap(), values);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), values.len() + 1);
    assert!(text.starts_with("iteration,loss\n0,"));
}

#[test]
fn segment_and_score_skips_empty_ground_truth() {
    let grid = PatchGrid::new(8, 8, 4).unwrap();
    let h = Heatmap::from_patches(&grid, &[0.0, 5.0, 0.0, 0.0]).unwrap();
    let fg = Mask::full(8, 8);
    let mut gt = Mask::empty(8, 8);
    for r in 0..4 {
        for c in 4..8 {
            gt.set(r, c, true);
        }
    }
    let res = segment_and_score(
        &[h.clone(), h],
        &[fg.clone(), fg],
        &[Mask::empty(8, 8), gt],
    )
    .unwrap();
    assert_eq!(res.len(), 1);
    assert_eq!(res[0].index, 1);
    assert_eq!(res[0].metrics.sample_id, 1);
    assert_eq!((res[0].metrics.tp, res[0].metrics.fp), (1, 0));
    assert!(segment_and_score(&[], &[Mask::full(1, 1)], &[]).is_err());
}
