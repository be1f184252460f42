mod common;

use common::{tiny_config, tiny_dataset};
use motion_evolve::data::{Split, VideoClip};
use motion_evolve::generator::AblationPreset;
use motion_evolve::harness::{
    animate, copy_baseline_l1, evaluate_split, pick_references, reconstruct, run_ablations, run_reference_sweep, train,
    AblationTable, Checkpoint, EvalOptions, TrainConfig,
};
use motion_evolve::metrics::{Direction, Metric};
use motion_evolve::Error;

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    common::determinism_and_checkpoint().unwrap();
}

#[test]
fn config_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.toml");
    std::fs::write(&path, tiny_config().to_toml().unwrap()).unwrap();
    // The environment override is exercised through the parser; mutating the
    // process environment from a parallel test would race.
    let mut cfg = TrainConfig::load(&path).unwrap();
    if std::env::var(motion_evolve::harness::SEED_ENV).is_err() {
        assert_eq!(cfg, tiny_config());
    }
    cfg.apply_seed_override(Some(" 17 ")).unwrap();
    assert_eq!(cfg.seed, 17);
    assert!(matches!(cfg.apply_seed_override(Some("-1")), Err(Error::InvalidArgument(_))));

    std::fs::write(&path, "[loss]\nlambda = 0.0\n").unwrap();
    assert!(matches!(TrainConfig::load(&path), Err(Error::InvalidArgument(_))));
    std::fs::write(&path, "iterations = \"many\"\n").unwrap();
    assert!(matches!(TrainConfig::load(&path), Err(Error::Format { .. })));
    assert!(matches!(TrainConfig::load(&dir.path().join("none.toml")), Err(Error::Io { .. })));
}

#[test]
fn missing_or_corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let err = Checkpoint::load(&missing).unwrap_err();
    assert!(err.to_string().contains("missing.ckpt"), "{err}");
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"MEVCKPT\0garbage").unwrap();
    assert!(Checkpoint::load(&junk).is_err());
}

fn trained() -> (motion_evolve::data::ClipDataset, Checkpoint) {
    let ds = tiny_dataset();
    let out = train(&ds, &tiny_config()).unwrap();
    (ds, out.checkpoint)
}

#[test]
fn reconstruction_reports_every_metric_with_a_direction() {
    let (ds, ckpt) = trained();
    let (id, rec) = ds.clips(Split::Test).next().unwrap();
    let oracle = motion_evolve::data::ColorCentroidOracle::new(id.colors.clone());
    let opts = EvalOptions::default();
    let g = reconstruct(&ckpt, &rec.clip, 2, &opts, Some(&oracle)).unwrap();
    assert_eq!(g.frames.len(), rec.clip.len() - 1);
    for m in Metric::ALL {
        let r = g.report.records.iter().find(|r| r.name == m).unwrap_or_else(|| panic!("{m:?} missing"));
        assert_eq!(r.direction, m.direction());
        assert!(r.value.is_finite());
    }
    let lower = [Metric::L1, Metric::Fid, Metric::Akd, Metric::RandomFeatureDistance];
    for r in &g.report.records {
        let expect = if lower.contains(&r.name) { Direction::LowerIsBetter } else { Direction::HigherIsBetter };
        assert_eq!(r.direction, expect, "{:?}", r.name);
    }
    let json = g.report.to_json().unwrap();
    assert_eq!(motion_evolve::metrics::MetricReport::from_json(&json).unwrap(), g.report);

    let capped = EvalOptions {
        max_frames: Some(2),
        ..EvalOptions::default()
    };
    assert_eq!(reconstruct(&ckpt, &rec.clip, 2, &capped, None).unwrap().frames.len(), 2);
    assert!(copy_baseline_l1(&rec.clip, None).unwrap() > 0.0);
}

#[test]
fn self_animation_matches_reconstruction() {
    let (ds, ckpt) = trained();
    let (_, rec) = ds.clips(Split::Test).next().unwrap();
    let opts = EvalOptions::default();
    let r = reconstruct(&ckpt, &rec.clip, 2, &opts, None).unwrap();
    let a = animate(&ckpt, &rec.clip, &rec.clip, 2, &opts, None).unwrap();
    assert_eq!(a.frames, r.frames);
    // Without an oracle AKD is skipped with a note; paired metrics never appear.
    let names: Vec<Metric> = a.report.records.iter().map(|r| r.name).collect();
    assert!(names.contains(&Metric::Fid) && names.contains(&Metric::Csim));
    assert!(!names.contains(&Metric::L1) && !names.contains(&Metric::Akd));
    assert!(!a.report.notes.is_empty());
}

#[test]
fn cross_identity_animation_runs() {
    let (ds, ckpt) = trained();
    let clips: Vec<VideoClip> = ds.clips(Split::Test).map(|(_, c)| c.clip.clone()).collect();
    let g = animate(&ckpt, &clips[0], &clips[1], 1, &EvalOptions::default(), None).unwrap();
    assert_eq!(g.frames.len(), clips[1].len() - 1);
}

#[test]
fn reference_selection() {
    let r = pick_references(16, 3, 5).unwrap();
    assert_eq!(r, pick_references(16, 3, 5).unwrap());
    assert_eq!(r.len(), 3);
    assert!(r.windows(2).all(|w| w[0] < w[1]) && r[0] >= 1 && r[2] < 16);
    assert!(pick_references(16, 0, 5).unwrap().is_empty());
    assert!(matches!(pick_references(4, 3, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn sweep_rejects_reference_counts_the_clips_cannot_supply() {
    let (ds, ckpt) = trained();
    let opts = EvalOptions {
        metrics: vec![Metric::L1],
        max_frames: Some(2),
        ..EvalOptions::default()
    };
    let reports = run_reference_sweep(&ds, &ckpt, &[0, 1, 2], &opts).unwrap();
    assert_eq!(reports.iter().map(|(n, _)| *n).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(reports.iter().all(|(_, r)| r.get(Metric::L1).is_some()));
    assert!(matches!(run_reference_sweep(&ds, &ckpt, &[5], &opts), Err(Error::InvalidArgument(_))));
}

#[test]
fn ablation_table_covers_every_preset() {
    let ds = tiny_dataset();
    let cfg = TrainConfig {
        iterations: 1,
        batch_size: 1,
        ..tiny_config()
    };
    let opts = EvalOptions {
        max_clips: Some(1),
        max_frames: Some(2),
        ..EvalOptions::default()
    };
    let table = run_ablations(&ds, &cfg, &opts).unwrap();
    assert_eq!(table.rows.iter().map(|r| r.preset).collect::<Vec<_>>(), AblationPreset::ALL.to_vec());
    for row in &table.rows {
        assert!(row.final_loss.is_finite());
        assert!(row.report.records.iter().all(|r| r.value.is_finite()));
    }
    assert_eq!(AblationTable::from_json(&table.to_json().unwrap()).unwrap(), table);
    let md = table.to_markdown();
    assert_eq!(md.lines().count(), 2 + AblationPreset::ALL.len());
    assert!(md.contains('↑') && md.contains('↓'));
}

#[test]
fn split_evaluation_pools_test_clips() {
    let (ds, ckpt) = trained();
    let opts = EvalOptions {
        metrics: vec![Metric::L1, Metric::Akd],
        ..EvalOptions::default()
    };
    let r = evaluate_split(&ckpt, &ds, Split::Test, 2, &opts, "full").unwrap();
    let l1 = r.records.iter().find(|x| x.name == Metric::L1).unwrap();
    assert_eq!(l1.frame_count, ds.clips(Split::Test).map(|(_, c)| c.clip.len() - 1).sum::<usize>());
    assert!(r.get(Metric::Akd).is_some());
}
