use std::fs;
use std::path::Path;

use cohortsynth::data::{long_to_wide, ConflictPolicy, LongTable};
use cohortsynth::pipeline::run::{
    evaluate_pair, Run, COHORT_FILE, LOCK_FILE, MANIFEST_FILE, MODELS_DIR, POST_FILE, RAW_FILE, REPORT_FILE,
    TREND_FILE,
};
use cohortsynth::pipeline::{Method, RunConfig};
use cohortsynth::schema::CohortSchema;
use cohortsynth::{Error, ErrorKind, Exec};

fn smoke_config(out: &Path, method: Method) -> RunConfig {
    let mut cfg = RunConfig {
        out: out.to_path_buf(),
        method,
        seed: 7,
        sample_size: 40,
        resamples: 2,
        ..Default::default()
    };
    cfg.surrogate.n_participants = 50;
    cfg.hivae.epochs = 3;
    cfg.bn.restarts = 1;
    cfg
}

fn run_all(cfg: &RunConfig) -> Run {
    let mut run = Run::open(cfg.clone(), false, Exec::Parallel).unwrap();
    run.simulate().unwrap();
    run.prepare().unwrap();
    run.train().unwrap();
    run.encode().unwrap();
    run.bn_learn().unwrap();
    run.sample().unwrap();
    run.evaluate().unwrap();
    run.trend().unwrap();
    run
}

fn count_checkpoints(out: &Path) -> usize {
    fs::read_dir(out.join(MODELS_DIR)).unwrap().count()
}

#[test]
fn recurrent_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), Method::Mt);
    let run = run_all(&cfg);
    drop(run);
    assert_eq!(count_checkpoints(dir.path()), 4);
    assert!(!dir.path().join(LOCK_FILE).exists());
    for f in [COHORT_FILE, RAW_FILE, REPORT_FILE, TREND_FILE, MANIFEST_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // Raw synthetic output has every visit of every participant.
    let schema = CohortSchema::default();
    let raw = LongTable::load(&schema, &dir.path().join(RAW_FILE)).unwrap();
    assert_eq!(raw.len(), 40 * 16);
    let figures = fs::read_dir(dir.path().join("figures")).unwrap().count();
    assert!(figures >= 7);
}

#[test]
fn per_visit_pipeline_writes_one_checkpoint_per_group_and_visit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), Method::Vambn);
    cfg.sample_size = 1;
    let mut run = Run::open(cfg, false, Exec::Parallel).unwrap();
    run.simulate().unwrap();
    run.prepare().unwrap();
    run.train().unwrap();
    run.encode().unwrap();
    run.bn_learn().unwrap();
    let one = run.sample().unwrap();
    assert_eq!(count_checkpoints(dir.path()), 64);
    assert_eq!(one.len(), 16);
    assert!(one.records.iter().all(|r| r.pers_id == 1));
}

#[test]
fn identical_seeds_give_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    // The output directory is part of the configuration, so both runs use it.
    let cfg = smoke_config(&dir.path().join("run"), Method::Ft);
    drop(run_all(&cfg));
    let manifest = fs::read(cfg.out.join(MANIFEST_FILE)).unwrap();
    let raw = fs::read(cfg.out.join(RAW_FILE)).unwrap();
    fs::remove_dir_all(&cfg.out).unwrap();
    drop(run_all(&cfg));
    assert_eq!(manifest, fs::read(cfg.out.join(MANIFEST_FILE)).unwrap());
    assert_eq!(raw, fs::read(cfg.out.join(RAW_FILE)).unwrap());
}

#[test]
fn postprocessing_matches_reference_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), Method::Ft);
    cfg.postprocess = true;
    cfg.resamples = 1;
    let mut run = Run::open(cfg, false, Exec::Sequential).unwrap();
    run.simulate().unwrap();
    let prep = run.prepare().unwrap();
    run.train().unwrap();
    run.encode().unwrap();
    run.bn_learn().unwrap();
    run.sample().unwrap();
    let schema = CohortSchema::default();
    let post = LongTable::load(&schema, &dir.path().join(POST_FILE)).unwrap();
    assert_eq!(post.participants().len(), prep.reference.n());
    run.evaluate().unwrap();
}

#[test]
fn existing_outputs_need_overwrite_and_locks_exclude() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), Method::Mt);
    let mut run = Run::open(cfg.clone(), false, Exec::Sequential).unwrap();
    run.simulate().unwrap();
    let err = run.simulate().unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    let second = Run::open(cfg.clone(), false, Exec::Sequential).unwrap_err();
    assert!(matches!(second, Error::Config(_)));
    drop(run);
    let mut again = Run::open(cfg, true, Exec::Sequential).unwrap();
    again.simulate().unwrap();
}

#[test]
fn training_needs_prepared_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(smoke_config(dir.path(), Method::Mt), false, Exec::Sequential).unwrap();
    assert_eq!(run.train().unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn real_against_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(smoke_config(dir.path(), Method::Mt), false, Exec::Sequential).unwrap();
    run.simulate().unwrap();
    let schema = CohortSchema::default();
    let real = LongTable::load(&schema, &dir.path().join(COHORT_FILE)).unwrap();
    let wide = long_to_wide(&real, &schema, ConflictPolicy::KeepClosest).unwrap().wide;
    let report = evaluate_pair(&wide, &wide, &schema, 1, Exec::Parallel).unwrap();
    assert_eq!(report.corr_error, 0.0);
    assert_eq!(report.js.mean, 0.0);
    assert!(report.js.entries.iter().all(|e| e.js == 0.0));
}
