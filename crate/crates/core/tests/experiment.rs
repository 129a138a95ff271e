use std::path::Path;

use glomseg::config::RunConfig;
use glomseg::experiment::{
    ablation_csv_path, make_fixture, run_ablation, run_evaluate, run_train, AblationAxis, HISTORY_FILE,
    METRICS_FILE, SNAPSHOT_FILE,
};
use glomseg::fixture::FixtureSpec;
use glomseg::models::{Arch, ModelConfig, Variant};
use glomseg::Error;

fn small_spec(unlabeled: usize, centers: usize) -> FixtureSpec {
    FixtureSpec {
        size: 32,
        labeled: 4,
        labeled_wsis: 2,
        unlabeled,
        test: 4,
        centers,
        wsis_per_center: 2,
        ..FixtureSpec::default()
    }
}

fn config(root: &Path, spec: &FixtureSpec, extra: &[(&str, &str)]) -> RunConfig {
    let (_, cfg_path) = make_fixture(&root.join("data"), spec).unwrap();
    let mut cfg = RunConfig::from_file(&cfg_path).unwrap();
    cfg.set("output_dir", &root.join("runs").display().to_string()).unwrap();
    cfg.set("train.epochs", "1").unwrap();
    for (k, v) in extra {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn train_writes_the_run_directory_and_refuses_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &small_spec(8, 2), &[("run_id", "t"), ("train.method", "fixmatch")]);
    let run = run_train(&cfg).unwrap();
    for f in [SNAPSHOT_FILE, HISTORY_FILE, METRICS_FILE, "best.ckpt"] {
        assert!(run.run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(run.reports.len(), 1);
    let snap = RunConfig::from_file(&run.run_dir.join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(snap, cfg);
    assert!(matches!(run_train(&cfg), Err(Error::Config(_))));

    let mut eval_cfg = cfg.clone();
    eval_cfg.set("run_id", "e").unwrap();
    let ckpt = run.run_dir.join("best.ckpt");
    let reports = run_evaluate(&eval_cfg, &ckpt, &cfg.eval.datasets, Some(&cfg.resolved_model())).unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].method.contains("FixMatch"));
    let wrong = ModelConfig::preset(Arch::AttUnet, Variant::Toy).unwrap();
    assert!(matches!(
        run_evaluate(&eval_cfg, &ckpt, &cfg.eval.datasets, Some(&wrong)),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn center_axis_draws_per_center_patches_from_each_center() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &small_spec(300, 3),
        &[("run_id", "c"), ("train.method", "fixmatch"), ("ablation.centers", "1,3"), ("ablation.per_center", "100")],
    );
    let result = run_ablation(&cfg, AblationAxis::NCenters).unwrap();
    let got: Vec<(String, usize)> = result.points.iter().map(|p| (p.setting.clone(), p.n_unlabeled)).collect();
    assert_eq!(got, vec![("1".to_string(), 100), ("3".to_string(), 300)]);
    assert_eq!(csv_rows(&ablation_csv_path(&cfg, AblationAxis::NCenters)).len(), 2);
}

#[test]
fn fraction_axis_keeps_request_order_and_writes_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &small_spec(8, 2), &[("run_id", "f"), ("ablation.fractions", "1,1/2")]);
    let result = run_ablation(&cfg, AblationAxis::LabelFraction).unwrap();
    let got: Vec<(String, usize)> = result.points.iter().map(|p| (p.setting.clone(), p.n_labeled)).collect();
    assert_eq!(got, vec![("1".to_string(), 4), ("1/2".to_string(), 2)]);
    let rows = csv_rows(&ablation_csv_path(&cfg, AblationAxis::LabelFraction));
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "LABEL_FRACTION");
    assert!(result.table().lines().count() == 3);
}

#[test]
fn backbone_axis_reports_growing_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &small_spec(8, 2), &[("run_id", "b"), ("ablation.backbones", "toy,b0")]);
    let result = run_ablation(&cfg, AblationAxis::Backbone).unwrap();
    assert_eq!(result.points.len(), 2);
    assert!(result.points[0].parameters < result.points[1].parameters);
}

#[test]
fn invalid_ablations_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &small_spec(8, 2), &[("run_id", "x"), ("train.method", "supervised"), ("ablation.fractions", "1/2,1/2")]);
    assert!(matches!(run_ablation(&cfg, AblationAxis::LabelFraction), Err(Error::Config(_))));
    // supervised training cannot vary the unlabeled pool
    assert!(matches!(run_ablation(&cfg, AblationAxis::NCenters), Err(Error::Config(_))));
    assert!(!cfg.run_dir().join(SNAPSHOT_FILE).exists());
}
