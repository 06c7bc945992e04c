use std::fs;

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::pipeline::{
    allocate_run_dir, emit_plot_data, run_ablation, run_pipeline, stage_plan, AblationAxis, ScalingPoint,
};
use flowmap_distill::Error;

#[test]
fn run_directories_are_never_reused() {
    let root = tempfile::tempdir().unwrap();
    let a = allocate_run_dir(root.path(), "ring").unwrap();
    let b = allocate_run_dir(root.path(), "ring").unwrap();
    assert_ne!(a, b);
    assert!(a.ends_with("ring-001") && b.ends_with("ring-002"));
    let config = ExperimentConfig::tiny();
    assert!(run_pipeline(&config, &a).is_err());
}

#[test]
fn dry_run_plan_lists_every_stage() {
    let plan = stage_plan(&ExperimentConfig::default()).join("\n");
    for stage in ["pretrain", "flowmap-train", "distill", "consistency", "eval", "drift"] {
        assert!(plan.contains(stage), "{stage}");
    }
}

#[test]
fn tiny_pipeline_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let config = ExperimentConfig::tiny();
    let outcome = run_pipeline(&config, &dir).unwrap();
    for file in [
        "config.toml",
        "teacher.ckpt",
        "stage1.ckpt",
        "student.ckpt",
        "fake.ckpt",
        "consistency.ckpt",
        "scaling_teacher.csv",
        "summary_student.csv",
        "drift.csv",
        "verdicts.json",
    ] {
        assert!(dir.join(file).is_file(), "{file}");
    }
    assert_eq!(ExperimentConfig::load(dir.join("config.toml")).unwrap(), config);
    let keys: Vec<&str> = outcome.verdicts.iter().map(|v| v.key.as_str()).collect();
    assert_eq!(
        keys,
        [
            "composition",
            "few_step_gain",
            "any_step_scaling",
            "consistency_degradation",
            "constant_cost",
            "conditioning",
            "w_t",
            "drift"
        ]
    );
    assert!(outcome.verdict("constant_cost").unwrap().pass);
    let student = outcome.report("student").unwrap();
    assert_eq!(student.summary.iter().map(|s| s.nfe).collect::<Vec<_>>(), [1, 2, 4, 32]);
    assert!(outcome.report("teacher").unwrap().sw(50).is_some());

    let first = emit_plot_data(&dir).unwrap();
    let snapshot: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
    let second = emit_plot_data(&dir).unwrap();
    assert_eq!(first, second);
    for (p, bytes) in second.iter().zip(&snapshot) {
        assert_eq!(&fs::read(p).unwrap(), bytes);
    }
    let header = fs::read_to_string(dir.join("plots/scaling.csv")).unwrap();
    assert!(header.starts_with("method,nfe,metric_mean,metric_se\n"));
    let mut reader = csv::Reader::from_path(dir.join("plots/scaling.csv")).unwrap();
    let points: Vec<ScalingPoint> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert!(points.iter().any(|p| p.method == "consistency" && p.nfe == 32));
}

#[test]
fn plot_data_needs_a_finished_run() {
    let root = tempfile::tempdir().unwrap();
    fs::write(root.path().join("config.toml"), "").unwrap();
    match emit_plot_data(root.path()) {
        Err(Error::IncompleteRun { missing, .. }) => assert!(missing.contains("stage1_log.csv")),
        other => panic!("expected an incomplete-run error, got {other:?}"),
    }
}

#[test]
fn ablation_axes() {
    let root = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::tiny();
    let rows = run_ablation(&config, AblationAxis::WT, root.path()).unwrap();
    let variants: Vec<&str> = rows.iter().filter(|r| r.nfe == 4).map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, ["uniform", "normal(0.5,0.25)", "beta(2,1.5)"]);
    let rows = run_ablation(&config, AblationAxis::Simulation, root.path()).unwrap();
    let cells: Vec<(&str, usize)> = rows.iter().map(|r| (r.variant.as_str(), r.nfe)).collect();
    assert_eq!(
        cells,
        [("consistency-backward", 4), ("consistency-backward", 32), ("flowmap-backward", 4), ("flowmap-backward", 32)]
    );
    assert!(root.path().join("ablation_simulation.csv").is_file());
    assert!("depth".parse::<AblationAxis>().is_err());
    for axis in ["w_t", "conditioning", "simulation", "init"] {
        assert_eq!(axis.parse::<AblationAxis>().unwrap().name(), axis);
    }
}
