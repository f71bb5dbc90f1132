use std::fs;

use plwf::config::{parse_config, RunConfig};
use plwf::runner::{audit_cost, run_experiment, RunOptions};

const SMALL: &str = r#"
seeds = [0, 1]

[dataset]
kind = "blobs"
num_classes = 6
feature_dim = 4
train_per_class = 30
test_per_class = 10

[stream]
classes_per_task = 2

[model]
hidden_dims = [8]

[training]
epochs_first = 3
epochs_rest = 3
batch_size = 16
log_every = 5

[[arms]]
name = "plain"
scheme = { kind = "none_plain_sgd" }

[[arms]]
name = "strong_credit"
scheme = { kind = "strong" }
credit = { enabled = true }
"#;

fn small() -> RunConfig {
    parse_config(SMALL).unwrap()
}

fn opts(dir: &std::path::Path, force: bool, jobs: usize) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        force,
        jobs,
    }
}

#[test]
fn writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = small();
    let summary = run_experiment(&config, &opts(dir.path(), false, 1)).unwrap();
    let hash = config.hash();
    assert_eq!(hash.len(), 12);
    for name in [
        format!("{hash}_config.toml"),
        format!("{hash}_aggregate.jsonl"),
        format!("{hash}_plain_first_task_curve.csv"),
        format!("{hash}_strong_credit_seed1_order0_accuracy.csv"),
        format!("{hash}_strong_credit_seed1_order0_metrics.json"),
        format!("{hash}_strong_credit_seed1_order0_diagnostics.jsonl"),
    ] {
        assert!(dir.path().join(&name).exists(), "missing {name}");
    }
    assert_eq!(summary.records.len(), 4);
    assert_eq!(summary.aggregates.len(), 2);

    let csv = fs::read_to_string(
        dir.path()
            .join(format!("{hash}_plain_seed0_order0_accuracy.csv")),
    )
    .unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("after_task,acc_task_1,acc_task_2,acc_task_3")
    );
    assert!(lines.next().unwrap().ends_with(",,"));

    let aggregate = fs::read_to_string(dir.path().join(format!("{hash}_aggregate.jsonl"))).unwrap();
    for line in aggregate.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["runs"], 2);
        assert!(v["avg"]["mean"].as_f64().unwrap() > 0.0);
    }

    // the saved config reproduces the hash
    let saved = fs::read_to_string(dir.path().join(format!("{hash}_config.toml"))).unwrap();
    assert_eq!(parse_config(&saved).unwrap().hash(), hash);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = small();
    run_experiment(&config, &opts(dir.path(), false, 1)).unwrap();
    let err = run_experiment(&config, &opts(dir.path(), false, 1)).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    run_experiment(&config, &opts(dir.path(), true, 1)).unwrap();
}

#[test]
fn concurrent_runs_match_sequential_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = small();
    let one = run_experiment(&config, &opts(a.path(), false, 1)).unwrap();
    let many = run_experiment(&config, &opts(b.path(), false, 3)).unwrap();
    assert_eq!(one.records, many.records);
    for file in &one.files {
        let name = file.file_name().unwrap();
        assert_eq!(
            fs::read(file).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn divergence_leaves_a_failure_marker() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        "seeds = [0, 1]",
        "seeds = [0]\n\n[optimizer]\nkind = \"sgd\"\nlr = 1e300",
    );
    let config = parse_config(&text).unwrap();
    let err = run_experiment(&config, &opts(dir.path(), false, 1)).unwrap_err();
    let marker = dir.path().join(format!("{}_FAILED", config.hash()));
    assert!(marker.exists(), "{err}");
    assert!(fs::read_to_string(&marker).unwrap().contains("seed0"));
    assert!(!dir
        .path()
        .join(format!("{}_aggregate.jsonl", config.hash()))
        .exists());
}

#[test]
fn audit_cost_counts_matchings_without_training() {
    let text = r#"
        [dataset]
        kind = "blobs"
        num_classes = 20

        [[arms]]
        name = "strong"
        scheme = { kind = "strong" }

        [[arms]]
        name = "half"
        scheme = { kind = "scheme1", fraction = 0.5 }

        [[arms]]
        name = "third"
        scheme = { kind = "scheme1", fraction = 0.3 }
    "#;
    let lines = audit_cost(&parse_config(text).unwrap()).unwrap();
    let counts: Vec<_> = lines
        .iter()
        .map(|l| (l.matchings, l.strong_matchings))
        .collect();
    assert_eq!(counts, vec![(45, 45), (25, 45), (16, 45)]);
    assert_eq!(lines[0].reduction_pct, 0.0);
    assert!((lines[1].reduction_pct - 44.444).abs() < 1e-2);
}
