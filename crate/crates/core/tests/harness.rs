use plwf::credit::RuleKind;
use plwf::harness::{
    evaluate, make_blobs_stream, run_continual, AccessLog, BlobsParams, TrainConfig,
};
use plwf::knowledge::MatchingScheme;
use plwf::network::MlpSpec;
use plwf::Execution;

fn blobs(num_classes: usize, spread: f64) -> BlobsParams {
    BlobsParams {
        num_classes,
        classes_per_task: 2,
        feature_dim: 8,
        train_per_class: 40,
        test_per_class: 20,
        spread,
        class_order_seed: 0,
        data_seed: 3,
    }
}

fn quick(scheme: MatchingScheme) -> TrainConfig {
    TrainConfig {
        scheme,
        epochs_first: 15,
        epochs_rest: 15,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn tight_clusters_are_linearly_separable() {
    let stream = make_blobs_stream(&blobs(2, 0.01)).unwrap();
    // no hidden layer: a linear probe
    let spec = MlpSpec::new(8, vec![], 2);
    let r = run_continual(&stream, &spec, &quick(MatchingScheme::NonePlainSgd), None).unwrap();
    assert_eq!(r.accuracy.get(0, 0), Some(1.0));
}

#[test]
fn single_task_run_is_plain_supervised() {
    let stream = make_blobs_stream(&blobs(2, 0.3)).unwrap();
    let spec = MlpSpec::new(8, vec![16], 2);
    let r = run_continual(&stream, &spec, &quick(MatchingScheme::Strong), None).unwrap();
    assert_eq!(r.accuracy.tasks(), 1);
    assert_eq!(r.metrics.avg, r.metrics.last);
    assert_eq!(r.subsets, vec![Vec::<usize>::new()]);
    assert_eq!(r.total_conflicts, 0);
}

#[test]
fn snapshots_follow_the_scheme_and_stay_fixed() {
    let stream = make_blobs_stream(&blobs(8, 0.3)).unwrap();
    let spec = MlpSpec::new(8, vec![16], 8);
    let cfg = TrainConfig {
        scheme: MatchingScheme::Scheme3Interval { step: 2 },
        ..quick(MatchingScheme::Strong)
    };
    let mut log = AccessLog::default();
    let r = run_continual(&stream, &spec, &cfg, Some(&mut log)).unwrap();
    assert_eq!(r.subsets, vec![vec![], vec![1], vec![1], vec![1, 3]]);
    assert_eq!(r.snapshot_digests.len(), 4);
    assert_eq!(log.past_task_reads(), 0);
    for t in 1..=4 {
        assert_eq!(log.reads_during(t), 80 * 15);
    }
    // the diagonal is learned on well separated clusters
    for t in 0..4 {
        assert!(r.accuracy.get(t, t).unwrap() >= 0.9, "{:?}", r.accuracy);
    }
}

#[test]
fn execution_modes_agree_exactly() {
    let stream = make_blobs_stream(&blobs(6, 0.5)).unwrap();
    let spec = MlpSpec::new(8, vec![12], 6);
    let mut cfg = quick(MatchingScheme::Strong);
    cfg.credit.enabled = true;
    cfg.rule = RuleKind::adam(1e-2);
    cfg.exec = Execution::Sequential;
    let a = run_continual(&stream, &spec, &cfg, None).unwrap();
    cfg.exec = Execution::Parallel;
    let b = run_continual(&stream, &spec, &cfg, None).unwrap();
    assert_eq!(a.accuracy.to_csv(), b.accuracy.to_csv());
    assert_eq!(a.snapshot_digests, b.snapshot_digests);
}

#[test]
fn evaluation_rejects_empty_test_sets() {
    let spec = MlpSpec::new(8, vec![], 2);
    let net = plwf::network::Network::init(spec, 0).unwrap();
    assert!(evaluate(&net, &[], 2, Execution::Sequential).is_err());
}
