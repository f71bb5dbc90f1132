//! Trains plain SGD and strong matching on one seed of the default benchmark
//! and prints both accuracy matrices.

use plwf::harness::{make_blobs_stream, run_continual, BlobsParams, TrainConfig};
use plwf::knowledge::MatchingScheme;
use plwf::network::MlpSpec;

fn main() -> plwf::Result<()> {
    let stream = make_blobs_stream(&BlobsParams {
        num_classes: 10,
        classes_per_task: 2,
        feature_dim: 16,
        train_per_class: 200,
        test_per_class: 50,
        spread: 0.6,
        class_order_seed: 0,
        data_seed: 0,
    })?;
    let spec = MlpSpec::new(16, vec![64, 64], 10);
    for scheme in [MatchingScheme::NonePlainSgd, MatchingScheme::Strong] {
        let cfg = TrainConfig {
            scheme,
            ..TrainConfig::default()
        };
        let result = run_continual(&stream, &spec, &cfg, None)?;
        println!(
            "{} (avg {:.3}, last {:.3})",
            scheme.name(),
            result.metrics.avg,
            result.metrics.last
        );
        println!("{}", result.accuracy.to_csv());
    }
    Ok(())
}
