//! Shared fixtures for the benchmark suite.

use fedmix::model::{
    generate_instance, CenterSpec, CovarianceSpec, FeatureMapSpec, MixtureConfig, SizeSpec,
};
use fedmix::model::{ClientDataset, GroundTruth};

/// A mid-sized mixture instance: k clusters in d dimensions over `clients`
/// clients holding `points_each` samples.
pub fn instance(
    k: usize,
    d: usize,
    clients: usize,
    points_each: usize,
    seed: u64,
) -> (Vec<ClientDataset>, GroundTruth) {
    let thetas: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut t = vec![0.0; d];
            t[j % d] = 3.0;
            t
        })
        .collect();
    let cfg = MixtureConfig {
        k,
        d,
        clients,
        sizes: SizeSpec::Explicit {
            counts: vec![points_each; clients],
        },
        p: vec![1.0 / k as f64; k],
        sigma: 0.1,
        covariances: CovarianceSpec::Identity,
        alpha: 1.0,
        beta: 1.0,
        r: 4.0,
        centers: CenterSpec::Explicit { thetas },
        feature_map: FeatureMapSpec::Identity,
        seed,
    };
    generate_instance(&cfg).expect("benchmark instance")
}
