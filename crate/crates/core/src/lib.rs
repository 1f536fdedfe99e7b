//! Clustered federated learning on mixed linear regression.
//!
//! The library simulates a parameter server with `M` clients whose local data
//! follow one of `k` hidden linear regression models. Estimation runs in two
//! phases: federated moment descent on anchor clients produces coarse cluster
//! centers, then iterative hard-label clustering with FedAvg or FedProx local
//! updates refines them. Everything is deterministic given a master seed.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod phase1;
pub mod phase2;
pub mod rng;
pub mod subspace;

pub use error::Error;
pub use harness::{ExperimentConfig, RoundTrace, SeedSummary};
pub use linalg::OrthonormalBasis;
pub use metrics::EvalReport;
pub use model::{ClientDataset, GroundTruth, MixtureConfig};
pub use phase1::{AnchorState, Phase1Config};
pub use phase2::{GlobalModel, LocalReport, Phase2Config};

pub type Result<T> = std::result::Result<T, Error>;
