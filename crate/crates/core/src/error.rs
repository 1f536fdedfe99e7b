use thiserror::Error;

/// Errors surfaced by the simulator and the underlying numerics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("component {index} has zero probability")]
    ZeroProbabilityComponent { index: usize },
    #[error("covariance entry {value} for cluster {cluster} outside [{alpha}, {beta}]")]
    CovarianceBound {
        cluster: usize,
        value: f64,
        alpha: f64,
        beta: f64,
    },
    #[error("client {index} has no data points")]
    EmptyClient { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank-deficient input to QR orthonormalization")]
    RankDeficient,
    #[error("degenerate orthogonal-iteration round {round}: weighted sum lost rank")]
    DegenerateRound { round: usize },
    #[error("only {eligible} clients have at least {min_local} points; {requested} anchors requested")]
    InsufficientAnchors {
        requested: usize,
        eligible: usize,
        min_local: usize,
    },
    #[error("round {round}: fresh-client pool exhausted ({available} available, {needed} needed)")]
    InsufficientFreshClients {
        round: usize,
        available: usize,
        needed: usize,
    },
    #[error("anchor {client} lacks fresh local data at round {round} ({have} points left, {need} needed)")]
    InsufficientLocalData {
        client: usize,
        round: usize,
        have: usize,
        need: usize,
    },
    #[error("greedy clustering found {found} components, expected {expected}")]
    ClusterCountMismatch { expected: usize, found: usize },
    #[error("cluster component {component} wider than twice the linkage threshold")]
    ClusterDiameterExceeded { component: usize },
    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("permutation distance supports k <= 10, got k = {0}")]
    UnsupportedK(usize),
    #[error("anchor {anchor} exceeded the norm bound at round {round}")]
    NormBoundExceeded { anchor: usize, round: usize },
    #[error("center sampling failed to reach the separation target after {attempts} attempts")]
    SeparationUnreachable { attempts: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for configuration problems, 2 for algorithmic failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::ZeroProbabilityComponent { .. }
            | Error::CovarianceBound { .. }
            | Error::EmptyClient { .. }
            | Error::Io(_)
            | Error::Json(_) => 1,
            _ => 2,
        }
    }
}
