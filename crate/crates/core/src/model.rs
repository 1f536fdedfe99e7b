//! Mixture-of-regressions data model and the seeded instance generator.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng;
use crate::Result;

/// How client data counts are assigned.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeSpec {
    /// One explicit count per client.
    Explicit { counts: Vec<usize> },
    /// Uniform over [n_min, n_max].
    Uniform { n_min: usize, n_max: usize },
    /// Zipf(s) over [n_min, n_max]; the heavy-tailed option.
    Zipf { exponent: f64, n_min: usize, n_max: usize },
}

/// Per-cluster diagonal feature covariances.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Identity,
    /// One diagonal (length d) per cluster.
    Diagonal { diagonals: Vec<Vec<f64>> },
}

impl CovarianceSpec {
    /// The diagonal of Sigma_j.
    pub fn diagonal(&self, cluster: usize, d: usize) -> Vec<f64> {
        match self {
            CovarianceSpec::Identity => vec![1.0; d],
            CovarianceSpec::Diagonal { diagonals } => diagonals[cluster].clone(),
        }
    }
}

/// Feature map applied to raw points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMapSpec {
    Identity,
    /// Monomial basis (1, x, ..., x^degree) of a scalar raw point.
    Polynomial { degree: usize },
}

/// How the true cluster models are produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenterSpec {
    /// Uniform on the sphere of the given radius, resampled until the minimum
    /// pairwise separation reaches `delta_target`.
    Sphere { radius: f64, delta_target: f64 },
    Explicit { thetas: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub k: usize,
    pub d: usize,
    /// Number of clients M.
    pub clients: usize,
    pub sizes: SizeSpec,
    /// Mixing probabilities, length k.
    pub p: Vec<f64>,
    /// Noise standard-deviation bound.
    pub sigma: f64,
    pub covariances: CovarianceSpec,
    /// Covariance eigenvalue bounds, 0 < alpha <= beta.
    pub alpha: f64,
    pub beta: f64,
    /// Model norm bound R.
    pub r: f64,
    pub centers: CenterSpec,
    #[serde(default = "default_feature_map")]
    pub feature_map: FeatureMapSpec,
    pub seed: u64,
}

fn default_feature_map() -> FeatureMapSpec {
    FeatureMapSpec::Identity
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.clients == 0 {
            return Err(Error::InvalidConfig("k, d, clients must be positive".into()));
        }
        if self.p.len() != self.k {
            return Err(Error::InvalidConfig(format!(
                "p has length {}, expected k = {}",
                self.p.len(),
                self.k
            )));
        }
        for (j, &pj) in self.p.iter().enumerate() {
            if pj <= 0.0 {
                return Err(Error::ZeroProbabilityComponent { index: j });
            }
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("p sums to {sum}, expected 1")));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.beta) {
            return Err(Error::InvalidConfig(
                "covariance bounds require 0 < alpha <= beta".into(),
            ));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be >= 0".into()));
        }
        if self.r <= 0.0 {
            return Err(Error::InvalidConfig("R must be > 0".into()));
        }
        for j in 0..self.k {
            let diag = self.covariances.diagonal(j, self.d);
            if diag.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: diag.len(),
                });
            }
            for &v in &diag {
                if v < self.alpha || v > self.beta {
                    return Err(Error::CovarianceBound {
                        cluster: j,
                        value: v,
                        alpha: self.alpha,
                        beta: self.beta,
                    });
                }
            }
        }
        if let SizeSpec::Explicit { counts } = &self.sizes {
            if counts.len() != self.clients {
                return Err(Error::InvalidConfig(format!(
                    "explicit sizes list has {} entries for {} clients",
                    counts.len(),
                    self.clients
                )));
            }
            if let Some(i) = counts.iter().position(|&n| n == 0) {
                return Err(Error::EmptyClient { index: i });
            }
        }
        if let CenterSpec::Sphere { radius, .. } = self.centers {
            if radius <= 0.0 || radius > self.r {
                return Err(Error::InvalidConfig(
                    "center radius must be in (0, R]".into(),
                ));
            }
        }
        if let FeatureMapSpec::Polynomial { degree } = self.feature_map {
            if degree + 1 != self.d {
                return Err(Error::InvalidConfig(format!(
                    "polynomial degree {degree} implies d = {}, config has d = {}",
                    degree + 1,
                    self.d
                )));
            }
        }
        Ok(())
    }
}

/// The hidden truth behind a generated instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// The k true models theta*_1..theta*_k.
    pub thetas: Vec<Vec<f64>>,
    /// Per-client hidden cluster index, 0-based.
    pub labels: Vec<usize>,
    /// Minimum pairwise separation Delta (0 when k = 1).
    pub delta: f64,
    /// Minimum mixing weight.
    pub p_min: f64,
}

impl GroundTruth {
    pub fn theta(&self, j: usize) -> Array1<f64> {
        Array1::from_vec(self.thetas[j].clone())
    }
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    /// n_i x d matrix of mapped features phi(x_ij).
    pub features: Array2<f64>,
    /// Response vector of length n_i.
    pub responses: Array1<f64>,
}

impl ClientDataset {
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Minimum pairwise Euclidean distance between the given centers.
pub fn min_separation(thetas: &[Vec<f64>]) -> Result<f64> {
    if thetas.len() < 2 {
        return Err(Error::InvalidConfig(
            "min_separation needs at least two centers".into(),
        ));
    }
    let mut best = f64::INFINITY;
    for i in 0..thetas.len() {
        for j in (i + 1)..thetas.len() {
            let dist: f64 = thetas[i]
                .iter()
                .zip(&thetas[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(dist);
        }
    }
    Ok(best)
}

/// Applies the feature map to a raw point.
pub fn feature_map(raw: &[f64], spec: &FeatureMapSpec) -> Result<Vec<f64>> {
    match spec {
        FeatureMapSpec::Identity => Ok(raw.to_vec()),
        FeatureMapSpec::Polynomial { degree } => {
            if raw.len() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    got: raw.len(),
                });
            }
            let x = raw[0];
            let mut out = Vec::with_capacity(degree + 1);
            let mut acc = 1.0;
            for _ in 0..=*degree {
                out.push(acc);
                acc *= x;
            }
            Ok(out)
        }
    }
}

const MAX_CENTER_ATTEMPTS: usize = 10_000;

fn draw_centers(cfg: &MixtureConfig) -> Result<Vec<Vec<f64>>> {
    match &cfg.centers {
        CenterSpec::Explicit { thetas } => {
            if thetas.len() != cfg.k {
                return Err(Error::InvalidConfig(format!(
                    "{} explicit centers for k = {}",
                    thetas.len(),
                    cfg.k
                )));
            }
            for t in thetas {
                if t.len() != cfg.d {
                    return Err(Error::DimensionMismatch {
                        expected: cfg.d,
                        got: t.len(),
                    });
                }
                let norm: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > cfg.r + 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "explicit center norm {norm} exceeds R = {}",
                        cfg.r
                    )));
                }
            }
            Ok(thetas.clone())
        }
        CenterSpec::Sphere { radius, delta_target } => {
            let mut rng = rng::stream(cfg.seed, &[rng::LBL_CENTERS]);
            for _attempt in 0..MAX_CENTER_ATTEMPTS {
                let mut thetas = Vec::with_capacity(cfg.k);
                for _ in 0..cfg.k {
                    let v: Vec<f64> =
                        (0..cfg.d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    thetas.push(v.into_iter().map(|x| x * radius / norm).collect());
                }
                if cfg.k == 1 || min_separation(&thetas)? >= *delta_target {
                    return Ok(thetas);
                }
            }
            Err(Error::SeparationUnreachable {
                attempts: MAX_CENTER_ATTEMPTS,
            })
        }
    }
}

fn draw_sizes(cfg: &MixtureConfig) -> Result<Vec<usize>> {
    match &cfg.sizes {
        SizeSpec::Explicit { counts } => Ok(counts.clone()),
        SizeSpec::Uniform { n_min, n_max } => {
            if *n_min == 0 || n_min > n_max {
                return Err(Error::InvalidConfig("need 1 <= n_min <= n_max".into()));
            }
            let mut rng = rng::stream(cfg.seed, &[rng::LBL_SIZES]);
            Ok((0..cfg.clients)
                .map(|_| rng.gen_range(*n_min..=*n_max))
                .collect())
        }
        SizeSpec::Zipf { exponent, n_min, n_max } => {
            if *n_min == 0 || n_min > n_max {
                return Err(Error::InvalidConfig("need 1 <= n_min <= n_max".into()));
            }
            let mut rng = rng::stream(cfg.seed, &[rng::LBL_SIZES]);
            // Inverse-CDF sampling over the truncated support.
            let weights: Vec<f64> = (*n_min..=*n_max)
                .map(|n| (n as f64).powf(-exponent))
                .collect();
            let total: f64 = weights.iter().sum();
            Ok((0..cfg.clients)
                .map(|_| {
                    let u: f64 = rng.gen::<f64>() * total;
                    let mut acc = 0.0;
                    for (offset, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            return n_min + offset;
                        }
                    }
                    *n_max
                })
                .collect())
        }
    }
}

/// Generates a full synthetic instance, bit-reproducible from the seed.
///
/// Each client gets its own derived RNG stream, so generation is independent
/// of iteration order and safe to parallelize.
pub fn generate_instance(cfg: &MixtureConfig) -> Result<(Vec<ClientDataset>, GroundTruth)> {
    cfg.validate()?;
    let thetas = draw_centers(cfg)?;
    let sizes = draw_sizes(cfg)?;
    let mut label_rng = rng::stream(cfg.seed, &[rng::LBL_LABELS]);
    let cdf: Vec<f64> = cfg
        .p
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let labels: Vec<usize> = (0..cfg.clients)
        .map(|_| {
            let u: f64 = label_rng.gen();
            cdf.iter().position(|&c| u < c).unwrap_or(cfg.k - 1)
        })
        .collect();

    let theta_arrays: Vec<Array1<f64>> = thetas
        .iter()
        .map(|t| Array1::from_vec(t.clone()))
        .collect();
    let sigma_sqrt: Vec<Vec<f64>> = (0..cfg.k)
        .map(|j| {
            cfg.covariances
                .diagonal(j, cfg.d)
                .iter()
                .map(|v| v.sqrt())
                .collect()
        })
        .collect();

    let mut datasets = Vec::with_capacity(cfg.clients);
    for i in 0..cfg.clients {
        let n = sizes[i];
        if n == 0 {
            return Err(Error::EmptyClient { index: i });
        }
        let z = labels[i];
        let mut rng = rng::stream(cfg.seed, &[rng::LBL_CLIENT, i as u64]);
        let mut features = Array2::zeros((n, cfg.d));
        match cfg.feature_map {
            FeatureMapSpec::Identity => {
                for row in 0..n {
                    for col in 0..cfg.d {
                        let g: f64 = rng.sample(StandardNormal);
                        features[[row, col]] = sigma_sqrt[z][col] * g;
                    }
                }
            }
            FeatureMapSpec::Polynomial { degree } => {
                // Raw scalar draws; the covariance spec is not enforced here.
                for row in 0..n {
                    let x: f64 = rng.sample(StandardNormal);
                    let mapped = feature_map(&[x], &FeatureMapSpec::Polynomial { degree })?;
                    for (col, v) in mapped.into_iter().enumerate() {
                        features[[row, col]] = v;
                    }
                }
            }
        }
        let mut responses = features.dot(&theta_arrays[z]);
        if cfg.sigma > 0.0 {
            for row in 0..n {
                let g: f64 = rng.sample(StandardNormal);
                responses[row] += cfg.sigma * g;
            }
        }
        datasets.push(ClientDataset { features, responses });
    }

    let delta = if cfg.k >= 2 {
        min_separation(&thetas)?
    } else {
        0.0
    };
    let p_min = cfg.p.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((
        datasets,
        GroundTruth {
            thetas,
            labels,
            delta,
            p_min,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> MixtureConfig {
        MixtureConfig {
            k: 2,
            d: 3,
            clients: 20,
            sizes: SizeSpec::Uniform { n_min: 2, n_max: 5 },
            p: vec![0.5, 0.5],
            sigma: 0.0,
            covariances: CovarianceSpec::Identity,
            alpha: 1.0,
            beta: 1.0,
            r: 5.0,
            centers: CenterSpec::Sphere {
                radius: 3.0,
                delta_target: 2.0,
            },
            feature_map: FeatureMapSpec::Identity,
            seed: 7,
        }
    }

    #[test]
    fn noiseless_responses_are_exact() {
        let (datasets, truth) = generate_instance(&base_cfg()).unwrap();
        for (i, ds) in datasets.iter().enumerate() {
            let expect = ds.features.dot(&truth.theta(truth.labels[i]));
            for (a, b) in ds.responses.iter().zip(expect.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn single_component_labels() {
        let mut cfg = base_cfg();
        cfg.k = 1;
        cfg.p = vec![1.0];
        let (_, truth) = generate_instance(&cfg).unwrap();
        assert!(truth.labels.iter().all(|&z| z == 0));
    }

    #[test]
    fn min_separation_examples() {
        assert_eq!(
            min_separation(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(),
            5.0
        );
        assert_eq!(
            min_separation(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(),
            0.0
        );
        assert!(min_separation(&[vec![1.0]]).is_err());
    }

    #[test]
    fn min_separation_matches_pair_scan() {
        let mut rng = crate::rng::stream(1, &[0]);
        use rand::Rng;
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let mut brute = f64::INFINITY;
        for i in 0..3 {
            for j in 0..3 {
                if i < j {
                    let d: f64 = centers[i]
                        .iter()
                        .zip(&centers[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    brute = brute.min(d);
                }
            }
        }
        assert_eq!(min_separation(&centers).unwrap(), brute);
    }

    #[test]
    fn feature_map_examples() {
        assert_eq!(
            feature_map(&[1.0, 2.0], &FeatureMapSpec::Identity).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            feature_map(&[3.0], &FeatureMapSpec::Polynomial { degree: 2 }).unwrap(),
            vec![1.0, 3.0, 9.0]
        );
        assert_eq!(
            feature_map(&[0.0], &FeatureMapSpec::Polynomial { degree: 2 }).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert!(feature_map(&[1.0, 2.0], &FeatureMapSpec::Polynomial { degree: 2 }).is_err());
    }

    #[test]
    fn reproducible_generation() {
        let cfg = base_cfg();
        let (a, ta) = generate_instance(&cfg).unwrap();
        let (b, tb) = generate_instance(&cfg).unwrap();
        assert_eq!(ta.thetas, tb.thetas);
        assert_eq!(ta.labels, tb.labels);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.responses, y.responses);
        }
    }

    #[test]
    fn scaling_thetas_and_sigma_scales_responses() {
        // Power-of-two scale keeps the identity exact in floating point.
        let mut cfg = base_cfg();
        cfg.sigma = 0.3;
        let mut scaled = cfg.clone();
        let c = 2.0;
        scaled.sigma *= c;
        scaled.r *= c;
        let thetas = match &cfg.centers {
            CenterSpec::Sphere { .. } => {
                let (_, t) = generate_instance(&cfg).unwrap();
                t.thetas
            }
            CenterSpec::Explicit { thetas } => thetas.clone(),
        };
        scaled.centers = CenterSpec::Explicit {
            thetas: thetas
                .iter()
                .map(|t| t.iter().map(|x| x * c).collect())
                .collect(),
        };
        // The base run must also use explicit centers so the label/feature
        // streams line up between the two configs.
        let mut base = cfg.clone();
        base.centers = CenterSpec::Explicit { thetas };
        let (a0, _) = generate_instance(&base).unwrap();
        let (b, _) = generate_instance(&scaled).unwrap();
        for (x, y) in a0.iter().zip(b.iter()) {
            assert_eq!(x.features, y.features);
            for (ra, rb) in x.responses.iter().zip(y.responses.iter()) {
                assert_eq!(ra * c, *rb);
            }
        }
    }

    #[test]
    fn label_marginals_match_p() {
        let cfg = MixtureConfig {
            k: 3,
            d: 1,
            clients: 100_000,
            sizes: SizeSpec::Uniform { n_min: 1, n_max: 1 },
            p: vec![0.5, 0.3, 0.2],
            sigma: 0.0,
            covariances: CovarianceSpec::Identity,
            alpha: 1.0,
            beta: 1.0,
            r: 5.0,
            centers: CenterSpec::Explicit {
                thetas: vec![vec![1.0], vec![2.0], vec![3.0]],
            },
            feature_map: FeatureMapSpec::Identity,
            seed: 99,
        };
        let (_, truth) = generate_instance(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for &z in &truth.labels {
            counts[z] += 1;
        }
        for (j, &target) in cfg.p.iter().enumerate() {
            let freq = counts[j] as f64 / cfg.clients as f64;
            assert!((freq - target).abs() < 0.01, "cluster {j}: {freq}");
        }
    }

    #[test]
    fn empirical_second_moment_matches_covariance() {
        // 10^5 total rows, Sigma_j = I: operator-norm error below 5%.
        let cfg = MixtureConfig {
            k: 2,
            d: 4,
            clients: 1000,
            sizes: SizeSpec::Uniform {
                n_min: 100,
                n_max: 100,
            },
            p: vec![0.5, 0.5],
            sigma: 0.0,
            covariances: CovarianceSpec::Identity,
            alpha: 1.0,
            beta: 1.0,
            r: 5.0,
            centers: CenterSpec::Sphere {
                radius: 2.0,
                delta_target: 1.0,
            },
            feature_map: FeatureMapSpec::Identity,
            seed: 5,
        };
        let (datasets, truth) = generate_instance(&cfg).unwrap();
        for cluster in 0..2 {
            let mut second = Array2::<f64>::zeros((4, 4));
            let mut rows = 0usize;
            for (i, ds) in datasets.iter().enumerate() {
                if truth.labels[i] != cluster {
                    continue;
                }
                second = second + ds.features.t().dot(&ds.features);
                rows += ds.n();
            }
            second.mapv_inplace(|x| x / rows as f64);
            let diff = &second - &Array2::<f64>::eye(4);
            assert!(crate::linalg::operator_norm(&diff) < 0.05);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = base_cfg();
        cfg.p = vec![0.5, 0.0];
        assert!(matches!(
            generate_instance(&cfg),
            Err(Error::ZeroProbabilityComponent { index: 1 })
        ));
        let mut cfg = base_cfg();
        cfg.covariances = CovarianceSpec::Diagonal {
            diagonals: vec![vec![1.0, 1.0, 5.0], vec![1.0, 1.0, 1.0]],
        };
        assert!(matches!(
            generate_instance(&cfg),
            Err(Error::CovarianceBound { .. })
        ));
        let mut cfg = base_cfg();
        cfg.sizes = SizeSpec::Explicit {
            counts: vec![1; 19].into_iter().chain([0]).collect(),
        };
        assert!(matches!(
            generate_instance(&cfg),
            Err(Error::EmptyClient { index: 19 })
        ));
    }
}
