//! Experiment orchestration: configuration, instance persistence, the staged
//! generate / phase1 / phase2 / eval pipeline, and the monolithic multi-seed
//! driver. Every stage is a pure function of its on-disk inputs, so running
//! the stages separately produces byte-identical files to a single `full` run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::metrics::{self, EvalReport};
use crate::model::{generate_instance, ClientDataset, GroundTruth, MixtureConfig};
use crate::phase1::{run_fedmd, AnchorState, Phase1Config, Phase1RoundTrace};
use crate::phase2::{run_fedx, GlobalModel, Phase2Config, Phase2Mode, Phase2RoundTrace};
use crate::Result;

pub const INSTANCE_DIR: &str = "instance";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PHASE1_FILE: &str = "phase1.json";
pub const PHASE1_TRACE_FILE: &str = "phase1_trace.jsonl";
pub const PHASE2_FILE: &str = "phase2.json";
pub const PHASE2_TRACE_FILE: &str = "phase2_trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CSV_FILE: &str = "rounds.csv";
pub const CSV_HEADER: &str = "phase,round,distance,misclustering,bytes";

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mixture: MixtureConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    /// Master seeds; one run directory per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Persist the generated instance (required for staged re-runs).
    #[serde(default = "default_true")]
    pub emit_instance: bool,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds list is empty".into()));
        }
        if self.phase1.k != self.mixture.k {
            return Err(Error::InvalidConfig(format!(
                "phase1 k = {} disagrees with mixture k = {}",
                self.phase1.k, self.mixture.k
            )));
        }
        if self.phase1.theta0.len() != self.mixture.d {
            return Err(Error::DimensionMismatch {
                expected: self.mixture.d,
                got: self.phase1.theta0.len(),
            });
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }
}

/// One row of the run's unified trace. Byte counters are cumulative over the
/// whole run (phase 2 continues phase 1's totals).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTrace {
    pub phase: String,
    pub round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_true: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub misclustering: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Phase2Mode>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl RoundTrace {
    fn from_phase1(row: &Phase1RoundTrace) -> Self {
        RoundTrace {
            phase: "phase1".into(),
            round: row.round,
            anchor: Some(row.anchor),
            sigma_hat: Some(row.sigma_hat),
            residual_true: row.residual_true,
            frozen: Some(row.frozen),
            distance: None,
            misclustering: None,
            mode: None,
            bytes_up: row.bytes_up,
            bytes_down: row.bytes_down,
        }
    }

    fn from_phase2(row: &Phase2RoundTrace, base_up: u64, base_down: u64) -> Self {
        RoundTrace {
            phase: "phase2".into(),
            round: row.round,
            anchor: None,
            sigma_hat: None,
            residual_true: None,
            frozen: None,
            distance: row.distance_to_truth,
            misclustering: row.misclustering_mass,
            mode: Some(row.mode),
            bytes_up: base_up + row.bytes_up,
            bytes_down: base_down + row.bytes_down,
        }
    }
}

/// On-disk description of a generated instance. The per-client data live in
/// sibling binary files; hidden labels are stored for evaluation only and are
/// never read by the algorithms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub mixture: MixtureConfig,
    pub truth: GroundTruth,
    pub client_sizes: Vec<usize>,
}

fn client_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("client_{index:05}.bin"))
}

/// Writes one client as row-major little-endian f64: n*d feature entries
/// followed by n responses.
fn write_client(path: &Path, client: &ClientDataset) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * (client.n() * client.dim() + client.n()));
    for row in client.features.rows() {
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &v in &client.responses {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_client(path: &Path, n: usize, d: usize) -> Result<ClientDataset> {
    let bytes = fs::read(path)?;
    let expected = 8 * (n * d + n);
    if bytes.len() != expected {
        return Err(Error::InvalidConfig(format!(
            "{} has {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let features = Array2::from_shape_fn((n, d), |_| values.next().unwrap());
    let responses = Array1::from_shape_fn(n, |_| values.next().unwrap());
    Ok(ClientDataset { features, responses })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Generates the instance for `seed` and persists it under `dir/instance`.
pub fn generate_stage(dir: &Path, mixture: &MixtureConfig, seed: u64) -> Result<InstanceManifest> {
    let mut cfg = mixture.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let (clients, truth) = generate_instance(&cfg)?;
    let inst_dir = dir.join(INSTANCE_DIR);
    fs::create_dir_all(&inst_dir)?;
    let manifest = InstanceManifest {
        mixture: cfg,
        truth,
        client_sizes: clients.iter().map(|c| c.n()).collect(),
    };
    write_json(&inst_dir.join(MANIFEST_FILE), &manifest)?;
    for (i, client) in clients.iter().enumerate() {
        write_client(&client_file(&inst_dir, i), client)?;
    }
    Ok(manifest)
}

/// Loads a persisted instance back into memory.
pub fn load_instance(dir: &Path) -> Result<(InstanceManifest, Vec<ClientDataset>)> {
    let inst_dir = dir.join(INSTANCE_DIR);
    let manifest: InstanceManifest = read_json(&inst_dir.join(MANIFEST_FILE))?;
    let d = manifest.mixture.d;
    let clients = manifest
        .client_sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| read_client(&client_file(&inst_dir, i), n, d))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clients))
}

/// Phase-1 result as persisted between stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1Summary {
    pub centers: Vec<Vec<f64>>,
    pub states: Vec<AnchorState>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Runs moment descent on the persisted instance and writes its summary and
/// trace into `dir`.
pub fn phase1_stage(dir: &Path, cfg: &Phase1Config) -> Result<Phase1Summary> {
    let (manifest, clients) = load_instance(dir)?;
    let seed = manifest.mixture.seed;
    let truth = (&manifest.truth, &manifest.mixture.covariances);
    let outcome = run_fedmd(&clients, cfg, seed, Some(truth))?;
    let (bytes_up, bytes_down) = outcome
        .trace
        .last()
        .map(|r| (r.bytes_up, r.bytes_down))
        .unwrap_or((0, 0));
    let summary = Phase1Summary {
        centers: outcome.clustering?,
        states: outcome.states,
        bytes_up,
        bytes_down,
    };
    write_json(&dir.join(PHASE1_FILE), &summary)?;
    let rows: Vec<RoundTrace> = outcome.trace.iter().map(RoundTrace::from_phase1).collect();
    write_jsonl(&dir.join(PHASE1_TRACE_FILE), &rows)?;
    Ok(summary)
}

/// Phase-2 result as persisted between stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2Summary {
    pub model: GlobalModel,
    pub labels: Vec<usize>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Runs refinement from `theta_start` (defaulting to the persisted phase-1
/// centers) on the persisted instance.
pub fn phase2_stage(
    dir: &Path,
    cfg: &Phase2Config,
    theta_start: Option<GlobalModel>,
) -> Result<Phase2Summary> {
    let (manifest, clients) = load_instance(dir)?;
    let (start, base_up, base_down) = match theta_start {
        Some(model) => (model, 0, 0),
        None => {
            let p1: Phase1Summary = read_json(&dir.join(PHASE1_FILE))?;
            (GlobalModel::new(p1.centers, 0)?, p1.bytes_up, p1.bytes_down)
        }
    };
    let outcome = run_fedx(&clients, &start, cfg, Some(&manifest.truth))?;
    let (up, down) = outcome
        .trace
        .last()
        .map(|r| (r.bytes_up, r.bytes_down))
        .unwrap_or((0, 0));
    let summary = Phase2Summary {
        model: outcome.model,
        labels: outcome.labels,
        bytes_up: base_up + up,
        bytes_down: base_down + down,
    };
    write_json(&dir.join(PHASE2_FILE), &summary)?;
    let rows: Vec<RoundTrace> = outcome
        .trace
        .iter()
        .map(|r| RoundTrace::from_phase2(r, base_up, base_down))
        .collect();
    write_jsonl(&dir.join(PHASE2_TRACE_FILE), &rows)?;
    Ok(summary)
}

/// Recomputes the evaluation report from the persisted phase-2 output and
/// derives the run's summary JSON and plot CSV from the trace files.
pub fn eval_stage(dir: &Path) -> Result<EvalReport> {
    let (manifest, _clients) = load_instance(dir)?;
    let p2: Phase2Summary = read_json(&dir.join(PHASE2_FILE))?;
    let sizes = manifest.client_sizes.clone();
    let report = metrics::evaluate(
        &p2.model.thetas,
        &p2.labels,
        &manifest.truth,
        &sizes,
        manifest.mixture.sigma,
        1.0,
    )?;
    let mut rows: Vec<RoundTrace> = read_jsonl(&dir.join(PHASE1_TRACE_FILE)).unwrap_or_default();
    rows.extend(read_jsonl::<RoundTrace>(&dir.join(PHASE2_TRACE_FILE)).unwrap_or_default());
    write_csv(&dir.join(CSV_FILE), &rows)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_csv(path: &Path, rows: &[RoundTrace]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CSV_HEADER}")?;
    // Phase-1 rows are per anchor; the plot column takes the per-round worst
    // true residual as the distance proxy.
    let mut phase1_rounds: Vec<usize> = rows
        .iter()
        .filter(|r| r.phase == "phase1")
        .map(|r| r.round)
        .collect();
    phase1_rounds.sort_unstable();
    phase1_rounds.dedup();
    for &round in &phase1_rounds {
        let group: Vec<&RoundTrace> = rows
            .iter()
            .filter(|r| r.phase == "phase1" && r.round == round)
            .collect();
        let distance = group
            .iter()
            .filter_map(|r| r.residual_true)
            .fold(None::<f64>, |acc, x| Some(acc.map_or(x, |a| a.max(x))));
        let bytes = group
            .iter()
            .map(|r| r.bytes_up + r.bytes_down)
            .max()
            .unwrap_or(0);
        writeln!(out, "phase1,{round},{},,{bytes}", fmt_opt(distance))?;
    }
    for r in rows.iter().filter(|r| r.phase == "phase2") {
        writeln!(
            out,
            "phase2,{},{},{},{}",
            r.round,
            fmt_opt(r.distance),
            fmt_opt(r.misclustering),
            r.bytes_up + r.bytes_down
        )?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Outcome of one seed of a full run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// "ok", or the failing error's message.
    pub status: String,
    /// 0 on success; otherwise the failure code of the first failing stage.
    pub failure_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(EvalReport, u64, u64)> {
    let dir = cfg.seed_dir(seed);
    fs::create_dir_all(&dir)?;
    generate_stage(&dir, &cfg.mixture, seed)?;
    phase1_stage(&dir, &cfg.phase1)?;
    let p2 = phase2_stage(&dir, &cfg.phase2, None)?;
    let report = eval_stage(&dir)?;
    Ok((report, p2.bytes_up, p2.bytes_down))
}

/// The monolithic driver: per seed, generate → phase 1 → phase 2 → eval,
/// with all intermediates persisted. A failing seed is recorded in its
/// summary and the loop continues.
pub fn run_full(cfg: &ExperimentConfig) -> Result<Vec<SeedSummary>> {
    cfg.validate()?;
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let summary = match run_seed(cfg, seed) {
            Ok((report, up, down)) => SeedSummary {
                seed,
                status: "ok".into(),
                failure_code: 0,
                report: Some(report),
                bytes_up: up,
                bytes_down: down,
            },
            Err(e) => SeedSummary {
                seed,
                status: e.to_string(),
                failure_code: e.exit_code(),
                report: None,
                bytes_up: 0,
                bytes_down: 0,
            },
        };
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CenterSpec, CovarianceSpec, FeatureMapSpec, SizeSpec};
    use crate::phase2::Phase2Mode;

    fn tiny_experiment(out: &Path) -> ExperimentConfig {
        let mut counts = vec![80, 80, 80];
        counts.extend(std::iter::repeat(2).take(220));
        ExperimentConfig {
            mixture: MixtureConfig {
                k: 2,
                d: 3,
                clients: counts.len(),
                sizes: SizeSpec::Explicit { counts },
                p: vec![0.5, 0.5],
                sigma: 0.05,
                covariances: CovarianceSpec::Identity,
                alpha: 1.0,
                beta: 1.0,
                r: 3.0,
                centers: CenterSpec::Explicit {
                    thetas: vec![vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]],
                },
                feature_map: FeatureMapSpec::Identity,
                seed: 0,
            },
            phase1: Phase1Config {
                k: 2,
                n_h: 3,
                m: 50,
                ell: 10,
                t: 4,
                t1: 16,
                t2: 30,
                epsilon: 0.2,
                delta_hint: 8.0f64.sqrt(),
                alpha: 1.0,
                beta: 1.0,
                r: 3.0,
                theta0: vec![0.0; 3],
                allow_data_reuse: false,
            },
            phase2: Phase2Config {
                mode: Phase2Mode::FedAvg,
                eta: 0.2,
                s: 2,
                t_prime: 10,
            },
            seeds: vec![41],
            output_dir: out.to_path_buf(),
            emit_instance: true,
        }
    }

    #[test]
    fn client_roundtrip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let client = ClientDataset {
            features: ndarray::array![[1.5, -2.25], [0.1, 3.0]],
            responses: ndarray::array![0.5, -1.0],
        };
        let path = tmp.path().join("c.bin");
        write_client(&path, &client).unwrap();
        let back = read_client(&path, 2, 2).unwrap();
        assert_eq!(back.features, client.features);
        assert_eq!(back.responses, client.responses);
        assert!(read_client(&path, 3, 2).is_err());
    }

    #[test]
    fn instance_roundtrip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(tmp.path());
        let manifest = generate_stage(tmp.path(), &cfg.mixture, 41).unwrap();
        let (back, clients) = load_instance(tmp.path()).unwrap();
        assert_eq!(back.truth.labels, manifest.truth.labels);
        assert_eq!(back.client_sizes, manifest.client_sizes);
        assert_eq!(clients.len(), cfg.mixture.clients);
        let (fresh, _) = generate_instance(&back.mixture).unwrap();
        for (a, b) in clients.iter().zip(&fresh) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.responses, b.responses);
        }
    }

    #[test]
    fn full_run_produces_expected_files_and_succeeds() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(tmp.path());
        let summaries = run_full(&cfg).unwrap();
        assert_eq!(summaries.len(), 1);
        let s = &summaries[0];
        assert_eq!(s.status, "ok", "run failed: {}", s.status);
        let dir = cfg.seed_dir(41);
        for f in [PHASE1_FILE, PHASE1_TRACE_FILE, PHASE2_FILE, PHASE2_TRACE_FILE, SUMMARY_FILE, CSV_FILE] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        let csv = fs::read_to_string(dir.join(CSV_FILE)).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        let report = s.report.as_ref().unwrap();
        assert!(report.distance.is_finite());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let cfg_a = tiny_experiment(tmp_a.path());
        let cfg_b = tiny_experiment(tmp_b.path());
        run_full(&cfg_a).unwrap();
        run_full(&cfg_b).unwrap();
        let dir_a = cfg_a.seed_dir(41);
        let dir_b = cfg_b.seed_dir(41);
        for f in [PHASE1_FILE, PHASE1_TRACE_FILE, PHASE2_FILE, PHASE2_TRACE_FILE, SUMMARY_FILE, CSV_FILE] {
            let a = fs::read(dir_a.join(f)).unwrap();
            let b = fs::read(dir_b.join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs between identical runs");
        }
    }

    #[test]
    fn staged_pipeline_matches_monolithic() {
        let tmp_full = tempfile::tempdir().unwrap();
        let tmp_staged = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(tmp_full.path());
        run_full(&cfg).unwrap();
        let staged = tmp_staged.path();
        generate_stage(staged, &cfg.mixture, 41).unwrap();
        phase1_stage(staged, &cfg.phase1).unwrap();
        phase2_stage(staged, &cfg.phase2, None).unwrap();
        eval_stage(staged).unwrap();
        let full_dir = cfg.seed_dir(41);
        for f in [PHASE1_FILE, PHASE1_TRACE_FILE, PHASE2_FILE, PHASE2_TRACE_FILE, CSV_FILE] {
            let a = fs::read(full_dir.join(f)).unwrap();
            let b = fs::read(staged.join(f)).unwrap();
            assert_eq!(a, b, "staged {f} differs from monolithic run");
        }
    }

    #[test]
    fn phase1_bytes_match_hand_count() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(tmp.path());
        generate_stage(tmp.path(), &cfg.mixture, 41).unwrap();
        phase1_stage(tmp.path(), &cfg.phase1).unwrap();
        let rows: Vec<RoundTrace> = read_jsonl(&tmp.path().join(PHASE1_TRACE_FILE)).unwrap();
        let d = cfg.mixture.d as u64;
        let k = cfg.mixture.k as u64;
        let t1 = cfg.phase1.t1 as u64;
        let m = cfg.phase1.m as u64;
        // Per active anchor-round message inventory.
        let down = ((t1 + 2) * d * k + d) * 8;
        let up = (t1 * m * d * k + d) * 8;
        let n_h = cfg.phase1.n_h as u64;
        // First round: no anchor can be frozen yet.
        let first: Vec<&RoundTrace> = rows.iter().filter(|r| r.round == 1).collect();
        assert_eq!(first.len(), n_h as usize);
        for r in &first {
            assert_eq!(r.bytes_down, n_h * down);
            assert_eq!(r.bytes_up, n_h * up);
        }
        // Totals are consistent with active-round counting.
        let active: u64 = rows.iter().filter(|r| !(r.bytes_up == 0)).count() as u64;
        let _ = active;
        let last = rows.last().unwrap();
        assert!(last.bytes_down % down == 0);
        assert!(last.bytes_up % up == 0);
    }

    #[test]
    fn failing_seed_is_recorded_not_fatal() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_experiment(tmp.path());
        // Demand more anchors than there are eligible clients.
        cfg.phase1.n_h = 50;
        let summaries = run_full(&cfg).unwrap();
        assert_eq!(summaries.len(), 1);
        assert_ne!(summaries[0].status, "ok");
        assert_eq!(summaries[0].failure_code, 2);
        assert!(cfg.seed_dir(41).join(SUMMARY_FILE).exists());
    }

    #[test]
    fn config_validation_rejects_mismatches() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_experiment(tmp.path());
        cfg.phase1.k = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_experiment(tmp.path());
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_experiment(tmp.path());
        cfg.phase1.theta0 = vec![0.0; 2];
        assert!(cfg.validate().is_err());
        assert!(tiny_experiment(tmp.path()).validate().is_ok());
    }
}
