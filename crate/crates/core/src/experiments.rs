//! Experiment runner: configuration, end-to-end runs, parameter sweeps and
//! partition manifests.
//!
//! All randomness in a run derives from `RunConfig::seed` through
//! [`derive_seed`] with one stream per consumer (see [`streams`]).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{argmax_rows, accuracy, ClientError, ClientHyper, LocalClient, PersonalModel};
use crate::data::{
    class_histogram, dirichlet_partition, label_entropy, split_train_test_lenient, synthetic_clusters, DataError,
    LabeledDataset, Partition, PartitionSpec, SyntheticSpec, DEFAULT_MAX_RETRIES, DEFAULT_MIN_SAMPLES,
};
use crate::features::{derive_seed, ActivationKind, FeatureError, FeatureExtractor};
use crate::formats::{load_labels, load_matrix, FormatError};
use crate::linalg::{LinalgError, Matrix};
use crate::protocol::{MessageKind, ProtocolConfig, TransportStats, PROTOCOL_VERSION};
use crate::transport::{run_round, ClientNode, RoundError, RoundOutcome, ServerNode, SimulatedTransport, SocketTransport};

/// Stream ids fed to [`derive_seed`] together with the master seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const HEAD_P: u64 = 3;
    pub const HEAD_R: u64 = 4;
    pub const BACKBONE: u64 = 5;
    /// Per-client train/test split; the client id is mixed in afterwards.
    pub const SPLIT: u64 = 6;
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown sweep parameter {0:?}")]
    UnknownParam(String),
    #[error("bad value {value:?} for {param}: {reason}")]
    BadValue {
        param: String,
        value: String,
        reason: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("plotting failed: {0}")]
    Plot(String),
}

fn default_classes() -> usize {
    10
}
fn default_input_dim() -> usize {
    64
}
fn default_samples() -> usize {
    5000
}
fn default_separation() -> f64 {
    0.35
}
fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Precomputed embeddings in the binary matrix/label formats.
    Files { features: PathBuf, labels: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: default_classes(),
            input_dim: default_input_dim(),
            samples: default_samples(),
            separation: default_separation(),
            noise: default_noise(),
        }
    }
}

fn default_clients() -> usize {
    8
}
fn default_alpha() -> f64 {
    0.1
}
fn default_min_samples() -> usize {
    DEFAULT_MIN_SAMPLES
}
fn default_max_retries() -> usize {
    DEFAULT_MAX_RETRIES
}

/// Dirichlet partition settings; the seed comes from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_client: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: default_clients(),
            alpha: default_alpha(),
            min_samples_per_client: default_min_samples(),
            max_retries: default_max_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    #[default]
    Identity,
    FrozenRandomLinear { output_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Simulated,
    Socket,
}

fn default_d_p() -> usize {
    512
}
fn default_d_r() -> usize {
    256
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_timeout_secs() -> f64 {
    30.0
}

/// Everything a run depends on. Serialized field names are the JSON
/// config keys; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub hyper: ClientHyper,
    #[serde(default = "default_d_p")]
    pub d_p: usize,
    #[serde(default = "default_d_r")]
    pub d_r: usize,
    #[serde(default)]
    pub act_p: ActivationKind,
    #[serde(default)]
    pub act_r: ActivationKind,
    #[serde(default)]
    pub append_bias: bool,
    #[serde(default)]
    pub per_client_refine_head: bool,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Share of each client's shard held out as its local test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Master seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            hyper: ClientHyper::default(),
            d_p: default_d_p(),
            d_r: default_d_r(),
            act_p: ActivationKind::default(),
            act_r: ActivationKind::default(),
            append_bias: false,
            per_client_refine_head: false,
            backbone: BackboneConfig::default(),
            test_fraction: default_test_fraction(),
            seed: 0,
            transport: TransportKind::default(),
            timeout_secs: default_timeout_secs(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.hyper.validate()?;
        if self.d_p == 0 || self.d_r == 0 {
            return Err(ExperimentError::Config("d_p and d_r must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ExperimentError::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ExperimentError::Config("timeout_secs must be positive".into()));
        }
        if let BackboneConfig::FrozenRandomLinear { output_dim: 0 } = self.backbone {
            return Err(ExperimentError::Config("backbone output_dim must be at least 1".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                input_dim,
                samples,
                ..
            } => {
                if *num_classes == 0 || *input_dim == 0 || *samples == 0 {
                    return Err(ExperimentError::Config(
                        "synthetic dataset needs positive num_classes, input_dim and samples".into(),
                    ));
                }
            }
            DatasetConfig::Files { features, labels } => {
                for p in [features, labels] {
                    if !p.is_file() {
                        return Err(ExperimentError::Config(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        self.partition_spec().validate()?;
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.partition.num_clients,
            alpha: self.partition.alpha,
            seed: derive_seed(self.seed, streams::PARTITION),
            min_samples_per_client: self.partition.min_samples_per_client,
            max_retries: self.partition.max_retries,
        }
    }

    fn split_seed(&self, client: usize) -> u64 {
        derive_seed(derive_seed(self.seed, streams::SPLIT), client as u64)
    }

    pub fn protocol_config(&self, num_classes: usize) -> ProtocolConfig {
        ProtocolConfig {
            version: PROTOCOL_VERSION,
            gamma: self.hyper.gamma,
            beta: self.hyper.beta,
            lambda: self.hyper.lambda,
            d_p: self.d_p as u32,
            d_r: self.d_r as u32,
            seed_p: derive_seed(self.seed, streams::HEAD_P),
            seed_r: derive_seed(self.seed, streams::HEAD_R),
            act_p: self.act_p,
            act_r: self.act_r,
            num_classes: num_classes as u32,
            num_clients: self.partition.num_clients as u32,
            append_bias: self.append_bias,
            per_client_refine_head: self.per_client_refine_head,
        }
    }
}

/// Loads or generates the dataset and maps it through the backbone.
pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset<f64>, ExperimentError> {
    let raw = match &cfg.dataset {
        DatasetConfig::Synthetic {
            num_classes,
            input_dim,
            samples,
            separation,
            noise,
        } => synthetic_clusters(&SyntheticSpec {
            num_classes: *num_classes,
            input_dim: *input_dim,
            samples: *samples,
            separation: *separation,
            noise: *noise,
            seed: derive_seed(cfg.seed, streams::DATA),
        })?,
        DatasetConfig::Files { features, labels } => {
            let x = load_matrix(features)?;
            let (y, classes) = load_labels(labels)?;
            LabeledDataset::new(x, y, classes)?
        }
    };
    match cfg.backbone {
        BackboneConfig::Identity => Ok(raw),
        BackboneConfig::FrozenRandomLinear { output_dim } => {
            let seed = derive_seed(cfg.seed, streams::BACKBONE);
            let backbone = FeatureExtractor::frozen_random_linear(seed, raw.dim(), output_dim)?;
            let x = backbone.extract(raw.features())?;
            Ok(raw.with_features(x)?)
        }
    }
}

/// Partitioned, split and ready-to-train clients for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub server: ServerNode,
    pub clients: Vec<ClientNode>,
    pub tests: Vec<LabeledDataset<f64>>,
    pub partition: Partition,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let partition = dirichlet_partition(&ds, &cfg.partition_spec())?;
    let mut clients = Vec::with_capacity(partition.num_clients());
    let mut tests = Vec::with_capacity(partition.num_clients());
    for (k, idx) in partition.clients.iter().enumerate() {
        let shard = ds.subset(idx)?;
        let split = split_train_test_lenient(&shard, 1.0 - cfg.test_fraction, cfg.split_seed(k))?;
        clients.push(ClientNode::new(LocalClient::new(k as u32, shard.subset(&split.train)?)));
        tests.push(shard.subset(&split.test)?);
    }
    let server = ServerNode::new(cfg.protocol_config(ds.num_classes()))
        .with_timeout(std::time::Duration::from_secs_f64(cfg.timeout_secs));
    Ok(Prepared {
        server,
        clients,
        tests,
        partition,
    })
}

pub fn train(cfg: &RunConfig, prepared: &Prepared) -> Result<RoundOutcome, ExperimentError> {
    let out = match cfg.transport {
        TransportKind::Simulated => run_round(&prepared.server, &prepared.clients, &SimulatedTransport::new())?,
        TransportKind::Socket => run_round(&prepared.server, &prepared.clients, &SocketTransport::new())?,
    };
    Ok(out)
}

/// Primary-only and refinement scores on one test set; blends for any λ
/// reuse them.
struct Scores {
    primary: Matrix<f64>,
    refine: Matrix<f64>,
}

impl Scores {
    fn compute(model: &PersonalModel<f64>, test: &LabeledDataset<f64>) -> Result<Self, ExperimentError> {
        let primary = model.primary_head().activate(test.features())?.matmul(model.g_global())?;
        let refine = model.refine_head().activate(test.features())?.matmul(model.p_refine())?;
        Ok(Self { primary, refine })
    }

    /// Same arithmetic as [`PersonalModel::predict`].
    fn accuracy(&self, lambda: f64, truth: &[usize]) -> f64 {
        if lambda == 0.0 {
            return accuracy(&argmax_rows(&self.primary), truth);
        }
        let mut blended = self.primary.clone();
        blended
            .add_assign(&self.refine.scale(lambda))
            .expect("score matrices share a shape");
        accuracy(&argmax_rows(&blended), truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: u32,
    pub n_train: usize,
    pub n_test: usize,
    /// `None` when the client has no held-out samples.
    pub dual_accuracy: Option<f64>,
    pub primary_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub prepare_secs: f64,
    pub round_secs: f64,
    pub evaluate_secs: f64,
}

/// Means are over clients with a non-empty test set. `*_mean_accuracy` is
/// client-uniform; `*_weighted_accuracy` weights by test-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub clients: Vec<ClientResult>,
    pub mean_accuracy: f64,
    pub weighted_accuracy: f64,
    pub primary_mean_accuracy: f64,
    pub primary_weighted_accuracy: f64,
    pub stats: TransportStats,
    pub timings: PhaseTimings,
}

impl RunReport {
    pub fn per_client_dual(&self) -> Vec<f64> {
        self.clients.iter().filter_map(|c| c.dual_accuracy).collect()
    }

    pub fn upload_bytes(&self) -> u64 {
        self.stats.received_bytes(MessageKind::Upload)
    }
}

fn means(values: &[(f64, usize)]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let uniform = values.iter().map(|v| v.0).sum::<f64>() / values.len() as f64;
    let total: usize = values.iter().map(|v| v.1).sum();
    let weighted = values.iter().map(|v| v.0 * v.1 as f64).sum::<f64>() / total as f64;
    (uniform, weighted)
}

/// Evaluates every client at each λ in `lambdas`, then reports the one at
/// `lambdas[i]` for each i. Primary accuracy is λ = 0.
fn evaluate(
    prepared: &Prepared,
    outcome: &RoundOutcome,
    lambdas: &[f64],
) -> Result<Vec<Vec<ClientResult>>, ExperimentError> {
    let per_client: Vec<(Vec<Option<f64>>, Option<f64>)> = prepared
        .clients
        .par_iter()
        .zip(prepared.tests.par_iter())
        .map(|(node, test)| {
            if test.is_empty() {
                return Ok((vec![None; lambdas.len()], None));
            }
            let model = &outcome.models[&node.id()];
            let scores = Scores::compute(model, test)?;
            let dual = lambdas.iter().map(|&l| Some(scores.accuracy(l, test.labels()))).collect();
            Ok((dual, Some(scores.accuracy(0.0, test.labels()))))
        })
        .collect::<Result<_, ExperimentError>>()?;
    Ok((0..lambdas.len())
        .map(|li| {
            prepared
                .clients
                .iter()
                .zip(&prepared.tests)
                .zip(&per_client)
                .map(|((node, test), (dual, primary))| ClientResult {
                    client_id: node.id(),
                    n_train: node.client.train.len(),
                    n_test: test.len(),
                    dual_accuracy: dual[li],
                    primary_accuracy: *primary,
                })
                .collect()
        })
        .collect())
}

fn assemble(cfg: &RunConfig, clients: Vec<ClientResult>, stats: TransportStats, timings: PhaseTimings) -> RunReport {
    let dual: Vec<(f64, usize)> = clients
        .iter()
        .filter_map(|c| c.dual_accuracy.map(|a| (a, c.n_test)))
        .collect();
    let primary: Vec<(f64, usize)> = clients
        .iter()
        .filter_map(|c| c.primary_accuracy.map(|a| (a, c.n_test)))
        .collect();
    let (mean_accuracy, weighted_accuracy) = means(&dual);
    let (primary_mean_accuracy, primary_weighted_accuracy) = means(&primary);
    RunReport {
        config: cfg.clone(),
        clients,
        mean_accuracy,
        weighted_accuracy,
        primary_mean_accuracy,
        primary_weighted_accuracy,
        stats,
        timings,
    }
}

/// Runs one experiment: partition, one-shot round, local refinement and
/// evaluation at the configured λ and at λ = 0. Writes `report.json` and
/// `accuracy.csv` when `output_dir` is set.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport, ExperimentError> {
    let mut reports = run_lambdas(cfg, &[cfg.hyper.lambda])?;
    let report = reports.pop().expect("one lambda");
    if let Some(dir) = &cfg.output_dir {
        write_run_outputs(&report, dir)?;
    }
    Ok(report)
}

/// One training round evaluated at several blend weights; λ only enters at
/// inference, so each report equals a separate run at that λ.
pub fn run_lambdas(cfg: &RunConfig, lambdas: &[f64]) -> Result<Vec<RunReport>, ExperimentError> {
    let t0 = Instant::now();
    let prepared = prepare(cfg)?;
    let t1 = Instant::now();
    let outcome = train(cfg, &prepared)?;
    let t2 = Instant::now();
    let results = evaluate(&prepared, &outcome, lambdas)?;
    let timings = PhaseTimings {
        prepare_secs: (t1 - t0).as_secs_f64(),
        round_secs: (t2 - t1).as_secs_f64(),
        evaluate_secs: t2.elapsed().as_secs_f64(),
    };
    Ok(results
        .into_iter()
        .zip(lambdas)
        .map(|(clients, &lambda)| {
            let mut c = cfg.clone();
            c.hyper.lambda = lambda;
            assemble(&c, clients, outcome.stats.clone(), timings)
        })
        .collect())
}

pub fn write_run_outputs(report: &RunReport, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut csv = String::from("client_id,n_train,n_test,dual_accuracy,primary_accuracy\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |a| a.to_string());
    for c in &report.clients {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.client_id,
            c.n_train,
            c.n_test,
            fmt(c.dual_accuracy),
            fmt(c.primary_accuracy)
        ));
    }
    fs::write(dir.join("accuracy.csv"), csv)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Gamma,
    Beta,
    DP,
    DR,
    ActP,
    ActR,
    Alpha,
}

impl SweepParam {
    pub const ALL: [SweepParam; 8] = [
        SweepParam::Lambda,
        SweepParam::Gamma,
        SweepParam::Beta,
        SweepParam::DP,
        SweepParam::DR,
        SweepParam::ActP,
        SweepParam::ActR,
        SweepParam::Alpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
            SweepParam::Beta => "beta",
            SweepParam::DP => "d_p",
            SweepParam::DR => "d_r",
            SweepParam::ActP => "act_p",
            SweepParam::ActR => "act_r",
            SweepParam::Alpha => "alpha",
        }
    }

    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig, ExperimentError> {
        let bad = |reason: String| ExperimentError::BadValue {
            param: self.name().into(),
            value: value.into(),
            reason,
        };
        let float = || value.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let int = || value.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        let act = || ActivationKind::from_str(value.trim()).map_err(|e| bad(e.to_string()));
        let mut cfg = base.clone();
        match self {
            SweepParam::Lambda => cfg.hyper.lambda = float()?,
            SweepParam::Gamma => cfg.hyper.gamma = float()?,
            SweepParam::Beta => cfg.hyper.beta = float()?,
            SweepParam::DP => cfg.d_p = int()?,
            SweepParam::DR => cfg.d_r = int()?,
            SweepParam::ActP => cfg.act_p = act()?,
            SweepParam::ActR => cfg.act_r = act()?,
            SweepParam::Alpha => cfg.partition.alpha = float()?,
        }
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == norm || p.name().replace('_', "") == norm)
            .ok_or_else(|| ExperimentError::UnknownParam(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},dual_mean,dual_weighted,primary_mean,primary_weighted\n",
            self.param.name()
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.value,
                r.report.mean_accuracy,
                r.report.weighted_accuracy,
                r.report.primary_mean_accuracy,
                r.report.primary_weighted_accuracy
            ));
        }
        out
    }

    pub fn metric(&self, pick: impl Fn(&RunReport) -> f64) -> Vec<f64> {
        self.rows.iter().map(|r| pick(&r.report)).collect()
    }
}

/// One run per value with shared seeds. A λ sweep trains once and
/// re-evaluates. Writes `sweep.csv` and one PNG per metric when
/// `output_dir` is set.
pub fn cmd_sweep(base: &RunConfig, param: SweepParam, values: &[String]) -> Result<SweepTable, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| param.apply(base, v))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = if param == SweepParam::Lambda {
        let lambdas: Vec<f64> = configs.iter().map(|c| c.hyper.lambda).collect();
        run_lambdas(base, &lambdas)?
    } else {
        configs.iter().map(cmd_run_quiet).collect::<Result<Vec<_>, _>>()?
    };
    let table = SweepTable {
        param,
        rows: values
            .iter()
            .zip(reports)
            .map(|(v, report)| SweepRow {
                value: v.trim().to_string(),
                report,
            })
            .collect(),
    };
    if let Some(dir) = &base.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), table.to_csv())?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
        let metrics: [(&str, fn(&RunReport) -> f64); 4] = [
            ("dual_mean", |r| r.mean_accuracy),
            ("dual_weighted", |r| r.weighted_accuracy),
            ("primary_mean", |r| r.primary_mean_accuracy),
            ("primary_weighted", |r| r.primary_weighted_accuracy),
        ];
        for (name, pick) in metrics {
            let path = dir.join(format!("sweep_{}_{name}.png", param.name()));
            plot_series(&path, &table.metric(pick))?;
        }
    }
    Ok(table)
}

fn cmd_run_quiet(cfg: &RunConfig) -> Result<RunReport, ExperimentError> {
    let mut cfg = cfg.clone();
    cfg.output_dir = None;
    cmd_run(&cfg)
}

/// Line plot of `ys` against the sweep position. The image carries no text;
/// exact values are in `sweep.csv`.
fn plot_series(path: &Path, ys: &[f64]) -> Result<(), ExperimentError> {
    let plot_err = |e: &dyn std::error::Error| ExperimentError::Plot(e.to_string());
    let root = BitMapBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let x_max = (ys.len().max(2) - 1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(24)
        .build_cartesian_2d(-0.05 * x_max..1.05 * x_max, (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(&e))?;
    for i in 0..ys.len() {
        let x = i as f64;
        chart
            .draw_series(LineSeries::new([(x, lo - pad), (x, hi + pad)], RGBColor(225, 225, 225)))
            .map_err(|e| plot_err(&e))?;
    }
    let points: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
    chart
        .draw_series(LineSeries::new(points.iter().copied(), BLUE.stroke_width(2)))
        .map_err(|e| plot_err(&e))?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientHistogram {
    pub client_id: usize,
    pub counts: Vec<usize>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub partition: Partition,
    pub histograms: Vec<ClientHistogram>,
    pub mean_entropy: f64,
}

/// Partitions the labels of a feature/label file pair and writes the
/// manifest to `out`.
pub fn cmd_partition(
    features: &Path,
    labels: &Path,
    spec: &PartitionSpec,
    out: &Path,
) -> Result<PartitionSummary, ExperimentError> {
    let x = load_matrix(features)?;
    let (y, classes) = load_labels(labels)?;
    let ds = LabeledDataset::new(x, y, classes)?;
    let summary = partition_summary(&ds, spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, summary.partition.to_manifest_json())?;
    Ok(summary)
}

pub fn partition_summary(ds: &LabeledDataset<f64>, spec: &PartitionSpec) -> Result<PartitionSummary, ExperimentError> {
    let partition = dirichlet_partition(ds, spec)?;
    let histograms: Vec<ClientHistogram> = partition
        .clients
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let counts = class_histogram(&labels, ds.num_classes());
            let entropy = label_entropy(&counts);
            ClientHistogram {
                client_id: k,
                counts,
                entropy,
            }
        })
        .collect();
    let mean_entropy = histograms.iter().map(|h| h.entropy).sum::<f64>() / histograms.len() as f64;
    Ok(PartitionSummary {
        partition,
        histograms,
        mean_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            dataset: DatasetConfig::Synthetic {
                num_classes: 4,
                input_dim: 8,
                samples: 400,
                separation: 1.0,
                noise: 1.0,
            },
            partition: PartitionConfig {
                num_clients: 3,
                alpha: 0.5,
                ..PartitionConfig::default()
            },
            d_p: 32,
            d_r: 16,
            seed: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_defaults_from_empty_json() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.d_p, 512);
        assert_eq!(cfg.partition.num_clients, 8);
        assert_eq!(cfg.hyper, ClientHyper::default());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.d_r = 0;
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
        let mut cfg = small();
        cfg.hyper.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.dataset = DatasetConfig::Files {
            features: "/nonexistent/x.bin".into(),
            labels: "/nonexistent/y.bin".into(),
        };
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(m)) if m.contains("does not exist")));
        assert!(RunConfig::from_json(r#"{"d_p": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"backbone": {"kind": "vit"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lamda": 0.5}"#).is_err());
    }

    #[test]
    fn run_is_deterministic_and_consistent() {
        let a = cmd_run(&small()).unwrap();
        let b = cmd_run(&small()).unwrap();
        assert_eq!(a.clients, b.clients);
        assert_eq!(a.stats, b.stats);
        let dual = a.per_client_dual();
        let mean = dual.iter().sum::<f64>() / dual.len() as f64;
        assert_eq!(a.mean_accuracy, mean);
        assert!(dual.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.stats.received_count(MessageKind::Upload), 3);
    }

    #[test]
    fn lambda_zero_equals_primary() {
        let mut cfg = small();
        cfg.hyper.lambda = 0.0;
        let r = cmd_run(&cfg).unwrap();
        for c in &r.clients {
            assert_eq!(c.dual_accuracy, c.primary_accuracy);
        }
        assert_eq!(r.mean_accuracy, r.primary_mean_accuracy);
    }

    #[test]
    fn lambda_reuse_matches_fresh_runs() {
        let lambdas = [0.1, 0.7];
        let shared = run_lambdas(&small(), &lambdas).unwrap();
        for (l, rep) in lambdas.iter().zip(&shared) {
            let mut cfg = small();
            cfg.hyper.lambda = *l;
            assert_eq!(cmd_run(&cfg).unwrap().clients, rep.clients);
        }
    }

    #[test]
    fn sweep_param_parsing() {
        assert_eq!("lambda".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
        assert_eq!("d_p".parse::<SweepParam>().unwrap(), SweepParam::DP);
        assert_eq!("dR".parse::<SweepParam>().unwrap(), SweepParam::DR);
        assert!(matches!("eta".parse::<SweepParam>(), Err(ExperimentError::UnknownParam(_))));
        let cfg = SweepParam::ActR.apply(&small(), "gelu").unwrap();
        assert_eq!(cfg.act_r, ActivationKind::Gelu);
        assert!(SweepParam::DP.apply(&small(), "0").is_err());
        assert!(SweepParam::Gamma.apply(&small(), "x").is_err());
    }

    #[test]
    fn sweep_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let values: Vec<String> = ["16", "32"].iter().map(|s| s.to_string()).collect();
        let table = cmd_sweep(&cfg, SweepParam::DR, &values).unwrap();
        assert_eq!(table.rows.len(), 2);
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("d_r,"));
        let png = fs::read(dir.path().join("sweep_d_r_dual_mean.png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn run_writes_report_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.output_dir = Some(dir.path().join("out"));
        let r = cmd_run(&cfg).unwrap();
        let back: RunReport = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
        assert_eq!(back.clients, r.clients);
        let csv = fs::read_to_string(dir.path().join("out/accuracy.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}
