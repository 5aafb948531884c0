//! Randomized checks of the fusion and refinement guarantees, run by
//! `apfl verify`.
//!
//! Every instance is generated from `derive_seed(seed, suite·1000 + i)`, so
//! a reported instance seed reproduces the failing case on its own.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::client::{compute_local_primary, compute_refinement, ClientError, LocalKnowledge};
use crate::data::{dirichlet_partition, one_hot, LabeledDataset, PartitionSpec};
use crate::features::{derive_seed, make_head, ActivationKind};
use crate::linalg::Matrix;
use crate::server::{centralized_oracle, init_fusion, Correction, ServerError};

pub const FUSION_TOL: f64 = 1e-8;
pub const STATIONARITY_TOL: f64 = 1e-10;

const CLIENT_COUNTS: [usize; 4] = [2, 5, 8, 16];
const HEAD_DIMS: [usize; 2] = [16, 64];
const CLASSES: usize = 10;
const INPUT_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Finalize without the `(K−1)γ` correction; the equivalence suite
    /// must then fail.
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub tolerance: f64,
    pub max_error: f64,
    /// Seed of the instance with the largest error.
    pub worst_seed: u64,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    /// Seed to report on failure.
    pub fn failing_seed(&self) -> Option<u64> {
        (!self.passed).then_some(self.worst_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Primary features and one-hot targets of one client.
#[derive(Debug, Clone)]
pub struct Shard {
    pub phi: Matrix<f64>,
    pub y: Matrix<f64>,
}

/// A random federated regression problem: `k` clients with ReLU random
/// features of width `d` over Gaussian inputs, `c` classes.
#[derive(Debug, Clone)]
pub struct FusionInstance {
    pub seed: u64,
    pub gamma: f64,
    pub shards: Vec<Shard>,
}

impl FusionInstance {
    /// `n_total` rows split at random cut points into `k` non-empty shards.
    pub fn generate(seed: u64, k: usize, d: usize, c: usize, n_total: usize) -> Self {
        assert!(n_total >= k, "need at least one row per client");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = log_uniform(&mut rng, 1e-2, 1.0);
        let head = make_head::<f64>(derive_seed(seed, 1), INPUT_DIM, d, ActivationKind::Relu).expect("positive dims");
        let mut cuts: Vec<usize> = (1..n_total).collect();
        cuts.shuffle(&mut rng);
        let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(n_total);
        let shards = cuts
            .windows(2)
            .map(|w| {
                let n = w[1] - w[0];
                let x = normal_matrix(&mut rng, n, INPUT_DIM);
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
                Shard {
                    phi: head.activate(&x).expect("input width matches"),
                    y: one_hot(&labels, c).expect("labels in range").into_matrix(),
                }
            })
            .collect();
        Self { seed, gamma, shards }
    }

    pub fn uploads(&self) -> Result<Vec<LocalKnowledge<f64>>, ClientError> {
        self.shards
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let y = one_hot_from_matrix(&s.y);
                compute_local_primary(i as u32, &s.phi, &y, self.gamma)
            })
            .collect()
    }

    pub fn pooled(&self) -> (Matrix<f64>, Matrix<f64>) {
        let phis: Vec<&Matrix<f64>> = self.shards.iter().map(|s| &s.phi).collect();
        let ys: Vec<&Matrix<f64>> = self.shards.iter().map(|s| &s.y).collect();
        (
            Matrix::vstack(&phis).expect("equal widths"),
            Matrix::vstack(&ys).expect("equal widths"),
        )
    }
}

fn one_hot_from_matrix(y: &Matrix<f64>) -> crate::data::OneHotLabels<f64> {
    crate::data::OneHotLabels(y.clone())
}

/// Fuses `uploads` in the order given by `order` and finalizes.
pub fn fuse_in_order(
    uploads: &[LocalKnowledge<f64>],
    order: &[usize],
    gamma: f64,
    correction: Correction,
) -> Result<Matrix<f64>, ServerError> {
    let mut state = init_fusion(&uploads[order[0]], gamma)?;
    for &i in &order[1..] {
        state.fuse(&uploads[i])?;
    }
    state.finalize_with(uploads.len(), correction)
}

fn instance_seed(base: u64, suite: u64, i: usize) -> u64 {
    derive_seed(base, suite * 1000 + i as u64)
}

fn instance_shape(i: usize) -> (usize, usize) {
    (CLIENT_COUNTS[i % 4], HEAD_DIMS[(i / 4) % 2])
}

struct Tracker {
    max_error: f64,
    worst_seed: Option<u64>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            max_error: 0.0,
            worst_seed: None,
        }
    }

    fn record(&mut self, seed: u64, err: f64) {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if self.worst_seed.is_none() || err > self.max_error {
            self.max_error = err;
            self.worst_seed = Some(seed);
        }
    }

    fn finish(self, name: &str, instances: usize, tolerance: f64, started: Instant) -> SuiteReport {
        SuiteReport {
            name: name.into(),
            instances,
            tolerance,
            max_error: self.max_error,
            worst_seed: self.worst_seed.unwrap_or_default(),
            passed: self.max_error <= tolerance,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn rel(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.rel_error(b).unwrap_or(f64::INFINITY)
}

/// Fused-then-finalized stream against pooled ridge regression.
pub fn suite_equivalence(base: u64, instances: usize, correction: Correction) -> SuiteReport {
    let started = Instant::now();
    let mut t = Tracker::new();
    for i in 0..instances {
        let seed = instance_seed(base, 1, i);
        let (k, d) = instance_shape(i);
        let n = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(k.max(200)..=2000);
        let inst = FusionInstance::generate(seed, k, d, CLASSES, n);
        let err = (|| -> Option<f64> {
            let uploads = inst.uploads().ok()?;
            let order: Vec<usize> = (0..k).collect();
            let fused = fuse_in_order(&uploads, &order, inst.gamma, correction).ok()?;
            let (phi, y) = inst.pooled();
            let oracle = centralized_oracle(&phi, &y, inst.gamma).ok()?;
            Some(rel(&fused, &oracle))
        })()
        .unwrap_or(f64::INFINITY);
        t.record(seed, err);
    }
    t.finish("centralized equivalence", instances, FUSION_TOL, started)
}

/// Ten random fusion orders per instance, compared pairwise.
pub fn suite_order_invariance(base: u64, instances: usize, permutations: usize) -> SuiteReport {
    let started = Instant::now();
    let mut t = Tracker::new();
    for i in 0..instances {
        let seed = instance_seed(base, 2, i);
        let (k, d) = instance_shape(i);
        let n = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(k.max(200)..=2000);
        let inst = FusionInstance::generate(seed, k, d, CLASSES, n);
        let err = (|| -> Option<f64> {
            let uploads = inst.uploads().ok()?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
            let mut results = Vec::with_capacity(permutations);
            for _ in 0..permutations {
                let mut order: Vec<usize> = (0..k).collect();
                order.shuffle(&mut rng);
                results.push(fuse_in_order(&uploads, &order, inst.gamma, Correction::Standard).ok()?);
            }
            let mut worst = 0.0f64;
            for a in 0..results.len() {
                for b in a + 1..results.len() {
                    worst = worst.max(rel(&results[a], &results[b]));
                }
            }
            Some(worst)
        })()
        .unwrap_or(f64::INFINITY);
        t.record(seed, err);
    }
    t.finish("order invariance", instances, FUSION_TOL, started)
}

/// Output of one heterogeneity trial: the global stream and client 0's
/// refinement stream.
#[derive(Debug, Clone)]
pub struct HeterogeneityTrial {
    pub g_global: Matrix<f64>,
    pub p_refine: Matrix<f64>,
}

/// Fixed client-0 shard plus the remaining pooled rows split over seven
/// other clients by a Dirichlet partition with the given `alpha` and seed.
#[derive(Debug, Clone)]
pub struct HeterogeneityInstance {
    pub seed: u64,
    pub gamma: f64,
    pub beta: f64,
    pub client0: Shard,
    pub psi0: Matrix<f64>,
    pub others: LabeledDataset<f64>,
    pub others_phi: Matrix<f64>,
}

impl HeterogeneityInstance {
    pub const OTHER_CLIENTS: usize = 7;

    pub fn generate(seed: u64, d_p: usize, d_r: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = log_uniform(&mut rng, 1e-2, 1.0);
        let beta = log_uniform(&mut rng, 1e-1, 10.0);
        let hp = make_head::<f64>(derive_seed(seed, 1), INPUT_DIM, d_p, ActivationKind::Relu).expect("dims");
        let hr = make_head::<f64>(derive_seed(seed, 2), INPUT_DIM, d_r, ActivationKind::Tanh).expect("dims");
        let n0 = rng.random_range(20..120);
        let n_rest = rng.random_range(400..1200);
        let x0 = normal_matrix(&mut rng, n0, INPUT_DIM);
        let l0: Vec<usize> = (0..n0).map(|_| rng.random_range(0..CLASSES)).collect();
        let x = normal_matrix(&mut rng, n_rest, INPUT_DIM);
        let labels: Vec<usize> = (0..n_rest).map(|_| rng.random_range(0..CLASSES)).collect();
        Self {
            seed,
            gamma,
            beta,
            client0: Shard {
                phi: hp.activate(&x0).expect("width"),
                y: one_hot(&l0, CLASSES).expect("range").into_matrix(),
            },
            psi0: hr.activate(&x0).expect("width"),
            others_phi: hp.activate(&x).expect("width"),
            others: LabeledDataset::new(x, labels, CLASSES).expect("consistent"),
        }
    }

    pub fn trial(&self, alpha: f64, partition_seed: u64, correction: Correction) -> Result<HeterogeneityTrial, String> {
        let spec = PartitionSpec::new(Self::OTHER_CLIENTS, alpha, partition_seed);
        let part = dirichlet_partition(&self.others, &spec).map_err(|e| e.to_string())?;
        let mut uploads = vec![compute_local_primary(
            0,
            &self.client0.phi,
            &one_hot_from_matrix(&self.client0.y),
            self.gamma,
        )
        .map_err(|e| e.to_string())?];
        for (k, idx) in part.clients.iter().enumerate() {
            let phi = self.others_phi.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| self.others.labels()[i]).collect();
            let y = one_hot(&labels, CLASSES).map_err(|e| e.to_string())?;
            uploads.push(compute_local_primary(k as u32 + 1, &phi, &y, self.gamma).map_err(|e| e.to_string())?);
        }
        let order: Vec<usize> = (0..uploads.len()).collect();
        let g = fuse_in_order(&uploads, &order, self.gamma, correction).map_err(|e| e.to_string())?;
        let p = compute_refinement(
            &self.psi0,
            &self.client0.phi,
            &one_hot_from_matrix(&self.client0.y),
            &g,
            self.beta,
        )
        .map_err(|e| e.to_string())?;
        Ok(HeterogeneityTrial {
            g_global: g,
            p_refine: p,
        })
    }
}

/// Two different partitions of the other clients' data leave client 0's
/// `(Ĝ, P̂_0)` unchanged.
pub fn suite_heterogeneity(base: u64, instances: usize) -> SuiteReport {
    let started = Instant::now();
    let mut t = Tracker::new();
    for i in 0..instances {
        let seed = instance_seed(base, 3, i);
        let inst = HeterogeneityInstance::generate(seed, HEAD_DIMS[i % 2], 24);
        let err = match (
            inst.trial(0.1, derive_seed(seed, 10), Correction::Standard),
            inst.trial(100.0, derive_seed(seed, 11), Correction::Standard),
        ) {
            (Ok(a), Ok(b)) => rel(&a.g_global, &b.g_global).max(rel(&a.p_refine, &b.p_refine)),
            _ => f64::INFINITY,
        };
        t.record(seed, err);
    }
    t.finish("heterogeneity invariance", instances, FUSION_TOL, started)
}

/// Relative residual of the refinement normal equations
/// `(ΨᵀΨ + βI)P̂ = Ψᵀ(Y − ΦĜ)`, evaluated with plain matrix products.
pub fn refinement_residual(
    psi: &Matrix<f64>,
    phi: &Matrix<f64>,
    y: &Matrix<f64>,
    g: &Matrix<f64>,
    p: &Matrix<f64>,
    beta: f64,
) -> f64 {
    let lhs = psi
        .gram()
        .add_diagonal(beta)
        .and_then(|m| m.matmul(p));
    let rhs = y.sub(&phi.matmul(g).expect("shapes")).and_then(|r| psi.t_matmul(&r));
    match (lhs, rhs) {
        (Ok(l), Ok(r)) => rel(&l, &r),
        _ => f64::INFINITY,
    }
}

pub fn suite_stationarity(base: u64, instances: usize) -> SuiteReport {
    let started = Instant::now();
    let mut t = Tracker::new();
    for i in 0..instances {
        let seed = instance_seed(base, 4, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, d_p) = instance_shape(i);
        let d_r = [8, 32, 128][i % 3];
        let n = rng.random_range(10..600);
        let beta = log_uniform(&mut rng, 1e-1, 10.0);
        let hp = make_head::<f64>(derive_seed(seed, 1), INPUT_DIM, d_p, ActivationKind::Relu).expect("dims");
        let hr = make_head::<f64>(derive_seed(seed, 2), INPUT_DIM, d_r, ActivationKind::Gelu).expect("dims");
        let x = normal_matrix(&mut rng, n, INPUT_DIM);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
        let y = one_hot(&labels, CLASSES).expect("range");
        let g = normal_matrix(&mut rng, d_p, CLASSES).scale(0.1);
        let phi = hp.activate(&x).expect("width");
        let psi = hr.activate(&x).expect("width");
        let err = match compute_refinement(&psi, &phi, &y, &g, beta) {
            Ok(p) => refinement_residual(&psi, &phi, y.matrix(), &g, &p, beta),
            Err(_) => f64::INFINITY,
        };
        t.record(seed, err);
    }
    t.finish("refinement stationarity", instances, STATIONARITY_TOL, started)
}

/// Runs all four suites with their default sizes.
pub fn cmd_verify(opts: VerifyOptions) -> VerifyReport {
    let correction = if opts.inject_fault {
        Correction::Omitted
    } else {
        Correction::Standard
    };
    VerifyReport {
        options: opts,
        suites: vec![
            suite_equivalence(opts.seed, 20, correction),
            suite_order_invariance(opts.seed, 20, 10),
            suite_heterogeneity(opts.seed, 10),
            suite_stationarity(opts.seed, 20),
        ],
    }
}
