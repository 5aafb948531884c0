//! Labeled datasets, one-hot targets, Dirichlet label-skew partitioning
//! and stratified local train/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error(
        "no partition gave every one of {clients} clients at least {min_samples} samples after \
         {attempts} draws; try a larger alpha or fewer clients"
    )]
    PartitionFailed {
        clients: usize,
        min_samples: usize,
        attempts: usize,
    },
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("class {class} has {count} sample(s); a stratified split needs at least 2")]
    ClassTooSmall { class: usize, count: usize },
}

/// Feature rows with integer class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.rows() != labels.len() {
            return Err(DataError::LengthMismatch {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Replaces the feature matrix (e.g. with backbone outputs) keeping labels.
    pub fn with_features(&self, features: Matrix<T>) -> Result<Self, DataError> {
        Self::new(features, self.labels.clone(), self.num_classes)
    }

    pub fn one_hot(&self) -> OneHotLabels<T> {
        one_hot(&self.labels, self.num_classes).expect("labels validated on construction")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_histogram(&self.labels, self.num_classes)
    }
}

/// `N × c` indicator matrix with a single 1 per row.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabels<T>(pub(crate) Matrix<T>);

impl<T: Scalar> OneHotLabels<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<OneHotLabels<T>, DataError> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (row, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                classes: num_classes,
            });
        }
        m[(row, label)] = T::one();
    }
    Ok(OneHotLabels(m))
}

pub fn class_histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Shannon entropy (nats) of the label distribution given by `counts`.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub const DEFAULT_MIN_SAMPLES: usize = 2;
pub const DEFAULT_MAX_RETRIES: usize = 100;

fn default_min_samples() -> usize {
    DEFAULT_MIN_SAMPLES
}

fn default_max_retries() -> usize {
    DEFAULT_MAX_RETRIES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_client: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, alpha: f64, seed: u64) -> Self {
        Self {
            num_clients,
            alpha,
            seed,
            min_samples_per_client: DEFAULT_MIN_SAMPLES,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_clients == 0 {
            return Err(DataError::InvalidSpec("num_clients must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(DataError::InvalidSpec(format!(
                "alpha must be a positive finite number, got {}",
                self.alpha
            )));
        }
        if self.max_retries == 0 {
            return Err(DataError::InvalidSpec("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

/// One index set per client; serialized as the partition manifest
/// `{"seed":…,"alpha":…,"clients":[[…],…]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub seed: u64,
    pub alpha: f64,
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn to_manifest_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    pub fn from_manifest_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn dirichlet_draw(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, k: usize) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // All-zero draws only happen through underflow at tiny alpha.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Per-class Dirichlet label-skew split.
///
/// For each class the indices are shuffled, proportions are drawn from
/// `Dirichlet(alpha·1_K)` (normalized Gamma draws), and the class is cut at
/// `floor(cumsum(p)·n_class)`. The whole draw is repeated when any client
/// ends up below `min_samples_per_client`.
pub fn dirichlet_partition<T: Scalar>(
    ds: &LabeledDataset<T>,
    spec: &PartitionSpec,
) -> Result<Partition, DataError> {
    spec.validate()?;
    let k = spec.num_clients;
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0)
        .map_err(|e| DataError::InvalidSpec(format!("alpha: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for _ in 0..spec.max_retries {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = dirichlet_draw(&mut rng, &gamma, k);
            let n = members.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, share) in p.iter().enumerate() {
                cum += share;
                let end = if client + 1 == k {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                clients[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= spec.min_samples_per_client) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(Partition {
                seed: spec.seed,
                alpha: spec.alpha,
                clients,
            });
        }
    }
    Err(DataError::PartitionFailed {
        clients: k,
        min_samples: spec.min_samples_per_client,
        attempts: spec.max_retries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainTestSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class stratified split; `fraction` is the share kept for training.
/// Every class must have at least two samples so both sides see it.
pub fn split_train_test<T: Scalar>(
    ds: &LabeledDataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<TrainTestSplit, DataError> {
    stratified_split(ds, fraction, seed, true)
}

/// Like [`split_train_test`], but a class with a single sample keeps it in
/// the training side instead of failing. Dirichlet shards at small alpha
/// routinely contain such singleton classes.
pub fn split_train_test_lenient<T: Scalar>(
    ds: &LabeledDataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<TrainTestSplit, DataError> {
    stratified_split(ds, fraction, seed, false)
}

fn stratified_split<T: Scalar>(
    ds: &LabeledDataset<T>,
    fraction: f64,
    seed: u64,
    strict: bool,
) -> Result<TrainTestSplit, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        match n {
            0 => continue,
            1 if !strict => {
                train.push(members[0]);
                continue;
            }
            1 => return Err(DataError::ClassTooSmall { class, count: n }),
            _ => {}
        }
        members.shuffle(&mut rng);
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(TrainTestSplit { train, test })
}

/// Gaussian class clusters for desk-scale experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    /// Scale of the class means, drawn as `separation · N(0, I)`.
    pub separation: f64,
    /// Standard deviation of the isotropic within-class noise.
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 64,
            samples: 5000,
            separation: 0.35,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Balanced classes (sample `i` has label `i % num_classes`).
pub fn synthetic_clusters(spec: &SyntheticSpec) -> Result<LabeledDataset<f64>, DataError> {
    if spec.num_classes == 0 || spec.input_dim == 0 || spec.samples == 0 {
        return Err(DataError::InvalidSpec(
            "synthetic dataset needs positive classes, dimension and samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means = Matrix::from_fn(spec.num_classes, spec.input_dim, |_, _| {
        spec.separation * normal()
    });
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.num_classes).collect();
    let features = Matrix::from_fn(spec.samples, spec.input_dim, |i, j| {
        means[(labels[i], j)] + spec.noise * normal()
    });
    LabeledDataset::new(features, labels, spec.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(per_class: usize, classes: usize) -> LabeledDataset<f64> {
        let n = per_class * classes;
        LabeledDataset::new(
            Matrix::from_fn(n, 1, |i, _| i as f64),
            (0..n).map(|i| i % classes).collect(),
            classes,
        )
        .unwrap()
    }

    fn assert_exact_cover(sets: &[Vec<usize>], n: usize) {
        let mut seen = vec![false; n];
        for s in sets {
            for &i in s {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "some index unassigned");
    }

    #[test]
    fn one_hot_examples() {
        let y = one_hot::<f64>(&[0], 2).unwrap();
        assert_eq!(y.matrix(), &Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let y = one_hot::<f64>(&[1, 0], 2).unwrap();
        assert_eq!(y.matrix(), &Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        assert_eq!(
            one_hot::<f64>(&[0, 2], 2).unwrap_err(),
            DataError::LabelOutOfRange { row: 1, label: 2, classes: 2 }
        );
    }

    #[test]
    fn dataset_validation() {
        let f = Matrix::<f64>::zeros(2, 3);
        assert_eq!(LabeledDataset::new(f.clone(), vec![], 2).unwrap_err(), DataError::Empty);
        assert!(matches!(
            LabeledDataset::new(f.clone(), vec![0], 2),
            Err(DataError::LengthMismatch { .. })
        ));
        assert!(matches!(
            LabeledDataset::new(f, vec![0, 5], 2),
            Err(DataError::LabelOutOfRange { row: 1, .. })
        ));
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = balanced(10, 3);
        let p = dirichlet_partition(&ds, &PartitionSpec::new(1, 0.5, 3)).unwrap();
        assert_eq!(p.clients, vec![(0..30).collect::<Vec<_>>()]);
    }

    #[test]
    fn near_iid_alpha_balances_clients() {
        let ds = balanced(1000, 4);
        let p = dirichlet_partition(&ds, &PartitionSpec::new(4, 1e6, 17)).unwrap();
        for c in &p.clients {
            assert!((900..=1100).contains(&c.len()), "client size {}", c.len());
        }
    }

    #[test]
    fn partition_is_deterministic_and_manifest_stable() {
        let ds = balanced(50, 5);
        let spec = PartitionSpec::new(6, 0.3, 99);
        let a = dirichlet_partition(&ds, &spec).unwrap();
        let b = dirichlet_partition(&ds, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_manifest_json(), b.to_manifest_json());
        let back = Partition::from_manifest_json(&a.to_manifest_json()).unwrap();
        assert_eq!(back, a);
        assert!(a.to_manifest_json().starts_with("{\"seed\":99,\"alpha\":0.3,\"clients\":[["));
    }

    #[test]
    fn partition_retry_budget_exhaustion() {
        let ds = balanced(1, 4);
        let mut spec = PartitionSpec::new(4, 0.01, 1);
        spec.min_samples_per_client = 3;
        spec.max_retries = 5;
        assert_eq!(
            dirichlet_partition(&ds, &spec).unwrap_err(),
            DataError::PartitionFailed { clients: 4, min_samples: 3, attempts: 5 }
        );
    }

    #[test]
    fn partition_spec_validation() {
        let ds = balanced(3, 2);
        assert!(dirichlet_partition(&ds, &PartitionSpec::new(0, 1.0, 0)).is_err());
        assert!(dirichlet_partition(&ds, &PartitionSpec::new(2, 0.0, 0)).is_err());
        assert!(dirichlet_partition(&ds, &PartitionSpec::new(2, f64::NAN, 0)).is_err());
    }

    #[test]
    fn smaller_alpha_means_more_skew() {
        let ds = balanced(100, 10);
        let mean_entropy = |alpha: f64| {
            let mut total = 0.0;
            let mut count = 0;
            for seed in 0..20 {
                let p = dirichlet_partition(&ds, &PartitionSpec::new(8, alpha, seed)).unwrap();
                for c in &p.clients {
                    let labels: Vec<usize> = c.iter().map(|&i| ds.labels()[i]).collect();
                    total += label_entropy(&class_histogram(&labels, 10));
                    count += 1;
                }
            }
            total / count as f64
        };
        assert!(mean_entropy(0.1) < mean_entropy(1000.0));
    }

    #[test]
    fn split_examples() {
        let ds = balanced(2, 3);
        let s = split_train_test(&ds, 0.5, 4).unwrap();
        assert_eq!(s.train.len(), 3);
        assert_eq!(s.test.len(), 3);
        for class in 0..3 {
            assert_eq!(s.train.iter().filter(|&&i| i % 3 == class).count(), 1);
        }
        assert_exact_cover(&[s.train.clone(), s.test.clone()], 6);
        assert_eq!(split_train_test(&ds, 0.5, 4).unwrap(), s);
    }

    #[test]
    fn split_errors() {
        let ds = balanced(2, 2);
        assert_eq!(split_train_test(&ds, 1.0, 0).unwrap_err(), DataError::InvalidFraction(1.0));
        assert!(split_train_test(&ds, 0.0, 0).is_err());
        let tiny = LabeledDataset::new(Matrix::<f64>::zeros(3, 1), vec![0, 0, 1], 2).unwrap();
        assert_eq!(
            split_train_test(&tiny, 0.5, 0).unwrap_err(),
            DataError::ClassTooSmall { class: 1, count: 1 }
        );
        let lenient = split_train_test_lenient(&tiny, 0.5, 0).unwrap();
        assert!(lenient.train.contains(&2));
        assert_exact_cover(&[lenient.train, lenient.test], 3);
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let spec = SyntheticSpec {
            samples: 100,
            input_dim: 5,
            ..SyntheticSpec::default()
        };
        let a = synthetic_clusters(&spec).unwrap();
        assert_eq!(a.class_counts(), vec![10; 10]);
        assert_eq!(a, synthetic_clusters(&spec).unwrap());
        let b = synthetic_clusters(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.features(), b.features());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_is_exact_cover(seed in any::<u64>(), k in 1usize..12, alpha in 0.05f64..50.0, per_class in 5usize..40) {
            let ds = balanced(per_class, 4);
            let mut spec = PartitionSpec::new(k, alpha, seed);
            spec.min_samples_per_client = 0;
            let p = dirichlet_partition(&ds, &spec).unwrap();
            prop_assert_eq!(p.clients.len(), k);
            assert_exact_cover(&p.clients, ds.len());
        }

        #[test]
        fn split_is_exact_cover(seed in any::<u64>(), fraction in 0.05f64..0.95, per_class in 2usize..20) {
            let ds = balanced(per_class, 3);
            let s = split_train_test(&ds, fraction, seed).unwrap();
            assert_exact_cover(&[s.train, s.test], ds.len());
        }
    }
}
