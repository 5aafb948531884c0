//! Frozen backbone stand-ins and the seeded random-projection heads that
//! turn backbone outputs into the primary (Φ) and refinement (Ψ) features.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("expected input with {expected} columns, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("row index {index} out of range for {len} stored rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("row index {0} is not a non-negative integer")]
    InvalidIndex(f64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Elementwise nonlinearity applied after a random projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    #[default]
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Hardswish,
    Gelu,
    Elu,
    Softplus,
}

const LEAKY_SLOPE: f64 = 0.01;

impl ActivationKind {
    pub const ALL: [ActivationKind; 8] = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Hardswish,
        ActivationKind::Gelu,
        ActivationKind::Elu,
        ActivationKind::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Hardswish => "hardswish",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Elu => "elu",
            ActivationKind::Softplus => "softplus",
        }
    }

    /// Stable wire code, see the protocol `Config` message.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            ActivationKind::Relu => x.max(zero),
            ActivationKind::LeakyRelu => {
                if x >= zero {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => {
                if x >= zero {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            }
            ActivationKind::Hardswish => {
                let three = T::lit(3.0);
                let six = T::lit(6.0);
                x * (x + three).max(zero).min(six) / six
            }
            // tanh approximation of x·Φ(x)
            ActivationKind::Gelu => {
                let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let inner = c * (x + T::lit(0.044715) * x * x * x);
                T::lit(0.5) * x * (one + inner.tanh())
            }
            ActivationKind::Elu => {
                if x > zero {
                    x
                } else {
                    x.exp_m1()
                }
            }
            ActivationKind::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let norm = match norm.as_str() {
            "leakyrelu" => "leaky_relu",
            other => other,
        };
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == norm)
            .ok_or_else(|| FeatureError::UnknownActivation(s.to_string()))
    }
}

/// Independent child seed: the first word of ChaCha8 stream `stream`
/// keyed by `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// `rows × cols` matrix of i.i.d. N(0, 1/rows) draws from ChaCha8 seeded
/// with `seed`. Samples are drawn in `f64` and then converted, so an `f32`
/// and an `f64` head built from one seed share the same randomness.
pub fn gaussian_projection<T: Scalar>(seed: u64, rows: usize, cols: usize) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::lit(z * scale)
    })
}

/// Frozen stand-in for a foundation-model backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor<T> {
    /// Raw inputs are already the features.
    Identity { dim: usize },
    /// `x · W` with `W` fixed by `seed`.
    FrozenRandomLinear { seed: u64, weights: Matrix<T> },
    /// Precomputed embeddings; inputs are `N × 1` matrices of row indices.
    FileBacked { rows: Matrix<T> },
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn identity(dim: usize) -> Self {
        FeatureExtractor::Identity { dim }
    }

    pub fn frozen_random_linear(seed: u64, input_dim: usize, output_dim: usize) -> Result<Self, FeatureError> {
        if input_dim == 0 || output_dim == 0 {
            return Err(FeatureError::InvalidParam(
                "backbone dimensions must be positive".into(),
            ));
        }
        Ok(FeatureExtractor::FrozenRandomLinear {
            seed,
            weights: gaussian_projection(seed, input_dim, output_dim),
        })
    }

    pub fn file_backed(rows: Matrix<T>) -> Self {
        FeatureExtractor::FileBacked { rows }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::FrozenRandomLinear { weights, .. } => weights.rows(),
            FeatureExtractor::FileBacked { .. } => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::FrozenRandomLinear { weights, .. } => weights.cols(),
            FeatureExtractor::FileBacked { rows } => rows.cols(),
        }
    }

    pub fn extract(&self, x: &Matrix<T>) -> Result<Matrix<T>, FeatureError> {
        if x.cols() != self.input_dim() {
            return Err(FeatureError::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        match self {
            FeatureExtractor::Identity { .. } => Ok(x.clone()),
            FeatureExtractor::FrozenRandomLinear { weights, .. } => Ok(x.matmul(weights)?),
            FeatureExtractor::FileBacked { .. } => {
                let indices = x
                    .as_slice()
                    .iter()
                    .map(|v| {
                        let f = v.to_f64().unwrap_or(f64::NAN);
                        if f >= 0.0 && f.fract() == 0.0 {
                            Ok(f as usize)
                        } else {
                            Err(FeatureError::InvalidIndex(f))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                self.extract_rows(&indices)
            }
        }
    }

    /// Row lookup for the file-backed kind.
    pub fn extract_rows(&self, indices: &[usize]) -> Result<Matrix<T>, FeatureError> {
        let FeatureExtractor::FileBacked { rows } = self else {
            return Err(FeatureError::InvalidParam(
                "row lookup needs a file-backed extractor".into(),
            ));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows.rows()) {
            return Err(FeatureError::IndexOutOfRange {
                index: bad,
                len: rows.rows(),
            });
        }
        Ok(rows.select_rows(indices))
    }
}

/// A seeded random projection followed by an activation, optionally with
/// a constant-1 column appended afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    proj: Matrix<T>,
    activation: ActivationKind,
    seed: u64,
    append_bias: bool,
}

pub fn make_head<T: Scalar>(
    seed: u64,
    in_dim: usize,
    d: usize,
    act: ActivationKind,
) -> Result<ProjectionHead<T>, FeatureError> {
    if in_dim == 0 || d == 0 {
        return Err(FeatureError::InvalidParam(format!(
            "head dimensions must be positive (in_dim={in_dim}, d={d})"
        )));
    }
    Ok(ProjectionHead {
        proj: gaussian_projection(seed, in_dim, d),
        activation: act,
        seed,
        append_bias: false,
    })
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn with_bias(mut self, append_bias: bool) -> Self {
        self.append_bias = append_bias;
        self
    }

    pub fn proj(&self) -> &Matrix<T> {
        &self.proj
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_dim(&self) -> usize {
        self.proj.rows()
    }

    /// Projection width `d`.
    pub fn d(&self) -> usize {
        self.proj.cols()
    }

    pub fn has_bias(&self) -> bool {
        self.append_bias
    }

    /// Width of [`activate`](Self::activate)'s output.
    pub fn output_dim(&self) -> usize {
        self.d() + usize::from(self.append_bias)
    }

    pub fn activate(&self, backbone_out: &Matrix<T>) -> Result<Matrix<T>, FeatureError> {
        if backbone_out.cols() != self.in_dim() {
            return Err(FeatureError::Dimension {
                expected: self.in_dim(),
                got: backbone_out.cols(),
            });
        }
        let act = self.activation;
        let pre = backbone_out.matmul(&self.proj)?;
        if !self.append_bias {
            return Ok(pre.map(|v| act.apply(v)));
        }
        let d = self.d();
        Ok(Matrix::from_fn(pre.rows(), d + 1, |i, j| {
            if j == d {
                T::one()
            } else {
                act.apply(pre[(i, j)])
            }
        }))
    }
}
