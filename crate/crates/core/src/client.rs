//! Client-side computations: the local primary-stream upload, the
//! closed-form refinement stream, and blended inference.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabeledDataset, OneHotLabels};
use crate::features::{FeatureError, ProjectionHead};
use crate::linalg::{LinalgError, Matrix, Scalar, SpdMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("client has no training samples")]
    EmptyData,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub const DEFAULT_GAMMA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.3;

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Regularizers of the two streams and the inference blend weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientHyper {
    /// Primary-stream ridge regularizer, shared by every party.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Refinement-stream ridge regularizer.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of the refinement scores at inference; any value ≥ 0 is
    /// accepted, sweeps usually stay in [0.1, 0.9].
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Default for ClientHyper {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl ClientHyper {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ClientError::InvalidHyper(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ClientError::InvalidHyper(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ClientError::InvalidHyper(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// What a client uploads: `A_k = ΦᵀΦ + γI` and its local ridge solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalKnowledge<T> {
    pub client_id: u32,
    pub a: SpdMatrix<T>,
    pub g_local: Matrix<T>,
    pub n_samples: usize,
}

impl<T: Scalar> LocalKnowledge<T> {
    /// Rebuilds an upload received over the wire, refactoring `a`.
    pub fn from_parts(client_id: u32, a: Matrix<T>, g_local: Matrix<T>, n_samples: usize) -> Result<Self, ClientError> {
        let a = SpdMatrix::new(a)?;
        if g_local.rows() != a.dim() {
            return Err(ClientError::Shape(format!(
                "g_local has {} rows but A is {}x{}",
                g_local.rows(),
                a.dim(),
                a.dim()
            )));
        }
        Ok(Self {
            client_id,
            a,
            g_local,
            n_samples,
        })
    }

    pub fn d_p(&self) -> usize {
        self.a.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.g_local.cols()
    }
}

fn positive<T: Scalar>(name: &str, v: T) -> Result<(), ClientError> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(ClientError::InvalidHyper(format!("{name} must be > 0, got {v}")))
    }
}

pub fn compute_local_primary<T: Scalar>(
    client_id: u32,
    phi: &Matrix<T>,
    y: &OneHotLabels<T>,
    gamma: T,
) -> Result<LocalKnowledge<T>, ClientError> {
    positive("gamma", gamma)?;
    if phi.rows() == 0 || phi.cols() == 0 {
        return Err(ClientError::EmptyData);
    }
    let y = y.matrix();
    if phi.rows() != y.rows() {
        return Err(ClientError::Shape(format!(
            "{} feature rows vs {} label rows",
            phi.rows(),
            y.rows()
        )));
    }
    let a = SpdMatrix::from_symmetrized(phi.gram().add_diagonal(gamma)?)?;
    let g_local = a.solve(&phi.t_matmul(y)?)?;
    Ok(LocalKnowledge {
        client_id,
        a,
        g_local,
        n_samples: phi.rows(),
    })
}

/// `(ΨᵀΨ + βI)⁻¹ Ψᵀ(Y − ΦĜ)`: ridge regression of the primary stream's
/// residual onto the refinement features.
pub fn compute_refinement<T: Scalar>(
    psi: &Matrix<T>,
    phi: &Matrix<T>,
    y: &OneHotLabels<T>,
    g_global: &Matrix<T>,
    beta: T,
) -> Result<Matrix<T>, ClientError> {
    positive("beta", beta)?;
    let y = y.matrix();
    if psi.rows() != phi.rows() || phi.rows() != y.rows() {
        return Err(ClientError::Shape(format!(
            "row counts differ: psi {}, phi {}, y {}",
            psi.rows(),
            phi.rows(),
            y.rows()
        )));
    }
    if g_global.shape() != (phi.cols(), y.cols()) {
        return Err(ClientError::Shape(format!(
            "global primary stream is {:?}, expected {:?}",
            g_global.shape(),
            (phi.cols(), y.cols())
        )));
    }
    let residual = y.sub(&phi.matmul(g_global)?)?;
    let system = SpdMatrix::from_symmetrized(psi.gram().add_diagonal(beta)?)?;
    Ok(system.solve(&psi.t_matmul(&residual)?)?)
}

/// Per-row argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(scores: &Matrix<T>) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub scores: Matrix<T>,
    pub classes: Vec<usize>,
}

/// One client's inference bundle: shared `Ĝ`, private `P̂_k`, and `λ`.
#[derive(Debug, Clone)]
pub struct PersonalModel<T> {
    g_global: Matrix<T>,
    p_refine: Matrix<T>,
    lambda: T,
    primary_head: Arc<ProjectionHead<T>>,
    refine_head: Arc<ProjectionHead<T>>,
}

impl<T: Scalar> PersonalModel<T> {
    pub fn new(
        g_global: Matrix<T>,
        p_refine: Matrix<T>,
        lambda: T,
        primary_head: Arc<ProjectionHead<T>>,
        refine_head: Arc<ProjectionHead<T>>,
    ) -> Result<Self, ClientError> {
        if !(lambda >= T::zero()) {
            return Err(ClientError::InvalidHyper(format!("lambda must be >= 0, got {lambda}")));
        }
        if g_global.rows() != primary_head.output_dim() {
            return Err(ClientError::Shape(format!(
                "G has {} rows but the primary head emits {} features",
                g_global.rows(),
                primary_head.output_dim()
            )));
        }
        if p_refine.rows() != refine_head.output_dim() || p_refine.cols() != g_global.cols() {
            return Err(ClientError::Shape(format!(
                "P is {:?}, expected ({}, {})",
                p_refine.shape(),
                refine_head.output_dim(),
                g_global.cols()
            )));
        }
        if primary_head.in_dim() != refine_head.in_dim() {
            return Err(ClientError::Shape("heads read different backbone widths".into()));
        }
        Ok(Self {
            g_global,
            p_refine,
            lambda,
            primary_head,
            refine_head,
        })
    }

    pub fn g_global(&self) -> &Matrix<T> {
        &self.g_global
    }

    pub fn p_refine(&self) -> &Matrix<T> {
        &self.p_refine
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn num_classes(&self) -> usize {
        self.g_global.cols()
    }

    pub fn primary_head(&self) -> &Arc<ProjectionHead<T>> {
        &self.primary_head
    }

    pub fn refine_head(&self) -> &Arc<ProjectionHead<T>> {
        &self.refine_head
    }

    /// Same streams, different blend weight.
    pub fn with_lambda(&self, lambda: T) -> Result<Self, ClientError> {
        Self::new(
            self.g_global.clone(),
            self.p_refine.clone(),
            lambda,
            self.primary_head.clone(),
            self.refine_head.clone(),
        )
    }

    /// `σ_P(B R_P)·Ĝ + λ·σ_R(B R_R)·P̂`.
    pub fn predict(&self, backbone_out: &Matrix<T>) -> Result<Prediction<T>, ClientError> {
        let mut scores = self.primary_head.activate(backbone_out)?.matmul(&self.g_global)?;
        if self.lambda != T::zero() {
            let personal = self
                .refine_head
                .activate(backbone_out)?
                .matmul(&self.p_refine)?
                .scale(self.lambda);
            scores.add_assign(&personal)?;
        }
        let classes = argmax_rows(&scores);
        Ok(Prediction { scores, classes })
    }
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Fraction of `test` rows classified correctly; `test` features are
/// backbone outputs.
pub fn local_accuracy<T: Scalar>(model: &PersonalModel<T>, test: &LabeledDataset<T>) -> Result<f64, ClientError> {
    let pred = model.predict(test.features())?;
    Ok(accuracy(&pred.classes, test.labels()))
}

/// A client's private training shard (backbone outputs plus labels). Only
/// [`LocalKnowledge`] ever leaves it; activated features are recomputed in
/// each phase rather than retained.
#[derive(Debug, Clone)]
pub struct LocalClient<T> {
    pub id: u32,
    pub train: LabeledDataset<T>,
}

impl<T: Scalar> LocalClient<T> {
    pub fn new(id: u32, train: LabeledDataset<T>) -> Self {
        Self { id, train }
    }

    pub fn primary_upload(&self, primary_head: &ProjectionHead<T>, gamma: T) -> Result<LocalKnowledge<T>, ClientError> {
        let phi = primary_head.activate(self.train.features())?;
        compute_local_primary(self.id, &phi, &self.train.one_hot(), gamma)
    }

    pub fn personalize(
        &self,
        primary_head: Arc<ProjectionHead<T>>,
        refine_head: Arc<ProjectionHead<T>>,
        g_global: Matrix<T>,
        beta: T,
        lambda: T,
    ) -> Result<PersonalModel<T>, ClientError> {
        let phi = primary_head.activate(self.train.features())?;
        let psi = refine_head.activate(self.train.features())?;
        let p = compute_refinement(&psi, &phi, &self.train.one_hot(), &g_global, beta)?;
        PersonalModel::new(g_global, p, lambda, primary_head, refine_head)
    }
}
