//! Gradient-free personalized federated learning with closed-form heads.
//!
//! Each client fits a ridge head on frozen random features and uploads its
//! regularized Gram matrix with the local solution. The server fuses uploads
//! one at a time into the exact pooled ridge solution, independent of arrival
//! order and of how labels are split across clients. Clients then fit a
//! second head on the residual of the global model and predict with the sum.
//!
//! The numeric core is generic over [`linalg::Scalar`]; the aliases below
//! pin the common precisions. The wire protocol and experiment drivers use
//! `f64` throughout.

pub mod client;
pub mod data;
pub mod experiments;
pub mod features;
pub mod formats;
pub mod linalg;
pub mod protocol;
pub mod server;
pub mod transport;
pub mod verify;

pub use linalg::Scalar;

pub type MatrixF64 = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type SpdMatrixF64 = linalg::SpdMatrix<f64>;
pub type SpdMatrixF32 = linalg::SpdMatrix<f32>;
pub type CholeskyF64 = linalg::Cholesky<f64>;
pub type LabeledDatasetF64 = data::LabeledDataset<f64>;
pub type LabeledDatasetF32 = data::LabeledDataset<f32>;
pub type ProjectionHeadF64 = features::ProjectionHead<f64>;
pub type ProjectionHeadF32 = features::ProjectionHead<f32>;
pub type LocalKnowledgeF64 = client::LocalKnowledge<f64>;
pub type LocalKnowledgeF32 = client::LocalKnowledge<f32>;
pub type PersonalModelF64 = client::PersonalModel<f64>;
pub type PersonalModelF32 = client::PersonalModel<f32>;
pub type FusionStateF64 = server::FusionState<f64>;
pub type FusionStateF32 = server::FusionState<f32>;
