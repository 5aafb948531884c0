//! Server-side fusion of client uploads into the global primary stream.
//!
//! The fused knowledge matrix `F` is maintained so that after fusing a set
//! `S` of clients, `Ã·F = Σ_{i∈S} A_i Ĝ_i` with `Ã = Σ_{i∈S} A_i`. Clients
//! may arrive in any order; the finalized stream equals the pooled ridge
//! solution `(Σ ΦᵢᵀΦᵢ + γI)⁻¹ Σ ΦᵢᵀYᵢ` regardless of that order.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::client::LocalKnowledge;
use crate::linalg::{ridge_solve, LinalgError, Matrix, Scalar, SpdMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServerError {
    #[error("client {0} has already been fused")]
    DuplicateClient(u32),
    #[error("upload from client {client} has shape A {a:?}, G {g:?}; expected A ({d}, {d}), G ({d}, {c})")]
    Shape {
        client: u32,
        a: (usize, usize),
        g: (usize, usize),
        d: usize,
        c: usize,
    },
    #[error("fused {fused} of {expected} clients; all uploads must arrive before finalizing")]
    IncompleteFusion { fused: usize, expected: usize },
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// How [`FusionState::finalize_with`] treats the regularizer counted once
/// per client inside `Ã`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correction {
    /// Subtract `(K−1)γI`, leaving exactly one `γI`.
    #[default]
    Standard,
    /// Keep all `Kγ`. Deliberately wrong; exists so verification can prove
    /// it detects the deviation.
    Omitted,
}

#[derive(Debug, Clone)]
pub struct FusionState<T> {
    agg_a: SpdMatrix<T>,
    fused: Matrix<T>,
    fused_ids: BTreeSet<u32>,
    gamma: T,
}

/// Starts fusion from the first arrival: `Ã₁ = A₁`, `F₁ = Ĝ₁`.
pub fn init_fusion<T: Scalar>(first: &LocalKnowledge<T>, gamma: T) -> Result<FusionState<T>, ServerError> {
    if !(gamma > T::zero()) {
        return Err(ServerError::InvalidGamma(gamma.to_f64().unwrap_or(f64::NAN)));
    }
    if first.g_local.rows() != first.a.dim() {
        return Err(ServerError::Shape {
            client: first.client_id,
            a: first.a.as_matrix().shape(),
            g: first.g_local.shape(),
            d: first.a.dim(),
            c: first.g_local.cols(),
        });
    }
    Ok(FusionState {
        agg_a: first.a.clone(),
        fused: first.g_local.clone(),
        fused_ids: BTreeSet::from([first.client_id]),
        gamma,
    })
}

/// Explicit `(Λ_k, Δ_k)` for folding `A_k` into an aggregate `Ã_{k−1}`:
///
/// ```text
/// Λ_k = I − Ã_{k−1}⁻¹ A_k (I − Ã_k⁻¹ A_k)
/// Δ_k = I − A_k⁻¹ Ã_{k−1} (I − Ã_k⁻¹ Ã_{k−1})
/// ```
///
/// [`FusionState::fuse`] applies these to `F` and `Ĝ_k` directly instead of
/// forming them; this is for inspection and tests.
pub fn fusion_operators<T: Scalar>(
    agg_prev: &SpdMatrix<T>,
    a_k: &SpdMatrix<T>,
) -> Result<(Matrix<T>, Matrix<T>), ServerError> {
    let d = agg_prev.dim();
    let eye = Matrix::identity(d);
    let agg = agg_prev.add(a_k)?;
    let lambda = eye.sub(&agg_prev.solve(&a_k.as_matrix().matmul(&eye.sub(&agg.solve(a_k.as_matrix())?)?)?)?)?;
    let prev = agg_prev.as_matrix();
    let delta = eye.sub(&a_k.solve(&prev.matmul(&eye.sub(&agg.solve(prev)?)?)?)?)?;
    Ok((lambda, delta))
}

impl<T: Scalar> FusionState<T> {
    pub fn agg_a(&self) -> &SpdMatrix<T> {
        &self.agg_a
    }

    pub fn fused(&self) -> &Matrix<T> {
        &self.fused
    }

    pub fn clients_fused(&self) -> usize {
        self.fused_ids.len()
    }

    pub fn fused_ids(&self) -> &BTreeSet<u32> {
        &self.fused_ids
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn d_p(&self) -> usize {
        self.agg_a.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.fused.cols()
    }

    /// Folds one more client in: `Ã_k = Ã_{k−1} + A_k` and
    /// `F_k = Λ_k F_{k−1} + Δ_k Ĝ_k`, every inverse applied as a Cholesky
    /// solve. The state is left untouched on error.
    pub fn fuse(&mut self, next: &LocalKnowledge<T>) -> Result<(), ServerError> {
        let (d, c) = (self.d_p(), self.num_classes());
        if next.a.dim() != d || next.g_local.shape() != (d, c) {
            return Err(ServerError::Shape {
                client: next.client_id,
                a: next.a.as_matrix().shape(),
                g: next.g_local.shape(),
                d,
                c,
            });
        }
        if self.fused_ids.contains(&next.client_id) {
            return Err(ServerError::DuplicateClient(next.client_id));
        }
        let prev = &self.agg_a;
        let a_k = &next.a;
        let agg = prev.add(a_k)?;

        // Λ_k F = F − Ã_{k−1}⁻¹ A_k (F − Ã_k⁻¹ A_k F)
        let f = &self.fused;
        let inner = f.sub(&agg.solve(&a_k.as_matrix().matmul(f)?)?)?;
        let lambda_f = f.sub(&prev.solve(&a_k.as_matrix().matmul(&inner)?)?)?;

        // Δ_k Ĝ = Ĝ − A_k⁻¹ Ã_{k−1} (Ĝ − Ã_k⁻¹ Ã_{k−1} Ĝ)
        let g = &next.g_local;
        let inner = g.sub(&agg.solve(&prev.as_matrix().matmul(g)?)?)?;
        let delta_g = g.sub(&a_k.solve(&prev.as_matrix().matmul(&inner)?)?)?;

        self.fused = lambda_f.add(&delta_g)?;
        self.agg_a = agg;
        self.fused_ids.insert(next.client_id);
        Ok(())
    }

    /// `Ĝ = [Ã_K − (K−1)γI]⁻¹ Ã_K F_K`.
    pub fn finalize(&self, total_clients: usize) -> Result<Matrix<T>, ServerError> {
        self.finalize_with(total_clients, Correction::Standard)
    }

    pub fn finalize_with(&self, total_clients: usize, correction: Correction) -> Result<Matrix<T>, ServerError> {
        if self.clients_fused() != total_clients {
            return Err(ServerError::IncompleteFusion {
                fused: self.clients_fused(),
                expected: total_clients,
            });
        }
        let rhs = self.agg_a.as_matrix().matmul(&self.fused)?;
        let shift = match correction {
            Correction::Standard => -T::lit((total_clients - 1) as f64) * self.gamma,
            Correction::Omitted => T::zero(),
        };
        let system = self.agg_a.shift_diagonal(shift)?;
        Ok(system.solve(&rhs)?)
    }
}

/// Pooled ridge regression on every client's stacked features and labels:
/// the reference the fused stream must reproduce.
pub fn centralized_oracle<T: Scalar>(all_phi: &Matrix<T>, all_y: &Matrix<T>, gamma: T) -> Result<Matrix<T>, ServerError> {
    Ok(ridge_solve(all_phi, all_y, gamma)?)
}

/// Arrival-order accumulator for one round: the first upload initializes
/// fusion, later ones are folded in, and `finalize` needs all `K`.
#[derive(Debug, Clone)]
pub struct Aggregator<T> {
    gamma: T,
    expected: usize,
    state: Option<FusionState<T>>,
}

impl<T: Scalar> Aggregator<T> {
    pub fn new(gamma: T, expected_clients: usize) -> Self {
        Self {
            gamma,
            expected: expected_clients,
            state: None,
        }
    }

    pub fn accept(&mut self, upload: &LocalKnowledge<T>) -> Result<(), ServerError> {
        match &mut self.state {
            Some(state) => state.fuse(upload),
            None => {
                self.state = Some(init_fusion(upload, self.gamma)?);
                Ok(())
            }
        }
    }

    pub fn fused_ids(&self) -> BTreeSet<u32> {
        self.state.as_ref().map(|s| s.fused_ids.clone()).unwrap_or_default()
    }

    pub fn state(&self) -> Option<&FusionState<T>> {
        self.state.as_ref()
    }

    pub fn finalize(&self) -> Result<Matrix<T>, ServerError> {
        self.finalize_with(Correction::Standard)
    }

    pub fn finalize_with(&self, correction: Correction) -> Result<Matrix<T>, ServerError> {
        match &self.state {
            Some(s) => s.finalize_with(self.expected, correction),
            None => Err(ServerError::IncompleteFusion {
                fused: 0,
                expected: self.expected,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::compute_local_primary;
    use crate::data::one_hot;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_upload(id: u32, a: f64, g: f64) -> LocalKnowledge<f64> {
        LocalKnowledge::from_parts(id, Matrix::from_rows(&[[a]]).unwrap(), Matrix::from_rows(&[[g]]).unwrap(), 1).unwrap()
    }

    // client 1: φ = [1,1]ᵀ, y = [1,1]ᵀ → A = 3, Ĝ = 2/3
    // client 2: ΦᵀΦ = 4, ΦᵀY = 0     → A = 5, Ĝ = 0
    #[test]
    fn scalar_worked_case() {
        let one = scalar_upload(1, 3.0, 2.0 / 3.0);
        let two = scalar_upload(2, 5.0, 0.0);
        let mut state = init_fusion(&one, 1.0).unwrap();
        assert_eq!(state.agg_a().as_matrix()[(0, 0)], 3.0);
        assert!((state.fused()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(state.clients_fused(), 1);

        let (lambda, delta) = fusion_operators(state.agg_a(), &two.a).unwrap();
        assert!((lambda[(0, 0)] - 3.0 / 8.0).abs() < 1e-15);
        assert!((delta[(0, 0)] - 5.0 / 8.0).abs() < 1e-15);

        state.fuse(&two).unwrap();
        assert_eq!(state.agg_a().as_matrix()[(0, 0)], 8.0);
        assert!((state.fused()[(0, 0)] - 0.25).abs() < 1e-15);
        let g = state.finalize(2).unwrap();
        assert!((g[(0, 0)] - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn single_client_finalizes_to_its_own_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = Matrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = one_hot(&(0..10).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap();
        let k = compute_local_primary(0, &phi, &y, 0.1).unwrap();
        let state = init_fusion(&k, 0.1).unwrap();
        assert_eq!(state.fused().shape(), (4, 3));
        let g = state.finalize(1).unwrap();
        assert!(g.rel_error(&k.g_local).unwrap() < 1e-13);
        let oracle = centralized_oracle(&phi, y.matrix(), 0.1).unwrap();
        assert!(oracle.rel_error(&k.g_local).unwrap() < 1e-13);
    }

    #[test]
    fn rejects_duplicates_shapes_and_incomplete() {
        let one = scalar_upload(1, 3.0, 0.5);
        let mut state = init_fusion(&one, 1.0).unwrap();
        assert_eq!(state.fuse(&one).unwrap_err(), ServerError::DuplicateClient(1));
        assert_eq!(state.clients_fused(), 1);
        let wide = LocalKnowledge::from_parts(2, Matrix::identity(2), Matrix::zeros(2, 1), 1).unwrap();
        assert!(matches!(state.fuse(&wide), Err(ServerError::Shape { client: 2, .. })));
        assert_eq!(
            state.finalize(2).unwrap_err(),
            ServerError::IncompleteFusion { fused: 1, expected: 2 }
        );
        assert!(init_fusion(&one, 0.0).is_err());
        assert!(Aggregator::<f64>::new(1.0, 1).finalize().is_err());
    }

    struct Shard {
        phi: Matrix<f64>,
        y: Matrix<f64>,
    }

    fn shards(rng: &mut ChaCha8Rng, k: usize, d: usize, c: usize) -> Vec<Shard> {
        (0..k)
            .map(|_| {
                let n = rng.random_range(1..40);
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
                Shard {
                    phi: Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
                    y: one_hot(&labels, c).unwrap().into_matrix(),
                }
            })
            .collect()
    }

    #[test]
    fn loop_invariant_holds_after_every_fuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = 0.5;
        let parts = shards(&mut rng, 6, 7, 3);
        let uploads: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, s)| compute_local_primary(i as u32, &s.phi, &crate::data::OneHotLabels(s.y.clone()), gamma).unwrap())
            .collect();
        let mut state = init_fusion(&uploads[0], gamma).unwrap();
        let mut target = uploads[0].a.as_matrix().matmul(&uploads[0].g_local).unwrap();
        for u in &uploads[1..] {
            state.fuse(u).unwrap();
            target.add_assign(&u.a.as_matrix().matmul(&u.g_local).unwrap()).unwrap();
            let lhs = state.agg_a().as_matrix().matmul(state.fused()).unwrap();
            assert!(lhs.rel_error(&target).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn fusion_matches_pooled_ridge_in_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = 0.3;
        let parts = shards(&mut rng, 5, 6, 4);
        let phi = Matrix::vstack(&parts.iter().map(|s| &s.phi).collect::<Vec<_>>()).unwrap();
        let y = Matrix::vstack(&parts.iter().map(|s| &s.y).collect::<Vec<_>>()).unwrap();
        let oracle = centralized_oracle(&phi, &y, gamma).unwrap();
        let mut uploads: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, s)| compute_local_primary(i as u32, &s.phi, &crate::data::OneHotLabels(s.y.clone()), gamma).unwrap())
            .collect();
        for _ in 0..5 {
            uploads.shuffle(&mut rng);
            let mut agg = Aggregator::new(gamma, uploads.len());
            for u in &uploads {
                agg.accept(u).unwrap();
            }
            let g = agg.finalize().unwrap();
            assert!(g.rel_error(&oracle).unwrap() <= 1e-8);
            let wrong = agg.finalize_with(Correction::Omitted).unwrap();
            assert!(wrong.rel_error(&oracle).unwrap() > 1e-8);
        }
    }

    #[test]
    fn zero_knowledge_client_still_counts_toward_the_pool() {
        // a client whose labels are all zero contributes only its Gram matrix
        let gamma = 1.0;
        let phi1 = Matrix::from_rows(&[[1.0, 0.0], [0.5, 1.0]]).unwrap();
        let y1 = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let phi2 = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let y2 = Matrix::zeros(1, 1);
        let k1 = compute_local_primary(0, &phi1, &crate::data::OneHotLabels(y1.clone()), gamma).unwrap();
        let k2 = compute_local_primary(1, &phi2, &crate::data::OneHotLabels(y2.clone()), gamma).unwrap();
        assert_eq!(k2.g_local, Matrix::zeros(2, 1));
        let mut state = init_fusion(&k1, gamma).unwrap();
        state.fuse(&k2).unwrap();
        let oracle = centralized_oracle(
            &Matrix::vstack(&[&phi1, &phi2]).unwrap(),
            &Matrix::vstack(&[&y1, &y2]).unwrap(),
            gamma,
        )
        .unwrap();
        assert!(state.finalize(2).unwrap().rel_error(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn oracle_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let part = &shards(&mut rng, 1, 5, 3)[0];
        let mut perm: Vec<usize> = (0..part.phi.rows()).collect();
        perm.shuffle(&mut rng);
        let a = centralized_oracle(&part.phi, &part.y, 0.2).unwrap();
        let b = centralized_oracle(&part.phi.select_rows(&perm), &part.y.select_rows(&perm), 0.2).unwrap();
        assert!(a.rel_error(&b).unwrap() <= 1e-12);
    }
}
