//! Dense row-major matrices and the Cholesky-based solvers behind every
//! closed-form step (local ridge solutions, fusion, refinement).
//!
//! Everything here is generic over [`Scalar`]; the crate root exposes
//! `f64` aliases, which is what the federated pipeline uses.

use std::fmt::{self, Debug, Display};
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive, NumAssign};
use rayon::prelude::*;
use thiserror::Error;

/// Real floating-point element type usable in every matrix routine.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for `f32` / `f64`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal not representable")
    }
}

impl<T> Scalar for T where
    T: Float + NumAssign + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

/// Relative tolerance used when checking that an input is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("matrix is not positive definite: leading minor of order {minor} is not positive")]
    NotPositiveDefinite { minor: usize },
    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds tolerance")]
    NotSymmetric { asymmetry: f64 },
    #[error("regularizer must be positive, got {0}")]
    NonPositiveRegularizer(f64),
    #[error("ragged rows: row {row} has {len} entries, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::Ragged {
                    row: i,
                    len: r.len(),
                    expected: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, and a zero-column matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`. Each output entry is accumulated in ascending inner
    /// index order, so results do not depend on the thread count.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::Shape {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        if rhs.cols == 0 {
            return Ok(out);
        }
        let kernel = |(i, out_row): (usize, &mut [T])| {
            let lhs_row = self.row(i);
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        };
        if self.rows * self.cols * rhs.cols >= PAR_THRESHOLD {
            out.data
                .par_chunks_mut(rhs.cols)
                .enumerate()
                .for_each(kernel);
        } else {
            out.data.chunks_mut(rhs.cols).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without the caller materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.rows != rhs.rows {
            return Err(LinalgError::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        self.transpose().matmul(rhs)
    }

    /// Gram matrix `selfᵀ · self`, exactly symmetric.
    pub fn gram(&self) -> Self {
        let mut g = self
            .t_matmul(self)
            .expect("gram: operand shapes always agree");
        // The matmul accumulates (i,j) and (j,i) in the same order, but copy
        // the upper triangle anyway so symmetry never depends on that.
        for i in 0..g.rows {
            for j in (i + 1)..g.cols {
                g.data[j * g.cols + i] = g.data[i * g.cols + j];
            }
        }
        g
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::Shape {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, LinalgError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, LinalgError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<(), LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::Shape {
                op: "add_assign",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + s·I` for a square matrix.
    pub fn add_diagonal(&self, s: T) -> Result<Self, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::Shape {
                op: "add_diagonal",
                left: self.shape(),
                right: self.shape(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += s;
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij - a_ji|`; zero for exactly symmetric input.
    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Self, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::Shape {
                op: "symmetrized",
                left: self.shape(),
                right: self.shape(),
            });
        }
        let half = T::lit(0.5);
        Ok(Self::from_fn(self.rows, self.cols, |i, j| {
            if i == j {
                self[(i, i)]
            } else {
                (self[(i, j)] + self[(j, i)]) * half
            }
        }))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> Result<Self, LinalgError> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(LinalgError::Shape {
                    op: "vstack",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Element-type conversion, e.g. for running the same pipeline in `f32`.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// `‖self − other‖_F / ‖other‖_F`, falling back to the absolute error
    /// when `other` is zero.
    pub fn rel_error(&self, other: &Self) -> Result<T, LinalgError> {
        let diff = self.sub(other)?.frobenius_norm();
        let scale = other.frobenius_norm();
        Ok(if scale > T::zero() { diff / scale } else { diff })
    }
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            writeln!(f, "  {:?}", &row[..row.len().min(8)])?;
        }
        write!(f, "]")
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky<T> {
    lower: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors a symmetric matrix, reading only its lower triangle.
    pub fn factor(a: &Matrix<T>) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::Shape {
                op: "cholesky",
                left: a.shape(),
                right: a.shape(),
            });
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let row_j = l.row(j)[..j].to_vec();
            let mut diag = a[(j, j)];
            for &v in &row_j {
                diag -= v * v;
            }
            if !(diag > T::zero()) {
                return Err(LinalgError::NotPositiveDefinite { minor: j + 1 });
            }
            let pivot = diag.sqrt();
            l[(j, j)] = pivot;
            for i in (j + 1)..n {
                let row_i = l.row_mut(i);
                let mut s = a[(i, j)];
                for (&x, &y) in row_i[..j].iter().zip(&row_j) {
                    s -= x * y;
                }
                row_i[j] = s / pivot;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &Matrix<T> {
        &self.lower
    }

    /// Solves `A X = B` by forward then backward substitution. Both sweeps
    /// work on whole rows of `B`.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
        let n = self.dim();
        if b.rows() != n {
            return Err(LinalgError::Shape {
                op: "cholesky solve",
                left: (n, n),
                right: b.shape(),
            });
        }
        let m = b.cols();
        let l = &self.lower;
        let mut x = b.clone();
        // L Y = B
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let lik = l.data[i * n + k];
                if lik == T::zero() {
                    continue;
                }
                for (v, &y) in xi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                    *v -= lik * y;
                }
            }
            let inv = T::one() / l.data[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        // Lᵀ X = Y
        for i in (0..n).rev() {
            let (head, solved) = x.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in (i + 1)..n {
                let lki = l.data[k * n + i];
                if lki == T::zero() {
                    continue;
                }
                let off = (k - i - 1) * m;
                for (v, &y) in xi.iter_mut().zip(&solved[off..off + m]) {
                    *v -= lki * y;
                }
            }
            let inv = T::one() / l.data[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(x)
    }
}

/// Symmetric positive-definite matrix together with its Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix<T> {
    mat: Matrix<T>,
    chol: Cholesky<T>,
}

impl<T: Scalar> SpdMatrix<T> {
    /// Validates symmetry (relative to the largest entry), symmetrizes away
    /// the residual rounding asymmetry, and factors.
    pub fn new(mat: Matrix<T>) -> Result<Self, LinalgError> {
        if !mat.is_square() {
            return Err(LinalgError::Shape {
                op: "spd",
                left: mat.shape(),
                right: mat.shape(),
            });
        }
        let asym = mat.max_asymmetry();
        let tol = T::lit(SYMMETRY_TOL) * mat.max_abs().max(T::one());
        if asym > tol {
            return Err(LinalgError::NotSymmetric {
                asymmetry: asym.to_f64().unwrap_or(f64::NAN),
            });
        }
        Self::from_symmetrized(mat)
    }

    /// Symmetrizes `(A + Aᵀ)/2` unconditionally, then factors. Used for
    /// matrices that are symmetric in exact arithmetic, such as sums of
    /// Gram matrices.
    pub fn from_symmetrized(mat: Matrix<T>) -> Result<Self, LinalgError> {
        let mat = mat.symmetrized()?;
        let chol = Cholesky::factor(&mat)?;
        Ok(Self { mat, chol })
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.mat
    }

    pub fn cholesky(&self) -> &Cholesky<T> {
        &self.chol
    }

    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
        self.chol.solve(b)
    }

    /// `self + other`, refactored.
    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        Self::from_symmetrized(self.mat.add(&other.mat)?)
    }

    /// `self + s·I`, refactored. `s` may be negative as long as the result
    /// stays positive definite.
    pub fn shift_diagonal(&self, s: T) -> Result<Self, LinalgError> {
        Self::from_symmetrized(self.mat.add_diagonal(s)?)
    }
}

/// Solves `a · X = b`.
pub fn spd_solve<T: Scalar>(a: &SpdMatrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    a.solve(b)
}

/// `(ΦᵀΦ + reg·I)⁻¹ ΦᵀY`, the unique minimizer of
/// `‖Y − ΦG‖²_F + reg‖G‖²_F`.
pub fn ridge_solve<T: Scalar>(phi: &Matrix<T>, y: &Matrix<T>, reg: T) -> Result<Matrix<T>, LinalgError> {
    if !(reg > T::zero()) {
        return Err(LinalgError::NonPositiveRegularizer(
            reg.to_f64().unwrap_or(f64::NAN),
        ));
    }
    if phi.rows() != y.rows() {
        return Err(LinalgError::Shape {
            op: "ridge_solve",
            left: phi.shape(),
            right: y.shape(),
        });
    }
    let system = SpdMatrix::from_symmetrized(phi.gram().add_diagonal(reg)?)?;
    system.solve(&phi.t_matmul(y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let v = m(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&v).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 3, 4);
        assert_close(&a.matmul(&b).unwrap(), &triple_loop(&a, &b), 1e-14);
        // large enough to take the parallel path
        let a = random(&mut rng, 70, 40);
        let b = random(&mut rng, 40, 50);
        assert_close(&a.matmul(&b).unwrap(), &triple_loop(&a, &b), 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(LinalgError::Shape { .. })));
    }

    #[test]
    fn spd_solve_examples() {
        let b = m(&[&[1.0, -2.0], &[0.5, 3.0], &[4.0, 0.0]]);
        let id = SpdMatrix::new(Matrix::identity(3)).unwrap();
        assert_eq!(spd_solve(&id, &b).unwrap(), b);

        let a = SpdMatrix::new(m(&[&[3.0, 1.0], &[1.0, 3.0]])).unwrap();
        let x = spd_solve(&a, &m(&[&[2.0], &[1.0]])).unwrap();
        assert_close(&x, &m(&[&[0.625], &[0.125]]), 1e-15);

        let d = SpdMatrix::new(Matrix::diag(&[2.0, 4.0])).unwrap();
        let x = spd_solve(&d, &m(&[&[2.0], &[4.0]])).unwrap();
        assert_close(&x, &m(&[&[1.0], &[1.0]]), 1e-15);
    }

    #[test]
    fn cholesky_reports_failing_minor() {
        // leading 1x1 minor is fine, the 2x2 one has determinant 1 - 4 < 0
        let err = SpdMatrix::new(m(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap_err();
        assert_eq!(err, LinalgError::NotPositiveDefinite { minor: 2 });
        let err = Cholesky::factor(&m(&[&[-1.0]])).unwrap_err();
        assert_eq!(err, LinalgError::NotPositiveDefinite { minor: 1 });
    }

    #[test]
    fn spd_rejects_asymmetric() {
        let err = SpdMatrix::new(m(&[&[2.0, 1.0], &[0.0, 2.0]])).unwrap_err();
        assert!(matches!(err, LinalgError::NotSymmetric { .. }));
    }

    #[test]
    fn ridge_examples() {
        let g = ridge_solve(&m(&[&[1.0], &[1.0]]), &m(&[&[1.0], &[1.0]]), 1.0).unwrap();
        assert_close(&g, &m(&[&[2.0 / 3.0]]), 1e-15);

        let phi = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let y = m(&[&[1.0], &[0.0], &[1.0]]);
        let g = ridge_solve(&phi, &y, 1.0).unwrap();
        assert_close(&g, &m(&[&[0.625], &[0.125]]), 1e-15);

        let g = ridge_solve(&phi, &Matrix::zeros(3, 2), 1.0).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));
    }

    #[test]
    fn ridge_rejects_non_positive_reg() {
        let phi = m(&[&[1.0]]);
        assert_eq!(
            ridge_solve(&phi, &phi, 0.0).unwrap_err(),
            LinalgError::NonPositiveRegularizer(0.0)
        );
        assert!(ridge_solve(&phi, &phi, -1.0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let a = SpdMatrix::new(Matrix::<f32>::from_rows(&[[3.0f32, 1.0], [1.0, 3.0]]).unwrap()).unwrap();
        let x = a.solve(&Matrix::from_rows(&[[2.0f32], [1.0]]).unwrap()).unwrap();
        assert!((x[(0, 0)] - 0.625).abs() < 1e-6);
        assert!((x[(1, 0)] - 0.125).abs() < 1e-6);
    }

    /// Random SPD matrix `Q diag(λ) Qᵀ` with eigenvalues log-spaced so the
    /// condition number is `cond`.
    fn spd_with_condition(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> Matrix<f64> {
        // Gram-Schmidt on a random square matrix gives an orthogonal Q.
        let raw = random(rng, n, n);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let mut v = raw.row(i).to_vec();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
        let q = Matrix::from_rows(&q).unwrap();
        let eig: Vec<f64> = (0..n)
            .map(|i| cond.powf(i as f64 / (n.max(2) - 1) as f64))
            .collect();
        q.transpose().matmul(&Matrix::diag(&eig)).unwrap().matmul(&q).unwrap()
    }

    fn objective(phi: &Matrix<f64>, y: &Matrix<f64>, g: &Matrix<f64>, reg: f64) -> f64 {
        let r = y.sub(&phi.matmul(g).unwrap()).unwrap().frobenius_norm();
        let n = g.frobenius_norm();
        r * r + reg * n * n
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ridge_stationarity(seed in any::<u64>(), n in 1usize..80, d in 1usize..64, c in 1usize..12, reg in 1e-3f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random(&mut rng, n, d);
            let y = random(&mut rng, n, c);
            let g = ridge_solve(&phi, &y, reg).unwrap();
            let lhs = phi.gram().matmul(&g).unwrap().add(&g.scale(reg)).unwrap();
            let rhs = phi.t_matmul(&y).unwrap();
            prop_assert!(lhs.rel_error(&rhs).unwrap() <= 1e-10);
        }

        #[test]
        fn ridge_is_local_minimum(seed in any::<u64>(), n in 1usize..40, d in 1usize..24, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random(&mut rng, n, d);
            let y = random(&mut rng, n, c);
            let reg = 0.5;
            let g = ridge_solve(&phi, &y, reg).unwrap();
            let best = objective(&phi, &y, &g, reg);
            for _ in 0..100 {
                let dir = random(&mut rng, d, c);
                let dir = dir.scale(1e-3 / dir.frobenius_norm());
                let moved = objective(&phi, &y, &g.add(&dir).unwrap(), reg);
                prop_assert!(best <= moved);
            }
        }

        #[test]
        fn spd_round_trip(seed in any::<u64>(), n in 1usize..48, log_cond in 0.0f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = spd_with_condition(&mut rng, n, 10f64.powf(log_cond));
            let spd = SpdMatrix::from_symmetrized(a).unwrap();
            // X -> B = A X -> solve -> multiply back. A right-hand side drawn
            // directly would put O(1) weight on the smallest eigenvectors, where
            // even the correctly rounded solution has residual ~ eps * cond.
            let x_true = random(&mut rng, n, 3);
            let b = spd.as_matrix().matmul(&x_true).unwrap();
            let x = spd.solve(&b).unwrap();
            let back = spd.as_matrix().matmul(&x).unwrap();
            prop_assert!(back.rel_error(&b).unwrap() <= 1e-10, "err {}", back.rel_error(&b).unwrap());
        }
    }
}
