//! Dense vectors and matrices over `f64`, plus the exact factorizations used
//! as oracles for the stochastic estimators: a Cholesky log-determinant and a
//! cyclic-Jacobi symmetric eigensolver.
//!
//! Everything here is plain row-major storage. Dimensions stay small (a few
//! hundred at most), so simplicity and verifiability win over raw speed.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("vector or matrix must be non-empty")]
    Empty,
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("Jacobi eigensolver did not converge in {0} sweeps")]
    NoConvergence(usize),
}

/// Dense vector of 64-bit floats. Non-empty, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { data })
    }

    /// Construction without the finiteness scan, for internal hot paths where
    /// the entries are produced by checked arithmetic on already-valid data.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "zero-length vector");
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn basis(len: usize, index: usize) -> Self {
        assert!(index < len);
        let mut v = Self::zeros(len);
        v.data[index] = 1.0;
        v
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        assert!(len > 0);
        Self {
            data: (0..len).map(f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: len > 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// self + s * other
    pub fn axpy(&self, s: f64, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "axpy dimension mismatch");
        Vector::from_raw(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        )
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector::from_raw(self.data.iter().map(|a| a * s).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.axpy(-1.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                context: "matrix storage",
                left: rows * cols,
                right: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { data, rows, cols })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { data, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector::from_raw((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Relative asymmetry max |a_ij - a_ji| / max |a_ij|; 0 for the zero matrix.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix-vector product.
pub fn matvec(a: &Matrix, v: &Vector) -> Result<Vector, LinalgError> {
    if a.cols() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            context: "matvec",
            left: a.cols(),
            right: v.len(),
        });
    }
    let mut out = vec![0.0; a.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        let row = a.row(i);
        let mut acc = 0.0;
        for (x, y) in row.iter().zip(v.as_slice()) {
            acc += x * y;
        }
        *o = acc;
    }
    Ok(Vector::from_raw(out))
}

/// ln det(A) for symmetric positive definite A, via Cholesky factorization.
///
/// Exact to machine precision: ln det = 2 Σ ln L_ii. A non-positive pivot
/// means the input is not positive definite.
pub fn cholesky_logdet(a: &Matrix) -> Result<f64, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let asym = a.asymmetry();
    if asym > 1e-8 {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let n = a.rows();
    // Lower-triangular factor, built column by column.
    let mut l = vec![0.0; n * n];
    let mut logdet = 0.0;
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                row: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        logdet += ljj.ln();
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(2.0 * logdet)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in descending order.
    pub eigenvalues: Vector,
    /// Eigenvectors as matrix columns, ordered to match `eigenvalues`.
    /// Each column is sign-fixed: its largest-magnitude component is positive.
    pub eigenvectors: Matrix,
}

/// Symmetric eigensolver by cyclic Jacobi rotations.
///
/// Sweeps annihilate off-diagonal entries until the off-diagonal Frobenius
/// norm drops below `1e-12 * ||A||_F`. Rejects inputs with relative asymmetry
/// above 1e-8.
pub fn sym_eig(a: &Matrix) -> Result<SymEig, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let asym = a.asymmetry();
    if asym > 1e-8 {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let n = a.rows();
    let norm = a.frobenius_norm();
    let tol = 1e-12 * norm;

    // Work on a symmetrized copy so tiny input asymmetry cannot bias sweeps.
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Matrix::identity(n);

    const MAX_SWEEPS: usize = 64;
    let mut converged = norm == 0.0;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += 2.0 * m.get(i, j) * m.get(i, j);
                }
            }
            s.sqrt()
        };
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                // tan of the rotation angle, the root of smaller magnitude.
                let t = if theta.abs() > 1e12 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m.get(i, p);
                        let aiq = m.get(i, q);
                        let new_ip = aip - s * (aiq + tau * aip);
                        let new_iq = aiq + s * (aip - tau * aiq);
                        m.set(i, p, new_ip);
                        m.set(p, i, new_ip);
                        m.set(i, q, new_iq);
                        m.set(q, i, new_iq);
                    }
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, vip - s * (viq + tau * vip));
                    v.set(i, q, viq + s * (vip - tau * viq));
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(MAX_SWEEPS));
    }

    // Sort descending by eigenvalue, carrying columns along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap());
    let eigenvalues = Vector::from_raw(order.iter().map(|&k| m.get(k, k)).collect());
    let mut vecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        // Sign convention: first component of largest magnitude is positive.
        let mut lead = 0;
        for i in 1..n {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let flip = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vecs.set(i, dst, flip * col[i]);
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors: vecs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use approx::assert_relative_eq;

    fn random_symmetric(n: usize, rng: &mut SeedRng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = rng.standard_normal();
                m.set(i, j, x);
                m.set(j, i, x);
            }
        }
        m
    }

    fn random_spd(n: usize, rng: &mut SeedRng) -> Matrix {
        // BᵀB + I is comfortably positive definite.
        let b = Matrix::from_fn(n, n, |_, _| rng.standard_normal());
        let mut g = b.transpose().matmul(&b);
        for i in 0..n {
            g.set(i, i, g.get(i, i) + 1.0);
        }
        g
    }

    #[test]
    fn matvec_identity() {
        let a = Matrix::identity(3);
        let v = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(matvec(&a, &v).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matvec_diagonal() {
        let a = Matrix::diag(&[2.0, 3.0]);
        let v = Vector::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(matvec(&a, &v).unwrap().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn matvec_permutation() {
        let a = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = Vector::new(vec![5.0, 7.0]).unwrap();
        assert_eq!(matvec(&a, &v).unwrap().as_slice(), &[7.0, 5.0]);
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let a = Matrix::identity(3);
        let v = Vector::new(vec![1.0, 2.0]).unwrap();
        assert!(matvec(&a, &v).is_err());
    }

    #[test]
    fn cholesky_identity_is_zero() {
        assert_eq!(cholesky_logdet(&Matrix::identity(5)).unwrap(), 0.0);
    }

    #[test]
    fn cholesky_diagonal() {
        let a = Matrix::diag(&[2.0, 2.0]);
        assert_relative_eq!(
            cholesky_logdet(&a).unwrap(),
            2.0 * 2.0f64.ln(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(
            cholesky_logdet(&a),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_matches_eigenvalue_product() {
        // Cross-oracle: ln det from Cholesky vs Σ ln λ_i from the eigensolver.
        let mut rng = SeedRng::new(42);
        let a = random_spd(8, &mut rng);
        let logdet = cholesky_logdet(&a).unwrap();
        let eig = sym_eig(&a).unwrap();
        let sum_log: f64 = eig.eigenvalues.as_slice().iter().map(|l| l.ln()).sum();
        assert_relative_eq!(logdet, sum_log, max_relative = 1e-10);
    }

    #[test]
    fn sym_eig_diagonal_sorted() {
        let a = Matrix::diag(&[3.0, 1.0, 2.0]);
        let eig = sym_eig(&a).unwrap();
        assert_eq!(eig.eigenvalues.as_slice(), &[3.0, 2.0, 1.0]);
        // Axis eigenvectors in the matching order.
        for (col, axis) in [(0usize, 0usize), (1, 2), (2, 1)] {
            for i in 0..3 {
                let expect = if i == axis { 1.0 } else { 0.0 };
                assert_relative_eq!(eig.eigenvectors.get(i, col), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sym_eig_classic_2x2() {
        let a = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let eig = sym_eig(&a).unwrap();
        assert_relative_eq!(eig.eigenvalues[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(eig.eigenvalues[1], 1.0, epsilon = 1e-12);
        let s = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(eig.eigenvectors.get(0, 0).abs(), s, epsilon = 1e-12);
        assert_relative_eq!(eig.eigenvectors.get(1, 0).abs(), s, epsilon = 1e-12);
        // Second eigenvector ∝ (1, -1)/√2.
        assert_relative_eq!(
            eig.eigenvectors.get(0, 1) + eig.eigenvectors.get(1, 1),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sym_eig_reconstructs() {
        let mut rng = SeedRng::new(7);
        let a = random_symmetric(16, &mut rng);
        let eig = sym_eig(&a).unwrap();
        let v = &eig.eigenvectors;
        let lam = Matrix::diag(eig.eigenvalues.as_slice());
        let recon = v.matmul(&lam).matmul(&v.transpose());
        let mut max_err: f64 = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                max_err = max_err.max((recon.get(i, j) - a.get(i, j)).abs());
            }
        }
        assert!(max_err < 1e-9, "reconstruction error {max_err}");
    }

    #[test]
    fn sym_eig_orthonormal_eigenvectors() {
        let mut rng = SeedRng::new(11);
        let a = random_symmetric(12, &mut rng);
        let eig = sym_eig(&a).unwrap();
        let vtv = eig.eigenvectors.transpose().matmul(&eig.eigenvectors);
        for i in 0..12 {
            for j in 0..12 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vtv.get(i, j) - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let a = Matrix::new(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(sym_eig(&a), Err(LinalgError::NotSymmetric(_))));
    }

    #[test]
    fn logdet_eigenvalue_agreement_up_to_64() {
        let mut rng = SeedRng::new(3);
        for &n in &[4usize, 16, 64] {
            let a = random_spd(n, &mut rng);
            let logdet = cholesky_logdet(&a).unwrap();
            let sum_log: f64 = sym_eig(&a)
                .unwrap()
                .eigenvalues
                .as_slice()
                .iter()
                .map(|l| l.ln())
                .sum();
            assert_relative_eq!(logdet, sum_log, max_relative = 1e-8);
        }
    }

    #[test]
    fn vector_rejects_nan() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![]).is_err());
    }
}
