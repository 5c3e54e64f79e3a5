//! Dense row-major matrices, Cholesky factors with a jitter fallback, and LU solves.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::num_kernel::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_dim("matrix data length", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Build from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, data }
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim("matrix add rows", self.rows, other.rows)?;
        check_dim("matrix add cols", self.cols, other.cols)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim("matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ v`.
    pub fn tr_matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim("transposed matvec", self.rows, v.len())?;
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = T::one().max(self.max_abs());
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub fn norm_inf<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub fn norm2<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Relative pivot floor: pivots at or below `PIVOT_FLOOR * mean(diag)` count as failures.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Diagonal jitter, relative to the mean diagonal, added on the single retry.
pub const JITTER: f64 = 1e-10;

/// Lower Cholesky factor stored as packed rows, so appending a row is cheap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdFactor<T> {
    n: usize,
    packed: Vec<T>,
    /// Diagonal shift that was added to obtain this factor (zero when none was needed).
    pub jitter: T,
    /// Scale used to derive the pivot floor and jitter for later appends.
    pub diag_scale: T,
}

#[inline]
fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

fn jitter_for<T: Scalar>(mean_diag: T) -> (T, T) {
    let md = mean_diag.abs();
    let base = if md > T::zero() { md } else { T::one() };
    (T::c(PIVOT_FLOOR) * md, T::c(JITTER) * base)
}

/// Cholesky factorization with one jittered retry.
pub fn cholesky<T: Scalar>(a: &Matrix<T>) -> Result<SpdFactor<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { what: "cholesky (square)", expected: a.rows(), found: a.cols() });
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Domain("cholesky of an empty matrix".into()));
    }
    if !a.is_symmetric(T::c(1e-12)) {
        return Err(Error::Domain("cholesky input is not symmetric".into()));
    }
    let mean_diag = a.diag().into_iter().sum::<T>() / T::c(n as f64);
    let (floor, jitter) = jitter_for(mean_diag);
    match factor_packed(a, T::zero(), floor) {
        Ok(packed) => Ok(SpdFactor { n, packed, jitter: T::zero(), diag_scale: mean_diag }),
        Err(_) => factor_packed(a, jitter, floor)
            .map(|packed| SpdFactor { n, packed, jitter, diag_scale: mean_diag }),
    }
}

fn factor_packed<T: Scalar>(a: &Matrix<T>, shift: T, floor: T) -> Result<Vec<T>> {
    let n = a.rows();
    let mut l = vec![T::zero(); tri(n)];
    for i in 0..n {
        let ri = tri(i);
        for j in 0..=i {
            let rj = tri(j);
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[ri + k] * l[rj + k];
            }
            if i == j {
                s += shift;
                if !(s > floor) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l[ri + i] = s.sqrt();
            } else {
                l[ri + j] = s / l[rj + j];
            }
        }
    }
    Ok(l)
}

impl<T: Scalar> SpdFactor<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        if j > i {
            T::zero()
        } else {
            self.packed[tri(i) + j]
        }
    }

    /// Dense copy of the lower factor.
    pub fn lower(&self) -> Matrix<T> {
        Matrix::from_fn(self.n, self.n, |i, j| self.at(i, j))
    }

    /// `L Lᵀ` (including any jitter that was absorbed).
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.n;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s = dot(&self.packed[tri(i)..tri(i) + j + 1], &self.packed[tri(j)..tri(j) + j + 1]);
                m[(i, j)] = s;
                m[(j, i)] = s;
            }
        }
        m
    }

    /// Solve `L y = b`.
    pub fn solve_lower(&self, b: &[T]) -> Result<Vec<T>> {
        check_dim("triangular solve", self.n, b.len())?;
        let mut y = b.to_vec();
        for i in 0..self.n {
            let row = &self.packed[tri(i)..tri(i) + i + 1];
            let s = dot(&row[..i], &y[..i]);
            y[i] = (y[i] - s) / row[i];
        }
        Ok(y)
    }

    /// Solve `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[T]) -> Result<Vec<T>> {
        check_dim("triangular solve", self.n, y.len())?;
        let mut x = y.to_vec();
        for i in (0..self.n).rev() {
            x[i] /= self.packed[tri(i) + i];
            let xi = x[i];
            let row = &self.packed[tri(i)..tri(i) + i];
            for (xk, &lik) in x[..i].iter_mut().zip(row) {
                *xk -= lik * xi;
            }
        }
        Ok(x)
    }

    /// Solve `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        self.solve_upper(&self.solve_lower(b)?)
    }

    /// `L v`.
    pub fn mul_lower(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim("factor product", self.n, v.len())?;
        Ok((0..self.n).map(|i| dot(&self.packed[tri(i)..tri(i) + i + 1], &v[..=i])).collect())
    }

    pub fn log_det(&self) -> T {
        (0..self.n).map(|i| self.packed[tri(i) + i].ln()).sum::<T>() * T::c(2.0)
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e).expect("dimension checked");
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    /// Append one row/column to the factored matrix.
    ///
    /// `cross` holds the covariances between the new point and the existing ones,
    /// `diag` its own variance. Returns the new factor and whether jitter was needed.
    pub fn append(&self, cross: &[T], diag: T) -> Result<(Self, bool)> {
        let mut f = self.clone();
        let jittered = f.push(cross, diag)?;
        Ok((f, jittered))
    }

    /// In-place variant of [`append`](Self::append); returns whether jitter was needed.
    pub fn push(&mut self, cross: &[T], diag: T) -> Result<bool> {
        let row = self.solve_lower(cross)?;
        self.push_whitened(row, diag)
    }

    /// Append given the already whitened cross row `L⁻¹ cross`.
    pub fn push_whitened(&mut self, row: Vec<T>, diag: T) -> Result<bool> {
        check_dim("appended row", self.n, row.len())?;
        let mut d = diag - dot(&row, &row);
        let (floor, jitter) = jitter_for(self.diag_scale);
        let mut jittered = false;
        if !(d > floor) {
            d += jitter;
            jittered = true;
            if !(d > floor) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: self.n });
            }
        }
        self.packed.extend(row);
        self.packed.push(d.sqrt());
        self.n += 1;
        Ok(jittered)
    }

    /// Pivots at or below this value trigger the jitter fallback.
    pub fn pivot_floor(&self) -> T {
        jitter_for(self.diag_scale).0
    }
}

/// Lower factor of a positive semidefinite matrix.
///
/// Pivots at or below `tol` zero their column instead of failing, so exactly
/// singular directions (zero variances, repeated points) contribute nothing.
pub fn semidefinite_lower<T: Scalar>(a: &Matrix<T>, tol: T) -> Result<Matrix<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { what: "semidefinite factor (square)", expected: a.rows(), found: a.cols() });
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() {
            return Err(Error::Domain("non-finite covariance".into()));
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Draw `mean + L ξ` with `ξ` standard normal from `rng`.
pub fn mvn_sample(mean: &[f64], factor: &SpdFactor<f64>, rng: &mut RngStream) -> Result<Vec<f64>> {
    check_dim("mvn_sample mean", factor.dim(), mean.len())?;
    let xi = rng.normals(mean.len());
    let lx = factor.mul_lower(&xi)?;
    Ok(mean.iter().zip(lx).map(|(m, v)| m + v).collect())
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    lu: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch { what: "lu (square)", expected: a.rows(), found: a.cols() });
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[(i, k)].abs().partial_cmp(&lu[(j, k)].abs()).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(k);
            let piv = lu[(p, k)];
            if !(piv.abs() > T::c(1e-300).max(T::epsilon() * T::epsilon() * scale)) || !piv.is_finite() {
                return Err(Error::Domain(format!("singular matrix in LU (column {k})")));
            }
            if p != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = t;
                }
                perm.swap(k, p);
            }
            for i in k + 1..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                if f != T::zero() {
                    for j in k + 1..n {
                        let v = lu[(k, j)];
                        lu[(i, j)] -= f * v;
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.lu.rows();
        check_dim("lu solve", n, b.len())?;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu.row(i)[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu.row(i)[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        Ok(x)
    }

    /// Solve `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.lu.rows();
        check_dim("lu transposed solve", n, b.len())?;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ w = z, x = Pᵀ w.
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.lu[(k, i)] * z[k];
            }
            z[i] = s / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s -= self.lu[(k, i)] * z[k];
            }
            z[i] = s;
        }
        let mut x = vec![T::zero(); n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        Ok(x)
    }
}

pub fn lu_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    Lu::new(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semidefinite_factor_of_singular_matrix() {
        // rank one plus a zero variance
        let a = Matrix::<f64>::from_rows(&[[4.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let l = semidefinite_lower(&a, 1e-12).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
        assert_eq!(l[(1, 1)], 0.0);
        assert_eq!(l[(2, 2)], 0.0);
    }

    #[test]
    fn identity_factor_is_identity() {
        let f = cholesky(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(f.lower(), Matrix::identity(3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn two_by_two_factor() {
        let a = Matrix::<f64>::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky(&a).unwrap().lower();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let a = Matrix::<f64>::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let a = Matrix::<f64>::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let f = cholesky(&a).unwrap();
        assert!(f.jitter > 0.0 && f.jitter < 1e-9);
    }

    #[test]
    fn append_matches_refactorization() {
        let a = Matrix::<f64>::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let sub = Matrix::<f64>::from_rows(&[[4.0, 1.0], [1.0, 3.0]]);
        let (f, jittered) = cholesky(&sub).unwrap().append(&[0.5, 0.2], 2.0).unwrap();
        assert!(!jittered);
        let full = cholesky(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((f.at(i, j) - full.at(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn solves_and_inverse() {
        let a = Matrix::<f64>::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let f = cholesky(&a).unwrap();
        let x = f.solve(&[1.0, 2.0, 3.0]).unwrap();
        let b = a.matvec(&x).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 2.0).abs() < 1e-14 && (b[2] - 3.0).abs() < 1e-14);
        let id = a.matmul(&f.inverse()).unwrap();
        assert!(id.add(&Matrix::identity(3).scaled(-1.0)).unwrap().max_abs() < 1e-14);
        let det: f64 = 4.0 * (6.0 - 0.04) - 1.0 * (2.0 - 0.1) + 0.5 * (0.2 - 1.5);
        assert!((f.log_det() - det.ln()).abs() < 1e-14);
    }

    #[test]
    fn lu_solves_both_ways() {
        let a = Matrix::<f64>::from_rows(&[[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]]);
        let lu = Lu::new(&a).unwrap();
        let x = lu.solve(&[1.0, 2.0, 3.0]).unwrap();
        let r = a.matvec(&x).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-14 && (r[1] - 2.0).abs() < 1e-14 && (r[2] - 3.0).abs() < 1e-14);
        let y = lu.solve_transpose(&[1.0, 2.0, 3.0]).unwrap();
        let r = a.tr_matvec(&y).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-14 && (r[1] - 2.0).abs() < 1e-14 && (r[2] - 3.0).abs() < 1e-14);
    }
}
