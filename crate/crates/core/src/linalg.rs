//! Small dense linear algebra: symmetric eigendecomposition (cyclic Jacobi),
//! symmetric square roots, Cholesky solves and a few helpers.
//!
//! Everything here is sized for the K×K and M×M matrices the simulator
//! needs (K up to a few hundred), not for general-purpose numerics.

use std::fmt;

use thiserror::Error;

/// Entries `|m[i][j] - m[j][i]|` above this are rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-PSD_CLAMP_TOL, 0]` are treated as zero by [`sym_sqrt`].
pub const PSD_CLAMP_TOL: f64 = 1e-10;
/// Smallest Cholesky pivot accepted by [`solve_spd`].
pub const SPD_PIVOT_TOL: f64 = 1e-12;

const JACOBI_REL_TOL: f64 = 1e-13;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is singular or indefinite (pivot {pivot:e} at row {row})")]
    Singular { row: usize, pivot: f64 },
    #[error("Jacobi iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidInput(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::InvalidInput(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `max |self - other|`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Square matrix whose entries are symmetric within [`SYMMETRY_TOL`].
#[derive(Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.0)
    }
}

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if m.rows != m.cols {
            return Err(LinalgError::InvalidInput(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        for i in 0..m.rows {
            for j in (i + 1)..m.cols {
                let d = (m[(i, j)] - m[(j, i)]).abs();
                if !(d <= SYMMETRY_TOL) {
                    return Err(LinalgError::InvalidInput(format!(
                        "matrix not symmetric at ({i},{j}): difference {d:e}"
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Builds `(m + mᵀ)/2`; always succeeds for square input.
    pub fn symmetrized(m: &Matrix) -> Result<Self, LinalgError> {
        if m.rows != m.cols {
            return Err(LinalgError::InvalidInput("matrix must be square".into()));
        }
        let n = m.rows;
        Ok(SymMatrix(Matrix::from_fn(n, n, |i, j| {
            0.5 * (m[(i, j)] + m[(j, i)])
        })))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(Matrix::zeros(n, n))
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.max_abs()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim(), other.dim());
        let data = self
            .0
            .data
            .iter()
            .zip(&other.0.data)
            .map(|(a, b)| a + b)
            .collect();
        SymMatrix(Matrix {
            rows: self.dim(),
            cols: self.dim(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(self.0.scale(s))
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
/// Column `j` of `vectors` belongs to `values[j]`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    /// `U diag(f(λ)) Uᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let u = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, f) in fv.iter().enumerate() {
                    s += u[(i, k)] * f * u[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        SymMatrix(out)
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Stops once the off-diagonal Frobenius norm drops below
/// `1e-13 * ‖m‖_F`.
pub fn sym_eig(m: &SymMatrix) -> Result<SymEig, LinalgError> {
    let n = m.dim();
    let mut a = m.0.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius();
    let target = JACOBI_REL_TOL * scale;

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut converged = scale == 0.0 || off_norm(&a) <= target;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // A <- Jᵀ A J, touching rows/cols p and q only.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= target;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Symmetric PSD square root `U Σ^{1/2} Uᵀ`.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = sym_eig(m)?;
    if let Some(&min) = eig.values.last() {
        if min < -PSD_CLAMP_TOL {
            return Err(LinalgError::NotPsd(min));
        }
    }
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Lower-triangular Cholesky factor.
fn cholesky(m: &SymMatrix) -> Result<Matrix, LinalgError> {
    let n = m.dim();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d >= SPD_PIVOT_TOL) {
            return Err(LinalgError::Singular { row: j, pivot: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve_in_place(l: &Matrix, x: &mut [f64]) {
    let n = l.rows;
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

/// Solves `m x = b` for symmetric positive-definite `m` via Cholesky.
pub fn solve_spd(m: &SymMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != m.dim() {
        return Err(LinalgError::InvalidInput(format!(
            "rhs length {} does not match dimension {}",
            b.len(),
            m.dim()
        )));
    }
    let l = cholesky(m)?;
    let mut x = b.to_vec();
    cholesky_solve_in_place(&l, &mut x);
    Ok(x)
}

/// Solves `m X = B` column by column; `B` is `n × p`.
pub fn solve_spd_matrix(m: &SymMatrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if b.rows != m.dim() {
        return Err(LinalgError::InvalidInput(format!(
            "rhs has {} rows, expected {}",
            b.rows,
            m.dim()
        )));
    }
    let l = cholesky(m)?;
    let mut out = Matrix::zeros(b.rows, b.cols);
    for c in 0..b.cols {
        let mut col = b.column(c);
        cholesky_solve_in_place(&l, &mut col);
        for (r, v) in col.into_iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    Ok(out)
}

pub fn trace(m: &SymMatrix) -> f64 {
    (0..m.dim()).map(|i| m[(i, i)]).sum()
}

pub fn matvec(m: &SymMatrix, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if v.len() != m.dim() {
        return Err(LinalgError::InvalidInput(format!(
            "vector length {} does not match dimension {}",
            v.len(),
            m.dim()
        )));
    }
    Ok((0..m.dim())
        .map(|i| m.0.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle4_metropolis() -> SymMatrix {
        let t = 1.0 / 3.0;
        SymMatrix::new(
            Matrix::from_vec(
                4,
                4,
                vec![
                    t, t, 0.0, t, //
                    t, t, t, 0.0, //
                    0.0, t, t, t, //
                    t, 0.0, t, t,
                ],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigenvalues_sorted() {
        let e = sym_eig(&SymMatrix::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn cycle4_eigenvalues_match_circulant_formula() {
        let e = sym_eig(&cycle4_metropolis()).unwrap();
        // 1/3 + (2/3) cos(2πj/4), j = 0..3, sorted
        let mut expected: Vec<f64> = (0..4)
            .map(|j| 1.0 / 3.0 + 2.0 / 3.0 * (2.0 * std::f64::consts::PI * j as f64 / 4.0).cos())
            .collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in e.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((expected[0] - 1.0).abs() < 1e-15);
        assert!((expected[3] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_symmetric() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(SymMatrix::new(m), Err(LinalgError::InvalidInput(_))));
    }

    #[test]
    fn sqrt_examples() {
        let r = sym_sqrt(&SymMatrix::identity(2)).unwrap();
        assert!(r.as_matrix().max_abs_diff(&Matrix::identity(2)) < 1e-15);
        let r = sym_sqrt(&SymMatrix::diag(&[4.0, 9.0])).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((r[(1, 1)] - 3.0).abs() < 1e-14);
        assert!(r[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn sqrt_of_i_minus_abar_cycle4() {
        let a = cycle4_metropolis();
        let n = 4;
        let target = SymMatrix::new(Matrix::from_fn(n, n, |i, j| {
            let abar = 0.5 * (a[(i, j)] + if i == j { 1.0 } else { 0.0 });
            (if i == j { 1.0 } else { 0.0 }) - abar
        }))
        .unwrap();
        let r = sym_sqrt(&target).unwrap();
        let rr = r.as_matrix().matmul(r.as_matrix()).unwrap();
        assert!(rr.max_abs_diff(target.as_matrix()) <= 1e-12);
    }

    #[test]
    fn sqrt_clamps_tiny_negative_and_rejects_indefinite() {
        let r = sym_sqrt(&SymMatrix::diag(&[1.0, -5e-11])).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
        assert!(matches!(
            sym_sqrt(&SymMatrix::diag(&[1.0, -1e-6])),
            Err(LinalgError::NotPsd(_))
        ));
    }

    #[test]
    fn solve_and_trace_examples() {
        assert_eq!(
            solve_spd(&SymMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let x = solve_spd(&SymMatrix::diag(&[2.0, 4.0]), &[2.0, 4.0]).unwrap();
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-15), "{x:?}");
        assert_eq!(trace(&SymMatrix::diag(&[3.0, 1.0, 2.0])), 6.0);
    }

    #[test]
    fn solve_rejects_singular() {
        let err = solve_spd(&SymMatrix::diag(&[1.0, 0.0]), &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::Singular { row: 1, .. }));
        let indefinite = SymMatrix::diag(&[1.0, -2.0]);
        assert!(solve_spd(&indefinite, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn matvec_dimension_check() {
        assert!(matvec(&SymMatrix::identity(2), &[1.0]).is_err());
        assert_eq!(
            matvec(&SymMatrix::diag(&[2.0, 3.0]), &[1.0, 1.0]).unwrap(),
            vec![2.0, 3.0]
        );
    }
}
