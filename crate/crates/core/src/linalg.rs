//! Small dense linear algebra over [`Scalar`]: Cholesky, Householder QR and
//! a symmetric eigensolver (Householder tridiagonalisation followed by
//! implicit QL). Matrices are row-major.

use crate::scalar::Scalar;
use std::ops::{Index, IndexMut};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = F::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<F> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == F::zero() {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }
}

impl<F> Index<(usize, usize)> for Matrix<F> {
    type Output = F;
    fn index(&self, (i, j): (usize, usize)) -> &F {
        &self.data[i * self.cols + j]
    }
}

impl<F> IndexMut<(usize, usize)> for Matrix<F> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<F> {
    l: Matrix<F>,
}

impl<F: Scalar> Cholesky<F> {
    pub fn new(a: &Matrix<F>) -> Result<Self, LinalgError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(LinalgError::Dimension("cholesky needs a square matrix".into()));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= F::zero() || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: j });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                let (li, lj) = (l.row(i), l.row(j));
                for k in 0..j {
                    s -= li[k] * lj[k];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn solve(&self, b: &[F]) -> Vec<F> {
        let n = self.l.rows();
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            let mut s = y[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix<F> {
        let n = self.l.rows();
        // Invert L (lower triangular), then A^-1 = L^-T L^-1.
        let mut linv = Matrix::zeros(n, n);
        for j in 0..n {
            linv[(j, j)] = F::one() / self.l[(j, j)];
            for i in (j + 1)..n {
                let mut s = F::zero();
                for k in j..i {
                    s += self.l[(i, k)] * linv[(k, j)];
                }
                linv[(i, j)] = -s / self.l[(i, i)];
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = F::zero();
                for k in i..n {
                    s += linv[(k, i)] * linv[(k, j)];
                }
                inv[(i, j)] = s;
                inv[(j, i)] = s;
            }
        }
        inv
    }

    pub fn factor(&self) -> &Matrix<F> {
        &self.l
    }
}

/// Householder QR of a tall matrix, used for least squares.
#[derive(Clone, Debug)]
pub struct HouseholderQr<F> {
    qr: Matrix<F>,
    rdiag: Vec<F>,
}

impl<F: Scalar> HouseholderQr<F> {
    /// Factorizes `a` (rows >= cols). Fails if a diagonal entry of R is
    /// negligible relative to the largest one.
    pub fn new(a: &Matrix<F>) -> Result<Self, LinalgError> {
        let (m, n) = (a.rows(), a.cols());
        if m < n {
            return Err(LinalgError::Dimension(format!(
                "QR needs rows >= cols, got {m}x{n}"
            )));
        }
        let mut qr = a.clone();
        let mut rdiag = vec![F::zero(); n];
        for k in 0..n {
            let mut nrm = F::zero();
            for i in k..m {
                nrm = nrm.hypot(qr[(i, k)]);
            }
            if nrm != F::zero() {
                if qr[(k, k)] < F::zero() {
                    nrm = -nrm;
                }
                for i in k..m {
                    qr[(i, k)] /= nrm;
                }
                qr[(k, k)] += F::one();
                for j in (k + 1)..n {
                    let mut s = F::zero();
                    for i in k..m {
                        s += qr[(i, k)] * qr[(i, j)];
                    }
                    s = -s / qr[(k, k)];
                    for i in k..m {
                        let v = qr[(i, k)];
                        qr[(i, j)] += s * v;
                    }
                }
            }
            rdiag[k] = -nrm;
        }
        let scale = rdiag.iter().fold(F::zero(), |acc, r| acc.max(r.abs()));
        let tol = F::epsilon() * F::lit(1e3) * F::count(m.max(1)).sqrt() * scale;
        for (k, r) in rdiag.iter().enumerate() {
            if r.abs() <= tol || scale == F::zero() {
                return Err(LinalgError::RankDeficient { column: k });
            }
        }
        Ok(HouseholderQr { qr, rdiag })
    }

    pub fn ncols(&self) -> usize {
        self.qr.cols()
    }

    pub fn nrows(&self) -> usize {
        self.qr.rows()
    }

    /// Least-squares solution of `a x = b`.
    pub fn solve(&self, b: &[F]) -> Vec<F> {
        let (m, n) = (self.qr.rows(), self.qr.cols());
        let mut y = b.to_vec();
        for k in 0..n {
            let mut s = F::zero();
            for i in k..m {
                s += self.qr[(i, k)] * y[i];
            }
            s = -s / self.qr[(k, k)];
            for i in k..m {
                y[i] += s * self.qr[(i, k)];
            }
        }
        let mut x = vec![F::zero(); n];
        for k in (0..n).rev() {
            let mut s = y[k];
            for j in (k + 1)..n {
                s -= self.qr[(k, j)] * x[j];
            }
            x[k] = s / self.rdiag[k];
        }
        x
    }

    /// `(A^T A)^{-1} = R^{-1} R^{-T}`.
    pub fn gram_inverse(&self) -> Matrix<F> {
        let n = self.qr.cols();
        let r = |i: usize, j: usize| {
            if i == j {
                self.rdiag[i]
            } else {
                self.qr[(i, j)]
            }
        };
        let mut rinv = Matrix::zeros(n, n);
        for j in 0..n {
            rinv[(j, j)] = F::one() / r(j, j);
            for i in (0..j).rev() {
                let mut s = F::zero();
                for k in (i + 1)..=j {
                    s += r(i, k) * rinv[(k, j)];
                }
                rinv[(i, j)] = -s / r(i, i);
            }
        }
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = F::zero();
                for k in i.max(j)..n {
                    s += rinv[(i, k)] * rinv[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Eigendecomposition of a real symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<F> {
    /// Eigenvalues in ascending order.
    pub values: Vec<F>,
    /// Row `j` is the unit eigenvector for `values[j]`.
    pub vectors: Matrix<F>,
}

impl<F: Scalar> SymmetricEigen<F> {
    pub fn new(a: &Matrix<F>) -> Result<Self, LinalgError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(LinalgError::Dimension("eigen needs a square matrix".into()));
        }
        if n == 0 {
            return Ok(SymmetricEigen {
                values: Vec::new(),
                vectors: Matrix::zeros(0, 0),
            });
        }
        let mut v = a.clone();
        let mut d = vec![F::zero(); n];
        let mut e = vec![F::zero(); n];
        tridiagonalize(&mut v, &mut d, &mut e);
        // Eigenvectors become rows so the QL rotations touch contiguous memory.
        let mut vt = v.transpose();
        ql_implicit(&mut d, &mut e, &mut vt)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap_or(std::cmp::Ordering::Equal));
        let values = order.iter().map(|&i| d[i]).collect();
        let vectors = Matrix::from_fn(n, n, |r, c| vt[(order[r], c)]);
        Ok(SymmetricEigen { values, vectors })
    }
}

/// Gauss nodes and weights of a Jacobi matrix with diagonal `alpha` and
/// off-diagonal `beta` (`beta.len() == alpha.len() - 1`).
pub fn tridiagonal_gauss<F: Scalar>(alpha: &[F], beta: &[F]) -> Result<(Vec<F>, Vec<F>), LinalgError> {
    let k = alpha.len();
    if k == 0 || beta.len() + 1 != k {
        return Err(LinalgError::Dimension("jacobi matrix shape".into()));
    }
    let mut d = alpha.to_vec();
    let mut e = vec![F::zero(); k];
    e[1..].copy_from_slice(beta);
    // Only first eigenvector components are tracked.
    let mut z = Matrix::zeros(k, 1);
    z[(0, 0)] = F::one();
    ql_implicit(&mut d, &mut e, &mut z)?;
    let w = (0..k).map(|j| z[(j, 0)] * z[(j, 0)]).collect();
    Ok((d, w))
}

fn tridiagonalize<F: Scalar>(v: &mut Matrix<F>, d: &mut [F], e: &mut [F]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = F::zero();
        let mut h = F::zero();
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == F::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = F::zero();
                v[(j, i)] = F::zero();
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > F::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = F::zero();
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    let vkj = v[(k, j)];
                    g += vkj * d[k];
                    e[k] += vkj * f;
                }
                e[j] = g;
            }
            f = F::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let delta = f * e[k] + g * d[k];
                    v[(k, j)] -= delta;
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = F::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        let vii = v[(i, i)];
        v[(n - 1, i)] = vii;
        v[(i, i)] = F::one();
        let h = d[i + 1];
        if h != F::zero() {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = F::zero();
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    let dk = d[k];
                    v[(k, j)] -= g * dk;
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = F::zero();
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = F::zero();
    }
    v[(n - 1, n - 1)] = F::one();
    e[0] = F::zero();
}

/// Implicit QL on the tridiagonal (d, e); `vt` holds eigenvectors as rows.
fn ql_implicit<F: Scalar>(d: &mut [F], e: &mut [F], vt: &mut Matrix<F>) -> Result<(), LinalgError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = F::zero();
    let two = F::lit(2.0);
    let eps = F::epsilon();
    let mut f = F::zero();
    let mut tst1 = F::zero();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0usize;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(LinalgError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(F::one());
                if p < F::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = F::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = F::zero();
                let mut s2 = F::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = vt.data.split_at_mut((i + 1) * vt.cols);
                    let row_i = &mut lo[i * vt.cols..];
                    let row_i1 = &mut hi[..vt.cols];
                    for (a, b) in row_i.iter_mut().zip(row_i1.iter_mut()) {
                        let hb = *b;
                        *b = s * *a + c * hb;
                        *a = c * *a - s * hb;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = F::zero();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, seed: u64) -> Matrix<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = next();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        for n in [1, 2, 3, 7, 20] {
            let a = sym(n, n as u64);
            let eig = SymmetricEigen::new(&a).unwrap();
            for w in eig.values.windows(2) {
                assert!(w[0] <= w[1]);
            }
            for i in 0..n {
                for j in 0..n {
                    let rec: f64 = (0..n)
                        .map(|k| eig.vectors[(k, i)] * eig.values[k] * eig.vectors[(k, j)])
                        .sum();
                    assert!((rec - a[(i, j)]).abs() < 1e-12, "n={n}");
                }
            }
        }
    }

    #[test]
    fn gauss_matches_dense_eigen() {
        let alpha = [0.3f64, -1.0, 2.0, 0.5, 0.0];
        let beta = [1.0f64, 0.7, 0.2, 1.5];
        let t = Matrix::from_fn(5, 5, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(&t).unwrap();
        let dense: f64 = (0..5).map(|j| eig.vectors[(j, 0)].powi(2) * eig.values[j].exp()).sum();
        let (x, w) = tridiagonal_gauss(&alpha, &beta).unwrap();
        let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x.exp()).sum();
        assert!((dense - quad).abs() < 1e-12 * dense);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigen_of_path_graph() {
        let a = Matrix::from_row_major(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let eig = SymmetricEigen::new(&a).unwrap();
        let r2 = 2f64.sqrt();
        assert!((eig.values[0] + r2).abs() < 1e-14);
        assert!(eig.values[1].abs() < 1e-14);
        assert!((eig.values[2] - r2).abs() < 1e-14);
    }

    #[test]
    fn cholesky_inverse_and_solve() {
        let a = Matrix::from_row_major(3, 3, vec![4.0f64, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]).unwrap();
        let ch = Cholesky::new(&a).unwrap();
        let x = ch.solve(&[1.0, 2.0, 3.0]);
        let back = a.matvec(&x);
        for (b, t) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - t).abs() < 1e-13);
        }
        let prod = a.matmul(&ch.inverse()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - t).abs() < 1e-13);
            }
        }
        let not_pd = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(Cholesky::new(&not_pd), Err(LinalgError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn qr_least_squares_and_rank_check() {
        // y = 1 + 2x exactly.
        let x = Matrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y: Vec<f64> = (0..5).map(|i| 1.0 + 2.0 * i as f64).collect();
        let qr = HouseholderQr::new(&x).unwrap();
        let b = qr.solve(&y);
        assert!((b[0] - 1.0).abs() < 1e-13 && (b[1] - 2.0).abs() < 1e-13);
        let gi = qr.gram_inverse();
        let xtx = x.transpose().matmul(&x).unwrap();
        let prod = xtx.matmul(&gi).unwrap();
        assert!((prod[(0, 0)] - 1.0).abs() < 1e-12 && prod[(0, 1)].abs() < 1e-12);

        let collinear = Matrix::from_fn(4, 2, |i, _| i as f64 + 1.0);
        assert!(matches!(
            HouseholderQr::new(&collinear),
            Err(LinalgError::RankDeficient { column: 1 })
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::<f32>::from_row_major(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let eig = SymmetricEigen::new(&a).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-6 && (eig.values[1] - 3.0).abs() < 1e-6);
    }
}
