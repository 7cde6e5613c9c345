//! Dense row-major matrices, products, and truncated SVD of frozen weights.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration run on the side with
//! fewer columns. Layer widths in this crate are small, and Jacobi gives
//! orthogonality at the level of machine precision without a bidiagonal
//! reduction.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("matrix entry {pos}"),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from nested rows; panics on ragged input (test and example convenience).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix::from_vec_unchecked(1, values.len(), values.to_vec())
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Matrix::from_vec_unchecked(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "zip_map",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self · v` for a vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᵀ · v` for a vector `v` of length `rows`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dim(
                "matvec_t",
                format!("({}x{})ᵀ times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    /// Writes the flat little-endian layout: rows (u64), cols (u64), row-major f64 data.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Matrix> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let rows = u64::from_le_bytes(buf) as usize;
        r.read_exact(&mut buf)?;
        let cols = u64::from_le_bytes(buf) as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| *n <= (1 << 32))
            .ok_or_else(|| Error::Checkpoint(format!("implausible matrix dims {rows}x{cols}")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Matrix::new(rows, cols, data)
    }
}

/// Exact dense product `a · b`.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm_t(a, false, b, false)
}

/// `op(a) · op(b)` where `op` optionally transposes; backed by a blocked kernel.
pub fn gemm_t(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Result<Matrix> {
    let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(Error::dim(
            "gemm",
            format!(
                "{}{:?} times {}{:?}",
                if trans_a { "ᵀ" } else { "" },
                a.shape(),
                if trans_b { "ᵀ" } else { "" },
                b.shape()
            ),
        ));
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || ka == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe exactly the buffers of `a`, `b`
    // and the freshly allocated `out`, which do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Truncated orthogonal factors of a frozen weight: `W ≈ U_k diag(σ) V_kᵀ`.
///
/// The tail `W − U_k diag(σ) V_kᵀ` is never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u_k: Matrix,
    pub sigma_k: Vec<f64>,
    pub v_k: Matrix,
    pub k: usize,
}

impl SvdFactors {
    pub fn d_out(&self) -> usize {
        self.u_k.rows()
    }

    pub fn d_in(&self) -> usize {
        self.v_k.rows()
    }

    /// `U_k · core · V_kᵀ` for an arbitrary `k×k` core.
    pub fn expand_core(&self, core: &Matrix) -> Result<Matrix> {
        let left = gemm(&self.u_k, core)?;
        gemm_t(&left, false, &self.v_k, true)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.k as u64).to_le_bytes())?;
        self.u_k.write_to(w)?;
        Matrix::column_vector(&self.sigma_k).write_to(w)?;
        self.v_k.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<SvdFactors> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let k = u64::from_le_bytes(buf) as usize;
        let u_k = Matrix::read_from(r)?;
        let sigma_k = Matrix::read_from(r)?.into_data();
        let v_k = Matrix::read_from(r)?;
        if u_k.cols() != k || v_k.cols() != k || sigma_k.len() != k {
            return Err(Error::Checkpoint("inconsistent SVD factor shapes".into()));
        }
        Ok(SvdFactors {
            u_k,
            sigma_k,
            v_k,
            k,
        })
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Full thin SVD (`k = min(rows, cols)`), singular values descending.
pub fn svd_full(w: &Matrix) -> Result<SvdFactors> {
    svd_truncate(w, w.rows.min(w.cols))
}

/// Rank-`k` truncated SVD of `w` by one-sided Jacobi.
pub fn svd_truncate(w: &Matrix, k: usize) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if k == 0 || k > m.min(n) {
        return Err(Error::Rank {
            k,
            rows: m,
            cols: n,
        });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite {
            location: "svd_truncate input".into(),
        });
    }
    // Jacobi orthogonalizes columns; run it on whichever of W, Wᵀ is tall.
    let tall = m >= n;
    let a = if tall { w.clone() } else { w.transpose() };
    let (left, sigma, right) = one_sided_jacobi(&a)?;
    let (mut u, mut v) = if tall { (left, right) } else { (right, left) };

    // Deterministic signs: largest-magnitude entry of each U column is non-negative.
    let r = sigma.len();
    for j in 0..r {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..u.rows {
            let val = u.get(i, j);
            if val.abs() > best {
                best = val.abs();
                sign = if val < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            for i in 0..u.rows {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows {
                v.set(i, j, -v.get(i, j));
            }
        }
    }

    let take = |mat: &Matrix| Matrix::from_fn(mat.rows, k, |i, j| mat.get(i, j));
    Ok(SvdFactors {
        u_k: take(&u),
        sigma_k: sigma[..k].to_vec(),
        v_k: take(&v),
        k,
    })
}

/// Returns `(U, σ, V)` with `a = U diag(σ) Vᵀ`, `a` tall (`rows ≥ cols`).
fn one_sided_jacobi(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // Column-major working copies make the pair rotations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * (m as f64);

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps Jacobi's emergent order within ties.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let small = sigma_max * (m as f64) * f64::EPSILON * 16.0;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        let u_col = if s > small && s > 0.0 {
            let mut col: Vec<f64> = cols[src].iter().map(|x| x / s).collect();
            reorthogonalize(&mut col, &u_cols);
            col
        } else {
            complete_basis(m, &u_cols)
        };
        u_cols.push(u_col);
        sigma.push(if s > small { s } else { s.max(0.0) });
        for i in 0..n {
            v.set(i, dst, vcols[src][i]);
        }
    }
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    Ok((u, sigma, v))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn reorthogonalize(col: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in col.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
    let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    for x in col.iter_mut() {
        *x /= nrm;
    }
}

/// A unit vector orthogonal to `basis`, from the first usable standard basis vector.
fn complete_basis(m: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut col = vec![0.0; m];
        col[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in col.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 0.5 {
            return col.into_iter().map(|x| x / nrm).collect();
        }
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(col);
        }
    }
    let col = best.expect("basis of size < m always leaves a residual direction");
    col.into_iter().map(|x| x / best_norm).collect()
}

/// `U_k diag(σ) V_kᵀ`.
pub fn reconstruct_principal(f: &SvdFactors) -> Result<Matrix> {
    if f.u_k.cols() != f.k || f.v_k.cols() != f.k || f.sigma_k.len() != f.k {
        return Err(Error::dim("reconstruct_principal", "factor widths disagree with k"));
    }
    f.expand_core(&Matrix::diag(&f.sigma_k))
}
