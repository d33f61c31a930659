//! Symmetric eigendecomposition and the spectral helpers built on it.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{ensure, Error, Result};

/// Inputs whose relative asymmetry exceeds this are rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Jacobi stops once `off(A) <= JACOBI_TOL * ||A||_F`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order; eigenvector `k` is column `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Q diag(f(λ)) Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.dim();
        let q = &self.eigenvectors;
        // scaled = Q diag(f(λ)), then scaled · Qᵀ
        let mut scaled = q.clone();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        for i in 0..n {
            for (v, s) in scaled.row_mut(i).iter_mut().zip(&fl) {
                *v *= s;
            }
        }
        let mut out = scaled.matmul_nt(q).expect("square factors");
        out.symmetrize();
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(|l| l)
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Cyclic Jacobi sweeps up to [`JACOBI_MAX_DIM`]; Householder + implicit QL
/// beyond that, where Jacobi's cubic-per-sweep cost dominates a refresh.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEig> {
    ensure!(
        a.is_square(),
        "sym_eig needs a square matrix, got {}x{}",
        a.rows(),
        a.cols()
    );
    let asym = a.relative_asymmetry();
    ensure!(
        asym <= SYMMETRY_TOL,
        "sym_eig input is not symmetric (relative asymmetry {asym:.3e})"
    );
    let n = a.rows();
    let mut m = a.clone();
    m.symmetrize();
    if n > JACOBI_MAX_DIM {
        let (values, vecs) = tridiagonal_ql(&m)?;
        return Ok(sorted_from_rows(values, &vecs, n));
    }
    let norm = m.frobenius_norm();
    // Rows of `vt` are the eigenvectors (Vᵀ), so rotations touch contiguous memory.
    let mut vt = DenseMatrix::identity(n);
    if n > 1 && norm > 0.0 {
        let target = JACOBI_TOL * norm;
        let mut sweeps = 0;
        loop {
            let off = off_diagonal_norm(&m);
            if off <= target {
                break;
            }
            if sweeps == JACOBI_MAX_SWEEPS {
                return Err(Error::NoConvergence {
                    sweeps,
                    residual: off,
                });
            }
            jacobi_sweep(&mut m, &mut vt);
            sweeps += 1;
        }
    }
    Ok(sorted_from_rows(m.diag(), vt.data(), n))
}

/// Assemble a descending `SymEig` from eigenvalues and row-stored eigenvectors.
fn sorted_from_rows(values: Vec<f64>, rows: &[f64], n: usize) -> SymEig {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    let mut q = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for (row, &v) in rows[src * n..(src + 1) * n].iter().enumerate() {
            q.set(row, col, v);
        }
    }
    SymEig {
        eigenvalues,
        eigenvectors: q,
    }
}

/// Matrices larger than this are decomposed by Householder tridiagonalization
/// followed by implicit QL instead of Jacobi sweeps.
pub const JACOBI_MAX_DIM: usize = 256;
const QL_MAX_ITER: usize = 64;

/// Householder reduction to tridiagonal form, then implicit QL with shifts.
///
/// Works on column-major storage (`buf[c * n + r]` holds `V[r][c]`) so the
/// inner loops walk contiguous memory. Returns ascending eigenvalues and the
/// eigenvectors as rows of the returned `n x n` buffer.
fn tridiagonal_ql(a: &DenseMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.rows();
    let mut v = a.transpose().into_data();
    let ix = |r: usize, c: usize| c * n + r;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];

    for j in 0..n {
        d[j] = v[ix(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in &d[..i] {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[ix(i - 1, j)];
                v[ix(i, j)] = 0.0;
                v[ix(j, i)] = 0.0;
            }
        } else {
            for dk in &mut d[..i] {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                let f = d[j];
                v[ix(j, i)] = f;
                let col = &v[j * n..j * n + n];
                let mut g = e[j] + col[j] * f;
                for k in (j + 1)..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                let col = &mut v[j * n..j * n + n];
                for k in j..i {
                    col[k] -= f * e[k] + g * d[k];
                }
                d[j] = col[i - 1];
                col[i] = 0.0;
            }
        }
        d[i] = h;
    }
    // Accumulate the Householder transformations.
    for i in 0..n.saturating_sub(1) {
        v[ix(n - 1, i)] = v[ix(i, i)];
        v[ix(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[ix(k, i + 1)] / h;
            }
            for j in 0..=i {
                let (left, right) = v.split_at_mut((i + 1) * n);
                let next = &right[..n];
                let col = &mut left[j * n..j * n + n];
                let mut g = 0.0;
                for k in 0..=i {
                    g += next[k] * col[k];
                }
                for k in 0..=i {
                    col[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[ix(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[ix(n - 1, j)];
        v[ix(n - 1, j)] = 0.0;
    }
    v[ix(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;

    // Implicit QL on the tridiagonal (d, e).
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITER {
                    return Err(Error::NoConvergence {
                        sweeps: QL_MAX_ITER,
                        residual: e[l].abs(),
                    });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in &mut d[(l + 2)..n] {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (left, right) = v.split_at_mut((i + 1) * n);
                    let vi = &mut left[i * n..i * n + n];
                    let vi1 = &mut right[..n];
                    for (x, y) in vi.iter_mut().zip(vi1.iter_mut()) {
                        let hk = *y;
                        *y = s * *x + c * hk;
                        *x = c * *x - s * hk;
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
        e[l] = 0.0;
    }
    Ok((d, v))
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for (j, v) in m.row(i).iter().enumerate() {
            if i != j {
                s += v * v;
            }
        }
    }
    s.sqrt()
}

fn jacobi_sweep(m: &mut DenseMatrix, vt: &mut DenseMatrix) {
    let n = m.rows();
    for p in 0..n - 1 {
        for q in (p + 1)..n {
            let apq = m.get(p, q);
            if apq == 0.0 {
                continue;
            }
            let app = m.get(p, p);
            let aqq = m.get(q, q);
            let theta = (aqq - app) / (2.0 * apq);
            let t = if theta.is_finite() {
                theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
            } else {
                0.0
            };
            if t == 0.0 {
                continue;
            }
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            rotate_rows(m.data_mut(), n, p, q, c, s);
            // Mirror the rotated rows into columns p and q.
            for k in 0..n {
                if k != p && k != q {
                    let vp = m.get(p, k);
                    let vq = m.get(q, k);
                    m.set(k, p, vp);
                    m.set(k, q, vq);
                }
            }
            m.set(p, p, app - t * apq);
            m.set(q, q, aqq + t * apq);
            m.set(p, q, 0.0);
            m.set(q, p, 0.0);
            rotate_rows(vt.data_mut(), n, p, q, c, s);
        }
    }
}

/// `(row_p, row_q) <- (c row_p - s row_q, s row_p + c row_q)`
#[inline]
fn rotate_rows(data: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// `Q (Λ + γI)^{-1/2} Qᵀ`.
pub fn inv_sqrt_from_eig(e: &SymEig, gamma: f64) -> Result<DenseMatrix> {
    ensure!(
        gamma >= 0.0 && gamma.is_finite(),
        "gamma must be finite and >= 0"
    );
    let min_shifted = e
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &l| m.min(l + gamma));
    if e.dim() > 0 && !(min_shifted > 0.0) {
        return Err(Error::Singular { min_shifted });
    }
    Ok(e.reconstruct_with(|l| 1.0 / (l + gamma).sqrt()))
}

/// All pairwise products `λ_i^A λ_j^G`, sorted descending.
pub fn kron_spectrum(lam_a: &[f64], lam_g: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        !lam_a.is_empty() && !lam_g.is_empty(),
        "kron_spectrum needs non-empty inputs"
    );
    let mut out = Vec::with_capacity(lam_a.len() * lam_g.len());
    for &a in lam_a {
        out.extend(lam_g.iter().map(|&g| a * g));
    }
    out.sort_by(|x, y| y.total_cmp(x));
    Ok(out)
}
