//! Dense symmetric linear algebra: Cholesky factorization, log-determinants,
//! SPD solves, extreme eigenvalues, and the shrinkage operators used as
//! proximal maps by the penalized solvers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// A dense symmetric matrix. Both triangles are stored and are kept exactly
/// equal; every constructor re-symmetrizes its input as `(A + Aᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(pub(crate) Array2<f64>);

impl SymMatrix {
    /// Wraps a square matrix, replacing it by its symmetric part.
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!("symmetric matrix must be square, got {r}x{c}")));
        }
        if r == 0 {
            return Err(Error::InvalidArgument("symmetric matrix must have dim >= 1".into()));
        }
        Ok(Self(symmetrize(a)))
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "dim must be >= 1");
        Self(Array2::eye(dim))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "dim must be >= 1");
        Self(Array2::from_diag(&ArrayView1::from(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn trace(&self) -> f64 {
        self.0.diag().sum()
    }
}

/// `(A + Aᵀ)/2`, written so that the two triangles are bitwise equal.
pub fn symmetrize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = M` and a strictly
/// positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    lower: Array2<f64>,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// `2·Σ log Lᵢᵢ`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `M·X = rhs` by forward and back substitution.
    pub fn solve(&self, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.dim();
        assert_eq!(rhs.nrows(), n, "rhs must have {n} rows");
        let l = &self.lower;
        let mut x = rhs.to_owned();
        // L·Y = B, row by row.
        for i in 0..n {
            let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
            let mut row = rest.row_mut(0);
            for k in 0..i {
                let lik = l[[i, k]];
                if lik != 0.0 {
                    row.scaled_add(-lik, &done.row(k));
                }
            }
            row /= l[[i, i]];
        }
        // Lᵀ·X = Y, bottom-up.
        for i in (0..n).rev() {
            let (mut head, tail) = x.view_mut().split_at(Axis(0), i + 1);
            let mut row = head.row_mut(i);
            for k in (i + 1)..n {
                let lki = l[[k, i]];
                if lki != 0.0 {
                    row.scaled_add(-lki, &tail.row(k - i - 1));
                }
            }
            row /= l[[i, i]];
        }
        x
    }

    pub fn solve_vec(&self, rhs: ArrayView1<'_, f64>) -> Array1<f64> {
        let m = rhs.to_owned().insert_axis(Axis(1));
        self.solve(m.view()).remove_axis(Axis(1))
    }

    /// `M⁻¹ = L⁻ᵀ·L⁻¹`, symmetrized.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim();
        let l = &self.lower;
        // Row i of L⁻¹ is supported on columns 0..=i.
        let mut linv = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let inv_d = 1.0 / l[[i, i]];
            linv[[i, i]] = inv_d;
            for j in 0..i {
                let mut s = 0.0;
                for k in j..i {
                    s += l[[i, k]] * linv[[k, j]];
                }
                linv[[i, j]] = -s * inv_d;
            }
        }
        SymMatrix(symmetrize(linv.t().dot(&linv)))
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.lower.dot(&self.lower.t())
    }
}

/// Factorizes `m`, or reports the first non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<CholFactor> {
    cholesky_view(m.view())
}

/// Cholesky on a raw square view; only the lower triangle is read.
pub(crate) fn cholesky_view(a: ArrayView2<'_, f64>) -> Result<CholFactor> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch(format!("cholesky needs a square matrix, got {}x{}", n, a.ncols())));
    }
    let mut lower = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s = {
                let li = lower.row(i);
                let lj = lower.row(j);
                let li = li.as_slice().expect("standard layout");
                let lj = lj.as_slice().expect("standard layout");
                let dot: f64 = li[..j].iter().zip(&lj[..j]).map(|(x, y)| x * y).sum();
                a[[i, j]] - dot
            };
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                }
                lower[[i, i]] = s.sqrt();
            } else {
                lower[[i, j]] = s / lower[[j, j]];
            }
        }
    }
    Ok(CholFactor { lower })
}

pub fn logdet(f: &CholFactor) -> f64 {
    f.logdet()
}

pub fn solve_spd(f: &CholFactor, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
    f.solve(rhs)
}

/// Smallest and largest eigenvalues of a symmetric matrix via Householder
/// tridiagonalization followed by Sturm-sequence bisection.
pub fn extreme_eigenvalues(m: &SymMatrix) -> (f64, f64) {
    extreme_eigenvalues_view(m.view())
}

pub(crate) fn extreme_eigenvalues_view(a: ArrayView2<'_, f64>) -> (f64, f64) {
    let (diag, off) = tridiagonalize(a);
    let n = diag.len();
    if n == 1 {
        return (diag[0], diag[0]);
    }
    // Gershgorin interval for the tridiagonal matrix.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;
    let min = bisect_kth(&diag, &off, 0, lo, hi, tol);
    let max = bisect_kth(&diag, &off, n - 1, lo, hi, tol);
    (min, max)
}

/// Reduces a symmetric matrix to tridiagonal form, returning its diagonal and
/// sub-diagonal. Eigenvalues are preserved; vectors are not accumulated.
fn tridiagonalize(a: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut a = a.to_owned();
    let mut off = vec![0.0; n.saturating_sub(1)];
    #[allow(clippy::needless_range_loop)]
    for k in 0..n.saturating_sub(2) {
        let m = n - k - 1;
        let x: Array1<f64> = a.slice(ndarray::s![k + 1.., k]).to_owned();
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            off[k] = 0.0;
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        // |v[0]| = |x[0]| + norm > 0, so v never vanishes here.
        let vnorm = v.dot(&v).sqrt();
        v /= vnorm;
        off[k] = alpha;
        let mut sub = a.slice_mut(ndarray::s![k + 1.., k + 1..]);
        let w = sub.dot(&v);
        let kk = v.dot(&w);
        let z = 2.0 * &w - (2.0 * kk) * &v;
        for i in 0..m {
            let vi = v[i];
            let zi = z[i];
            let mut row = sub.row_mut(i);
            Zip::from(&mut row).and(&z).and(&v).for_each(|r, &zj, &vj| {
                *r -= vi * zj + zi * vj;
            });
        }
    }
    if n >= 2 {
        off[n - 2] = a[[n - 1, n - 2]];
    }
    let diag = (0..n).map(|i| a[[i, i]]).collect();
    (diag, off)
}

/// Number of eigenvalues of the tridiagonal matrix strictly below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0;
    for i in 0..diag.len() {
        let b2 = if i > 0 { off[i - 1] * off[i - 1] } else { 0.0 };
        d = diag[i] - x - if i > 0 { b2 / d } else { 0.0 };
        if d == 0.0 {
            d = -f64::EPSILON * (diag[i].abs() + x.abs()).max(f64::MIN_POSITIVE);
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Bisection for the k-th smallest (0-based) eigenvalue.
fn bisect_kth(diag: &[f64], off: &[f64], k: usize, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest singular value of a rectangular matrix, as `sqrt(λ_max(AᵀA))`
/// (or `AAᵀ` when that is smaller).
pub fn spectral_norm(a: ArrayView2<'_, f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let gram = if a.nrows() <= a.ncols() { a.dot(&a.t()) } else { a.t().dot(&a) };
    let (_, max) = extreme_eigenvalues_view(symmetrize(gram).view());
    max.max(0.0).sqrt()
}

/// Proximal map of `t·|·|`: `sign(x)·max(|x| − t, 0)`.
#[inline]
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Proximal map of `t·‖·‖₂`: `v·max(1 − t/‖v‖₂, 0)`.
pub fn group_soft_threshold(v: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
    let mut out = v.to_owned();
    group_soft_threshold_inplace(out.view_mut(), t);
    out
}

pub(crate) fn group_soft_threshold_inplace(mut v: ndarray::ArrayViewMut1<'_, f64>, t: f64) {
    debug_assert!(t >= 0.0);
    if t == 0.0 {
        return;
    }
    let norm = v.dot(&v).sqrt();
    if norm <= t {
        v.fill(0.0);
    } else {
        v *= 1.0 - t / norm;
    }
}

/// Frobenius inner product `⟨A, B⟩ = tr(AᵀB)`.
pub fn frobenius_dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

pub fn frobenius_norm(a: ArrayView2<'_, f64>) -> f64 {
    frobenius_dot(a, a).sqrt()
}

/// `|A|_∞`: the largest absolute entry (0 for an empty matrix).
pub fn max_abs(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}
