//! Dense complex LU with partial pivoting and a one-norm condition estimate.

use crate::{Error, Result, C64};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Condition numbers above this are treated as singular.
pub const COND_LIMIT: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct Lu {
    lu: Array2<C64>,
    perm: Vec<usize>,
    norm1: f64,
    singular: bool,
}

pub fn norm1(a: &ArrayView2<C64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl Lu {
    pub fn new(a: Array2<C64>) -> Lu {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let norm1 = norm1(&a.view());
        let mut lu = a;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut singular = false;
        for k in 0..n {
            let mut piv = k;
            let mut best = lu[[k, k]].norm();
            for i in k + 1..n {
                let v = lu[[i, k]].norm();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 {
                singular = true;
                continue;
            }
            if piv != k {
                perm.swap(k, piv);
                for j in 0..n {
                    let t = lu[[k, j]];
                    lu[[k, j]] = lu[[piv, j]];
                    lu[[piv, j]] = t;
                }
            }
            let inv = lu[[k, k]].inv();
            let slice = lu.as_slice_mut().expect("standard layout");
            let (top, bottom) = slice.split_at_mut((k + 1) * n);
            let pivot_row = &top[k * n + k + 1..(k + 1) * n];
            for row in bottom.chunks_mut(n) {
                let f = row[k] * inv;
                row[k] = f;
                if f.re == 0.0 && f.im == 0.0 {
                    continue;
                }
                for (x, &p) in row[k + 1..].iter_mut().zip(pivot_row) {
                    *x -= f * p;
                }
            }
        }
        Lu {
            lu,
            perm,
            norm1,
            singular,
        }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &ArrayView1<C64>) -> Array1<C64> {
        let n = self.dim();
        let mut x: Array1<C64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s / self.lu[[i, i]];
        }
        x
    }

    /// Solve `A X = B` column by column.
    pub fn solve_many(&self, b: &ArrayView2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve(&col));
        }
        out
    }

    /// Solve `A^T x = b`, or `A^H x = b` when `conj` is set.
    fn solve_t(&self, b: &ArrayView1<C64>, conj: bool) -> Array1<C64> {
        let n = self.dim();
        let c = |z: C64| if conj { z.conj() } else { z };
        let mut y = b.to_owned();
        // U^T y = b
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= c(self.lu[[j, i]]) * y[j];
            }
            y[i] = s / c(self.lu[[i, i]]);
        }
        // L^T z = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= c(self.lu[[j, i]]) * y[j];
            }
            y[i] = s;
        }
        let mut x = Array1::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    pub fn solve_transpose(&self, b: &ArrayView1<C64>) -> Array1<C64> {
        self.solve_t(b, false)
    }

    pub fn solve_adjoint(&self, b: &ArrayView1<C64>) -> Array1<C64> {
        self.solve_t(b, true)
    }

    /// Estimate of `||A^{-1}||_1` (Hager's method with Higham's safeguard).
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.dim();
        if self.singular {
            return f64::INFINITY;
        }
        if n == 0 {
            return 0.0;
        }
        let mut x = Array1::from_elem(n, C64::new(1.0 / n as f64, 0.0));
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x.view());
            let ny: f64 = y.iter().map(|z| z.norm()).sum();
            if !ny.is_finite() {
                return f64::INFINITY;
            }
            if ny <= est {
                break;
            }
            est = ny;
            let s: Array1<C64> = y
                .iter()
                .map(|z| {
                    let a = z.norm();
                    if a == 0.0 {
                        C64::new(1.0, 0.0)
                    } else {
                        z / a
                    }
                })
                .collect();
            let z = self.solve_adjoint(&s.view());
            let (j, zmax) = z
                .iter()
                .map(|v| v.norm())
                .enumerate()
                .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let ztx: f64 = z.iter().zip(x.iter()).map(|(a, b)| (a.conj() * b).re).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x.fill(C64::new(0.0, 0.0));
            x[j] = C64::new(1.0, 0.0);
        }
        // Higham's alternating-sign probe guards against bad first guesses.
        let alt: Array1<C64> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let v = 1.0 + i as f64 / (n.max(2) - 1) as f64;
                C64::new(s * v, 0.0)
            })
            .collect();
        let y = self.solve(&alt.view());
        let alt_est = 2.0 * y.iter().map(|z| z.norm()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est)
    }

    pub fn condition_estimate(&self) -> f64 {
        self.norm1 * self.inverse_norm1_estimate()
    }

    /// Factorize and reject when the condition estimate exceeds [`COND_LIMIT`].
    pub fn checked(a: Array2<C64>) -> Result<Lu> {
        let lu = Lu::new(a);
        let cond = lu.condition_estimate();
        if !cond.is_finite() || cond > COND_LIMIT {
            return Err(Error::IllConditioned { cond });
        }
        Ok(lu)
    }
}

/// Solve a small square system, reporting singularity as an error.
pub fn solve_small(a: Array2<C64>, b: &ArrayView1<C64>) -> Result<Array1<C64>> {
    let lu = Lu::checked(a)?;
    Ok(lu.solve(b))
}

pub fn identity(n: usize) -> Array2<C64> {
    Array2::from_diag_elem(n, C64::new(1.0, 0.0))
}

/// Least-squares solution of a tall system by Householder QR.
///
/// Fails when the column space is numerically rank deficient.
pub fn lstsq(a: &Array2<C64>, b: &ArrayView1<C64>) -> Result<Array1<C64>> {
    let (m, n) = a.dim();
    if m < n {
        return Err(Error::Mismatch(format!("{m} rows for {n} unknowns")));
    }
    let mut r = a.clone();
    let mut y = b.to_owned();
    let scale = norm1(&a.view()).max(f64::MIN_POSITIVE);
    for k in 0..n {
        let alpha: f64 = (k..m).map(|i| r[[i, k]].norm_sqr()).sum::<f64>().sqrt();
        if alpha <= 1e-13 * scale {
            return Err(Error::IllConditioned { cond: f64::INFINITY });
        }
        let x0 = r[[k, k]];
        let phase = if x0.norm() == 0.0 { C64::new(1.0, 0.0) } else { x0 / x0.norm() };
        let mut v: Vec<C64> = (k..m).map(|i| r[[i, k]]).collect();
        v[0] += phase * alpha;
        let vn: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        for j in k..n {
            let d: C64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * r[[k + t, j]]).sum();
            let f = d * (2.0 / vn);
            for (t, vi) in v.iter().enumerate() {
                r[[k + t, j]] -= f * vi;
            }
        }
        let d: C64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * y[k + t]).sum();
        let f = d * (2.0 / vn);
        for (t, vi) in v.iter().enumerate() {
            y[k + t] -= f * vi;
        }
    }
    let diag_min = (0..n).map(|k| r[[k, k]].norm()).fold(f64::INFINITY, f64::min);
    let diag_max = (0..n).map(|k| r[[k, k]].norm()).fold(0.0, f64::max);
    if n > 0 && diag_max / diag_min > COND_LIMIT {
        return Err(Error::IllConditioned {
            cond: diag_max / diag_min,
        });
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s -= r[[i, j]] * x[j];
        }
        x[i] = s / r[[i, i]];
    }
    Ok(x)
}
