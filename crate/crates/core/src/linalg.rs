//! Small dense linear algebra: column-pivoted Householder QR and a cyclic
//! Jacobi eigensolver for symmetric matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{dot, norm};

/// Orthonormal basis of the span of `columns` (each of length `dim`) from a
/// column-pivoted Householder QR. Columns whose remaining norm falls to or
/// below `tol` times the largest column norm are treated as dependent.
///
/// Returns the basis vectors (at most `min(dim, columns.len())`).
pub fn pivoted_qr_basis(columns: &[Vec<f64>], dim: usize, tol: f64) -> Vec<Vec<f64>> {
    let m = columns.len();
    if m == 0 || dim == 0 {
        return Vec::new();
    }
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::new();
    let mut first_norm = 0.0;
    let steps = dim.min(m);
    for k in 0..steps {
        // pivot: largest trailing norm; ties go to the lowest index
        let mut best = k;
        let mut best_norm = -1.0;
        for (j, col) in a.iter().enumerate().skip(k) {
            let n = norm(&col[k..]);
            if n > best_norm {
                best = j;
                best_norm = n;
            }
        }
        if k == 0 {
            first_norm = best_norm;
        }
        if best_norm <= tol * first_norm || best_norm == 0.0 {
            break;
        }
        a.swap(k, best);
        let x = &a[k][k..];
        let alpha = if x[0] >= 0.0 { -best_norm } else { best_norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vn = norm(&v);
        if vn == 0.0 {
            // already aligned with e_k; identity reflector
            reflectors.push(vec![0.0; dim - k]);
            continue;
        }
        for vi in &mut v {
            *vi /= vn;
        }
        for col in a.iter_mut().skip(k) {
            let proj = 2.0 * dot(&v, &col[k..]);
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= proj * vi;
            }
        }
        reflectors.push(v);
    }
    let rank = reflectors.len();
    (0..rank)
        .map(|j| {
            let mut q = vec![0.0; dim];
            q[j] = 1.0;
            for (k, v) in reflectors.iter().enumerate().rev() {
                let proj = 2.0 * dot(v, &q[k..]);
                for (qi, vi) in q[k..].iter_mut().zip(v) {
                    *qi -= proj * vi;
                }
            }
            q
        })
        .collect()
}

/// Eigenvalues of the symmetric `n × n` row-major matrix `a`, ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// 2-norm condition number of a square row-major matrix.
pub fn condition_number(a: &[f64], n: usize) -> f64 {
    let mut ata = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            ata[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum();
        }
    }
    let ev = symmetric_eigenvalues(&ata, n);
    let lo = ev[0].max(0.0);
    let hi = ev[n - 1];
    if lo == 0.0 {
        f64::INFINITY
    } else {
        math::sqrt(hi / lo)
    }
}
