//! Small dense linear algebra on row-major `f64` slices.
//!
//! State dimensions are desk-scale (n ≤ 16), so matrices are plain slices of
//! length `n * n` and the symmetric eigenproblem is solved by cyclic Jacobi.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        let scale: f64 = (0..n).map(|i| m[i * n + i].abs()).sum::<f64>().max(1e-300);
        if off.sqrt() <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
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
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    eig
}

/// Largest eigenvalue of the symmetric part `(A + Aᵀ)/2`.
pub fn max_symmetric_part_eigenvalue(a: &[f64], n: usize) -> f64 {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    *symmetric_eigenvalues(&s, n).last().expect("n >= 1")
}

/// Singular values of a square matrix, ascending.
pub fn singular_values(a: &[f64], n: usize) -> Vec<f64> {
    let mut ata = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            ata[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum();
        }
    }
    symmetric_eigenvalues(&ata, n)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect()
}

pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = A v` for row-major `A` (rows × cols).
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = (0..cols).map(|j| a[i * cols + j] * v[j]).sum();
    }
}

/// Inverse of a square matrix, or `None` when it is numerically singular.
pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(n, n, a);
    let inv = m.try_inverse()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[(i, j)];
        }
    }
    Some(out)
}

/// Solve the symmetric positive (semi)definite system `G x = b` for several
/// right-hand sides (columns of `b`, row-major p × k). Falls back to an
/// SVD pseudo-inverse when Cholesky fails.
pub fn solve_spd(g: &[f64], p: usize, b: &[f64], k: usize) -> Vec<f64> {
    let gm = DMatrix::from_row_slice(p, p, g);
    let bm = DMatrix::from_row_slice(p, k, b);
    let x = match gm.clone().cholesky() {
        Some(ch) => ch.solve(&bm),
        None => gm
            .svd(true, true)
            .solve(&bm, 1e-12)
            .unwrap_or_else(|_| DMatrix::zeros(p, k)),
    };
    let mut out = vec![0.0; p * k];
    for i in 0..p {
        for j in 0..k {
            out[i * k + j] = x[(i, j)];
        }
    }
    out
}

/// Ordinary least squares with intercept: returns (intercept, slope, r²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return (my, 0.0, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (my - slope * mx, slope, r2)
}

/// Cholesky factor (lower, row-major) of a symmetric positive definite matrix.
pub fn cholesky_lower(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(n, n, a);
    let l = m.cholesky()?.l();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = l[(i, j)];
        }
    }
    Some(out)
}

/// Quadratic form `vᵀ A⁻¹ v` through an LU solve.
pub fn inverse_quadratic_form(a: &[f64], n: usize, v: &[f64]) -> Option<f64> {
    let m = DMatrix::from_row_slice(n, n, a);
    let x = m.lu().solve(&DVector::from_column_slice(v))?;
    Some(x.iter().zip(v).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let e = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_on_3x3() {
        // Tridiagonal (2,-1) matrix: eigenvalues 2 - sqrt2, 2, 2 + sqrt2.
        let a = [2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0];
        let e = symmetric_eigenvalues(&a, 3);
        let s = 2f64.sqrt();
        for (got, want) in e.iter().zip([2.0 - s, 2.0, 2.0 + s]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn symmetric_part_ignores_skew() {
        // Rotation generator is pure skew: symmetric part is zero.
        let a = [-1.0, 5.0, -5.0, -1.0];
        assert!((max_symmetric_part_eigenvalue(&a, 2) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let s = singular_values(&[1.0, 0.0, 0.0, 2.0], 2);
        assert_eq!(s, vec![1.0, 2.0]);
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x).collect();
        let (a, b, r2) = linear_fit(&xs, &ys);
        assert!((a - 1.0).abs() < 1e-12 && (b + 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
