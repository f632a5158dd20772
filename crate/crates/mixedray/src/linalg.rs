//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{MixedRayError, Result};

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; accurate to machine precision
/// for the orders used here (<= 128).
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative by recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(order: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(order);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        x.iter().map(|t| mid + half * t).collect(),
        w.iter().map(|t| t * half).collect(),
    )
}

/// Minimum eigenvalue of a real symmetric matrix.
pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Hermitian residual ||M - M^H||_F of a complex matrix.
pub fn hermitian_residual(m: &DMatrix<Complex64>) -> f64 {
    (m - m.adjoint()).norm()
}

/// Minimum eigenvalue of a complex Hermitian matrix (Hermitizes first and
/// reports the anti-Hermitian part separately via [`hermitian_residual`]).
pub fn herm_min_eig(m: &DMatrix<Complex64>) -> f64 {
    let h = (m + m.adjoint()).scale(0.5);
    let eig = h.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Orthonormal basis of the null space of a complex matrix, with a rank
/// tolerance relative to the largest singular value.
pub fn complex_nullspace(a: &DMatrix<Complex64>, rel_tol: f64) -> DMatrix<Complex64> {
    // Pad wide matrices with zero rows so the thin SVD exposes the full V^H.
    let a = if a.nrows() < a.ncols() {
        let mut sq = DMatrix::zeros(a.ncols(), a.ncols());
        sq.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
        sq
    } else {
        a.clone()
    };
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = rel_tol * smax.max(1.0);
    let ncols = a.ncols();
    let mut cols: Vec<DVector<Complex64>> = Vec::new();
    for i in 0..ncols {
        let sv = if i < svd.singular_values.len() {
            svd.singular_values[i]
        } else {
            0.0
        };
        if sv <= tol {
            // Rows of V^H beyond the rank span the null space; take the
            // conjugate transpose of that row.
            if i < v_t.nrows() {
                cols.push(v_t.row(i).adjoint());
            }
        }
    }
    let mut out = DMatrix::zeros(ncols, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// Real-matrix null space via SVD.
pub fn real_nullspace(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let ac: DMatrix<Complex64> = a.map(|x| Complex64::new(x, 0.0));
    let nc = complex_nullspace(&ac, rel_tol);
    nc.map(|z| z.re)
}

/// Numerical rank with a relative singular-value tolerance.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = rel_tol * smax.max(1.0);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Preconditioned conjugate gradient for an SPD operator given as a closure.
///
/// `apply` computes `A x`, `precond` applies an SPD preconditioner (pass the
/// identity for plain CG). Returns the solution and the iteration count.
pub fn pcg(
    apply: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    precond: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    tol_rel: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 0..max_iter {
        if r.norm() <= tol_rel * bnorm {
            return Ok((x, it));
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(MixedRayError::numeric(format!(
                "pcg: non-positive curvature p.Ap = {pap:e} at iter {it}"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    if r.norm() <= tol_rel * bnorm {
        Ok((x, max_iter))
    } else {
        Err(MixedRayError::NonConvergence(format!(
            "pcg: residual {:e} > tol {:e} after {} iterations",
            r.norm() / bnorm,
            tol_rel,
            max_iter
        )))
    }
}

/// Largest-singular-value estimate by power iteration on A^T A.
pub fn spectral_norm_est(
    apply: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    apply_t: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    n: usize,
    iters: usize,
) -> f64 {
    let mut v = DVector::from_fn(n, |i, _| ((i * 2654435761 + 1) % 1021) as f64 / 1021.0 - 0.5);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let nv = v.norm();
        if nv == 0.0 {
            return 0.0;
        }
        v /= nv;
        let w = apply_t(&apply(&v));
        sigma = w.norm().sqrt();
        v = w;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // Order-q rule is exact for degree 2q-1.
        for q in [2usize, 5, 8, 16] {
            let (x, w) = gauss_legendre(q);
            let exact = 2.0 / (2.0 * (q as f64 - 1.0) + 1.0); // int x^{2(q-1)}
            let got: f64 = x
                .iter()
                .zip(&w)
                .map(|(xi, wi)| wi * xi.powi(2 * (q as i32 - 1)))
                .sum();
            assert_relative_eq!(got, exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn pcg_solves_spd_system() {
        let n = 40;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + (i as f64 - j as f64).abs()).powi(3) });
        let a = 0.5 * (&a + a.transpose());
        let xstar = DVector::from_fn(n, |i, _| (i as f64).sin());
        let b = &a * &xstar;
        let (x, _) = pcg(&|v| &a * v, &|v| v.clone(), &b, 1e-12, 10 * n).unwrap();
        assert!((x - xstar).norm() < 1e-8);
    }

    #[test]
    fn nullspace_of_rank_deficient_matrix() {
        // 2x3 rank-2 real matrix has a 1-dim null space.
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, -1.0]);
        let ns = real_nullspace(&a, 1e-10);
        assert_eq!(ns.ncols(), 1);
        assert!((a * ns).norm() < 1e-12);
    }
}
