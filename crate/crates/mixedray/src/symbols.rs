//! Symbol-level verification laboratory.
//!
//! Everything here works with the principal-symbol matrices of the weighted
//! normal operators and the gauge operators: the fiber-regime and
//! base-regime integrand matrices, their equatorial-sphere integrals and
//! positivity (full space for the transverse kind, solenoidal trace-free
//! subspace for the mixed kind), the kernel-analysis linear system, the
//! gauge symbol identities around the weighted Laplacian, and the Sobolev
//! extension coefficients.
//!
//! (1,1) tensors are flattened row-major over the full index square:
//! component (i,j) sits at i*n + j, with index 0 the x-slot and indices
//! 1..n the tangential slots.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::cutoff::CutoffProfile;
use crate::error::{MixedRayError, Result};
use crate::linalg;

/// Which symbol matrix family an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolKind {
    T1Fiber,
    T1Base,
    L11Fiber,
    L11Base,
}

impl SymbolKind {
    pub fn is_fiber(&self) -> bool {
        matches!(self, SymbolKind::T1Fiber | SymbolKind::L11Fiber)
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self, SymbolKind::L11Fiber | SymbolKind::L11Base)
    }

    pub fn label(&self) -> &'static str {
        match self {
            SymbolKind::T1Fiber => "t1_fiber",
            SymbolKind::T1Base => "t1_base",
            SymbolKind::L11Fiber => "l11_fiber",
            SymbolKind::L11Base => "l11_base",
        }
    }
}

fn check_unit(y_hat: &[f64]) -> Result<()> {
    let norm: f64 = y_hat.iter().map(|c| c * c).sum::<f64>();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(MixedRayError::domain(format!(
            "Y-hat must be unit (|Y|^2 = {norm})"
        )));
    }
    Ok(())
}

/// Transverse fiber-regime integrand:
/// chi(S) [[1, -S <Y, .>], [-S Y, I + (S^2 - 1) Y Y^T]] on (1,0) components.
pub fn t1_fiber_matrix(s_tilde: f64, y_hat: &[f64], chi: f64) -> Result<DMatrix<f64>> {
    check_unit(y_hat)?;
    let m = y_hat.len();
    let n = m + 1;
    let mut out = DMatrix::zeros(n, n);
    out[(0, 0)] = 1.0;
    for a in 0..m {
        out[(0, a + 1)] = -s_tilde * y_hat[a];
        out[(a + 1, 0)] = -s_tilde * y_hat[a];
        for b in 0..m {
            out[(a + 1, b + 1)] = if a == b { 1.0 } else { 0.0 }
                + (s_tilde * s_tilde - 1.0) * y_hat[a] * y_hat[b];
        }
    }
    Ok(chi * out)
}

/// Transverse base-regime integrand at rescaled frequency (xi_F, eta_F):
/// [[1, (xi_F - i) kappa <Y, .>], [(xi_F + i) kappa Y, I + (kappa (Y.eta_F) - 1) Y Y^T]]
/// with kappa = (Y.eta_F)/(xi_F^2 + 1).
pub fn t1_base_matrix(xi_f: f64, eta_f: &[f64], y_hat: &[f64]) -> Result<DMatrix<Complex64>> {
    check_unit(y_hat)?;
    let m = y_hat.len();
    if eta_f.len() != m {
        return Err(MixedRayError::domain("eta_F dimension mismatch"));
    }
    let n = m + 1;
    let dot: f64 = y_hat.iter().zip(eta_f).map(|(a, b)| a * b).sum();
    let denom = xi_f * xi_f + 1.0;
    let kappa = dot / denom;
    let up = Complex64::new(xi_f, -1.0) * kappa;
    let down = Complex64::new(xi_f, 1.0) * kappa;
    let mut out = DMatrix::zeros(n, n);
    out[(0, 0)] = Complex64::new(1.0, 0.0);
    for a in 0..m {
        out[(0, a + 1)] = up * y_hat[a];
        out[(a + 1, 0)] = down * y_hat[a];
        for b in 0..m {
            let diag = if a == b { 1.0 } else { 0.0 };
            out[(a + 1, b + 1)] =
                Complex64::new(diag + (dot * dot / denom - 1.0) * y_hat[a] * y_hat[b], 0.0);
        }
    }
    Ok(out)
}

/// Row factor of the mixed-kind triple product (n x n^2):
/// row r contracts the covariant slot of the r-th contravariant block with
/// (first, Y): out_r = first * f^r_x + <Y, f^r_y>.
fn mixed_row_factor(first: Complex64, y_hat: &[f64]) -> DMatrix<Complex64> {
    let m = y_hat.len();
    let n = m + 1;
    let mut r = DMatrix::zeros(n, n * n);
    for i in 0..n {
        r[(i, i * n)] = first;
        for j in 0..m {
            r[(i, i * n + j + 1)] = Complex64::new(y_hat[j], 0.0);
        }
    }
    r
}

/// Mixed fiber-regime integrand: chi(S) R^T M R with M the transverse fiber
/// core and R the slope/direction row factor (real symmetric PSD).
pub fn l11_fiber_matrix(s_tilde: f64, y_hat: &[f64], chi: f64) -> Result<DMatrix<f64>> {
    let core = t1_fiber_matrix(s_tilde, y_hat, 1.0)?;
    let core_c: DMatrix<Complex64> = core.map(|x| Complex64::new(x, 0.0));
    let r = mixed_row_factor(Complex64::new(s_tilde, 0.0), y_hat);
    let triple = r.adjoint() * core_c * r;
    Ok(chi * triple.map(|z| z.re))
}

/// Mixed base-regime integrand: R^H M R with M the transverse base core and
/// R the row factor with first entry -(xi_F - i) kappa (Hermitian PSD).
pub fn l11_base_matrix(xi_f: f64, eta_f: &[f64], y_hat: &[f64]) -> Result<DMatrix<Complex64>> {
    let core = t1_base_matrix(xi_f, eta_f, y_hat)?;
    let dot: f64 = y_hat.iter().zip(eta_f).map(|(a, b)| a * b).sum();
    let kappa = dot / (xi_f * xi_f + 1.0);
    let first = -Complex64::new(xi_f, -1.0) * kappa;
    let r = mixed_row_factor(first, y_hat);
    Ok(r.adjoint() * core * r)
}

/// A frequency point for symbol evaluation; `regime` picks fiber (plain
/// (xi, eta), any nonzero scale) or base (rescaled (xi_F, eta_F) with the
/// semiclassical parameter h = 1/F and convexity alpha > 0).
#[derive(Debug, Clone)]
pub struct SymbolPoint {
    pub xi: f64,
    pub eta: Vec<f64>,
    /// Semiclassical parameter 1/F (base regime only).
    pub h: f64,
    /// Boundary convexity input for the Gaussian weight rule nu = alpha/F.
    pub alpha: f64,
}

/// Result of one equatorial integral.
#[derive(Debug, Clone)]
pub struct EquatorialIntegral {
    /// Hermitized matrix of the integral.
    pub matrix: DMatrix<Complex64>,
    /// Norm of the discarded anti-Hermitian part.
    pub anti_norm: f64,
}

/// Integrate a symbol integrand over the (xi, eta)-equatorial sphere (fiber
/// regime) or over S^{n-2} with the Gaussian base weight (base regime).
/// n = 3 only: the equator is a circle, integrated with a uniform angular
/// rule of the given order.
pub fn equatorial_integral(
    kind: SymbolKind,
    point: &SymbolPoint,
    chi: &CutoffProfile,
    order: usize,
) -> Result<EquatorialIntegral> {
    if point.eta.len() != 2 {
        return Err(MixedRayError::domain("equatorial integrals are implemented for n = 3"));
    }
    if order < 8 {
        return Err(MixedRayError::domain("quadrature order must be >= 8"));
    }
    chi.validate()?;
    let n = 3;
    let size = if kind.is_mixed() { n * n } else { n };
    let mut acc: DMatrix<Complex64> = DMatrix::zeros(size, size);
    match kind {
        SymbolKind::T1Fiber | SymbolKind::L11Fiber => {
            let freq = [point.xi, point.eta[0], point.eta[1]];
            let fn2: f64 = freq.iter().map(|c| c * c).sum();
            if fn2 == 0.0 {
                return Err(MixedRayError::domain("fiber regime needs (xi, eta) != 0"));
            }
            // Orthonormal basis of the plane orthogonal to freq in R^3.
            let f = DVector::from_column_slice(&freq) / fn2.sqrt();
            let seed = if f[0].abs() < 0.9 {
                DVector::from_column_slice(&[1.0, 0.0, 0.0])
            } else {
                DVector::from_column_slice(&[0.0, 1.0, 0.0])
            };
            let mut e1 = &seed - &f * f.dot(&seed);
            e1 /= e1.norm();
            // e2 = f x e1
            let e2 = DVector::from_column_slice(&[
                f[1] * e1[2] - f[2] * e1[1],
                f[2] * e1[0] - f[0] * e1[2],
                f[0] * e1[1] - f[1] * e1[0],
            ]);
            let dphi = 2.0 * std::f64::consts::PI / order as f64;
            for q in 0..order {
                let phi = q as f64 * dphi;
                let w = phi.cos() * &e1 + phi.sin() * &e2;
                let wprime = [w[1], w[2]];
                let wp_norm = f64::sqrt(wprime[0] * wprime[0] + wprime[1] * wprime[1]);
                // The excised neighborhood of w' = 0 carries no mass: the
                // slope S = w0/|w'| leaves every compact cutoff support.
                if wp_norm < 1e-6 {
                    continue;
                }
                let s_tilde = w[0] / wp_norm;
                let y_hat = [wprime[0] / wp_norm, wprime[1] / wp_norm];
                let c = chi.eval(s_tilde);
                if c == 0.0 {
                    continue;
                }
                let m = match kind {
                    SymbolKind::T1Fiber => {
                        t1_fiber_matrix(s_tilde, &y_hat, c)?.map(|x| Complex64::new(x, 0.0))
                    }
                    _ => l11_fiber_matrix(s_tilde, &y_hat, c)?.map(|x| Complex64::new(x, 0.0)),
                };
                acc += m * Complex64::new(dphi, 0.0);
            }
        }
        SymbolKind::T1Base | SymbolKind::L11Base => {
            if point.h <= 0.0 || point.alpha <= 0.0 {
                return Err(MixedRayError::domain(
                    "base regime needs h > 0 and alpha > 0 (Gaussian rule nu = alpha/F)",
                ));
            }
            let xi_f = point.xi;
            let eta_f = &point.eta;
            let phi_f = point.alpha * (xi_f * xi_f + 1.0);
            let pref = (xi_f * xi_f + 1.0).powf(-0.5);
            let dphi = 2.0 * std::f64::consts::PI / order as f64;
            for q in 0..order {
                let phi = q as f64 * dphi;
                let y_hat = [phi.cos(), phi.sin()];
                let dot = y_hat[0] * eta_f[0] + y_hat[1] * eta_f[1];
                let weight = pref * (-(dot * dot) / (2.0 * point.h * phi_f)).exp();
                let m = match kind {
                    SymbolKind::T1Base => t1_base_matrix(xi_f, eta_f, &y_hat)?,
                    _ => l11_base_matrix(xi_f, eta_f, &y_hat)?,
                };
                acc += m * Complex64::new(weight * dphi, 0.0);
            }
        }
    }
    let herm = (&acc + acc.adjoint()).scale(0.5);
    let anti_norm = (&acc - &herm).norm();
    Ok(EquatorialIntegral { matrix: herm, anti_norm })
}

/// Orthonormal basis (columns) of the solenoidal trace-free subspace at a
/// frequency: the null space of the trace row plus the divergence rows of
/// the delta-symbol, fiber variant (real rows promoted to complex) or base
/// variant ((xi_F - i) in place of xi).
pub fn solenoidal_tracefree_basis(
    kind: SymbolKind,
    xi: f64,
    eta: &[f64],
) -> Result<DMatrix<Complex64>> {
    let m = eta.len();
    let n = m + 1;
    let nn = n * n;
    let lead = if kind.is_fiber() {
        Complex64::new(xi, 0.0)
    } else {
        Complex64::new(xi, -1.0)
    };
    let mut rows: DMatrix<Complex64> = DMatrix::zeros(1 + n, nn);
    // Trace row.
    for i in 0..n {
        rows[(0, i * n + i)] = Complex64::new(1.0, 0.0);
    }
    // Divergence rows, one per contravariant index.
    for i in 0..n {
        rows[(1 + i, i * n)] = lead;
        for j in 0..m {
            rows[(1 + i, i * n + j + 1)] = Complex64::new(eta[j], 0.0);
        }
    }
    let basis = linalg::complex_nullspace(&rows, 1e-10);
    if basis.ncols() == 0 {
        return Err(MixedRayError::numeric(
            "empty solenoidal trace-free basis (unexpected full-rank constraints)",
        ));
    }
    Ok(basis)
}

/// One scanned direction in an ellipticity report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScanRow {
    pub kind: String,
    pub xi: f64,
    pub eta: Vec<f64>,
    /// Semiclassical parameter for base rows; 0 for fiber rows.
    pub h: f64,
    pub min_eig: f64,
    pub herm_residual: f64,
    pub basis_dim: usize,
    pub pass: bool,
}

/// Ellipticity scan report: per-direction minimum eigenvalues on the full
/// space (transverse kinds, or mixed with `restricted = false`) or on the
/// solenoidal trace-free subspace (mixed kinds with `restricted = true`).
#[derive(Debug, Clone, serde::Serialize)]
pub struct SymbolReport {
    pub kind: String,
    pub restricted: bool,
    pub rows: Vec<ScanRow>,
    pub min_eig_global: f64,
    pub max_herm_residual: f64,
    pub all_pass: bool,
}

/// Scan configuration; `h_list` is used by base kinds only.
#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub kind: SymbolKind,
    pub directions: usize,
    pub h_list: Vec<f64>,
    pub radii: Vec<f64>,
    pub restricted: bool,
    pub quad_order: usize,
    pub alpha: f64,
    pub chi: CutoffProfile,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            kind: SymbolKind::T1Fiber,
            directions: 64,
            h_list: vec![0.05, 0.1, 0.2],
            radii: vec![0.25, 1.0, 4.0],
            restricted: false,
            quad_order: 1024,
            alpha: 0.5,
            chi: CutoffProfile::default(),
        }
    }
}

/// Deterministic quasi-uniform directions on S^2 (Fibonacci lattice).
pub fn fibonacci_sphere(count: usize) -> Vec<[f64; 3]> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..count)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (k as f64 / golden).fract();
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn restricted_min_eig(
    integral: &DMatrix<Complex64>,
    basis: &DMatrix<Complex64>,
) -> f64 {
    let projected = basis.adjoint() * integral * basis;
    linalg::herm_min_eig(&projected)
}

/// Run an ellipticity scan: minimum eigenvalue per sampled direction of the
/// equatorial integral (projected onto the solenoidal trace-free subspace
/// when `restricted`). Pass means strictly positive on the configured
/// subspace; unrestricted mixed scans only check positive semidefiniteness
/// since the gauge directions sit in the kernel.
pub fn ellipticity_scan(cfg: &ScanConfig) -> Result<SymbolReport> {
    let mut rows = Vec::new();
    let dirs = fibonacci_sphere(cfg.directions);
    let mut min_global = f64::INFINITY;
    let mut max_herm: f64 = 0.0;
    let psd_slack = -1e-10;
    let mut push_row = |xi: f64, eta: [f64; 2], h: f64, rows: &mut Vec<ScanRow>| -> Result<()> {
        let point = SymbolPoint { xi, eta: eta.to_vec(), h, alpha: cfg.alpha };
        let integral = equatorial_integral(cfg.kind, &point, &cfg.chi, cfg.quad_order)?;
        let (min_eig, dim) = if cfg.restricted {
            if !cfg.kind.is_mixed() {
                return Err(MixedRayError::domain(
                    "restricted scans apply to the mixed kinds",
                ));
            }
            let basis = solenoidal_tracefree_basis(cfg.kind, xi, &eta)?;
            (restricted_min_eig(&integral.matrix, &basis), basis.ncols())
        } else {
            (linalg::herm_min_eig(&integral.matrix), integral.matrix.nrows())
        };
        let pass = if cfg.kind.is_mixed() && !cfg.restricted {
            min_eig >= psd_slack
        } else {
            min_eig > 0.0
        };
        min_global = min_global.min(min_eig);
        max_herm = max_herm.max(integral.anti_norm);
        rows.push(ScanRow {
            kind: cfg.kind.label().to_string(),
            xi,
            eta: eta.to_vec(),
            h,
            min_eig,
            herm_residual: integral.anti_norm,
            basis_dim: dim,
            pass,
        });
        Ok(())
    };
    if cfg.kind.is_fiber() {
        for d in &dirs {
            push_row(d[0], [d[1], d[2]], 0.0, &mut rows)?;
        }
    } else {
        for &h in &cfg.h_list {
            for d in &dirs {
                for &r in &cfg.radii {
                    push_row(r * d[0], [r * d[1], r * d[2]], h, &mut rows)?;
                }
            }
            // The origin of the rescaled frequency is a finite point too.
            push_row(0.0, [0.0, 0.0], h, &mut rows)?;
        }
    }
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(SymbolReport {
        kind: cfg.kind.label().to_string(),
        restricted: cfg.restricted,
        rows,
        min_eig_global: min_global,
        max_herm_residual: max_herm,
        all_pass,
    })
}

/// Determinant of the kernel-analysis block system
/// [[1, 1, 1^T], [-(rho+1), 0, rho 1^T], [0, (rho+1) 1, -Id]] (n x n).
/// For n = 3 this is -2 (rho + 1)^2.
pub fn kernel_system_check(rho: f64, n: usize) -> Result<f64> {
    if rho < 0.0 || n < 3 {
        return Err(MixedRayError::domain("kernel system needs rho >= 0, n >= 3"));
    }
    let m = n - 2;
    let mut a = DMatrix::zeros(n, n);
    a[(0, 0)] = 1.0;
    a[(0, 1)] = 1.0;
    for j in 0..m {
        a[(0, 2 + j)] = 1.0;
    }
    a[(1, 0)] = -(rho + 1.0);
    for j in 0..m {
        a[(1, 2 + j)] = rho;
    }
    for i in 0..m {
        a[(2 + i, 1)] = rho + 1.0;
        a[(2 + i, 2 + i)] = -1.0;
    }
    Ok(a.determinant())
}

/// Gauge symbol identity report at one frequency (evaluated with the
/// Christoffel term set to zero, i.e. at a normal-coordinate point).
#[derive(Debug, Clone, serde::Serialize)]
pub struct GaugeSymbolReport {
    /// || sigma(delta^B_F/i) sigma(d^B_F/i) - sigma(-Laplacian) ||.
    pub composition_residual: f64,
    /// Residual of the five-operator decomposition at symbol level.
    pub decomposition_residual: f64,
    /// Minimum eigenvalue of M(xi, eta, F) (positive semidefinite).
    pub m_min_eig: f64,
    /// Minimum eigenvalue of sigma(-Laplacian).
    pub laplacian_min_eig: f64,
    /// laplacian_min_eig / (xi^2 + |eta|^2 + F^2): the ellipticity constant.
    pub ellipticity_constant: f64,
}

/// Principal symbol of (1/i) d_F on (1,0) -> (1,1) components (a = 0).
pub fn d_symbol(xi: f64, eta: &[f64], f_weight: f64) -> DMatrix<Complex64> {
    let m = eta.len();
    let n = m + 1;
    let lead = Complex64::new(xi, f_weight);
    let mut d = DMatrix::zeros(n * n, n);
    d[(0, 0)] = lead;
    for j in 0..m {
        d[(j + 1, 0)] = Complex64::new(eta[j], 0.0);
    }
    for i in 0..m {
        d[((i + 1) * n, i + 1)] = lead;
        for j in 0..m {
            d[((i + 1) * n + j + 1, i + 1)] = Complex64::new(eta[j], 0.0);
        }
    }
    d
}

/// Trace projection P on flattened (1,1) components: f -> (trace f / n) Id.
fn trace_projector(n: usize) -> DMatrix<Complex64> {
    let nn = n * n;
    let mut p = DMatrix::zeros(nn, nn);
    for i in 0..n {
        for k in 0..n {
            p[(i * n + i, k * n + k)] = Complex64::new(1.0 / n as f64, 0.0);
        }
    }
    p
}

/// Principal symbol of (1/i) d^B_F: the trace-projected d-symbol.
pub fn db_symbol(xi: f64, eta: &[f64], f_weight: f64) -> DMatrix<Complex64> {
    let n = eta.len() + 1;
    let p = trace_projector(n);
    let id: DMatrix<Complex64> = DMatrix::identity(n * n, n * n);
    (id - p) * d_symbol(xi, eta, f_weight)
}

/// Principal symbol of (1/i) delta^B_F: the adjoint of the d-symbol
/// composed with the trace projection on the input side.
pub fn delta_b_symbol(xi: f64, eta: &[f64], f_weight: f64) -> DMatrix<Complex64> {
    let n = eta.len() + 1;
    let p = trace_projector(n);
    let id: DMatrix<Complex64> = DMatrix::identity(n * n, n * n);
    d_symbol(xi, eta, f_weight).adjoint() * (id - p)
}

/// The matrix M(xi, eta, F) = 2 (xi^2 + F^2 + |eta|^2) Id - M2 with
/// M2 = [[xi^2+F^2, (xi - iF) <eta, .>], [(xi + iF) eta, eta <eta, .>]].
pub fn m_matrix(xi: f64, eta: &[f64], f_weight: f64) -> DMatrix<Complex64> {
    let m = eta.len();
    let n = m + 1;
    let eta2: f64 = eta.iter().map(|c| c * c).sum();
    let total = xi * xi + f_weight * f_weight + eta2;
    let mut out = DMatrix::from_diagonal_element(n, n, Complex64::new(2.0 * total, 0.0));
    out[(0, 0)] -= Complex64::new(xi * xi + f_weight * f_weight, 0.0);
    for j in 0..m {
        out[(0, j + 1)] -= Complex64::new(xi, -f_weight) * eta[j];
        out[(j + 1, 0)] -= Complex64::new(xi, f_weight) * eta[j];
        for k in 0..m {
            out[(j + 1, k + 1)] -= Complex64::new(eta[j] * eta[k], 0.0);
        }
    }
    out
}

/// Verify the gauge symbol identities at one frequency with a = 0:
/// the composition sigma(delta^B_F/i) sigma(d^B_F/i) against the displayed
/// symbol of the (negated) weighted Laplacian, the five-operator
/// decomposition, positive semidefiniteness of M, and the ellipticity
/// constant of the Laplacian symbol.
pub fn gauge_symbol_check(xi: f64, eta: &[f64], f_weight: f64) -> Result<GaugeSymbolReport> {
    let m = eta.len();
    let n = m + 1;
    if n < 3 {
        return Err(MixedRayError::domain("gauge symbols need n >= 3"));
    }
    let eta2: f64 = eta.iter().map(|c| c * c).sum();
    let total = xi * xi + f_weight * f_weight + eta2;
    let comp = delta_b_symbol(xi, eta, f_weight) * db_symbol(xi, eta, f_weight);

    // sigma(-Laplacian) = (xi^2 + F^2 + |eta|^2) Id - (1/n) M2.
    let mut target = DMatrix::from_diagonal_element(n, n, Complex64::new(total, 0.0));
    let invn = 1.0 / n as f64;
    target[(0, 0)] -= Complex64::new(invn * (xi * xi + f_weight * f_weight), 0.0);
    for j in 0..m {
        target[(0, j + 1)] -= Complex64::new(xi, -f_weight) * (invn * eta[j]);
        target[(j + 1, 0)] -= Complex64::new(xi, f_weight) * (invn * eta[j]);
        for k in 0..m {
            target[(j + 1, k + 1)] -= Complex64::new(invn * eta[j] * eta[k], 0.0);
        }
    }
    let composition_residual = (&comp - &target).norm();

    // Five-operator decomposition at symbol level. The gradient head carries
    // (n-2)/n; the slot-derivative squares D1*D1 and D2*D2 enter with weight
    // 2/n so that their sum with (1/n) D3 D3* and (2/n)(D4*D4 - D5*D5)
    // reproduces (1/n) M exactly (the coefficient that makes the two
    // M-splittings consistent).
    let mut decomp = DMatrix::from_diagonal_element(
        n,
        n,
        Complex64::new((n as f64 - 2.0) / n as f64 * total, 0.0),
    );
    // (2/n) sigma(D1* D1 + D2* D2) = (2/n) diag(|eta|^2, (xi^2+F^2) Id).
    decomp[(0, 0)] += Complex64::new(2.0 / n as f64 * eta2, 0.0);
    for i in 0..m {
        decomp[(i + 1, i + 1)] +=
            Complex64::new(2.0 / n as f64 * (xi * xi + f_weight * f_weight), 0.0);
    }
    // (1/n) sigma(D3 D3*) = (1/n) [[xi^2+F^2, -(xi-iF) eta^T], [-(xi+iF) eta, eta eta^T]].
    decomp[(0, 0)] += Complex64::new(invn * (xi * xi + f_weight * f_weight), 0.0);
    for j in 0..m {
        decomp[(0, j + 1)] -= Complex64::new(xi, -f_weight) * (invn * eta[j]);
        decomp[(j + 1, 0)] -= Complex64::new(xi, f_weight) * (invn * eta[j]);
        for k in 0..m {
            decomp[(j + 1, k + 1)] += Complex64::new(invn * eta[j] * eta[k], 0.0);
        }
    }
    // (2/n) sigma(D4* D4 - D5* D5) = (2/n) diag(0, |eta|^2 Id - eta eta^T).
    for j in 0..m {
        for k in 0..m {
            let v = if j == k { eta2 } else { 0.0 } - eta[j] * eta[k];
            decomp[(j + 1, k + 1)] += Complex64::new(2.0 / n as f64 * v, 0.0);
        }
    }
    let decomposition_residual = (&comp - &decomp).norm();

    let m_min_eig = linalg::herm_min_eig(&m_matrix(xi, eta, f_weight));
    let laplacian_min_eig = linalg::herm_min_eig(&comp);
    let ellipticity_constant = laplacian_min_eig / total.max(f64::MIN_POSITIVE);
    Ok(GaugeSymbolReport {
        composition_residual,
        decomposition_residual,
        m_min_eig,
        laplacian_min_eig,
        ellipticity_constant,
    })
}

/// Coefficients of the three-fold reflection extension: exact solve of the
/// Vandermonde system with rows (-1, -1/2, -1/3), (1, 1, 1), (-1, -2, -3)
/// and right-hand side (1, 1, 1), done in integer arithmetic on the 6x
/// cleared first row. The solution is (-6, 16, -9).
pub fn extension_coefficients() -> (f64, f64, f64) {
    // 6x row 1: [-6, -3, -2 | 6]; rows 2-3 integral already.
    let a: [[i64; 3]; 3] = [[-6, -3, -2], [1, 1, 1], [-1, -2, -3]];
    let b: [i64; 3] = [6, 1, 1];
    let det3 = |m: [[i64; 3]; 3]| -> i64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(a);
    let mut c = [0.0; 3];
    for k in 0..3 {
        let mut ak = a;
        for r in 0..3 {
            ak[r][k] = b[r];
        }
        let dk = det3(ak);
        assert_eq!(dk % d, 0, "extension system must solve in integers");
        c[k] = (dk / d) as f64;
    }
    (c[0], c[1], c[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn t1_fiber_at_zero_slope_is_the_display() {
        // S = 0 with chi(0) = 1: [[1, 0], [0, I - Y Y^T]].
        let y = [0.6, 0.8];
        let m = t1_fiber_matrix(0.0, &y, 1.0).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 } - y[a] * y[b];
                assert_relative_eq!(m[(a + 1, b + 1)], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn t1_base_orthogonal_direction_is_the_display() {
        // Y . eta_F = 0 kills the off-diagonal blocks: [[1, 0], [0, I - Y Y^T]].
        let y = [1.0, 0.0];
        let eta = [0.0, 2.0];
        let m = t1_base_matrix(0.7, &eta, &y).unwrap();
        assert_eq!(m[(0, 1)], Complex64::new(0.0, 0.0));
        assert_eq!(m[(1, 0)], Complex64::new(0.0, 0.0));
        assert_relative_eq!(m[(1, 1)].re, 0.0, epsilon = 1e-15);
        assert_relative_eq!(m[(2, 2)].re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn integrand_matrices_are_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let s: f64 = rng.random_range(-3.0..3.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let y = [phi.cos(), phi.sin()];
            let chi = CutoffProfile::default().eval(s);
            let m = t1_fiber_matrix(s, &y, chi.max(1e-3)).unwrap();
            let mc = m.map(|x| Complex64::new(x, 0.0));
            assert!(linalg::herm_min_eig(&mc) >= -1e-12);
            let l = l11_fiber_matrix(s, &y, 1.0).unwrap();
            let lc = l.map(|x| Complex64::new(x, 0.0));
            assert!(linalg::herm_min_eig(&lc) >= -1e-12);
            let xi: f64 = rng.random_range(-2.0..2.0);
            let eta = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let tb = t1_base_matrix(xi, &eta, &y).unwrap();
            assert!(linalg::herm_min_eig(&tb) >= -1e-12);
            assert!(linalg::hermitian_residual(&tb) <= 1e-12);
            let lb = l11_base_matrix(xi, &eta, &y).unwrap();
            assert!(linalg::herm_min_eig(&lb) >= -1e-12);
            assert!(linalg::hermitian_residual(&lb) <= 1e-12);
        }
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        assert!(t1_fiber_matrix(0.0, &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn equatorial_t1_fiber_closed_form() {
        // (xi, eta) = (1, 0, 0): the equator fixes S = 0 and Y runs over the
        // circle; sphere moments give diag(2 pi, pi, pi).
        let point = SymbolPoint { xi: 1.0, eta: vec![0.0, 0.0], h: 0.0, alpha: 0.5 };
        let out = equatorial_integral(SymbolKind::T1Fiber, &point, &CutoffProfile::default(), 128).unwrap();
        let pi = std::f64::consts::PI;
        let want = [2.0 * pi, pi, pi];
        for (k, w) in want.iter().enumerate() {
            assert_relative_eq!(out.matrix[(k, k)].re, w, max_relative = 1e-6);
        }
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    assert!(out.matrix[(r, c)].norm() < 1e-12);
                }
            }
        }
        assert!(out.anti_norm <= 1e-12);
    }

    #[test]
    fn equatorial_integrals_are_hermitian() {
        let chi = CutoffProfile::default();
        for kind in [SymbolKind::T1Fiber, SymbolKind::L11Fiber] {
            let p = SymbolPoint { xi: 0.3, eta: vec![-0.7, 0.64], h: 0.0, alpha: 0.5 };
            let out = equatorial_integral(kind, &p, &chi, 64).unwrap();
            assert!(out.anti_norm <= 1e-12, "{kind:?}: {}", out.anti_norm);
        }
        for kind in [SymbolKind::T1Base, SymbolKind::L11Base] {
            let p = SymbolPoint { xi: 0.3, eta: vec![-0.7, 0.64], h: 0.1, alpha: 0.5 };
            let out = equatorial_integral(kind, &p, &chi, 64).unwrap();
            assert!(out.anti_norm <= 1e-12, "{kind:?}: {}", out.anti_norm);
        }
    }

    #[test]
    fn t1_base_positive_on_direction_grid() {
        let cfg = ScanConfig {
            kind: SymbolKind::T1Base,
            directions: 64,
            h_list: vec![0.1],
            ..Default::default()
        };
        let rep = ellipticity_scan(&cfg).unwrap();
        assert!(rep.all_pass, "min eig {}", rep.min_eig_global);
        assert!(rep.min_eig_global > 0.0);
    }

    #[test]
    fn solenoidal_basis_dimension_is_five() {
        // Generic frequency: 9 - 1 (trace) - 3 (divergence rows) = 5.
        let b = solenoidal_tracefree_basis(SymbolKind::L11Fiber, 0.8, &[0.5, -0.3]).unwrap();
        assert_eq!(b.ncols(), 5);
        // eta = 0, xi != 0: constraints f^x_x = 0, f^y_x = 0, trace = 0.
        let b0 = solenoidal_tracefree_basis(SymbolKind::L11Fiber, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(b0.ncols(), 5);
        // Base variant at a generic frequency.
        let bb = solenoidal_tracefree_basis(SymbolKind::L11Base, 0.8, &[0.5, -0.3]).unwrap();
        assert_eq!(bb.ncols(), 5);
        // Every basis element satisfies the constraints.
        for col in 0..b.ncols() {
            let f = b.column(col);
            let trace: Complex64 = (0..3).map(|i| f[i * 3 + i]).sum();
            assert!(trace.norm() <= 1e-12);
            let xi = 0.8;
            let eta = [0.5, -0.3];
            for i in 0..3 {
                let div: Complex64 = f[i * 3] * xi + f[i * 3 + 1] * eta[0] + f[i * 3 + 2] * eta[1];
                assert!(div.norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn l11_fiber_positive_on_restricted_subspace_and_null_on_gauge() {
        let cfg = ScanConfig {
            kind: SymbolKind::L11Fiber,
            directions: 32,
            restricted: true,
            ..Default::default()
        };
        let rep = ellipticity_scan(&cfg).unwrap();
        assert!(rep.all_pass, "restricted min eig {}", rep.min_eig_global);
        assert!(rep.min_eig_global > 0.0);
        assert!(rep.rows.iter().all(|r| r.basis_dim == 5));

        // Unrestricted: gauge directions (image of the d^B-symbol at F = 0)
        // are annihilated pointwise, so the minimum eigenvalue sits at zero.
        let cfg_u = ScanConfig { restricted: false, ..cfg };
        let rep_u = ellipticity_scan(&cfg_u).unwrap();
        assert!(rep_u.min_eig_global.abs() <= 1e-10, "{}", rep_u.min_eig_global);
        // Explicit annihilation of d^B-image candidates.
        let (xi, eta) = (0.7, [0.4, -0.5]);
        let point = SymbolPoint { xi, eta: eta.to_vec(), h: 0.0, alpha: 0.5 };
        let integral = equatorial_integral(SymbolKind::L11Fiber, &point, &CutoffProfile::default(), 64)
            .unwrap()
            .matrix;
        let dsym = db_symbol(xi, &eta, 0.0);
        for k in 0..3 {
            let mut v = DVector::zeros(3);
            v[k] = Complex64::new(1.0, 0.0);
            let gauge_dir = &dsym * v;
            let q = (gauge_dir.adjoint() * &integral * &gauge_dir)[(0, 0)];
            assert!(q.norm() <= 1e-10 * gauge_dir.norm_squared().max(1.0), "{q}");
        }
    }

    #[test]
    fn l11_base_positive_on_restricted_subspace() {
        let cfg = ScanConfig {
            kind: SymbolKind::L11Base,
            directions: 16,
            h_list: vec![0.1, 0.2],
            restricted: true,
            ..Default::default()
        };
        let rep = ellipticity_scan(&cfg).unwrap();
        assert!(rep.all_pass, "min eig {}", rep.min_eig_global);
    }

    #[test]
    fn kernel_system_determinant_formula() {
        assert_relative_eq!(kernel_system_check(0.0, 3).unwrap(), -2.0, epsilon = 1e-12);
        assert_relative_eq!(kernel_system_check(1.0, 3).unwrap(), -8.0, epsilon = 1e-12);
        for k in 0..=100 {
            let rho = 0.1 * k as f64;
            let det = kernel_system_check(rho, 3).unwrap();
            let want = -2.0 * (rho + 1.0) * (rho + 1.0);
            assert_relative_eq!(det, want, max_relative = 1e-12);
            assert!(det.abs() >= 2.0);
        }
    }

    #[test]
    fn gauge_symbols_compose_to_the_laplacian() {
        // (xi, eta, F) = (1, 0, 1): sigma(grad*grad) = 2 Id and the
        // composition identity holds to near machine precision.
        let rep = gauge_symbol_check(1.0, &[0.0, 0.0], 1.0).unwrap();
        assert!(rep.composition_residual <= 1e-14, "{}", rep.composition_residual);
        assert!(rep.decomposition_residual <= 1e-14);
        // sigma(-Laplacian) = 2 Id - (1/3) diag(2, 0, 0) has min eig 4/3... but
        // reported against the display: check positivity only.
        assert!(rep.laplacian_min_eig > 0.0);
        let comp = delta_b_symbol(1.0, &[0.0, 0.0], 1.0) * db_symbol(1.0, &[0.0, 0.0], 1.0);
        // Top-left entry: (xi^2+F^2)(1 - 1/n) = 2 * 2/3.
        assert_relative_eq!(comp[(0, 0)].re, 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn gauge_identities_hold_at_random_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let xi: f64 = rng.random_range(-3.0..3.0);
            let eta = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let f: f64 = rng.random_range(0.1..6.0);
            let rep = gauge_symbol_check(xi, &eta, f).unwrap();
            assert!(rep.composition_residual <= 1e-12, "{}", rep.composition_residual);
            assert!(rep.decomposition_residual <= 1e-12, "{}", rep.decomposition_residual);
            assert!(rep.m_min_eig >= -1e-12, "{}", rep.m_min_eig);
            assert!(rep.ellipticity_constant > 0.0);
        }
    }

    #[test]
    fn m_matrix_quadratic_form_is_nonnegative() {
        // The base split of M at xi = 0: form value >= 0 on random complex
        // vectors, mirroring the inequality chain in the positivity proof.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let eta = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let f: f64 = rng.random_range(0.0..4.0);
            let m = m_matrix(0.0, &eta, f);
            let v = DVector::from_fn(3, |_, _| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let q = (v.adjoint() * &m * &v)[(0, 0)];
            assert!(q.re >= -1e-12 * v.norm_squared(), "form {q}");
        }
    }

    #[test]
    fn extension_coefficients_solve_the_printed_system() {
        let (c1, c2, c3) = extension_coefficients();
        assert_eq!((c1, c2, c3), (-6.0, 16.0, -9.0));
        // Matching identities: sum c_k (-1/k) = 1, sum c_k = 1, sum c_k (-k) = 1.
        let r1 = -c1 - c2 / 2.0 - c3 / 3.0;
        let r2 = c1 + c2 + c3;
        let r3 = -c1 - 2.0 * c2 - 3.0 * c3;
        assert!((r1 - 1.0).abs() <= 1e-12);
        assert!((r2 - 1.0).abs() <= 1e-12);
        assert!((r3 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn quadrature_doubling_is_stable() {
        let chi = CutoffProfile::default();
        for kind in [SymbolKind::T1Fiber, SymbolKind::L11Fiber] {
            let p = SymbolPoint { xi: 0.4, eta: vec![0.8, -0.3], h: 0.0, alpha: 0.5 };
            let a = equatorial_integral(kind, &p, &chi, 1024).unwrap().matrix;
            let b = equatorial_integral(kind, &p, &chi, 2048).unwrap().matrix;
            let rel = (&a - &b).norm() / b.norm();
            assert!(rel <= 1e-8, "{kind:?} doubling residual {rel}");
        }
        for kind in [SymbolKind::T1Base, SymbolKind::L11Base] {
            let p = SymbolPoint { xi: 0.4, eta: vec![0.8, -0.3], h: 0.1, alpha: 0.5 };
            let a = equatorial_integral(kind, &p, &chi, 1024).unwrap().matrix;
            let b = equatorial_integral(kind, &p, &chi, 2048).unwrap().matrix;
            let rel = (&a - &b).norm() / b.norm();
            assert!(rel <= 1e-8, "{kind:?} doubling residual {rel}");
        }
    }
}
