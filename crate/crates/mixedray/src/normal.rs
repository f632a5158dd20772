//! The backprojection operator, the exponentially weighted normal operator,
//! and its dense discretization on a grid.
//!
//! Backprojection at a point integrates over near-tangent rays (slope
//! lambda = s x with s in the cutoff support, tangential direction omega on
//! the unit circle), applying the scattering-basis projector
//! Id - u (x) w / h(omega, omega) with u = omega-tangent and w the rescaled
//! lowered ray direction (s, h omega), carrying the x^{-2} normalization for
//! both transform kinds. The weighted normal operator folds the conjugation
//! exp(F(1/x(gamma(t)) - 1/x(z))) into the forward integrand as a single
//! clamped exponential of a difference.
//!
//! Matrix unknowns and outputs are scattering-basis components stacked per
//! node; chart-basis fields convert through the diagonal (x^2, x, ..., x)
//! rescaling.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chart::{shoot_geodesic, transport_frame, MetricChart, ShootOpts};
use crate::cutoff::CutoffProfile;
use crate::error::{MixedRayError, Result};
use crate::fields::{TensorField11, VectorField, EXP_CLAMP};
use crate::grid::GridSpec;
use crate::linalg;
use crate::transforms::{RaySpec, TenEval, VecEval};

/// Exponent magnitude above which a conjugation weight is counted as large.
pub const EXP_WARN: f64 = 50.0;

/// Which transform's normal operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TransformKind {
    T1,
    L11,
}

impl TransformKind {
    pub fn comps_per_node(&self, n: usize) -> usize {
        match self {
            TransformKind::T1 => n,
            TransformKind::L11 => n * n,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TransformKind::T1 => "T1",
            TransformKind::L11 => "L11",
        }
    }
}

/// Quadrature orders of the backprojection fan.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuadratureSpec {
    /// Gauss-Legendre nodes on the slope support.
    pub radial_order: usize,
    /// Uniform angular nodes on the omega circle.
    pub angular_order: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { radial_order: 8, angular_order: 32 }
    }
}

/// Full configuration of a normal-operator evaluation.
#[derive(Debug, Clone)]
pub struct NormalConfig {
    pub kind: TransformKind,
    pub f_weight: f64,
    pub chi: CutoffProfile,
    pub quad: QuadratureSpec,
    /// Geodesic integrator step for fan rays.
    pub step: f64,
    pub max_len: f64,
}

impl NormalConfig {
    pub fn new(kind: TransformKind, f_weight: f64) -> Self {
        NormalConfig {
            kind,
            f_weight,
            chi: CutoffProfile::default(),
            quad: QuadratureSpec::default(),
            step: 2e-3,
            max_len: 8.0,
        }
    }
}

/// Counters accumulated across an assembly or apply run.
#[derive(Debug, Default)]
pub struct NormalStats {
    /// Samples whose conjugation exponent exceeded [`EXP_WARN`].
    pub large_exponents: AtomicU64,
    /// Samples clamped at the hard exponent cap.
    pub clamped: AtomicU64,
}

/// Geometry of one fan ray, handed to backprojection data closures.
#[derive(Debug, Clone)]
pub struct RayCtx {
    pub radial_index: usize,
    pub angular_index: usize,
    /// Slope s = lambda / x.
    pub s: f64,
    /// Euclidean-unit tangential direction.
    pub omega: Vec<f64>,
    /// g-unit chart direction of the ray.
    pub zeta: Vec<f64>,
    /// Scalar quadrature weight (includes x^{-2}, chi, and measures).
    pub weight: f64,
}

fn fan_rays(
    chart: &MetricChart,
    point: &[f64],
    chi: &CutoffProfile,
    quad: &QuadratureSpec,
) -> Result<Vec<RayCtx>> {
    let n = chart.dim();
    if n != 3 {
        return Err(MixedRayError::domain("backprojection fans are implemented for n = 3"));
    }
    let x = chart.bdf(point);
    if x <= 0.0 {
        return Err(MixedRayError::domain("backprojection needs x > 0 at the point"));
    }
    chi.validate()?;
    let r = chi.support_radius();
    let (s_nodes, s_weights) = linalg::gauss_legendre_on(quad.radial_order, -r, r);
    let dphi = 2.0 * std::f64::consts::PI / quad.angular_order as f64;
    let mut rays = Vec::with_capacity(quad.radial_order * quad.angular_order);
    for a in 0..quad.angular_order {
        let phi = a as f64 * dphi;
        let omega = vec![phi.cos(), phi.sin()];
        for (q, (&s, &wq)) in s_nodes.iter().zip(&s_weights).enumerate() {
            let c = chi.eval(s);
            if c == 0.0 {
                continue;
            }
            let mut dir = vec![0.0; n];
            dir[0] = s * x;
            dir[1..].copy_from_slice(&omega);
            let zeta = chart.normalize(point, &dir);
            // x^{-2} (from the operator) times dlambda = x ds gives x^{-1}.
            let weight = c * wq * dphi / x;
            rays.push(RayCtx {
                radial_index: q,
                angular_index: a,
                s,
                omega: omega.clone(),
                zeta,
                weight,
            });
        }
    }
    Ok(rays)
}

/// Scattering-basis projector of the backprojection integrand:
/// Id - u (x) w / h(omega, omega), u = (0, omega), w = (s, h omega).
fn sc_projector(chart: &MetricChart, point: &[f64], s: f64, omega: &[f64]) -> Vec<f64> {
    let n = chart.dim();
    let m = n - 1;
    let mut h = vec![0.0; m * m];
    chart.tangential_metric_into(point, &mut h);
    let mut h_om = vec![0.0; m];
    let mut h_norm = 0.0;
    for i in 0..m {
        let mut sum = 0.0;
        for j in 0..m {
            sum += h[i * m + j] * omega[j];
        }
        h_om[i] = sum;
        h_norm += sum * omega[i];
    }
    let mut u = vec![0.0; n];
    u[1..].copy_from_slice(omega);
    let mut w = vec![0.0; n];
    w[0] = s;
    w[1..].copy_from_slice(&h_om);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = if i == j { 1.0 } else { 0.0 } - u[i] * w[j] / h_norm;
        }
    }
    p
}

/// Covariant factor (s, h omega) of the mixed-kind backprojection.
fn sc_covector(chart: &MetricChart, point: &[f64], s: f64, omega: &[f64]) -> Vec<f64> {
    let n = chart.dim();
    let m = n - 1;
    let mut h = vec![0.0; m * m];
    chart.tangential_metric_into(point, &mut h);
    let mut w = vec![0.0; n];
    w[0] = s;
    for i in 0..m {
        let mut sum = 0.0;
        for j in 0..m {
            sum += h[i * m + j] * omega[j];
        }
        w[i + 1] = sum;
    }
    w
}

/// Diagonal chart -> scattering conversion weights (x^2, x, ..., x).
fn sc_weights(chart: &MetricChart, point: &[f64]) -> Vec<f64> {
    let n = chart.dim();
    let x = chart.bdf(point);
    let mut w = vec![x; n];
    w[0] = x * x;
    w
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

/// Backprojection of per-ray data at a point. The data closure receives the
/// ray geometry and returns the scattering-basis vector value of the
/// forward data for that ray. T1 output is a scattering vector (n), L11
/// output a scattering (1,1) value (n*n) with the covariant factor
/// tensored on.
pub fn apply_backprojection_l(
    kind: TransformKind,
    chart: &MetricChart,
    data: &mut dyn FnMut(&RayCtx) -> Result<DVector<f64>>,
    point: &[f64],
    chi: &CutoffProfile,
    quad: &QuadratureSpec,
) -> Result<Vec<f64>> {
    let n = chart.dim();
    let out_len = kind.comps_per_node(n);
    let mut acc = vec![0.0; out_len];
    let mut proj = vec![0.0; n];
    for ray in fan_rays(chart, point, chi, quad)? {
        let v = data(&ray)?;
        if v.len() != n {
            return Err(MixedRayError::domain("backprojection data must be a vector"));
        }
        let p = sc_projector(chart, point, ray.s, &ray.omega);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += p[i * n + j] * v[j];
            }
            proj[i] = s;
        }
        match kind {
            TransformKind::T1 => {
                for i in 0..n {
                    acc[i] += ray.weight * proj[i];
                }
            }
            TransformKind::L11 => {
                let w = sc_covector(chart, point, ray.s, &ray.omega);
                for i in 0..n {
                    for j in 0..n {
                        acc[i * n + j] += ray.weight * proj[i] * w[j];
                    }
                }
            }
        }
    }
    Ok(acc)
}

/// Per-sample callback payload of the shared ray scan: the combined scalar
/// weight (quadrature x Simpson x conjugation), the left map b_mat (n x n,
/// chart-basis field value at the sample to scattering-basis output
/// contribution at the point), the sample position/velocity, and for the
/// mixed kind the covariant factor of the output.
struct SampleCtx<'a> {
    weight: f64,
    b_mat: &'a [f64],
    pos: &'a [f64],
    vel: &'a [f64],
    w_cov: &'a [f64],
}

/// Shared ray scan of the normal operator at one point: shoots each fan ray
/// once, builds the per-sample left maps, and feeds them to `sink`.
fn scan_normal_point(
    chart: &MetricChart,
    point: &[f64],
    cfg: &NormalConfig,
    stats: Option<&NormalStats>,
    skip_sample: &dyn Fn(&[f64]) -> bool,
    sink: &mut dyn FnMut(&SampleCtx<'_>),
) -> Result<()> {
    let n = chart.dim();
    let nn = n * n;
    let x_p = chart.bdf(point);
    let inv_x_p = 1.0 / x_p;
    let swts = sc_weights(chart, point);
    let shoot = ShootOpts { step: cfg.step, max_len: cfg.max_len, ..Default::default() };
    let mut theta = vec![0.0; n];
    let mut pmat = vec![0.0; nn];
    let mut vp = vec![0.0; nn];
    let mut b_mat = vec![0.0; nn];
    let mut left = vec![0.0; nn];
    for ray in fan_rays(chart, point, &cfg.chi, &cfg.quad)? {
        // vartheta = h(omega) dy at the base point.
        let m = n - 1;
        let mut hm = vec![0.0; m * m];
        chart.tangential_metric_into(point, &mut hm);
        let mut vartheta = vec![0.0; n];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += hm[i * m + j] * ray.omega[j];
            }
            vartheta[i + 1] = s;
        }
        let spec = RaySpec::new(chart, point.to_vec(), ray.zeta.clone(), vartheta, None)?;
        let path = shoot_geodesic(chart, &spec.z, &spec.zeta, &shoot)?;
        let frame = transport_frame(chart, &path)?;
        let simpson = path.simpson_weights();
        // left = P_sc * S_p, folded once per ray.
        let psc = sc_projector(chart, point, ray.s, &ray.omega);
        for i in 0..n {
            for j in 0..n {
                left[i * n + j] = psc[i * n + j] / swts[j];
            }
        }
        let w_cov = sc_covector(chart, point, ray.s, &ray.omega);
        for k in 0..path.len() {
            let pos = path.pos(k);
            if skip_sample(pos) {
                continue;
            }
            let vel = path.vel(k);
            frame.covector_at(k, &spec.vartheta, &mut theta);
            let pairing: f64 = theta.iter().zip(vel).map(|(a, b)| a * b).sum();
            if pairing.abs() < crate::transforms::PAIRING_FLOOR {
                return Err(MixedRayError::DegeneratePairing(format!(
                    "<vartheta(t), gammadot(t)> = {pairing:e} along a fan ray"
                )));
            }
            // p_{gammadot, vartheta(t)}.
            for i in 0..n {
                for j in 0..n {
                    pmat[i * n + j] =
                        if i == j { 1.0 } else { 0.0 } - vel[i] * theta[j] / pairing;
                }
            }
            matmul_into(frame.mat(k), &pmat, n, &mut vp);
            matmul_into(&left, &vp, n, &mut b_mat);
            let mut weight = ray.weight * simpson[k];
            if cfg.f_weight > 0.0 {
                let expo = cfg.f_weight * (1.0 / chart.bdf(pos) - inv_x_p);
                if let Some(st) = stats {
                    if expo.abs() > EXP_WARN {
                        st.large_exponents.fetch_add(1, Ordering::Relaxed);
                    }
                    if expo.abs() > EXP_CLAMP {
                        st.clamped.fetch_add(1, Ordering::Relaxed);
                    }
                }
                weight *= expo.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
            }
            sink(&SampleCtx { weight, b_mat: &b_mat, pos, vel, w_cov: &w_cov });
        }
    }
    Ok(())
}

/// Apply the weighted normal operator at one point to a chart-basis field
/// evaluator. Returns scattering-basis components at the point (n for T1,
/// n*n for L11).
pub fn apply_normal_nf_t1(
    chart: &MetricChart,
    f: VecEval<'_>,
    point: &[f64],
    cfg: &NormalConfig,
    stats: Option<&NormalStats>,
) -> Result<Vec<f64>> {
    if cfg.kind != TransformKind::T1 {
        return Err(MixedRayError::domain("apply_normal_nf_t1 needs a T1 config"));
    }
    let n = chart.dim();
    let mut acc = vec![0.0; n];
    let mut fbuf = vec![0.0; n];
    scan_normal_point(chart, point, cfg, stats, &|_| false, &mut |s| {
        f(s.pos, &mut fbuf);
        if fbuf.iter().all(|&c| c == 0.0) {
            return;
        }
        for i in 0..n {
            let mut v = 0.0;
            for j in 0..n {
                v += s.b_mat[i * n + j] * fbuf[j];
            }
            acc[i] += s.weight * v;
        }
    })?;
    Ok(acc)
}

/// Mixed-kind variant of [`apply_normal_nf_t1`].
pub fn apply_normal_nf_l11(
    chart: &MetricChart,
    f: TenEval<'_>,
    point: &[f64],
    cfg: &NormalConfig,
    stats: Option<&NormalStats>,
) -> Result<Vec<f64>> {
    if cfg.kind != TransformKind::L11 {
        return Err(MixedRayError::domain("apply_normal_nf_l11 needs an L11 config"));
    }
    let n = chart.dim();
    let nn = n * n;
    let mut acc = vec![0.0; nn];
    let mut fbuf = vec![0.0; nn];
    let mut contracted = vec![0.0; n];
    let mut mapped = vec![0.0; n];
    scan_normal_point(chart, point, cfg, stats, &|_| false, &mut |s| {
        f(s.pos, &mut fbuf);
        if fbuf.iter().all(|&c| c == 0.0) {
            return;
        }
        for i in 0..n {
            let mut v = 0.0;
            for j in 0..n {
                v += fbuf[i * n + j] * s.vel[j];
            }
            contracted[i] = v;
        }
        for i in 0..n {
            let mut v = 0.0;
            for j in 0..n {
                v += s.b_mat[i * n + j] * contracted[j];
            }
            mapped[i] = v;
        }
        for i in 0..n {
            for j in 0..n {
                acc[i * n + j] += s.weight * mapped[i] * s.w_cov[j];
            }
        }
    })?;
    Ok(acc)
}

/// Dense discretization of the weighted normal operator over stacked
/// scattering-basis nodal components.
#[derive(Debug, Clone)]
pub struct NormalMatrix {
    pub kind: TransformKind,
    pub grid: GridSpec,
    pub f_weight: f64,
    pub chi: CutoffProfile,
    pub quad: QuadratureSpec,
    pub step: f64,
    pub comps_per_node: usize,
    pub matrix: DMatrix<f64>,
    /// Count of samples whose conjugation exponent exceeded [`EXP_WARN`].
    pub large_exponents: u64,
}

impl NormalMatrix {
    pub fn num_unknowns(&self) -> usize {
        self.grid.num_nodes() * self.comps_per_node
    }

    /// Stack a chart-basis vector field into scattering components.
    pub fn vec_of_vector_field(chart: &MetricChart, f: &VectorField) -> Vec<f64> {
        let n = f.dim();
        let mut out = vec![0.0; f.grid.num_nodes() * n];
        for node in 0..f.grid.num_nodes() {
            let p = f.grid.node_point(node);
            let w = sc_weights(chart, &p);
            for c in 0..n {
                out[node * n + c] = f.at(node)[c] / w[c];
            }
        }
        out
    }

    pub fn vector_field_of_vec(chart: &MetricChart, grid: &GridSpec, v: &[f64]) -> VectorField {
        let n = grid.dim();
        let mut f = VectorField::zeros(grid.clone());
        for node in 0..grid.num_nodes() {
            let p = grid.node_point(node);
            let w = sc_weights(chart, &p);
            for c in 0..n {
                f.comps[node * n + c] = v[node * n + c] * w[c];
            }
        }
        f
    }

    pub fn vec_of_tensor_field(chart: &MetricChart, f: &TensorField11) -> Vec<f64> {
        let n = f.dim();
        let nn = n * n;
        let mut out = vec![0.0; f.grid.num_nodes() * nn];
        for node in 0..f.grid.num_nodes() {
            let p = f.grid.node_point(node);
            let w = sc_weights(chart, &p);
            let t = f.at(node);
            for i in 0..n {
                for j in 0..n {
                    // chart f^i_j = sc f^i_j * w_i / w_j
                    out[node * nn + i * n + j] = t[i * n + j] * w[j] / w[i];
                }
            }
        }
        out
    }

    pub fn tensor_field_of_vec(chart: &MetricChart, grid: &GridSpec, v: &[f64]) -> TensorField11 {
        let n = grid.dim();
        let nn = n * n;
        let mut f = TensorField11::zeros(grid.clone());
        for node in 0..grid.num_nodes() {
            let p = grid.node_point(node);
            let w = sc_weights(chart, &p);
            for i in 0..n {
                for j in 0..n {
                    f.comps[node * nn + i * n + j] = v[node * nn + i * n + j] * w[i] / w[j];
                }
            }
        }
        f
    }

    /// Relative asymmetry ||M - M^T|| / ||M||.
    pub fn near_symmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).norm() / self.matrix.norm().max(1e-300)
    }

    /// Columns with no entries (basis fields no admissible ray reaches).
    pub fn structurally_zero_cols(&self) -> Vec<usize> {
        (0..self.matrix.ncols())
            .filter(|&c| self.matrix.column(c).iter().all(|&v| v == 0.0))
            .collect()
    }

    /// Estimated minimum eigenvalue of the symmetrized matrix: dense
    /// eigendecomposition up to 2100 unknowns, shifted power iteration
    /// beyond.
    pub fn sym_min_eig_est(&self) -> f64 {
        let s = 0.5 * (&self.matrix + self.matrix.transpose());
        let m = s.nrows();
        if m <= 2100 {
            return linalg::sym_min_eig(&s);
        }
        let lam_max = linalg::spectral_norm_est(&|v| &s * v, &|v| &s * v, m, 40);
        let shifted = DMatrix::from_diagonal_element(m, m, lam_max) - &s;
        let top = linalg::spectral_norm_est(&|v| &shifted * v, &|v| &shifted * v, m, 80);
        lam_max - top
    }
}

/// Assemble rows of the normal matrix for a subset of evaluation nodes.
/// Rows are scattering components at those nodes; columns are scattering
/// components at every grid node. Row blocks are computed independently
/// (node-parallel) and written in node order, so the result is
/// deterministic for a fixed config.
pub fn assemble_normal_rows(
    chart: &MetricChart,
    grid: &GridSpec,
    cfg: &NormalConfig,
    row_nodes: &[usize],
    stats: &NormalStats,
) -> Result<DMatrix<f64>> {
    let n = chart.dim();
    let c = cfg.kind.comps_per_node(n);
    let ncols = grid.num_nodes() * c;
    let blocks: Vec<Result<Vec<f64>>> = row_nodes
        .par_iter()
        .map(|&node| -> Result<Vec<f64>> {
            let point = grid.node_point(node);
            let mut block = vec![0.0; c * ncols];
            let nn = n * n;
            let mut scale = vec![0.0; nn];
            scan_normal_point(
                chart,
                &point,
                cfg,
                Some(stats),
                &|pos| grid.interp_weights(pos).is_empty(),
                &mut |s| {
                    let hats = grid.interp_weights(s.pos);
                    match cfg.kind {
                        TransformKind::T1 => {
                            for &(q, hat) in &hats {
                                let p_q = grid.node_point(q);
                                let w_q = sc_weights(chart, &p_q);
                                for i in 0..n {
                                    let row = &mut block[i * ncols..(i + 1) * ncols];
                                    for j in 0..n {
                                        row[q * n + j] +=
                                            s.weight * s.b_mat[i * n + j] * hat * w_q[j];
                                    }
                                }
                            }
                        }
                        TransformKind::L11 => {
                            // contribution^(i,j) over unknown (q,(k,m)):
                            // weight * b_mat[i,k] * vel^m * w_cov[j] * hat * scale_q(k,m)
                            for &(q, hat) in &hats {
                                let p_q = grid.node_point(q);
                                let w_q = sc_weights(chart, &p_q);
                                for k in 0..n {
                                    for m in 0..n {
                                        scale[k * n + m] = hat * s.vel[m] * w_q[k] / w_q[m];
                                    }
                                }
                                for i in 0..n {
                                    for j in 0..n {
                                        let row =
                                            &mut block[(i * n + j) * ncols..(i * n + j + 1) * ncols];
                                        let wj = s.weight * s.w_cov[j];
                                        for k in 0..n {
                                            let bik = s.b_mat[i * n + k] * wj;
                                            if bik == 0.0 {
                                                continue;
                                            }
                                            for m in 0..n {
                                                row[q * nn + k * n + m] += bik * scale[k * n + m];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                },
            )?;
            Ok(block)
        })
        .collect();
    let mut out = DMatrix::zeros(row_nodes.len() * c, ncols);
    for (bi, block) in blocks.into_iter().enumerate() {
        let block = block?;
        for r in 0..c {
            for col in 0..ncols {
                out[(bi * c + r, col)] = block[r * ncols + col];
            }
        }
    }
    Ok(out)
}

/// Assemble the full square normal matrix on a grid (columns are unit
/// hat-interpolated basis fields; rows are evaluations at every node).
pub fn assemble_normal_matrix(
    chart: &MetricChart,
    grid: &GridSpec,
    cfg: &NormalConfig,
    unknown_cap: usize,
) -> Result<NormalMatrix> {
    let n = chart.dim();
    if grid.nodes.iter().any(|&m| m < 5) {
        return Err(MixedRayError::domain("normal matrix grid needs >= 5 nodes per axis"));
    }
    let c = cfg.kind.comps_per_node(n);
    let unknowns = grid.num_nodes() * c;
    if unknowns > unknown_cap {
        return Err(MixedRayError::domain(format!(
            "unknown count {unknowns} exceeds the cap {unknown_cap}"
        )));
    }
    let stats = NormalStats::default();
    let all_nodes: Vec<usize> = (0..grid.num_nodes()).collect();
    let matrix = assemble_normal_rows(chart, grid, cfg, &all_nodes, &stats)?;
    Ok(NormalMatrix {
        kind: cfg.kind,
        grid: grid.clone(),
        f_weight: cfg.f_weight,
        chi: cfg.chi.clone(),
        quad: cfg.quad,
        step: cfg.step,
        comps_per_node: c,
        matrix,
        large_exponents: stats.large_exponents.load(Ordering::Relaxed),
    })
}
