//! Coordinate charts with convex boundary: metrics, Christoffel symbols,
//! geodesic shooting, parallel transport, and the boundary-convexity
//! quantity alpha.
//!
//! Conventions: coordinate 0 is the boundary depth `x` (the boundary
//! defining function), so the working region is `{x >= 0}` intersected with
//! the chart box, and the remaining coordinates are tangential (`y`). All
//! built-in chart kinds are in normal form, `g = f dx^2 + k(x,y) dy^2` with
//! no cross terms.

use crate::error::{MixedRayError, Result};
use crate::grid::GridSpec;
use nalgebra::DMatrix;

/// Hard cap on integrator steps per shooting direction.
pub const MAX_STEPS: usize = 10_000;
/// Default integrator step in chart units.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Finite-difference step for metric derivatives when no analytic form exists.
pub const METRIC_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum MetricKind {
    /// Flat metric, straight-line geodesics; x is the first coordinate.
    EuclideanCartesian,
    /// Shell under the sphere of the given radius: coordinates
    /// (x, theta, phi) with x = R - r, metric dx^2 + (R-x)^2 dOmega^2.
    /// Geodesics are straight chords of the ball. n = 3 only.
    EuclideanBallShell { radius: f64 },
    /// Conformally flat g = e^{2 phi} delta with phi affine in the
    /// coordinates: phi(p) = coeffs[0] + sum_i coeffs[i+1] p_i.
    Conformal { coeffs: Vec<f64> },
    /// Metric sampled on a grid, multilinearly interpolated; derivatives by
    /// central differences.
    GridSampled { grid: GridSpec, values: Vec<f64> },
}

/// A single coordinate chart with metric, box, and boundary depth x = p[0].
#[derive(Debug, Clone)]
pub struct MetricChart {
    n: usize,
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
    kind: MetricKind,
}

impl MetricChart {
    pub fn new(n: usize, box_lo: Vec<f64>, box_hi: Vec<f64>, kind: MetricKind) -> Result<Self> {
        if n < 3 {
            return Err(MixedRayError::domain(format!("dimension n = {n} must be >= 3")));
        }
        if box_lo.len() != n || box_hi.len() != n {
            return Err(MixedRayError::domain("box bounds must have length n"));
        }
        if box_lo.iter().zip(&box_hi).any(|(a, b)| a >= b) {
            return Err(MixedRayError::domain("box must have positive extent on every axis"));
        }
        if let MetricKind::EuclideanBallShell { radius } = &kind {
            if n != 3 {
                return Err(MixedRayError::domain("euclidean-ball-shell chart is n = 3 only"));
            }
            if *radius <= box_hi[0] {
                return Err(MixedRayError::domain(
                    "shell depth range must stay strictly inside the ball (box_hi[0] < radius)",
                ));
            }
        }
        if let MetricKind::Conformal { coeffs } = &kind {
            if coeffs.len() != n + 1 {
                return Err(MixedRayError::domain("conformal chart needs n+1 exponent coefficients"));
            }
        }
        if let MetricKind::GridSampled { grid, values } = &kind {
            if grid.dim() != n || values.len() != grid.num_nodes() * n * n {
                return Err(MixedRayError::domain("grid-sampled metric has wrong shape"));
            }
        }
        Ok(MetricChart { n, box_lo, box_hi, kind })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    pub fn box_lo(&self) -> &[f64] {
        &self.box_lo
    }

    pub fn box_hi(&self) -> &[f64] {
        &self.box_hi
    }

    /// Boundary defining function; positive inside the working region.
    pub fn bdf(&self, p: &[f64]) -> f64 {
        p[0]
    }

    pub fn inside_box(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.box_lo.iter().zip(&self.box_hi))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    /// Box membership with a small slack, for integrator stage points that
    /// graze the boundary after crossing-time refinement.
    fn inside_box_slack(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.box_lo.iter().zip(&self.box_hi))
            .all(|(x, (lo, hi))| {
                let slack = 1e-7 * (hi - lo) + 1e-12;
                *x >= *lo - slack && *x <= *hi + slack
            })
    }

    pub fn in_working_region(&self, p: &[f64]) -> bool {
        self.bdf(p) >= 0.0 && self.inside_box(p)
    }

    /// Metric coefficients g_ij at a point, written into `g` (n*n, row major).
    pub fn metric_into(&self, p: &[f64], g: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(g.len(), n * n);
        match &self.kind {
            MetricKind::EuclideanCartesian => {
                g.fill(0.0);
                for i in 0..n {
                    g[i * n + i] = 1.0;
                }
            }
            MetricKind::EuclideanBallShell { radius } => {
                let r = radius - p[0];
                let th = p[1];
                g.fill(0.0);
                g[0] = 1.0;
                g[n + 1] = r * r;
                g[2 * n + 2] = r * r * th.sin() * th.sin();
            }
            MetricKind::Conformal { coeffs } => {
                let mut phi = coeffs[0];
                for i in 0..n {
                    phi += coeffs[i + 1] * p[i];
                }
                let s = (2.0 * phi).exp();
                g.fill(0.0);
                for i in 0..n {
                    g[i * n + i] = s;
                }
            }
            MetricKind::GridSampled { grid, values } => {
                // Clamped extension keeps the metric evaluable for stage
                // points that graze the sampled box.
                let mut q = p.to_vec();
                for k in 0..n {
                    q[k] = q[k].clamp(grid.lo[k], grid.hi[k]);
                }
                grid.interp_into(values, n * n, &q, g);
            }
        }
    }

    pub fn metric(&self, p: &[f64]) -> DMatrix<f64> {
        let mut g = vec![0.0; self.n * self.n];
        self.metric_into(p, &mut g);
        DMatrix::from_row_slice(self.n, self.n, &g)
    }

    /// g-inner product of two vectors at a point.
    pub fn g_inner(&self, p: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let n = self.n;
        let mut g = vec![0.0; n * n];
        self.metric_into(p, &mut g);
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += g[i * n + j] * u[i] * v[j];
            }
        }
        s
    }

    pub fn g_norm(&self, p: &[f64], v: &[f64]) -> f64 {
        self.g_inner(p, v, v).sqrt()
    }

    /// Norm of a covector, |eta|_g^2 = g^{ij} eta_i eta_j.
    pub fn g_conorm(&self, p: &[f64], eta: &[f64]) -> f64 {
        let ginv = self
            .metric(p)
            .try_inverse()
            .expect("metric must be invertible");
        let e = nalgebra::DVector::from_column_slice(eta);
        (e.transpose() * ginv * e)[(0, 0)].sqrt()
    }

    /// Rescale a vector to unit g-length.
    pub fn normalize(&self, p: &[f64], v: &[f64]) -> Vec<f64> {
        let nv = self.g_norm(p, v);
        v.iter().map(|c| c / nv).collect()
    }

    /// Tangential metric block h_ij = g_{y^i y^j} ((n-1)^2, row major).
    pub fn tangential_metric_into(&self, p: &[f64], h: &mut [f64]) {
        let n = self.n;
        let mut g = vec![0.0; n * n];
        self.metric_into(p, &mut g);
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                h[i * (n - 1) + j] = g[(i + 1) * n + (j + 1)];
            }
        }
    }

    /// Whether the chart is in normal form (no dx-dy cross terms) at p.
    pub fn is_normal_form(&self, p: &[f64], tol: f64) -> bool {
        let n = self.n;
        let mut g = vec![0.0; n * n];
        self.metric_into(p, &mut g);
        (1..n).all(|j| g[j].abs() <= tol && g[j * n].abs() <= tol)
    }

    /// d g_ij / d p_axis at p; analytic for closed-form kinds, 4th-order
    /// central differences (one-sided near the box edge) otherwise.
    pub fn metric_deriv_into(&self, p: &[f64], axis: usize, out: &mut [f64]) {
        let n = self.n;
        match &self.kind {
            MetricKind::EuclideanCartesian => out.fill(0.0),
            MetricKind::EuclideanBallShell { radius } => {
                let r = radius - p[0];
                let th = p[1];
                out.fill(0.0);
                match axis {
                    0 => {
                        out[n + 1] = -2.0 * r;
                        out[2 * n + 2] = -2.0 * r * th.sin() * th.sin();
                    }
                    1 => {
                        out[2 * n + 2] = r * r * 2.0 * th.sin() * th.cos();
                    }
                    _ => {}
                }
            }
            MetricKind::Conformal { coeffs } => {
                let mut phi = coeffs[0];
                for i in 0..n {
                    phi += coeffs[i + 1] * p[i];
                }
                let s = 2.0 * coeffs[axis + 1] * (2.0 * phi).exp();
                out.fill(0.0);
                for i in 0..n {
                    out[i * n + i] = s;
                }
            }
            MetricKind::GridSampled { .. } => {
                self.metric_deriv_fd(p, axis, METRIC_FD_STEP, out);
            }
        }
    }

    /// Central-difference metric derivative, falling back to one-sided
    /// stencils when the stencil would leave the box.
    pub fn metric_deriv_fd(&self, p: &[f64], axis: usize, h: f64, out: &mut [f64]) {
        let n = self.n;
        let mut q = p.to_vec();
        let mut buf = vec![0.0; n * n];
        out.fill(0.0);
        let lo = self.box_lo[axis];
        let hi = self.box_hi[axis];
        // Offsets and 4th-order coefficients, shifted to stay inside the box.
        let (offsets, coeffs): (Vec<f64>, Vec<f64>) = if p[axis] - 2.0 * h >= lo && p[axis] + 2.0 * h <= hi {
            (vec![-2.0, -1.0, 1.0, 2.0], vec![1.0 / 12.0, -8.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0])
        } else if p[axis] + 4.0 * h <= hi {
            (
                vec![0.0, 1.0, 2.0, 3.0, 4.0],
                vec![-25.0 / 12.0, 48.0 / 12.0, -36.0 / 12.0, 16.0 / 12.0, -3.0 / 12.0],
            )
        } else {
            (
                vec![0.0, -1.0, -2.0, -3.0, -4.0],
                vec![25.0 / 12.0, -48.0 / 12.0, 36.0 / 12.0, -16.0 / 12.0, 3.0 / 12.0],
            )
        };
        for (off, c) in offsets.iter().zip(&coeffs) {
            q[axis] = p[axis] + off * h;
            self.metric_into(&q, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += c * b / h;
            }
        }
    }

    /// Christoffel symbols Gamma^k_{ij} at p, written into `out` with layout
    /// `out[(k*n + i)*n + j]`.
    ///
    /// Closed-form for the analytic chart kinds; otherwise assembled from
    /// the finite-difference metric derivatives via
    /// Gamma^k_{ij} = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij).
    pub fn christoffel_into(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n;
        debug_assert_eq!(out.len(), n * n * n);
        match &self.kind {
            MetricKind::EuclideanCartesian => {
                out.fill(0.0);
                Ok(())
            }
            MetricKind::EuclideanBallShell { radius } => {
                let r = radius - p[0];
                let th = p[1];
                let (st, ct) = (th.sin(), th.cos());
                out.fill(0.0);
                let idx = |k: usize, i: usize, j: usize| (k * n + i) * n + j;
                // x = p0, theta = p1, phi = p2; r = R - x so dr/dx = -1.
                out[idx(0, 1, 1)] = r;
                out[idx(0, 2, 2)] = r * st * st;
                out[idx(1, 0, 1)] = -1.0 / r;
                out[idx(1, 1, 0)] = -1.0 / r;
                out[idx(1, 2, 2)] = -st * ct;
                out[idx(2, 0, 2)] = -1.0 / r;
                out[idx(2, 2, 0)] = -1.0 / r;
                out[idx(2, 1, 2)] = ct / st;
                out[idx(2, 2, 1)] = ct / st;
                Ok(())
            }
            MetricKind::Conformal { coeffs } => {
                // Gamma^k_{ij} = delta^k_i phi_j + delta^k_j phi_i - delta_ij phi_k
                out.fill(0.0);
                let idx = |k: usize, i: usize, j: usize| (k * n + i) * n + j;
                for k in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let mut v = 0.0;
                            if k == i {
                                v += coeffs[j + 1];
                            }
                            if k == j {
                                v += coeffs[i + 1];
                            }
                            if i == j {
                                v -= coeffs[k + 1];
                            }
                            out[idx(k, i, j)] = v;
                        }
                    }
                }
                Ok(())
            }
            MetricKind::GridSampled { .. } => {
                let mut g = vec![0.0; n * n];
                self.metric_into(p, &mut g);
                let gmat = DMatrix::from_row_slice(n, n, &g);
                let ginv = gmat.try_inverse().ok_or_else(|| {
                    MixedRayError::numeric(format!("singular metric at {p:?}"))
                })?;
                let mut dg = vec![0.0; n * n * n]; // dg[l][i][j] = d_l g_ij
                let mut buf = vec![0.0; n * n];
                for l in 0..n {
                    self.metric_deriv_into(p, l, &mut buf);
                    dg[l * n * n..(l + 1) * n * n].copy_from_slice(&buf);
                }
                let d = |l: usize, i: usize, j: usize| dg[l * n * n + i * n + j];
                for k in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += ginv[(k, l)] * (d(i, j, l) + d(j, i, l) - d(l, i, j));
                            }
                            out[(k * n + i) * n + j] = 0.5 * s;
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Christoffel symbols as a freshly allocated rank-3 array.
    ///
    /// Unlike the internal [`MetricChart::christoffel_into`] (which extends
    /// smoothly past the box for integrator stage points), this checks the
    /// domain.
    pub fn christoffel(&self, p: &[f64]) -> Result<Vec<f64>> {
        if !self.inside_box_slack(p) {
            return Err(MixedRayError::domain(format!("point {p:?} outside chart box")));
        }
        let mut out = vec![0.0; self.n * self.n * self.n];
        self.christoffel_into(p, &mut out)?;
        Ok(out)
    }

    /// Chart point to ambient Cartesian coordinates, for chart kinds that
    /// embed isometrically in Euclidean space.
    pub fn embed_cartesian(&self, p: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            MetricKind::EuclideanCartesian => Some(p.to_vec()),
            MetricKind::EuclideanBallShell { radius } => {
                let r = radius - p[0];
                let (th, ph) = (p[1], p[2]);
                Some(vec![r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()])
            }
            _ => None,
        }
    }

    /// Inverse of [`embed_cartesian`] for the ball shell.
    pub fn shell_from_cartesian(&self, c: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            MetricKind::EuclideanBallShell { radius } => {
                let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                let th = (c[2] / r).acos();
                let ph = c[1].atan2(c[0]);
                Some(vec![radius - r, th, ph])
            }
            _ => None,
        }
    }
}

/// Which stop surface ended a shooting direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCause {
    RegionExit,
    BoxExit,
    MaxLength,
}

#[derive(Debug, Clone)]
pub struct ShootOpts {
    /// Integrator step in chart units.
    pub step: f64,
    /// Maximum arc length per direction before the MaxLength stop fires.
    pub max_len: f64,
    pub stop_at_region_exit: bool,
    pub stop_at_box_exit: bool,
}

impl Default for ShootOpts {
    fn default() -> Self {
        ShootOpts {
            step: DEFAULT_STEP,
            max_len: 8.0,
            stop_at_region_exit: true,
            stop_at_box_exit: true,
        }
    }
}

/// A sampled unit-speed geodesic on a uniform step grid per direction, with
/// t = 0 at the base point (`base_index`).
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    n: usize,
    /// Sample times, strictly increasing, t[base_index] = 0.
    pub t: Vec<f64>,
    pos: Vec<f64>,
    vel: Vec<f64>,
    pub base_index: usize,
    pub stop_backward: StopCause,
    pub stop_forward: StopCause,
    /// Step of the backward arm (samples 0..=base_index).
    pub step_backward: f64,
    /// Step of the forward arm (samples base_index..).
    pub step_forward: f64,
}

impl GeodesicPath {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn pos(&self, i: usize) -> &[f64] {
        &self.pos[i * self.n..(i + 1) * self.n]
    }

    pub fn vel(&self, i: usize) -> &[f64] {
        &self.vel[i * self.n..(i + 1) * self.n]
    }

    /// Total arc length (unit speed, so the t-span).
    pub fn span(&self) -> f64 {
        self.t[self.t.len() - 1] - self.t[0]
    }

    /// Composite Simpson weights on the two uniform arms.
    pub fn simpson_weights(&self) -> Vec<f64> {
        let m = self.t.len();
        let mut w = vec![0.0; m];
        let add_arm = |w: &mut [f64], from: usize, to: usize, h: f64| {
            // from..=to inclusive, even number of intervals by construction
            let m = to - from;
            if m == 0 {
                return;
            }
            for k in 0..=m {
                let c = if k == 0 || k == m {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w[from + k] += c * h / 3.0;
            }
        };
        add_arm(&mut w, 0, self.base_index, self.step_backward);
        add_arm(&mut w, self.base_index, m - 1, self.step_forward);
        w
    }
}

struct ShootScratch {
    gamma: Vec<f64>,
    acc: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl ShootScratch {
    fn new(n: usize) -> Self {
        let z = vec![0.0; 2 * n];
        ShootScratch {
            gamma: vec![0.0; n * n * n],
            acc: vec![0.0; n],
            k: [z.clone(), z.clone(), z.clone(), z],
            tmp: vec![0.0; 2 * n],
        }
    }
}

/// Geodesic RHS: state = (pos, vel), out = (vel, -Gamma(vel, vel)).
fn geodesic_rhs(chart: &MetricChart, state: &[f64], out: &mut [f64], scratch: &mut ShootScratch) -> Result<()> {
    let n = chart.dim();
    let (pos, vel) = state.split_at(n);
    chart.christoffel_into(pos, &mut scratch.gamma)?;
    scratch.acc.fill(0.0);
    for k in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            let base = (k * n + i) * n;
            for j in 0..n {
                s += scratch.gamma[base + j] * vel[i] * vel[j];
            }
        }
        scratch.acc[k] = -s;
    }
    out[..n].copy_from_slice(vel);
    out[n..].copy_from_slice(&scratch.acc);
    Ok(())
}

fn rk4_step(chart: &MetricChart, state: &mut [f64], h: f64, scratch: &mut ShootScratch) -> Result<()> {
    let len = state.len();
    let mut stage = vec![0.0; len];
    geodesic_rhs(chart, state, &mut stage, scratch)?;
    scratch.k[0].copy_from_slice(&stage);
    for i in 0..len {
        scratch.tmp[i] = state[i] + 0.5 * h * scratch.k[0][i];
    }
    let tmp = scratch.tmp.clone();
    geodesic_rhs(chart, &tmp, &mut stage, scratch)?;
    scratch.k[1].copy_from_slice(&stage);
    for i in 0..len {
        scratch.tmp[i] = state[i] + 0.5 * h * scratch.k[1][i];
    }
    let tmp = scratch.tmp.clone();
    geodesic_rhs(chart, &tmp, &mut stage, scratch)?;
    scratch.k[2].copy_from_slice(&stage);
    for i in 0..len {
        scratch.tmp[i] = state[i] + h * scratch.k[2][i];
    }
    let tmp = scratch.tmp.clone();
    geodesic_rhs(chart, &tmp, &mut stage, scratch)?;
    scratch.k[3].copy_from_slice(&stage);
    for i in 0..len {
        state[i] += h / 6.0 * (scratch.k[0][i] + 2.0 * scratch.k[1][i] + 2.0 * scratch.k[2][i] + scratch.k[3][i]);
    }
    Ok(())
}

/// One shooting direction: integrate until a stop fires, then refine the
/// crossing time by bisection to 1e-10 and return (arc length, cause).
fn shoot_arm(
    chart: &MetricChart,
    z: &[f64],
    dir: &[f64],
    opts: &ShootOpts,
    scratch: &mut ShootScratch,
) -> Result<(f64, StopCause)> {
    let n = chart.dim();
    let h = opts.step;
    let stopped = |p: &[f64]| -> Option<StopCause> {
        if opts.stop_at_region_exit && chart.bdf(p) < 0.0 {
            return Some(StopCause::RegionExit);
        }
        if opts.stop_at_box_exit && !chart.inside_box(p) {
            return Some(StopCause::BoxExit);
        }
        None
    };
    let mut state = vec![0.0; 2 * n];
    state[..n].copy_from_slice(z);
    state[n..].copy_from_slice(dir);
    let mut t = 0.0;
    for step_count in 0.. {
        if step_count >= MAX_STEPS {
            return Err(MixedRayError::TrappedRay(format!(
                "no stop surface reached after {MAX_STEPS} steps from {z:?}"
            )));
        }
        let prev = state.clone();
        rk4_step(chart, &mut state, h, scratch)?;
        t += h;
        if let Some(cause) = stopped(&state[..n]) {
            // Bisection on the sub-step time to land on the stop surface.
            let (mut lo, mut hi) = (0.0f64, h);
            for _ in 0..60 {
                if hi - lo <= 1e-10 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let mut trial = prev.clone();
                rk4_step(chart, &mut trial, mid, scratch)?;
                if stopped(&trial[..n]).is_some() {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            // Take the last inside time so every sample of the uniform
            // re-integration stays in the domain.
            let t_cross = t - h + lo;
            return Ok((t_cross, cause));
        }
        if t >= opts.max_len {
            return Ok((t, StopCause::MaxLength));
        }
    }
    unreachable!()
}

/// Shoot the unit-speed geodesic with gamma(0) = z, gamma'(0) = zeta in both
/// time directions until the stop rule fires, then re-integrate each arm on
/// a uniform grid (even interval count) whose endpoint is the refined
/// crossing. Samples are returned in increasing t.
pub fn shoot_geodesic(chart: &MetricChart, z: &[f64], zeta: &[f64], opts: &ShootOpts) -> Result<GeodesicPath> {
    let n = chart.dim();
    if z.len() != n || zeta.len() != n {
        return Err(MixedRayError::domain("point/direction dimension mismatch"));
    }
    if !chart.in_working_region(z) {
        return Err(MixedRayError::domain(format!("base point {z:?} outside working region")));
    }
    let speed = chart.g_norm(z, zeta);
    if (speed - 1.0).abs() > 1e-10 {
        return Err(MixedRayError::domain(format!(
            "direction must be unit speed (|zeta|_g = {speed}); caller normalizes"
        )));
    }
    let mut scratch = ShootScratch::new(n);
    let neg: Vec<f64> = zeta.iter().map(|c| -c).collect();
    let (t_fwd, cause_fwd) = shoot_arm(chart, z, zeta, opts, &mut scratch)?;
    let (t_bwd, cause_bwd) = shoot_arm(chart, z, &neg, opts, &mut scratch)?;

    // Uniform re-integration; even interval counts so Simpson applies per arm.
    let arm = |dir: &[f64], total: f64, scratch: &mut ShootScratch| -> Result<(Vec<f64>, Vec<f64>, usize, f64)> {
        let m = ((total / opts.step / 2.0).ceil() as usize).max(1) * 2;
        let h = total / m as f64;
        let mut pos = Vec::with_capacity((m + 1) * n);
        let mut vel = Vec::with_capacity((m + 1) * n);
        let mut state = vec![0.0; 2 * n];
        state[..n].copy_from_slice(z);
        state[n..].copy_from_slice(dir);
        pos.extend_from_slice(&state[..n]);
        vel.extend_from_slice(&state[n..]);
        for _ in 0..m {
            rk4_step(chart, &mut state, h, scratch)?;
            pos.extend_from_slice(&state[..n]);
            vel.extend_from_slice(&state[n..]);
        }
        Ok((pos, vel, m, h))
    };
    let (pos_f, vel_f, m_f, h_f) = arm(zeta, t_fwd, &mut scratch)?;
    let (pos_b, vel_b, m_b, h_b) = arm(&neg, t_bwd, &mut scratch)?;

    let m_total = m_b + m_f + 1;
    let mut t = Vec::with_capacity(m_total);
    let mut pos = Vec::with_capacity(m_total * n);
    let mut vel = Vec::with_capacity(m_total * n);
    // Backward arm reversed: negate its velocities back to forward orientation.
    for k in (1..=m_b).rev() {
        t.push(-(k as f64) * h_b);
        pos.extend_from_slice(&pos_b[k * n..(k + 1) * n]);
        for c in &vel_b[k * n..(k + 1) * n] {
            vel.push(-c);
        }
    }
    for k in 0..=m_f {
        t.push(k as f64 * h_f);
        pos.extend_from_slice(&pos_f[k * n..(k + 1) * n]);
        vel.extend_from_slice(&vel_f[k * n..(k + 1) * n]);
    }
    Ok(GeodesicPath {
        n,
        t,
        pos,
        vel,
        base_index: m_b,
        stop_backward: cause_bwd,
        stop_forward: cause_fwd,
        step_backward: h_b,
        step_forward: h_f,
    })
}

/// Whether the transported object is a vector or a covector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Vector,
    Covector,
}

/// Connection matrix A^k_j = Gamma^k_{ij} v^i at (p, v).
fn connection_matrix(chart: &MetricChart, p: &[f64], v: &[f64], a: &mut [f64], gamma: &mut [f64]) -> Result<()> {
    let n = chart.dim();
    chart.christoffel_into(p, gamma)?;
    for k in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += gamma[(k * n + i) * n + j] * v[i];
            }
            a[k * n + j] = s;
        }
    }
    Ok(())
}

/// Hermite-reconstructed midpoint state of a path interval (4th order).
fn midpoint_state(chart: &MetricChart, path: &GeodesicPath, i0: usize, i1: usize, scratch: &mut ShootScratch) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = path.dim();
    let h = path.t[i1] - path.t[i0];
    let (p0, p1) = (path.pos(i0), path.pos(i1));
    let (v0, v1) = (path.vel(i0), path.vel(i1));
    let mut accel = |p: &[f64], v: &[f64], out: &mut [f64]| -> Result<()> {
        chart.christoffel_into(p, &mut scratch.gamma)?;
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += scratch.gamma[(k * n + i) * n + j] * v[i] * v[j];
                }
            }
            out[k] = -s;
        }
        Ok(())
    };
    let mut a0 = vec![0.0; n];
    let mut a1 = vec![0.0; n];
    accel(p0, v0, &mut a0)?;
    accel(p1, v1, &mut a1)?;
    let mut pm = vec![0.0; n];
    let mut vm = vec![0.0; n];
    for k in 0..n {
        pm[k] = 0.5 * (p0[k] + p1[k]) + h / 8.0 * (v0[k] - v1[k]);
        vm[k] = 0.5 * (v0[k] + v1[k]) + h / 8.0 * (a0[k] - a1[k]);
    }
    Ok((pm, vm))
}

/// Parallel transport of `w0` (given at the base point) to every sample of
/// the path. Solves w' = -Gamma(gammadot) w for vectors and the dual
/// equation w'_k = +Gamma^i_{jk} gammadot^j w_i for covectors, with RK4 on
/// the path's own step grid.
pub fn parallel_transport(chart: &MetricChart, path: &GeodesicPath, w0: &[f64], kind: TransportKind) -> Result<Vec<f64>> {
    let n = path.dim();
    if w0.len() != n {
        return Err(MixedRayError::domain("transported object has wrong dimension"));
    }
    if w0.iter().any(|c| !c.is_finite()) {
        return Err(MixedRayError::numeric("non-finite input to parallel transport"));
    }
    let m = path.len();
    let mut out = vec![0.0; m * n];
    out[path.base_index * n..(path.base_index + 1) * n].copy_from_slice(w0);
    let mut scratch = ShootScratch::new(n);
    let mut a = vec![0.0; n * n];

    let mut rhs = |p: &[f64], v: &[f64], w: &[f64], out: &mut [f64], scratch: &mut ShootScratch| -> Result<()> {
        connection_matrix(chart, p, v, &mut a, &mut scratch.gamma)?;
        match kind {
            TransportKind::Vector => {
                for k in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += a[k * n + j] * w[j];
                    }
                    out[k] = -s;
                }
            }
            TransportKind::Covector => {
                // w'_k = + A^i_k w_i
                for k in 0..n {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += a[i * n + k] * w[i];
                    }
                    out[k] = s;
                }
            }
        }
        Ok(())
    };

    // March from the base outward in both directions.
    let mut march = |from: usize, to: usize, out: &mut Vec<f64>, scratch: &mut ShootScratch| -> Result<()> {
        let (i0, i1) = (from, to);
        let h = path.t[i1] - path.t[i0];
        let (pm, vm) = midpoint_state(chart, path, i0.min(i1), i0.max(i1), scratch)?;
        let w = out[i0 * n..(i0 + 1) * n].to_vec();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        rhs(path.pos(i0), path.vel(i0), &w, &mut k1, scratch)?;
        for k in 0..n {
            tmp[k] = w[k] + 0.5 * h * k1[k];
        }
        rhs(&pm, &vm, &tmp, &mut k2, scratch)?;
        for k in 0..n {
            tmp[k] = w[k] + 0.5 * h * k2[k];
        }
        rhs(&pm, &vm, &tmp, &mut k3, scratch)?;
        for k in 0..n {
            tmp[k] = w[k] + h * k3[k];
        }
        rhs(path.pos(i1), path.vel(i1), &tmp, &mut k4, scratch)?;
        for k in 0..n {
            let v = w[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            if !v.is_finite() {
                return Err(MixedRayError::numeric("NaN during parallel transport"));
            }
            out[i1 * n + k] = v;
        }
        Ok(())
    };
    for i in path.base_index..m - 1 {
        march(i, i + 1, &mut out, &mut scratch)?;
    }
    for i in (1..=path.base_index).rev() {
        march(i, i - 1, &mut out, &mut scratch)?;
    }
    Ok(out)
}

/// Per-sample matrices T^{0,t} carrying vectors at gamma(t) back to the base
/// point. Covectors ride along as eta(t) = V(t)^T eta(0).
#[derive(Debug, Clone)]
pub struct TransportFrame {
    n: usize,
    /// to_base[i] is n x n row-major: V(t_i) with V(0) = Id.
    mats: Vec<f64>,
}

impl TransportFrame {
    pub fn mat(&self, i: usize) -> &[f64] {
        &self.mats[i * self.n * self.n..(i + 1) * self.n * self.n]
    }

    /// Transport a vector at gamma(t_i) to the base point.
    pub fn vector_to_base(&self, i: usize, w: &[f64], out: &mut [f64]) {
        let n = self.n;
        let m = self.mat(i);
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..n {
                s += m[r * n + c] * w[c];
            }
            out[r] = s;
        }
    }

    /// Value at gamma(t_i) of the parallel covector field with value eta0 at
    /// the base: eta(t_i) = V(t_i)^T eta0.
    pub fn covector_at(&self, i: usize, eta0: &[f64], out: &mut [f64]) {
        let n = self.n;
        let m = self.mat(i);
        for c in 0..n {
            let mut s = 0.0;
            for r in 0..n {
                s += m[r * n + c] * eta0[r];
            }
            out[c] = s;
        }
    }
}

/// Integrate the frame V(t) = T^{0,t} along the path: V' = V A(gamma, gammadot),
/// V(0) = Id, by RK4 with Hermite midpoints, marching outward from the base.
pub fn transport_frame(chart: &MetricChart, path: &GeodesicPath) -> Result<TransportFrame> {
    let n = path.dim();
    let m = path.len();
    let nn = n * n;
    let mut mats = vec![0.0; m * nn];
    for k in 0..n {
        mats[path.base_index * nn + k * n + k] = 1.0;
    }
    let mut scratch = ShootScratch::new(n);
    let mut a = vec![0.0; nn];

    let matmul = |v: &[f64], a: &[f64], out: &mut [f64]| {
        for r in 0..n {
            for c in 0..n {
                let mut s = 0.0;
                for q in 0..n {
                    s += v[r * n + q] * a[q * n + c];
                }
                out[r * n + c] = s;
            }
        }
    };

    let mut march = |i0: usize, i1: usize, mats: &mut Vec<f64>, scratch: &mut ShootScratch| -> Result<()> {
        let h = path.t[i1] - path.t[i0];
        let (pm, vm) = midpoint_state(chart, path, i0.min(i1), i0.max(i1), scratch)?;
        let v0 = mats[i0 * nn..(i0 + 1) * nn].to_vec();
        let mut k1 = vec![0.0; nn];
        let mut k2 = vec![0.0; nn];
        let mut k3 = vec![0.0; nn];
        let mut k4 = vec![0.0; nn];
        let mut tmp = vec![0.0; nn];
        connection_matrix(chart, path.pos(i0), path.vel(i0), &mut a, &mut scratch.gamma)?;
        matmul(&v0, &a, &mut k1);
        connection_matrix(chart, &pm, &vm, &mut a, &mut scratch.gamma)?;
        for q in 0..nn {
            tmp[q] = v0[q] + 0.5 * h * k1[q];
        }
        matmul(&tmp, &a, &mut k2);
        for q in 0..nn {
            tmp[q] = v0[q] + 0.5 * h * k2[q];
        }
        matmul(&tmp, &a, &mut k3);
        connection_matrix(chart, path.pos(i1), path.vel(i1), &mut a, &mut scratch.gamma)?;
        for q in 0..nn {
            tmp[q] = v0[q] + h * k3[q];
        }
        matmul(&tmp, &a, &mut k4);
        for q in 0..nn {
            mats[i1 * nn + q] = v0[q] + h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
        }
        Ok(())
    };
    for i in path.base_index..m - 1 {
        march(i, i + 1, &mut mats, &mut scratch)?;
    }
    for i in (1..=path.base_index).rev() {
        march(i, i - 1, &mut mats, &mut scratch)?;
    }
    Ok(TransportFrame { n, mats })
}

/// Result of the boundary-convexity computation at a boundary point.
#[derive(Debug, Clone)]
pub struct AlphaReport {
    /// Scalar alpha when H is isotropic at the point (within 1e-8 relative).
    pub scalar: Option<f64>,
    /// Eigenvalue range of (1/2) H measured in a k-orthonormal frame.
    pub eig_lo: f64,
    pub eig_hi: f64,
    /// Raw H matrix, (n-1)^2 row-major.
    pub h_matrix: Vec<f64>,
}

/// Boundary convexity at (0, y): alpha = (1/2) H with
/// H_ij = -(1/2) g^{xx} d_x k_ij, eigenvalues taken relative to the
/// tangential metric k at the point. Strictly convex boundaries give
/// alpha > 0.
pub fn boundary_convexity_alpha(chart: &MetricChart, y: &[f64]) -> Result<AlphaReport> {
    let n = chart.dim();
    if y.len() != n - 1 {
        return Err(MixedRayError::domain("y must have n-1 tangential coordinates"));
    }
    let mut p = vec![0.0; n];
    p[0] = chart.box_lo()[0].max(0.0);
    p[1..].copy_from_slice(y);
    if !chart.is_normal_form(&p, 1e-10) {
        return Err(MixedRayError::domain(
            "chart is not in normal form (dx not orthogonal to dy) at the boundary point",
        ));
    }
    let mut g = vec![0.0; n * n];
    chart.metric_into(&p, &mut g);
    let gxx_inv = 1.0 / g[0];
    let mut dg = vec![0.0; n * n];
    chart.metric_deriv_into(&p, 0, &mut dg);
    let m = n - 1;
    let mut h = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            h[i * m + j] = -0.5 * gxx_inv * dg[(i + 1) * n + (j + 1)];
        }
    }
    // Generalized eigenvalues of (1/2) H relative to k: eig(L^-1 (H/2) L^-T).
    let k = DMatrix::from_fn(m, m, |i, j| g[(i + 1) * n + (j + 1)]);
    let hm = DMatrix::from_row_slice(m, m, &h) * 0.5;
    let chol = k
        .clone()
        .cholesky()
        .ok_or_else(|| MixedRayError::numeric("tangential metric not positive definite"))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| MixedRayError::numeric("singular Cholesky factor"))?;
    let sym = &linv * hm * linv.transpose();
    let sym = 0.5 * (&sym + sym.transpose());
    let eig = sym.symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = lo.abs().max(hi.abs()).max(1.0);
    let scalar = if (hi - lo).abs() <= 1e-8 * scale { Some(0.5 * (lo + hi)) } else { None };
    Ok(AlphaReport { scalar, eig_lo: lo, eig_hi: hi, h_matrix: h })
}
