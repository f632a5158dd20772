//! Forward transforms: the transverse transform of (1,0) tensors, the mixed
//! transform of trace-free (1,1) tensors in its oblique-projection form, and
//! the classical conormal-pairing form used as a cross-validation oracle.
//!
//! The oblique form transports a reference covector `vartheta` along the
//! geodesic, projects the integrand with p_{w,v} (w the tangent, v the
//! transported covector), carries the result back to the base point with the
//! parallel-transport frame, and integrates. Pairing the result against a
//! unit parallel conormal covector reproduces the classical transform.

use crate::chart::{
    parallel_transport, shoot_geodesic, transport_frame, GeodesicPath, MetricChart, ShootOpts,
    TransportKind,
};
use crate::error::{MixedRayError, Result};
use crate::fields::EXP_CLAMP;

/// Admissibility floor for the pairing <vartheta, zeta>.
pub const PAIRING_FLOOR: f64 = 1e-8;

/// Vector-valued field evaluator: writes n components at p (zero outside
/// the field's support).
pub type VecEval<'a> = &'a dyn Fn(&[f64], &mut [f64]);
/// (1,1)-valued field evaluator: writes n*n row-major components at p.
pub type TenEval<'a> = &'a dyn Fn(&[f64], &mut [f64]);

/// One transform evaluation: base point, unit direction, reference covector,
/// and optionally a unit conormal covector for the classical form.
#[derive(Debug, Clone)]
pub struct RaySpec {
    pub z: Vec<f64>,
    pub zeta: Vec<f64>,
    pub vartheta: Vec<f64>,
    pub eta0: Option<Vec<f64>>,
}

impl RaySpec {
    pub fn new(
        chart: &MetricChart,
        z: Vec<f64>,
        zeta: Vec<f64>,
        vartheta: Vec<f64>,
        eta0: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = chart.dim();
        if z.len() != n || zeta.len() != n || vartheta.len() != n {
            return Err(MixedRayError::domain("ray spec dimension mismatch"));
        }
        let pairing: f64 = vartheta.iter().zip(&zeta).map(|(a, b)| a * b).sum();
        if pairing.abs() < PAIRING_FLOOR {
            return Err(MixedRayError::DegeneratePairing(format!(
                "<vartheta, zeta> = {pairing:e} below {PAIRING_FLOOR:e}"
            )));
        }
        if let Some(eta) = &eta0 {
            let on_ray: f64 = eta.iter().zip(&zeta).map(|(a, b)| a * b).sum();
            if on_ray.abs() > 1e-10 {
                return Err(MixedRayError::domain(format!(
                    "eta0 must be conormal to zeta (eta0(zeta) = {on_ray:e})"
                )));
            }
            let norm = chart.g_conorm(&z, eta);
            if (norm - 1.0).abs() > 1e-10 {
                return Err(MixedRayError::domain(format!(
                    "eta0 must be unit (|eta0|_g = {norm})"
                )));
            }
        }
        Ok(RaySpec { z, zeta, vartheta, eta0 })
    }

    /// Paper-style near-tangent ray at a point: direction proportional to
    /// lambda dx + omega dy with lambda = slope * x(point) and omega a
    /// Euclidean-unit tangential direction; vartheta = h(omega) dy. The
    /// combined direction is normalized to unit g-speed before shooting.
    pub fn near_tangent(chart: &MetricChart, point: &[f64], slope: f64, omega: &[f64]) -> Result<Self> {
        let n = chart.dim();
        if omega.len() != n - 1 {
            return Err(MixedRayError::domain("omega must have n-1 components"));
        }
        let x = chart.bdf(point);
        if x <= 0.0 {
            return Err(MixedRayError::domain("near-tangent rays need x > 0"));
        }
        let mut dir = vec![0.0; n];
        dir[0] = slope * x;
        dir[1..].copy_from_slice(omega);
        let zeta = chart.normalize(point, &dir);
        let mut h = vec![0.0; (n - 1) * (n - 1)];
        chart.tangential_metric_into(point, &mut h);
        let mut vartheta = vec![0.0; n];
        for i in 0..n - 1 {
            let mut s = 0.0;
            for j in 0..n - 1 {
                s += h[i * (n - 1) + j] * omega[j];
            }
            vartheta[i + 1] = s;
        }
        RaySpec::new(chart, point.to_vec(), zeta, vartheta, None)
    }
}

/// Oblique projection p_{w,v}: (p zeta)^i = zeta^i - w^i v_j zeta^j / <w,v>.
/// Returns the n x n row-major matrix.
pub fn oblique_projection(w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = w.len();
    if v.len() != n {
        return Err(MixedRayError::domain("projector dimension mismatch"));
    }
    let pairing: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
    if pairing.abs() < 1e-12 {
        return Err(MixedRayError::DegeneratePairing(format!(
            "<w, v> = {pairing:e} is numerically zero"
        )));
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = if i == j { 1.0 } else { 0.0 } - w[i] * v[j] / pairing;
        }
    }
    Ok(p)
}

/// Shared per-transform options.
#[derive(Debug, Clone, Default)]
pub struct TransformOpts {
    pub shoot: ShootOpts,
    /// When > 0, folds the weight exp(F (1/x(gamma(t)) - 1/x(z))) into the
    /// integrand (the conjugation of the normal operator), computed as a
    /// single exponential of a clamped difference.
    pub weight_f: f64,
}

fn apply_matrix(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += m[i * n + j] * v[j];
        }
        out[i] = s;
    }
}

enum Integrand<'a> {
    Transverse(VecEval<'a>),
    Mixed(TenEval<'a>),
}

/// Shared core of the two oblique-form transforms.
fn integrate_oblique(
    chart: &MetricChart,
    f: Integrand<'_>,
    ray: &RaySpec,
    opts: &TransformOpts,
) -> Result<Vec<f64>> {
    let n = chart.dim();
    let path = shoot_geodesic(chart, &ray.z, &ray.zeta, &opts.shoot)?;
    let frame = transport_frame(chart, &path)?;
    let weights = path.simpson_weights();
    let inv_x_base = 1.0 / chart.bdf(&ray.z);
    let mut acc = vec![0.0; n];
    let mut fbuf = vec![0.0; n * n];
    let mut theta = vec![0.0; n];
    let mut contracted = vec![0.0; n];
    let mut projected = vec![0.0; n];
    let mut based = vec![0.0; n];
    for i in 0..path.len() {
        let pos = path.pos(i);
        let vel = path.vel(i);
        let m = match &f {
            Integrand::Transverse(ev) => {
                ev(pos, &mut fbuf[..n]);
                n
            }
            Integrand::Mixed(ev) => {
                ev(pos, &mut fbuf);
                n * n
            }
        };
        if fbuf[..m].iter().all(|&c| c == 0.0) {
            continue;
        }
        frame.covector_at(i, &ray.vartheta, &mut theta);
        let pairing: f64 = theta.iter().zip(vel).map(|(a, b)| a * b).sum();
        if pairing.abs() < PAIRING_FLOOR {
            return Err(MixedRayError::DegeneratePairing(format!(
                "<vartheta(t), gammadot(t)> = {pairing:e} at t = {}",
                path.t[i]
            )));
        }
        match &f {
            Integrand::Transverse(_) => contracted.copy_from_slice(&fbuf[..n]),
            Integrand::Mixed(_) => {
                // Lambda contraction: (f . gammadot)^i = f^i_j gammadot^j.
                for r in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += fbuf[r * n + c] * vel[c];
                    }
                    contracted[r] = s;
                }
            }
        }
        // p_{gammadot, theta} applied in place.
        let along: f64 = theta.iter().zip(&contracted).map(|(a, b)| a * b).sum();
        for k in 0..n {
            projected[k] = contracted[k] - vel[k] * along / pairing;
        }
        frame.vector_to_base(i, &projected, &mut based);
        let mut w = weights[i];
        if opts.weight_f > 0.0 {
            let expo = (opts.weight_f * (1.0 / chart.bdf(pos) - inv_x_base)).clamp(-EXP_CLAMP, EXP_CLAMP);
            w *= expo.exp();
        }
        for k in 0..n {
            acc[k] += w * based[k];
        }
    }
    if acc.iter().any(|c| !c.is_finite()) {
        return Err(MixedRayError::numeric("non-finite transform value"));
    }
    Ok(acc)
}

/// Transverse transform of a (1,0) tensor: shoots the geodesic through the
/// ray spec, projects f with p_{gammadot, vartheta(t)}, transports back to
/// the base point, and integrates with composite Simpson on the integrator
/// grid. Returns a vector at z.
pub fn transverse_t1(
    chart: &MetricChart,
    f: VecEval<'_>,
    ray: &RaySpec,
    opts: &TransformOpts,
) -> Result<Vec<f64>> {
    integrate_oblique(chart, Integrand::Transverse(f), ray, opts)
}

/// Mixed transform of a trace-free (1,1) tensor in the redefined form:
/// contracts the covariant slot with the tangent, projects, transports back,
/// integrates. Returns a vector at z.
pub fn mixed_l11(
    chart: &MetricChart,
    f: TenEval<'_>,
    ray: &RaySpec,
    opts: &TransformOpts,
) -> Result<Vec<f64>> {
    integrate_oblique(chart, Integrand::Mixed(f), ray, opts)
}

/// Classical mixed transform: integrate f^i_j eta_i gammadot^j along a given
/// geodesic with eta the parallel transport of the unit conormal eta0.
pub fn mixed_classic(
    chart: &MetricChart,
    f: TenEval<'_>,
    path: &GeodesicPath,
    eta0: &[f64],
) -> Result<f64> {
    let n = chart.dim();
    let z = path.pos(path.base_index);
    let zeta = path.vel(path.base_index);
    let on_ray: f64 = eta0.iter().zip(zeta).map(|(a, b)| a * b).sum();
    if on_ray.abs() > 1e-10 {
        return Err(MixedRayError::domain(format!(
            "eta0 must be conormal (eta0(zeta) = {on_ray:e})"
        )));
    }
    let norm = chart.g_conorm(z, eta0);
    if (norm - 1.0).abs() > 1e-10 {
        return Err(MixedRayError::domain(format!("eta0 must be unit (got {norm})")));
    }
    let eta = parallel_transport(chart, path, eta0, TransportKind::Covector)?;
    let weights = path.simpson_weights();
    let mut fbuf = vec![0.0; n * n];
    let mut acc = 0.0;
    for i in 0..path.len() {
        f(path.pos(i), &mut fbuf);
        if fbuf.iter().all(|&c| c == 0.0) {
            continue;
        }
        let vel = path.vel(i);
        let eta_i = &eta[i * n..(i + 1) * n];
        let mut v = 0.0;
        for r in 0..n {
            for c in 0..n {
                v += fbuf[r * n + c] * eta_i[r] * vel[c];
            }
        }
        acc += weights[i] * v;
    }
    Ok(acc)
}

/// An orthonormal family of unit conormal covectors at (z, zeta):
/// eta_k = g(v_k) for v_k a g-orthonormal basis of the orthogonal
/// complement of zeta.
pub fn conormal_frame(chart: &MetricChart, z: &[f64], zeta: &[f64]) -> Vec<Vec<f64>> {
    let n = chart.dim();
    let g = chart.metric(z);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut candidates: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            e
        })
        .collect();
    let mut ortho: Vec<Vec<f64>> = vec![zeta.to_vec()];
    'outer: for cand in candidates.drain(..) {
        let mut v = cand;
        for b in &ortho {
            let proj = chart.g_inner(z, &v, b) / chart.g_inner(z, b, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm = chart.g_norm(z, &v);
        if norm < 1e-8 {
            continue 'outer;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        ortho.push(v.clone());
        let gv = &g * nalgebra::DVector::from_column_slice(&v);
        basis.push(gv.iter().cloned().collect());
        if basis.len() == n - 1 {
            break;
        }
    }
    basis
}
