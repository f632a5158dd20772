//! Desk-scale local inversion of the discretized normal operator, and the
//! layer-stripping sweep over nested shells.
//!
//! The solver works on a diagonally equilibrated system: conjugating the
//! matrix by the nodewise weights exp(F (1/x - 1/x_ref)) turns the wildly
//! scaled weighted operator into its bounded unweighted counterpart, which
//! is what Tikhonov-regularized conjugate gradients can handle in floating
//! point. The reported matrix, data, and fields stay in the unscaled
//! convention.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chart::MetricChart;
use crate::error::{MixedRayError, Result};
use crate::fields::EXP_CLAMP;
use crate::gauge::GaugeSystem;
use crate::linalg;
use crate::normal::{NormalMatrix, TransformKind};

/// Reconstruction outcome and quality metrics.
#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionReport {
    pub mode: String,
    pub grid_nodes: Vec<usize>,
    pub f_weight: f64,
    pub reg_lambda: f64,
    pub iterations: usize,
    /// Relative residual of the equilibrated Tikhonov normal equations.
    pub residual: f64,
    /// Relative L2 error against the ground truth (full field for T1, the
    /// solenoidal part for L11), when a truth was provided.
    pub rel_error: Option<f64>,
    /// sigma_max(M-hat) * |v-hat| / |d-hat|: amplification estimate.
    pub cond_estimate: f64,
    /// Norm of the removed potential part (L11 mode).
    pub potential_norm: Option<f64>,
}

/// Equilibration weights exp(F (1/x_node - 1/x_ref)), one per unknown.
fn equilibration_weights(chart: &MetricChart, nm: &NormalMatrix) -> Vec<f64> {
    let c = nm.comps_per_node;
    let nodes = nm.grid.num_nodes();
    let x_ref = (0..nodes)
        .map(|q| chart.bdf(&nm.grid.node_point(q)))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w = vec![1.0; nodes * c];
    if nm.f_weight > 0.0 {
        for q in 0..nodes {
            let x = chart.bdf(&nm.grid.node_point(q));
            let e = (nm.f_weight * (1.0 / x - 1.0 / x_ref)).clamp(-EXP_CLAMP, EXP_CLAMP);
            let val = e.exp();
            for k in 0..c {
                w[q * c + k] = val;
            }
        }
    }
    w
}

/// Tikhonov-regularized least squares on an equilibrated (sub)system:
/// min |A v - b|^2 + lambda^2 |v|^2 by Jacobi-preconditioned CG on the
/// normal equations. Returns (solution, iterations, residual, sigma_max).
fn tikhonov_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    reg: f64,
    cg_tol: f64,
) -> Result<(DVector<f64>, usize, f64, f64, f64)> {
    let ncols = a.ncols();
    let sigma_max = linalg::spectral_norm_est(&|v| a * v, &|v| a.transpose() * v, ncols, 40);
    let lambda = reg * sigma_max;
    let lam2 = lambda * lambda;
    let rhs = a.transpose() * b;
    // Jacobi diagonal of A^T A + lambda^2.
    let mut diag = vec![lam2; ncols];
    for (j, d) in diag.iter_mut().enumerate() {
        *d += a.column(j).norm_squared();
    }
    let apply = |v: &DVector<f64>| -> DVector<f64> { a.transpose() * (a * v) + lam2 * v };
    let max_iter = 10 * ncols.max(100);
    let (v, iters) = linalg::pcg(
        &apply,
        &|r| DVector::from_fn(ncols, |i, _| r[i] / diag[i]),
        &rhs,
        cg_tol,
        max_iter,
    )?;
    let residual = (&rhs - apply(&v)).norm() / rhs.norm().max(1e-300);
    Ok((v, iters, residual, sigma_max, lambda))
}

/// Options of a reconstruction run.
#[derive(Debug, Clone)]
pub struct ReconstructOpts {
    /// Tikhonov factor: lambda = reg * sigma_max of the equilibrated matrix.
    pub reg: f64,
    /// CG tolerance on the normal equations.
    pub cg_tol: f64,
}

impl Default for ReconstructOpts {
    fn default() -> Self {
        ReconstructOpts { reg: 1e-6, cg_tol: 1e-8 }
    }
}

/// Relative L2 error between stacked chart-component fields.
fn rel_l2(chart: &MetricChart, nm: &NormalMatrix, got: &[f64], want: &[f64]) -> f64 {
    // Compare in chart components (the natural field values).
    let to_chart = |v: &[f64]| -> Vec<f64> {
        match nm.kind {
            TransformKind::T1 => {
                NormalMatrix::vector_field_of_vec(chart, &nm.grid, v).comps
            }
            TransformKind::L11 => NormalMatrix::tensor_field_of_vec(chart, &nm.grid, v).comps,
        }
    };
    let g = to_chart(got);
    let w = to_chart(want);
    let num: f64 = g.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = w.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Project an L11 unknown vector onto the solenoidal trace-free subspace
/// through the gauge system (trace removal then potential subtraction).
pub fn solenoidal_project_vec(
    chart: &MetricChart,
    nm: &NormalMatrix,
    gauge: &GaugeSystem,
    v: &[f64],
) -> Result<Vec<f64>> {
    let mut field = NormalMatrix::tensor_field_of_vec(chart, &nm.grid, v);
    field.project_trace_free();
    let (sol, pot, _) = gauge.solenoidal_split(&field)?;
    let _ = pot;
    Ok(NormalMatrix::vec_of_tensor_field(chart, &sol))
}

/// Reconstruct a field from normal-operator data.
///
/// T1 mode: Tikhonov-regularized least squares on the (equilibrated) normal
/// matrix. L11 mode: the same solve followed by projection of the solution
/// onto the discrete solenoidal trace-free subspace; the reported error
/// compares solenoidal parts. Ground truth, when given, is a stacked
/// scattering-component vector on the same grid.
pub fn reconstruct(
    chart: &MetricChart,
    nm: &NormalMatrix,
    data: &[f64],
    gauge: Option<&GaugeSystem>,
    opts: &ReconstructOpts,
    truth: Option<&[f64]>,
) -> Result<(Vec<f64>, ReconstructionReport)> {
    let m = nm.num_unknowns();
    if data.len() != m {
        return Err(MixedRayError::domain(format!(
            "data length {} does not match the {} unknowns of the normal matrix",
            data.len(),
            m
        )));
    }
    if nm.kind == TransformKind::L11 && gauge.is_none() {
        return Err(MixedRayError::domain("L11 reconstruction needs a gauge system"));
    }
    let w = equilibration_weights(chart, nm);
    let mut a_hat = nm.matrix.clone();
    for r in 0..m {
        for c in 0..m {
            a_hat[(r, c)] *= w[r] / w[c];
        }
    }
    let b_hat = DVector::from_fn(m, |i, _| data[i] * w[i]);
    let (v_hat, iterations, residual, sigma_max, lambda) =
        tikhonov_solve(&a_hat, &b_hat, opts.reg, opts.cg_tol)?;
    let cond_estimate = sigma_max * v_hat.norm() / b_hat.norm().max(1e-300);
    let mut recovered: Vec<f64> = (0..m).map(|i| v_hat[i] / w[i]).collect();
    let mut potential_norm = None;
    if nm.kind == TransformKind::L11 {
        let gauge = gauge.unwrap();
        let before = recovered.clone();
        recovered = solenoidal_project_vec(chart, nm, gauge, &recovered)?;
        let pot: f64 = before
            .iter()
            .zip(&recovered)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        potential_norm = Some(pot);
    }
    let rel_error = match truth {
        Some(t) => {
            let t_cmp = if nm.kind == TransformKind::L11 {
                solenoidal_project_vec(chart, nm, gauge.unwrap(), t)?
            } else {
                t.to_vec()
            };
            Some(rel_l2(chart, nm, &recovered, &t_cmp))
        }
        None => None,
    };
    let report = ReconstructionReport {
        mode: nm.kind.label().to_string(),
        grid_nodes: nm.grid.nodes.clone(),
        f_weight: nm.f_weight,
        reg_lambda: lambda,
        iterations,
        residual,
        rel_error,
        cond_estimate,
        potential_norm,
    };
    Ok((recovered, report))
}

/// One layer of a stripping sweep.
#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub level: f64,
    pub layer_nodes: usize,
    pub report: ReconstructionReport,
}

/// Layer-stripping sweep for the transverse kind: reconstruct the shallowest
/// shell first, subtract its re-simulated contribution from the data of
/// deeper evaluation rows, and continue inward. Nodes fixed by a shallower
/// layer are never modified again.
pub fn layer_sweep(
    chart: &MetricChart,
    nm: &NormalMatrix,
    data: &[f64],
    levels: &[f64],
    opts: &ReconstructOpts,
    truth: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<LayerReport>, Option<f64>)> {
    if nm.kind != TransformKind::T1 {
        return Err(MixedRayError::domain("layer sweep is defined for the T1 kind"));
    }
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MixedRayError::domain("levels must be a strictly increasing shell-depth list"));
    }
    let c = nm.comps_per_node;
    let nodes = nm.grid.num_nodes();
    let m = nm.num_unknowns();
    if data.len() != m {
        return Err(MixedRayError::domain("data length mismatch"));
    }
    let deepest = (0..nodes)
        .map(|q| chart.bdf(&nm.grid.node_point(q)))
        .fold(f64::NEG_INFINITY, f64::max);
    if *levels.last().unwrap() < deepest - 1e-12 {
        return Err(MixedRayError::domain(format!(
            "last level {} does not cover the deepest grid plane {deepest}",
            levels.last().unwrap()
        )));
    }
    let w_all = equilibration_weights(chart, nm);
    let mut stitched = vec![0.0; m];
    let mut fixed: Vec<usize> = Vec::new();
    let mut reports = Vec::new();
    let mut assigned = vec![false; nodes];
    for &level in levels {
        let layer: Vec<usize> = (0..nodes)
            .filter(|&q| !assigned[q] && chart.bdf(&nm.grid.node_point(q)) <= level + 1e-12)
            .collect();
        if layer.is_empty() {
            continue;
        }
        let idx: Vec<usize> = layer
            .iter()
            .flat_map(|&q| (0..c).map(move |k| q * c + k))
            .collect();
        // Residual data on this layer's rows after subtracting the fixed
        // shallower contribution.
        let mut rhs = DVector::zeros(idx.len());
        for (r, &row) in idx.iter().enumerate() {
            let mut v = data[row];
            for &col in &fixed {
                v -= nm.matrix[(row, col)] * stitched[col];
            }
            rhs[r] = v * w_all[row];
        }
        let mut sub = DMatrix::zeros(idx.len(), idx.len());
        for (r, &row) in idx.iter().enumerate() {
            for (cc, &col) in idx.iter().enumerate() {
                sub[(r, cc)] = nm.matrix[(row, col)] * w_all[row] / w_all[col];
            }
        }
        let (v_hat, iterations, residual, sigma_max, lambda) =
            tikhonov_solve(&sub, &rhs, opts.reg, opts.cg_tol)?;
        for (r, &row) in idx.iter().enumerate() {
            stitched[row] = v_hat[r] / w_all[row];
        }
        for &q in &layer {
            assigned[q] = true;
        }
        fixed.extend(idx.iter().cloned());
        // Per-layer error against the truth restricted to this layer.
        let rel_error = truth.map(|t| {
            let mut num = 0.0;
            let mut den = 0.0;
            for &row in &idx {
                num += (stitched[row] - t[row]) * (stitched[row] - t[row]);
                den += t[row] * t[row];
            }
            (num / den.max(1e-300)).sqrt()
        });
        reports.push(LayerReport {
            level,
            layer_nodes: layer.len(),
            report: ReconstructionReport {
                mode: nm.kind.label().to_string(),
                grid_nodes: nm.grid.nodes.clone(),
                f_weight: nm.f_weight,
                reg_lambda: lambda,
                iterations,
                residual,
                rel_error,
                cond_estimate: sigma_max * v_hat.norm() / rhs.norm().max(1e-300),
                potential_norm: None,
            },
        });
    }
    let total_error = truth.map(|t| rel_l2(chart, nm, &stitched, t));
    Ok((stitched, reports, total_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::MetricKind;
    use crate::grid::GridSpec;
    use crate::normal::{assemble_normal_matrix, NormalConfig, QuadratureSpec};

    fn shell_chart() -> MetricChart {
        MetricChart::new(
            3,
            vec![0.0, 0.9, -0.7],
            vec![0.45, 2.3, 0.7],
            MetricKind::EuclideanBallShell { radius: 1.0 },
        )
        .unwrap()
    }

    fn small_t1_matrix(chart: &MetricChart) -> NormalMatrix {
        let grid = GridSpec::new(vec![0.1, 1.35, -0.25], vec![0.28, 1.85, 0.25], vec![5, 5, 5]).unwrap();
        let cfg = NormalConfig {
            quad: QuadratureSpec { radial_order: 4, angular_order: 8 },
            step: 8e-3,
            ..NormalConfig::new(crate::normal::TransformKind::T1, 3.0)
        };
        assemble_normal_matrix(chart, &grid, &cfg, 8000).unwrap()
    }

    #[test]
    fn zero_data_reconstructs_zero() {
        let chart = shell_chart();
        let nm = small_t1_matrix(&chart);
        let data = vec![0.0; nm.num_unknowns()];
        let (rec, rep) = reconstruct(&chart, &nm, &data, None, &ReconstructOpts::default(), None).unwrap();
        assert!(rec.iter().all(|&v| v == 0.0));
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn t1_small_end_to_end_recovers_a_bump() {
        let chart = shell_chart();
        let nm = small_t1_matrix(&chart);
        let truth_field = crate::fields::VectorField::from_fn(nm.grid.clone(), |p| {
            let b = (-((p[0] - 0.19) * (p[0] - 0.19) / 0.004
                + (p[1] - 1.6) * (p[1] - 1.6) / 0.03
                + p[2] * p[2] / 0.03))
                .exp();
            vec![0.9 * b, 0.5 * b, -0.6 * b]
        });
        let truth = NormalMatrix::vec_of_vector_field(&chart, &truth_field);
        let data = (&nm.matrix * DVector::from_column_slice(&truth)).as_slice().to_vec();
        let (rec, rep) = reconstruct(&chart, &nm, &data, None, &ReconstructOpts::default(), Some(&truth)).unwrap();
        let err = rep.rel_error.unwrap();
        assert!(err <= 0.05, "relative error {err}");
        assert!(rec.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_level_sweep_equals_plain_reconstruct() {
        let chart = shell_chart();
        let nm = small_t1_matrix(&chart);
        let truth_field = crate::fields::VectorField::from_fn(nm.grid.clone(), |p| {
            let b = (-((p[0] - 0.2) * (p[0] - 0.2) / 0.006 + (p[1] - 1.6) * (p[1] - 1.6) / 0.04 + p[2] * p[2] / 0.04)).exp();
            vec![0.4 * b, -0.2 * b, 0.7 * b]
        });
        let truth = NormalMatrix::vec_of_vector_field(&chart, &truth_field);
        let data = (&nm.matrix * DVector::from_column_slice(&truth)).as_slice().to_vec();
        let opts = ReconstructOpts::default();
        let (rec_a, rep_a) = reconstruct(&chart, &nm, &data, None, &opts, Some(&truth)).unwrap();
        let (rec_b, layers, total) = layer_sweep(&chart, &nm, &data, &[0.28], &opts, Some(&truth)).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(rec_a, rec_b, "single-level sweep must match the plain solve exactly");
        assert_eq!(rep_a.iterations, layers[0].report.iterations);
        assert!((total.unwrap() - rep_a.rel_error.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn deeper_layers_never_modify_fixed_nodes() {
        let chart = shell_chart();
        let nm = small_t1_matrix(&chart);
        let truth_field = crate::fields::VectorField::from_fn(nm.grid.clone(), |p| {
            let b = (-((p[0] - 0.19) * (p[0] - 0.19) / 0.004 + (p[1] - 1.6) * (p[1] - 1.6) / 0.03 + p[2] * p[2] / 0.03)).exp();
            vec![0.9 * b, 0.5 * b, -0.6 * b]
        });
        let truth = NormalMatrix::vec_of_vector_field(&chart, &truth_field);
        let data = (&nm.matrix * DVector::from_column_slice(&truth)).as_slice().to_vec();
        let opts = ReconstructOpts::default();
        let (two_layer, reports, _) = layer_sweep(&chart, &nm, &data, &[0.19, 0.28], &opts, Some(&truth)).unwrap();
        assert_eq!(reports.len(), 2);
        // Re-run only the first layer and compare its nodes.
        let (one_layer_partial, _, _) = layer_sweep(&chart, &nm, &data, &[0.19, 0.28], &opts, None).unwrap();
        for q in 0..nm.grid.num_nodes() {
            if chart.bdf(&nm.grid.node_point(q)) <= 0.19 {
                for k in 0..3 {
                    assert_eq!(two_layer[q * 3 + k], one_layer_partial[q * 3 + k]);
                }
            }
        }
        // Levels must be increasing and cover the grid.
        assert!(layer_sweep(&chart, &nm, &data, &[0.28, 0.19], &opts, None).is_err());
        assert!(layer_sweep(&chart, &nm, &data, &[0.15], &opts, None).is_err());
    }
}
