//! Rectangular node grids: indexing, multilinear interpolation, and
//! finite-difference stencils.

use crate::error::{MixedRayError, Result};
use serde::{Deserialize, Serialize};

/// A tensor-product node grid over a box, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != nodes.len() {
            return Err(MixedRayError::domain("grid spec arrays must have equal length"));
        }
        if nodes.iter().any(|&m| m < 2) {
            return Err(MixedRayError::domain("grid needs at least 2 nodes per axis"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(MixedRayError::domain("grid box must have positive extent"));
        }
        Ok(GridSpec { lo, hi, nodes })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.nodes[axis] - 1) as f64
    }

    /// Row-major flat index of a multi-index.
    pub fn flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for (k, &i) in idx.iter().enumerate() {
            f = f * self.nodes[k] + i;
        }
        f
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        let d = self.dim();
        let mut idx = vec![0; d];
        for k in (0..d).rev() {
            idx[k] = flat % self.nodes[k];
            flat /= self.nodes[k];
        }
        idx
    }

    pub fn node_point(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi(flat);
        idx.iter()
            .enumerate()
            .map(|(k, &i)| self.lo[k] + i as f64 * self.spacing(k))
            .collect()
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let idx = self.multi(flat);
        idx.iter().enumerate().any(|(k, &i)| i == 0 || i == self.nodes[k] - 1)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (lo, hi))| *x >= *lo - 1e-12 && *x <= *hi + 1e-12)
    }

    /// Multilinear interpolation weights: up to 2^d (node, weight) pairs.
    /// Returns an empty list outside the box (zero extension).
    pub fn interp_weights(&self, p: &[f64]) -> Vec<(usize, f64)> {
        let d = self.dim();
        if !self.contains(p) {
            return Vec::new();
        }
        let mut cell = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let s = self.spacing(k);
            let u = ((p[k] - self.lo[k]) / s).clamp(0.0, (self.nodes[k] - 1) as f64);
            let mut c = u.floor() as usize;
            if c >= self.nodes[k] - 1 {
                c = self.nodes[k] - 2;
            }
            cell[k] = c;
            frac[k] = u - c as f64;
        }
        let mut out = Vec::with_capacity(1 << d);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = vec![0usize; d];
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx[k] = cell[k] + 1;
                } else {
                    w *= 1.0 - frac[k];
                    idx[k] = cell[k];
                }
            }
            if w != 0.0 {
                out.push((self.flat(&idx), w));
            }
        }
        out
    }

    /// Interpolate a multi-component nodal array at p (zero outside the box).
    pub fn interp_into(&self, values: &[f64], comps: usize, p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (node, w) in self.interp_weights(p) {
            for c in 0..comps {
                out[c] += w * values[node * comps + c];
            }
        }
    }

    /// 4th-order first-derivative stencil along one axis at node index i:
    /// list of (node offset, coefficient / h).
    pub fn deriv_stencil(&self, axis: usize, i: usize) -> Vec<(isize, f64)> {
        let m = self.nodes[axis];
        let h = self.spacing(axis);
        assert!(m >= 5, "grid too small for the 4th-order stencil (< 5 nodes per axis)");
        let raw: Vec<(isize, f64)> = if i >= 2 && i + 2 < m {
            vec![(-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)]
        } else if i == 0 {
            vec![(0, -25.0 / 12.0), (1, 48.0 / 12.0), (2, -36.0 / 12.0), (3, 16.0 / 12.0), (4, -3.0 / 12.0)]
        } else if i == 1 {
            vec![(-1, -3.0 / 12.0), (0, -10.0 / 12.0), (1, 18.0 / 12.0), (2, -6.0 / 12.0), (3, 1.0 / 12.0)]
        } else if i == m - 2 {
            vec![(1, 3.0 / 12.0), (0, 10.0 / 12.0), (-1, -18.0 / 12.0), (-2, 6.0 / 12.0), (-3, -1.0 / 12.0)]
        } else {
            // i == m - 1
            vec![(0, 25.0 / 12.0), (-1, -48.0 / 12.0), (-2, 36.0 / 12.0), (-3, -16.0 / 12.0), (-4, 3.0 / 12.0)]
        };
        raw.into_iter().map(|(o, c)| (o, c / h)).collect()
    }
}
