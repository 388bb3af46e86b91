//! Direct solver for the pressure Poisson problem on a uniform cell-centred
//! grid with homogeneous Neumann conditions on every side.
//!
//! A DCT-II along y diagonalises the y part of the 5-point Laplacian; each of
//! the `ny` resulting modes is then a tridiagonal system in x, factorised once
//! at construction. Mode 0 is singular and is pinned at its first unknown,
//! which is exact for compatible right-hand sides.

use std::f64::consts::PI;
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

pub struct PoissonSolver {
    nx: usize,
    ny: usize,
    h2: f64,
    dct2: Arc<dyn TransformType2And3<f64>>,
    dct3: Arc<dyn TransformType2And3<f64>>,
    // per mode k, per column i: super-diagonal after elimination and the
    // reciprocal pivot
    cprime: Vec<f64>,
    inv_pivot: Vec<f64>,
    hat: Vec<f64>,
    col: Vec<f64>,
    scratch: Vec<f64>,
}

impl PoissonSolver {
    pub fn new(nx: usize, ny: usize, h: f64) -> Self {
        let mut planner = DctPlanner::new();
        let dct2 = planner.plan_dct2(ny);
        let dct3 = planner.plan_dct3(ny);
        let mut cprime = vec![0.0; nx * ny];
        let mut inv_pivot = vec![0.0; nx * ny];
        for k in 0..ny {
            let s = (PI * k as f64 / (2.0 * ny as f64)).sin();
            let lam = -4.0 * s * s;
            let cp = &mut cprime[k * nx..(k + 1) * nx];
            let ip = &mut inv_pivot[k * nx..(k + 1) * nx];
            for i in 0..nx {
                let (sub, mut diag, sup) = {
                    let edge = (i == 0) as usize + (i == nx - 1) as usize;
                    (1.0, -2.0 + edge as f64 + lam, 1.0)
                };
                let (sub, sup) = (if i == 0 { 0.0 } else { sub }, if i == nx - 1 { 0.0 } else { sup });
                if k == 0 && i == 0 {
                    // pin the null-space mode
                    ip[0] = 1.0;
                    cp[0] = 0.0;
                    continue;
                }
                if i > 0 {
                    diag -= sub * cp[i - 1];
                }
                ip[i] = 1.0 / diag;
                cp[i] = sup / diag;
            }
        }
        let scratch_len = dct2.get_scratch_len().max(dct3.get_scratch_len());
        Self {
            nx,
            ny,
            h2: h * h,
            dct2,
            dct3,
            cprime,
            inv_pivot,
            hat: vec![0.0; nx * ny],
            col: vec![0.0; ny],
            scratch: vec![0.0; scratch_len],
        }
    }

    /// Solves `L phi = rhs` in place (`rhs` is overwritten by `phi`), where
    /// `L` is the Neumann 5-point Laplacian. `rhs` must sum to zero up to
    /// round-off; the solution has zero in the pinned mode.
    pub fn solve(&mut self, rhs: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        debug_assert_eq!(rhs.len(), nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                self.col[j] = rhs[j * nx + i] * self.h2;
            }
            self.dct2.process_dct2_with_scratch(&mut self.col, &mut self.scratch);
            for k in 0..ny {
                self.hat[k * nx + i] = self.col[k];
            }
        }
        for k in 0..ny {
            let r = &mut self.hat[k * nx..(k + 1) * nx];
            let cp = &self.cprime[k * nx..(k + 1) * nx];
            let ip = &self.inv_pivot[k * nx..(k + 1) * nx];
            if k == 0 {
                r[0] = 0.0;
            } else {
                r[0] *= ip[0];
            }
            for i in 1..nx {
                r[i] = (r[i] - r[i - 1]) * ip[i];
            }
            for i in (0..nx - 1).rev() {
                r[i] -= cp[i] * r[i + 1];
            }
        }
        let scale = 2.0 / ny as f64;
        for i in 0..nx {
            for k in 0..ny {
                self.col[k] = self.hat[k * nx + i];
            }
            self.dct3.process_dct3_with_scratch(&mut self.col, &mut self.scratch);
            for j in 0..ny {
                rhs[j * nx + i] = self.col[j] * scale;
            }
        }
    }
}

/// Applies the Neumann 5-point Laplacian; used to verify the solver.
pub fn apply_laplacian(phi: &[f64], nx: usize, ny: usize, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; nx * ny];
    let at = |i: usize, j: usize| phi[j * nx + i];
    for j in 0..ny {
        for i in 0..nx {
            let c = at(i, j);
            let mut acc = 0.0;
            if i > 0 {
                acc += at(i - 1, j) - c;
            }
            if i + 1 < nx {
                acc += at(i + 1, j) - c;
            }
            if j > 0 {
                acc += at(i, j - 1) - c;
            }
            if j + 1 < ny {
                acc += at(i, j + 1) - c;
            }
            out[j * nx + i] = acc / (h * h);
        }
    }
    out
}
