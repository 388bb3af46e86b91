//! Two-dimensional incompressible flow past a circular cylinder carrying a
//! passive odor scalar emitted from a small disk.
//!
//! Everything is nondimensional: lengths in cylinder diameters `D`, velocities
//! in the free-stream speed `U∞`, times in `D/U∞`.
//!
//! The solver uses a staggered (MAC) grid: `u` on vertical faces, `v` on
//! horizontal faces, pressure and concentration at cell centres. Each step is a
//! fractional-step projection:
//!
//! 1. explicit Adams-Bashforth predictor for advection (divergence form,
//!    central) and viscous diffusion;
//! 2. direct forcing of the cylinder through the solid volume fraction of each
//!    face;
//! 3. exact pressure projection with the direct solver in [`poisson`];
//! 4. scalar transport with the limited scheme in [`scalar`].
//!
//! Boundaries: uniform inflow at `x = 0`, convective outflow at `x = Lx` with a
//! global mass-flux correction, free-slip walls at `y = 0` and `y = Ly`. The
//! inflow fixes `u` only; `v` has zero normal gradient there, which lets the
//! wake's upstream influence leave the domain instead of being clamped one
//! diameter ahead of the cylinder.
//!
//! A short rotation of the cylinder at start-up breaks the top/bottom symmetry
//! so that shedding develops in a predictable time instead of depending on
//! round-off.

pub mod poisson;
pub mod scalar;
pub mod spectrum;

use serde::{Deserialize, Serialize};

use crate::fieldstore::{FieldMeta, FieldSeries, Frame};
use crate::{Error, Result, Vec2};

use self::poisson::PoissonSolver;
use self::scalar::{ScalarTransport, SourceTerm};

/// Divergence allowed after projection (max norm).
pub const DIVERGENCE_TOL: f64 = 1e-6;
/// Lower bound the limited scheme keeps the concentration above.
pub const SCALAR_FLOOR: f64 = -1e-12;
const CFL_MAX: f64 = 0.5;

pub fn default_sources() -> Vec<Vec2> {
    vec![[4.0, 4.5], [4.0, 5.5], [6.0, 4.5], [6.0, 5.5]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub domain_size: Vec2,
    pub nx: usize,
    pub ny: usize,
    pub cylinder: bool,
    pub cylinder_center: Vec2,
    pub cylinder_diameter: f64,
    #[serde(rename = "Re")]
    pub re: f64,
    #[serde(rename = "Sc")]
    pub sc: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub delta: f64,
    pub source_positions: Vec<Vec2>,
    /// Index into `source_positions` used by [`run`].
    pub active_source: usize,
    pub dt_solver: f64,
    pub t_total: f64,
    pub t_record_start: f64,
    pub frame_interval: f64,
    pub export_nx: usize,
    pub export_ny: usize,
    pub export_dx: f64,
    /// Duration of the start-up rotation that seeds shedding.
    pub kick_duration: f64,
    /// Surface speed of that rotation.
    pub kick_speed: f64,
    /// Velocity probe used for the Strouhal estimate.
    pub probe: Vec2,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            domain_size: [20.0, 10.0],
            nx: 400,
            ny: 200,
            cylinder: true,
            cylinder_center: [1.5, 5.0],
            cylinder_diameter: 1.0,
            re: 100.0,
            sc: 0.1,
            j: 0.1,
            delta: 0.2,
            source_positions: default_sources(),
            active_source: 0,
            dt_solver: 0.01,
            t_total: 160.0,
            t_record_start: 100.0,
            frame_interval: 0.1,
            export_nx: 200,
            export_ny: 100,
            export_dx: 0.1,
            kick_duration: 2.0,
            kick_speed: 0.5,
            probe: [5.0, 5.0],
        }
    }
}

impl SimConfig {
    pub fn h(&self) -> f64 {
        self.domain_size[0] / self.nx as f64
    }

    pub fn nu(&self) -> f64 {
        1.0 / self.re
    }

    pub fn kappa(&self) -> f64 {
        self.nu() / self.sc
    }

    /// Emission rate of the source disk, `J π δ²`.
    pub fn emission_rate(&self) -> f64 {
        self.j * std::f64::consts::PI * self.delta * self.delta
    }

    pub fn steps_total(&self) -> usize {
        (self.t_total / self.dt_solver).round() as usize
    }

    fn frame_stride(&self) -> usize {
        (self.frame_interval / self.dt_solver).round() as usize
    }

    fn record_start_step(&self) -> usize {
        (self.t_record_start / self.dt_solver).round() as usize
    }

    pub fn n_frames(&self) -> usize {
        (self.steps_total() - self.record_start_step()) / self.frame_stride() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.re > 0.0 && self.re.is_finite()) {
            return bad(format!("Re must be positive, got {}", self.re));
        }
        if !(self.sc > 0.0 && self.sc.is_finite()) {
            return bad(format!("Sc must be positive, got {}", self.sc));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.j >= 0.0) {
            return bad(format!("J must be non-negative, got {}", self.j));
        }
        if self.nx < 4 || self.ny < 4 {
            return bad(format!("grid {}x{} too small", self.nx, self.ny));
        }
        let (hx, hy) = (self.domain_size[0] / self.nx as f64, self.domain_size[1] / self.ny as f64);
        if ((hx - hy) / hx).abs() > 1e-12 {
            return bad(format!("cells must be square: dx={hx}, dy={hy}"));
        }
        if !(self.dt_solver > 0.0) {
            return bad("dt_solver must be positive".into());
        }
        let cfl = self.dt_solver / hx;
        if cfl > CFL_MAX {
            return bad(format!("CFL {cfl:.3} at U∞ exceeds {CFL_MAX}"));
        }
        let visc = self.nu() * self.dt_solver * 4.0 / (hx * hx);
        if visc > 0.5 {
            return bad(format!("explicit viscous number {visc:.3} exceeds 0.5; reduce dt_solver or Re resolution"));
        }
        if self.t_record_start >= self.t_total {
            return bad(format!(
                "t_record_start ({}) must precede t_total ({})",
                self.t_record_start, self.t_total
            ));
        }
        let stride = self.frame_interval / self.dt_solver;
        if !(self.frame_interval > 0.0) || (stride - stride.round()).abs() > 1e-9 || stride.round() < 1.0 {
            return bad(format!(
                "frame_interval {} must be a positive multiple of dt_solver {}",
                self.frame_interval, self.dt_solver
            ));
        }
        if self.n_frames() < 2 {
            return bad("recording window yields fewer than 2 frames".into());
        }
        if self.source_positions.is_empty() {
            return bad("no source positions".into());
        }
        if self.active_source >= self.source_positions.len() {
            return bad(format!("active_source {} out of range", self.active_source));
        }
        for (k, s) in self.source_positions.iter().enumerate() {
            if !(s[0] > 0.0 && s[0] < self.domain_size[0] && s[1] > 0.0 && s[1] < self.domain_size[1]) {
                return bad(format!("source {k} at ({}, {}) outside domain", s[0], s[1]));
            }
            if self.cylinder {
                let r = dist(*s, self.cylinder_center);
                if r <= 0.5 * self.cylinder_diameter {
                    return bad(format!("source {k} at ({}, {}) inside the cylinder", s[0], s[1]));
                }
            }
        }
        if self.export_nx < 2 || self.export_ny < 2 || !(self.export_dx > 0.0) {
            return bad("export grid must be at least 2x2 with positive spacing".into());
        }
        let span = [self.export_nx as f64 * self.export_dx, self.export_ny as f64 * self.export_dx];
        if span[0] > self.domain_size[0] + 1e-9 || span[1] > self.domain_size[1] + 1e-9 {
            return bad("export grid larger than domain".into());
        }
        Ok(())
    }

    /// Export grid origin: cell centres of an `export_dx` tiling that is
    /// centred in the domain.
    pub fn export_origin(&self) -> Vec2 {
        let span = [
            (self.export_nx - 1) as f64 * self.export_dx,
            (self.export_ny - 1) as f64 * self.export_dx,
        ];
        [0.5 * (self.domain_size[0] - span[0]), 0.5 * (self.domain_size[1] - span[1])]
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Solver state. `scalars` holds one concentration field per tracked source.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub step: usize,
    /// `(nx + 1) * ny`, index `j * (nx + 1) + i`, face at `x = i h`.
    pub u: Vec<f64>,
    /// `nx * (ny + 1)`, index `j * nx + i`, face at `y = j h`.
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub scalars: Vec<Vec<f64>>,
    prev_rhs: Option<(Vec<f64>, Vec<f64>)>,
}

impl FlowState {
    /// First tracked concentration field.
    pub fn c(&self) -> &[f64] {
        &self.scalars[0]
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub max_divergence: f64,
    pub cfl: f64,
    pub substeps: usize,
}

pub struct Simulator {
    cfg: SimConfig,
    nx: usize,
    ny: usize,
    h: f64,
    chi_u: Vec<f64>,
    chi_v: Vec<f64>,
    sources: Vec<SourceTerm>,
    source_index: Vec<usize>,
    poisson: PoissonSolver,
    transport: ScalarTransport,
    rhs_u: Vec<f64>,
    rhs_v: Vec<f64>,
    work: Vec<f64>,
}

impl Simulator {
    /// Simulator tracking the configured active source.
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        Self::with_sources(cfg, &[cfg.active_source])
    }

    /// Simulator tracking one scalar per listed source index. The flow is
    /// shared, so each scalar evolves exactly as it would alone.
    pub fn with_sources(cfg: &SimConfig, indices: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if let Some(&k) = indices.iter().find(|&&k| k >= cfg.source_positions.len()) {
            return Err(Error::Config(format!("source index {k} out of range")));
        }
        let (nx, ny, h) = (cfg.nx, cfg.ny, cfg.h());
        let (chi_u, chi_v) = if cfg.cylinder { solid_fractions(cfg) } else {
            (vec![0.0; (nx + 1) * ny], vec![0.0; nx * (ny + 1)])
        };
        let sources = indices
            .iter()
            .map(|&k| SourceTerm::disk(nx, ny, h, cfg.source_positions[k], cfg.delta, cfg.emission_rate()))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            nx,
            ny,
            h,
            chi_u,
            chi_v,
            sources,
            source_index: indices.to_vec(),
            poisson: PoissonSolver::new(nx, ny, h),
            transport: ScalarTransport::new(nx, ny, h, cfg.kappa()),
            rhs_u: vec![0.0; (nx + 1) * ny],
            rhs_v: vec![0.0; nx * (ny + 1)],
            work: vec![0.0; nx * ny],
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_index
    }

    pub fn source_terms(&self) -> &[SourceTerm] {
        &self.sources
    }

    /// Impulsive start: free-stream velocity outside the body, fluid at rest
    /// inside, no scalar.
    pub fn init_state(&self) -> FlowState {
        let (nx, ny) = (self.nx, self.ny);
        let u = self.chi_u.iter().map(|chi| 1.0 - chi).collect();
        FlowState {
            t: 0.0,
            step: 0,
            u,
            v: vec![0.0; nx * (ny + 1)],
            p: vec![0.0; nx * ny],
            scalars: vec![vec![0.0; nx * ny]; self.sources.len()],
            prev_rhs: None,
        }
    }

    /// Advances `state` by one solver step. Returns the time-integrated scalar
    /// outflow per tracked scalar alongside the step diagnostics.
    pub fn advance(&mut self, state: &mut FlowState) -> Result<(StepReport, Vec<f64>)> {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let dt = self.cfg.dt_solver;

        let (umax, vmax) = max_abs(&state.u, &state.v);
        let cfl = dt * umax.max(vmax) / h;
        if !cfl.is_finite() {
            return Err(Error::NumericalBlowup { t: state.t, field: "velocity" });
        }
        if cfl > CFL_MAX {
            return Err(Error::SolverFailure { t: state.t, residual: cfl, tolerance: CFL_MAX });
        }

        // scalars ride on the divergence-free field of the current step
        let nsub = self.transport.substeps(dt, umax, vmax);
        let mut outflows = Vec::with_capacity(self.sources.len());
        for (c, src) in state.scalars.iter_mut().zip(&self.sources) {
            outflows.push(self.transport.advance(c, &state.u, &state.v, src, dt, nsub));
        }

        self.momentum_rhs(state);
        let (ab_new, ab_old) = if state.prev_rhs.is_some() { (1.5, -0.5) } else { (1.0, 0.0) };
        let old_u_out: Vec<f64> = (0..ny).map(|j| state.u[j * (nx + 1) + nx]).collect();
        let old_u_in: Vec<f64> = (0..ny).map(|j| state.u[j * (nx + 1) + nx - 1]).collect();
        {
            let (pu, pv) = state.prev_rhs.get_or_insert_with(|| (vec![0.0; self.rhs_u.len()], vec![0.0; self.rhs_v.len()]));
            for j in 0..ny {
                for i in 1..nx {
                    let n = j * (nx + 1) + i;
                    state.u[n] += dt * (ab_new * self.rhs_u[n] + ab_old * pu[n]);
                }
            }
            for j in 1..ny {
                for i in 0..nx {
                    let n = j * nx + i;
                    state.v[n] += dt * (ab_new * self.rhs_v[n] + ab_old * pv[n]);
                }
            }
            pu.copy_from_slice(&self.rhs_u);
            pv.copy_from_slice(&self.rhs_v);
        }

        // convective outflow, then restore global mass balance
        let mut flux_out = 0.0;
        for j in 0..ny {
            let n = j * (nx + 1) + nx;
            let un = old_u_out[j] - dt * (old_u_out[j] - old_u_in[j]) / h;
            state.u[n] = un;
            flux_out += un;
        }
        let flux_in: f64 = (0..ny).map(|j| state.u[j * (nx + 1)]).sum();
        let shift = (flux_in - flux_out) / ny as f64;
        for j in 0..ny {
            state.u[j * (nx + 1) + nx] += shift;
        }

        self.apply_body_forcing(state);
        let max_div = self.project(state, dt)?;

        state.step += 1;
        state.t = state.step as f64 * dt;
        if state.scalars.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(Error::NumericalBlowup { t: state.t, field: "c" });
        }
        Ok((StepReport { max_divergence: max_div, cfl, substeps: nsub }, outflows))
    }

    fn momentum_rhs(&mut self, s: &FlowState) {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let nu = self.cfg.nu();
        let inv_h = 1.0 / h;
        let inv_h2 = inv_h * inv_h;
        let nu1 = nx + 1;
        let u = &s.u;
        let v = &s.v;
        let uat = |i: usize, j: usize| u[j * nu1 + i];
        let vat = |i: usize, j: usize| v[j * nx + i];

        for j in 0..ny {
            for i in 1..nx {
                let uc = uat(i, j);
                let ue = 0.5 * (uc + uat(i + 1, j));
                let uw = 0.5 * (uat(i - 1, j) + uc);
                let duu = (ue * ue - uw * uw) * inv_h;
                let fnorth = if j + 1 == ny {
                    0.0
                } else {
                    0.5 * (uc + uat(i, j + 1)) * 0.5 * (vat(i - 1, j + 1) + vat(i, j + 1))
                };
                let fsouth = if j == 0 {
                    0.0
                } else {
                    0.5 * (uat(i, j - 1) + uc) * 0.5 * (vat(i - 1, j) + vat(i, j))
                };
                let duv = (fnorth - fsouth) * inv_h;
                let un = if j + 1 < ny { uat(i, j + 1) } else { uc };
                let us = if j > 0 { uat(i, j - 1) } else { uc };
                let lap = (uat(i + 1, j) + uat(i - 1, j) + un + us - 4.0 * uc) * inv_h2;
                self.rhs_u[j * nu1 + i] = -(duu + duv) + nu * lap;
            }
        }

        for j in 1..ny {
            for i in 0..nx {
                let vc = vat(i, j);
                let ve_nb = if i + 1 < nx { vat(i + 1, j) } else { vc };
                // zero-gradient ghost at the inflow
                let vw_nb = if i > 0 { vat(i - 1, j) } else { vc };
                let feast = 0.5 * (uat(i + 1, j - 1) + uat(i + 1, j)) * 0.5 * (vc + ve_nb);
                let fwest = 0.5 * (uat(i, j - 1) + uat(i, j)) * 0.5 * (vw_nb + vc);
                let duv = (feast - fwest) * inv_h;
                let vn = 0.5 * (vc + vat(i, j + 1));
                let vs = 0.5 * (vat(i, j - 1) + vc);
                let dvv = (vn * vn - vs * vs) * inv_h;
                let lap = (ve_nb + vw_nb + vat(i, j + 1) + vat(i, j - 1) - 4.0 * vc) * inv_h2;
                self.rhs_v[j * nx + i] = -(duv + dvv) + nu * lap;
            }
        }
    }

    fn apply_body_forcing(&self, s: &mut FlowState) {
        if !self.cfg.cylinder {
            return;
        }
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let spinning = s.t < self.cfg.kick_duration;
        let omega = if spinning { self.cfg.kick_speed / (0.5 * self.cfg.cylinder_diameter) } else { 0.0 };
        let [xc, yc] = self.cfg.cylinder_center;
        for j in 0..ny {
            for i in 0..=nx {
                let n = j * (nx + 1) + i;
                let chi = self.chi_u[n];
                if chi > 0.0 {
                    let target = -omega * ((j as f64 + 0.5) * h - yc);
                    s.u[n] = (1.0 - chi) * s.u[n] + chi * target;
                }
            }
        }
        for j in 0..=ny {
            for i in 0..nx {
                let n = j * nx + i;
                let chi = self.chi_v[n];
                if chi > 0.0 {
                    let target = omega * ((i as f64 + 0.5) * h - xc);
                    s.v[n] = (1.0 - chi) * s.v[n] + chi * target;
                }
            }
        }
    }

    /// Makes the face velocities discretely divergence free; returns the
    /// max-norm divergence afterwards.
    fn project(&mut self, s: &mut FlowState, dt: f64) -> Result<f64> {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let nu1 = nx + 1;
        divergence(&s.u, &s.v, nx, ny, h, &mut self.work);
        for w in self.work.iter_mut() {
            *w /= dt;
        }
        self.poisson.solve(&mut self.work);
        let phi = &self.work;
        for j in 0..ny {
            for i in 1..nx {
                s.u[j * nu1 + i] -= dt * (phi[j * nx + i] - phi[j * nx + i - 1]) / h;
            }
        }
        for j in 1..ny {
            for i in 0..nx {
                s.v[j * nx + i] -= dt * (phi[j * nx + i] - phi[(j - 1) * nx + i]) / h;
            }
        }
        s.p.copy_from_slice(phi);
        let mut div = vec![0.0; nx * ny];
        divergence(&s.u, &s.v, nx, ny, h, &mut div);
        let max_div = div.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if !max_div.is_finite() {
            return Err(Error::NumericalBlowup { t: s.t, field: "velocity" });
        }
        if max_div > DIVERGENCE_TOL {
            return Err(Error::SolverFailure { t: s.t, residual: max_div, tolerance: DIVERGENCE_TOL });
        }
        Ok(max_div)
    }

    /// Cell-centred `(u, v, c_k)` interpolated at `x`.
    pub fn probe(&self, s: &FlowState, x: Vec2) -> (f64, f64) {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let u = bilinear(&s.u, nx + 1, ny, [0.0, 0.5 * h], h, x);
        let v = bilinear(&s.v, nx, ny + 1, [0.5 * h, 0.0], h, x);
        (u, v)
    }

    /// Resamples the state onto the export grid.
    pub fn export_frame(&self, s: &FlowState, scalar: usize) -> Frame {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let (ex, ey, edx) = (self.cfg.export_nx, self.cfg.export_ny, self.cfg.export_dx);
        let o = self.cfg.export_origin();
        let mut fr = Frame { u: vec![0.0; ex * ey], v: vec![0.0; ex * ey], c: vec![0.0; ex * ey] };
        for j in 0..ey {
            for i in 0..ex {
                let x = [o[0] + i as f64 * edx, o[1] + j as f64 * edx];
                let n = j * ex + i;
                fr.u[n] = bilinear(&s.u, nx + 1, ny, [0.0, 0.5 * h], h, x) as f32;
                fr.v[n] = bilinear(&s.v, nx, ny + 1, [0.5 * h, 0.0], h, x) as f32;
                fr.c[n] = bilinear(&s.scalars[scalar], nx, ny, [0.5 * h, 0.5 * h], h, x) as f32;
            }
        }
        fr
    }
}

fn max_abs(u: &[f64], v: &[f64]) -> (f64, f64) {
    let f = |a: &[f64]| a.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) });
    (f(u), f(v))
}

pub fn divergence(u: &[f64], v: &[f64], nx: usize, ny: usize, h: f64, out: &mut [f64]) {
    let nu1 = nx + 1;
    for j in 0..ny {
        for i in 0..nx {
            out[j * nx + i] =
                (u[j * nu1 + i + 1] - u[j * nu1 + i] + v[(j + 1) * nx + i] - v[j * nx + i]) / h;
        }
    }
}

/// Bilinear interpolation of an `n0 x n1` array whose node `(i, j)` sits at
/// `origin + h (i, j)`; queries outside are clamped to the edge nodes.
fn bilinear(a: &[f64], n0: usize, n1: usize, origin: Vec2, h: f64, x: Vec2) -> f64 {
    let fx = ((x[0] - origin[0]) / h).clamp(0.0, (n0 - 1) as f64);
    let fy = ((x[1] - origin[1]) / h).clamp(0.0, (n1 - 1) as f64);
    let i = (fx.floor() as usize).min(n0 - 2);
    let j = (fy.floor() as usize).min(n1 - 2);
    let (wx, wy) = (fx - i as f64, fy - j as f64);
    let at = |ii: usize, jj: usize| a[jj * n0 + ii];
    (1.0 - wy) * ((1.0 - wx) * at(i, j) + wx * at(i + 1, j)) + wy * ((1.0 - wx) * at(i, j + 1) + wx * at(i + 1, j + 1))
}

/// Solid volume fraction of the control volume around every u and v face,
/// from an 8x8 point subsampling.
fn solid_fractions(cfg: &SimConfig) -> (Vec<f64>, Vec<f64>) {
    const SUB: usize = 8;
    let (nx, ny, h) = (cfg.nx, cfg.ny, cfg.h());
    let r2 = (0.5 * cfg.cylinder_diameter).powi(2);
    let [xc, yc] = cfg.cylinder_center;
    let frac = |x0: f64, y0: f64| -> f64 {
        // quick reject
        let reach = 0.5 * cfg.cylinder_diameter + h;
        if (x0 - xc).abs() > reach || (y0 - yc).abs() > reach {
            return 0.0;
        }
        let mut inside = 0;
        for a in 0..SUB {
            for b in 0..SUB {
                let x = x0 + ((a as f64 + 0.5) / SUB as f64 - 0.5) * h;
                let y = y0 + ((b as f64 + 0.5) / SUB as f64 - 0.5) * h;
                if (x - xc).powi(2) + (y - yc).powi(2) < r2 {
                    inside += 1;
                }
            }
        }
        inside as f64 / (SUB * SUB) as f64
    };
    let mut chi_u = vec![0.0; (nx + 1) * ny];
    for j in 0..ny {
        for i in 0..=nx {
            chi_u[j * (nx + 1) + i] = frac(i as f64 * h, (j as f64 + 0.5) * h);
        }
    }
    let mut chi_v = vec![0.0; nx * (ny + 1)];
    for j in 0..=ny {
        for i in 0..nx {
            chi_v[j * nx + i] = frac((i as f64 + 0.5) * h, j as f64 * h);
        }
    }
    (chi_u, chi_v)
}

pub fn init_state(config: &SimConfig) -> Result<FlowState> {
    Ok(Simulator::new(config)?.init_state())
}

/// One solver step from `state`. Builds a fresh [`Simulator`]; long runs
/// should hold one instead.
pub fn advance(state: &FlowState, config: &SimConfig) -> Result<FlowState> {
    let mut sim = Simulator::new(config)?;
    if state.scalars.len() != 1 {
        return Err(Error::Usage(format!("expected 1 scalar, state carries {}", state.scalars.len())));
    }
    let mut next = state.clone();
    sim.advance(&mut next)?;
    Ok(next)
}

/// Scalar budget over one recording interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BalanceRecord {
    pub t: f64,
    pub mass: f64,
    /// Change of mass over the interval divided by its length.
    pub dmdt: f64,
    /// Source rate minus mean boundary outflow over the interval.
    pub expected: f64,
    /// Mean boundary outflow over the interval.
    pub outflow: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunDiagnostics {
    /// Transverse velocity at the probe, one sample per solver step inside
    /// the recording window.
    pub probe_v: Vec<f64>,
    pub probe_dt: f64,
    pub max_divergence: f64,
    pub min_c: f64,
    pub max_cfl: f64,
    /// Per tracked scalar, one record per interval between frames.
    pub balance: Vec<Vec<BalanceRecord>>,
    /// Same budget accumulated from t = 0 at every frame stride.
    pub early_balance: Vec<Vec<BalanceRecord>>,
}

impl RunDiagnostics {
    pub fn strouhal(&self) -> Option<f64> {
        spectrum::dominant_frequency(&self.probe_v, self.probe_dt)
    }
}

pub struct RunOutput {
    pub series: Vec<FieldSeries>,
    pub diagnostics: RunDiagnostics,
}

/// Runs the solver for the active source only.
pub fn run(config: &SimConfig) -> Result<FieldSeries> {
    let mut out = run_sources(config, &[config.active_source], true)?;
    Ok(out.series.remove(0))
}

/// Runs the solver once while transporting one scalar per source position.
pub fn run_bank(config: &SimConfig) -> Result<RunOutput> {
    let all: Vec<usize> = (0..config.source_positions.len()).collect();
    run_sources(config, &all, true)
}

/// Velocity-only run (no recorded frames), used for shedding benchmarks.
pub fn run_flow_only(config: &SimConfig) -> Result<RunDiagnostics> {
    Ok(run_sources(config, &[], false)?.diagnostics)
}

pub fn run_sources(config: &SimConfig, sources: &[usize], record: bool) -> Result<RunOutput> {
    let mut sim = Simulator::with_sources(config, sources)?;
    let mut state = sim.init_state();
    let n_steps = config.steps_total();
    let start = config.record_start_step();
    let stride = config.frame_stride();
    let h = config.h();

    let mut diag = RunDiagnostics {
        probe_dt: config.dt_solver,
        min_c: f64::INFINITY,
        balance: vec![Vec::new(); sources.len()],
        early_balance: vec![Vec::new(); sources.len()],
        ..Default::default()
    };
    let mut frames: Vec<Vec<Frame>> = vec![Vec::new(); sources.len()];
    let mut last_mass = vec![0.0; sources.len()];
    let mut out_acc = vec![0.0; sources.len()];
    let mut src_acc = vec![0.0; sources.len()];
    let src_rates: Vec<f64> = sim.source_terms().iter().map(|s| s.total_rate(h)).collect();

    for step in 0..=n_steps {
        if step >= start && (step - start) % stride == 0 {
            if record {
                for (k, fr) in frames.iter_mut().enumerate() {
                    fr.push(sim.export_frame(&state, k));
                }
            }
        }
        if step >= start {
            diag.probe_v.push(sim.probe(&state, config.probe).1);
        }
        if step > 0 && step % stride == 0 {
            let interval = stride as f64 * config.dt_solver;
            for k in 0..sources.len() {
                let mass = scalar::total_mass(&state.scalars[k], h);
                let rec = BalanceRecord {
                    t: state.t,
                    mass,
                    dmdt: (mass - last_mass[k]) / interval,
                    expected: (src_acc[k] - out_acc[k]) / interval,
                    outflow: out_acc[k] / interval,
                };
                if step > start {
                    diag.balance[k].push(rec);
                }
                diag.early_balance[k].push(rec);
                last_mass[k] = mass;
                out_acc[k] = 0.0;
                src_acc[k] = 0.0;
            }
        }
        if step == n_steps {
            break;
        }
        let (rep, outflows) = sim.advance(&mut state)?;
        diag.max_divergence = diag.max_divergence.max(rep.max_divergence);
        diag.max_cfl = diag.max_cfl.max(rep.cfl);
        for k in 0..sources.len() {
            out_acc[k] += outflows[k];
            src_acc[k] += src_rates[k] * config.dt_solver;
            let m = state.scalars[k].iter().fold(f64::INFINITY, |a, &b| a.min(b));
            diag.min_c = diag.min_c.min(m);
        }
    }

    let meta = FieldMeta { re: config.re, sc: config.sc, j: config.j, delta: config.delta };
    let mut series = Vec::with_capacity(sources.len());
    if record {
        for (k, fr) in frames.into_iter().enumerate() {
            series.push(FieldSeries::new(
                config.export_nx,
                config.export_ny,
                config.export_dx,
                config.export_origin(),
                config.frame_interval,
                0.0,
                config.source_positions[sources[k]],
                meta,
                fr,
            )?);
        }
    }
    Ok(RunOutput { series, diagnostics: diag })
}
