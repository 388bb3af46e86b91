//! Sector-search model of casting between detections.
//!
//! After losing the odor the searcher sweeps an opening sector whose angle
//! grows with distance from the loss point. Balancing the angle the searcher
//! can cover at detection frequency `f` against the angle its heading
//! uncertainty grows to gives the mean effective speed as a function of the
//! memory length `T_M`:
//!
//! ```text
//! U(T_M) = ( a l^γ f / T_M^γ · ln(T_M f / N) )^(1/(1+γ))     for T_M f > N
//! ```
//!
//! and zero otherwise. The speed peaks at `T_M* f = e^(1/γ) N` with
//! `U* = (a l^γ f^(1+γ) / (e γ N^γ))^(1/(1+γ))`, so `U/U*` depends only on
//! `x = T_M f / N` and `γ`.

use serde::Serialize;

use crate::optim::golden_section_min;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorParams {
    /// Agent size (sensing length).
    pub a: f64,
    /// Length scale of the heading-uncertainty growth.
    pub l: f64,
    /// Growth exponent of the opening angle.
    pub gamma_s: f64,
    /// Detection frequency.
    pub f: f64,
    /// Number of casting segments.
    pub n: f64,
}

impl SectorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("l", self.l), ("gamma_s", self.gamma_s), ("f", self.f), ("N", self.n)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("sector parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean effective speed for memory length `t_m`.
pub fn u_eff(t_m: f64, p: &SectorParams) -> Result<f64> {
    if !(t_m > 0.0) {
        return Err(Error::Domain(format!("memory length must be positive, got {t_m}")));
    }
    p.validate()?;
    let x = t_m * p.f;
    if x <= p.n {
        return Ok(0.0);
    }
    let g = p.gamma_s;
    let inner = p.a * p.l.powf(g) * p.f / t_m.powf(g) * (x / p.n).ln();
    Ok(inner.powf(1.0 / (1.0 + g)))
}

/// Optimal memory length and the speed reached there.
pub fn u_eff_max(p: &SectorParams) -> Result<(f64, f64)> {
    p.validate()?;
    let g = p.gamma_s;
    let t_star = (1.0 / g).exp() * p.n / p.f;
    let u_star = (p.a * p.l.powf(g) * p.f.powf(1.0 + g) / (std::f64::consts::E * g * p.n.powf(g))).powf(1.0 / (1.0 + g));
    Ok((t_star, u_star))
}

/// `U/U*` as a function of `T_M`; zero for `T_M f <= N`.
pub fn normalized_u_eff(t_m: f64, gamma_s: f64, n: f64, f: f64) -> f64 {
    normalized_of_x(t_m * f / n, gamma_s)
}

/// `U/U*` in terms of `x = T_M f / N`.
pub fn normalized_of_x(x: f64, gamma_s: f64) -> f64 {
    if !(x > 1.0) {
        return 0.0;
    }
    (std::f64::consts::E * gamma_s * x.ln() / x.powf(gamma_s)).powf(1.0 / (1.0 + gamma_s))
}

#[derive(Debug, Clone, Serialize)]
pub struct SectorFit {
    #[serde(rename = "N")]
    pub n: f64,
    pub gamma: f64,
    pub residual: f64,
    /// `(T_M f, measured, predicted)` per input point.
    pub predictions: Vec<(f64, f64, f64)>,
}

fn residual(points: &[(f64, f64)], n: f64, gamma_s: f64) -> f64 {
    points
        .iter()
        .map(|&(tf, y)| {
            let d = normalized_of_x(tf / n, gamma_s) - y;
            d * d
        })
        .sum()
}

pub const N_RANGE: (f64, f64) = (1.0, 50.0);
const N_GRID_STEP: f64 = 0.05;

/// Least-squares fit of `N` for each candidate `γ` to `(T_M f, U/U*)` points.
/// A grid scan over `N` brackets the optimum, golden-section refines it.
pub fn fit(points: &[(f64, f64)], gamma_candidates: &[f64]) -> Result<SectorFit> {
    if points.len() < 3 {
        return Err(Error::FitUndefined(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().all(|p| p.1 == 0.0) {
        return Err(Error::FitUndefined("all speeds are zero".into()));
    }
    if gamma_candidates.is_empty() {
        return Err(Error::FitUndefined("no γ candidates".into()));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &g in gamma_candidates {
        let steps = ((N_RANGE.1 - N_RANGE.0) / N_GRID_STEP).round() as usize;
        let (mut k_best, mut r_best) = (0usize, f64::INFINITY);
        for k in 0..=steps {
            let r = residual(points, N_RANGE.0 + k as f64 * N_GRID_STEP, g);
            if r < r_best {
                k_best = k;
                r_best = r;
            }
        }
        let lo = (N_RANGE.0 + (k_best as f64 - 1.0) * N_GRID_STEP).max(N_RANGE.0);
        let hi = (N_RANGE.0 + (k_best as f64 + 1.0) * N_GRID_STEP).min(N_RANGE.1);
        let (n, r) = golden_section_min(|n| residual(points, n, g), lo, hi, 1e-12);
        if best.map_or(true, |b| r < b.2) {
            best = Some((n, g, r));
        }
    }
    let (n, gamma, residual) = best.unwrap();
    let predictions = points.iter().map(|&(tf, y)| (tf, y, normalized_of_x(tf / n, gamma))).collect();
    Ok(SectorFit { n, gamma, residual, predictions })
}
