//! Small recurrent networks with exact reverse-mode gradients, the Gaussian
//! action head, Adam, and a named-block checkpoint format.

pub mod checkpoint;
pub mod linalg;
pub mod net;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use self::net::{Block, Forward, Gradients, InitScheme, NetSpec, Network, RecurrentState, SeqInput};
use crate::{Error, Result};

/// Lower bound added to the softplus spread.
pub const SPREAD_FLOOR: f64 = 1e-5;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHead {
    pub mean: f64,
    pub spread: f64,
}

impl GaussianHead {
    /// Head from the two raw network outputs.
    pub fn from_raw(mean: f64, raw_spread: f64) -> Self {
        Self { mean, spread: softplus(raw_spread) + SPREAD_FLOOR }
    }

    pub fn log_prob(&self, a: f64) -> f64 {
        let z = (a - self.mean) / self.spread;
        -0.5 * z * z - self.spread.ln() - 0.5 * (2.0 * PI).ln()
    }
}

/// Draws `delta_theta ~ N(mean, spread^2)` and returns it with its log-density.
pub fn sample_action<R: Rng + ?Sized>(head: &GaussianHead, rng: &mut R) -> (f64, f64) {
    let z: f64 = StandardNormal.sample(rng);
    let a = head.mean + head.spread * z;
    (a, head.log_prob(a))
}

/// One step of a policy network: returns the action distribution and the
/// next recurrent state. Inputs are not modified.
pub fn policy_forward(
    net: &Network,
    params: &[f64],
    obs: &[f64],
    state: &RecurrentState,
) -> Result<(GaussianHead, RecurrentState)> {
    if net.spec().output_dim != 2 || net.spec().action_dim != 0 {
        return Err(Error::Usage("policy_forward needs a two-output network without action input".into()));
    }
    let input = SeqInput { steps: 1, batch: 1, obs, actions: None, active: None };
    let fwd = net.forward(params, &input, Some(state))?;
    Ok((GaussianHead::from_raw(fwd.output[0], fwd.output[1]), fwd.final_state))
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Bias-corrected Adam update of `params` with gradient `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "Adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / b1t;
            let vh = self.v[k] / b2t;
            params[k] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}
