//! Feed-forward trunk, LSTM core and dense head with hand-written reverse
//! mode over whole unrolled windows.
//!
//! Data is time-major: row `t * batch + b` holds step `t` of sequence `b`, so
//! every non-recurrent layer runs as one matrix product over all rows and the
//! rows of a suffix of time steps form a contiguous slice.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::linalg::{add_bias, col_sums_into, gemm};
use super::sigmoid;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Layer widths and options of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub trunk: Vec<usize>,
    pub hidden: usize,
    pub head: Vec<usize>,
    /// Extra inputs joined to the recurrent output before the head.
    pub action_dim: usize,
    pub output_dim: usize,
    pub layer_norm: bool,
    pub leak: f64,
}

impl NetSpec {
    /// Actor: observation in, `(mean, raw spread)` out.
    pub fn policy(obs_dim: usize) -> Self {
        Self {
            input_dim: obs_dim,
            trunk: vec![32, 32],
            hidden: 128,
            head: vec![32, 32],
            action_dim: 0,
            output_dim: 2,
            layer_norm: true,
            leak: 0.01,
        }
    }

    /// Critic: observation through the trunk and core, action joined at the
    /// head, one value out.
    pub fn critic(obs_dim: usize) -> Self {
        Self { action_dim: 1, output_dim: 1, ..Self::policy(obs_dim) }
    }
}

/// Initialisation of the dense and recurrent weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Normal,
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    // layer-norm gain and shift
    ln: Option<(usize, usize)>,
}

#[derive(Default)]
struct Builder {
    blocks: Vec<Block>,
    off: usize,
}

impl Builder {
    fn push(&mut self, name: &str, shape: Vec<usize>) -> usize {
        let o = self.off;
        self.off += shape.iter().product::<usize>();
        self.blocks.push(Block { name: name.to_string(), offset: o, shape });
        o
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, ln: bool) -> Dense {
        let w = self.push(&format!("{name}.w"), vec![fan_in, fan_out]);
        let b = self.push(&format!("{name}.b"), vec![fan_out]);
        let ln = ln.then(|| (self.push(&format!("{name}.ln_gain"), vec![fan_out]), self.push(&format!("{name}.ln_shift"), vec![fan_out])));
        Dense { fan_in, fan_out, w, b, ln }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    blocks: Vec<Block>,
    n_params: usize,
    trunk: Vec<Dense>,
    wx: usize,
    wh: usize,
    bl: usize,
    lstm_in: usize,
    head: Vec<Dense>,
    out: Dense,
}

/// Recurrent state of a batch: `batch x hidden` each.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { hidden: vec![0.0; batch * hidden], cell: vec![0.0; batch * hidden] }
    }
}

/// Inputs for one unrolled window.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub steps: usize,
    pub batch: usize,
    /// `steps * batch * input_dim`, time-major.
    pub obs: &'a [f64],
    /// `steps * batch * action_dim`; required when the spec has actions.
    pub actions: Option<&'a [f64]>,
    /// `steps * batch` flags in {0, 1}; a zero keeps that row's recurrent
    /// state at zero through the step (left padding).
    pub active: Option<&'a [f64]>,
}

/// Everything the backward pass needs, plus the outputs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub steps: usize,
    pub batch: usize,
    /// `steps * batch * output_dim`.
    pub output: Vec<f64>,
    pub final_state: RecurrentState,
    trunk_in: Vec<Vec<f64>>,
    trunk_xhat: Vec<Vec<f64>>,
    trunk_rstd: Vec<Vec<f64>>,
    trunk_pre: Vec<Vec<f64>>,
    lstm_x: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_c: Vec<f64>,
    h0: Vec<f64>,
    c0: Vec<f64>,
    active: Option<Vec<f64>>,
    head_in: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
    out_in: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// `steps * batch * action_dim`; zero for rows inside the burn-in.
    pub actions: Vec<f64>,
}


impl Network {
    pub fn new(spec: NetSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden == 0 || spec.output_dim == 0 {
            return Err(Error::Usage("network dimensions must be positive".into()));
        }
        if spec.trunk.iter().chain(&spec.head).any(|&w| w == 0) {
            return Err(Error::Usage("layer widths must be positive".into()));
        }
        let mut bld = Builder::default();
        let mut trunk = Vec::new();
        let mut width = spec.input_dim;
        for (k, &wd) in spec.trunk.iter().enumerate() {
            trunk.push(bld.dense(&format!("trunk{k}"), width, wd, spec.layer_norm));
            width = wd;
        }
        let lstm_in = width;
        let h = spec.hidden;
        let wx = bld.push("lstm.w_x", vec![lstm_in, 4 * h]);
        let wh = bld.push("lstm.w_h", vec![h, 4 * h]);
        let bl = bld.push("lstm.b", vec![4 * h]);
        let mut head = Vec::new();
        let mut width = h + spec.action_dim;
        for (k, &wd) in spec.head.iter().enumerate() {
            head.push(bld.dense(&format!("head{k}"), width, wd, false));
            width = wd;
        }
        let out = bld.dense("out", width, spec.output_dim, false);
        Ok(Self { wx, wh, bl, lstm_in, spec, n_params: bld.off, blocks: bld.blocks, trunk, head, out })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn hidden(&self) -> usize {
        self.spec.hidden
    }

    /// Dense weights ~ Normal(0, 1/fan_in) or orthogonal, recurrent weights
    /// orthogonal or normal, biases and layer-norm shifts zero, gains one,
    /// forget-gate bias one.
    pub fn init_params<R: Rng + ?Sized>(&self, dense: InitScheme, recurrent: InitScheme, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let fill = |p: &mut [f64], rows: usize, cols: usize, scheme: InitScheme, rng: &mut R| match scheme {
            InitScheme::Normal => {
                let s = 1.0 / (rows as f64).sqrt();
                for x in p.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x = s * z;
                }
            }
            InitScheme::Orthogonal => orthogonal_into(p, rows, cols, rng),
        };
        for d in self.trunk.iter().chain(&self.head).chain(std::iter::once(&self.out)) {
            let n = d.fan_in * d.fan_out;
            fill(&mut p[d.w..d.w + n], d.fan_in, d.fan_out, dense, rng);
            if let Some((g, _)) = d.ln {
                p[g..g + d.fan_out].iter_mut().for_each(|x| *x = 1.0);
            }
        }
        let h = self.spec.hidden;
        fill(&mut p[self.wx..self.wx + self.lstm_in * 4 * h], self.lstm_in, 4 * h, recurrent, rng);
        for k in 0..4 {
            // one square block per gate keeps each gate's recurrence orthogonal
            let mut blk = vec![0.0; h * h];
            fill(&mut blk, h, h, recurrent, rng);
            for r in 0..h {
                let dst = self.wh + r * 4 * h + k * h;
                p[dst..dst + h].copy_from_slice(&blk[r * h..(r + 1) * h]);
            }
        }
        p[self.bl + h..self.bl + 2 * h].iter_mut().for_each(|x| *x = 1.0);
        p
    }

    fn check_input(&self, params: &[f64], input: &SeqInput, init: Option<&RecurrentState>) -> Result<()> {
        let rows = input.steps * input.batch;
        let s = &self.spec;
        if params.len() != self.n_params {
            return Err(Error::Usage(format!("expected {} parameters, got {}", self.n_params, params.len())));
        }
        if input.obs.len() != rows * s.input_dim {
            return Err(Error::Usage(format!("observation buffer has {} entries, expected {}", input.obs.len(), rows * s.input_dim)));
        }
        match (s.action_dim, input.actions) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Usage("network takes no action input".into())),
            (a, Some(x)) if x.len() == rows * a => {}
            (a, x) => {
                return Err(Error::Usage(format!(
                    "action buffer has {} entries, expected {}",
                    x.map_or(0, |v| v.len()),
                    rows * a
                )))
            }
        }
        if let Some(m) = input.active {
            if m.len() != rows {
                return Err(Error::Usage(format!("mask has {} entries, expected {rows}", m.len())));
            }
        }
        if let Some(st) = init {
            let n = input.batch * s.hidden;
            if st.hidden.len() != n || st.cell.len() != n {
                return Err(Error::Usage(format!("recurrent state must have {n} entries per component")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &SeqInput, init: Option<&RecurrentState>) -> Result<Forward> {
        self.check_input(params, input, init)?;
        let (steps, batch) = (input.steps, input.batch);
        let rows = steps * batch;
        let leak = self.spec.leak;
        let h = self.spec.hidden;

        let mut trunk_in = Vec::with_capacity(self.trunk.len());
        let mut trunk_xhat = Vec::new();
        let mut trunk_rstd = Vec::new();
        let mut trunk_pre = Vec::new();
        let mut x = input.obs.to_vec();
        for d in &self.trunk {
            let mut z = vec![0.0; rows * d.fan_out];
            gemm(rows, d.fan_in, d.fan_out, 1.0, &x, false, &params[d.w..], false, 0.0, &mut z);
            add_bias(&mut z, &params[d.b..d.b + d.fan_out]);
            if let Some((g, s)) = d.ln {
                let (gain, shift) = (&params[g..g + d.fan_out], &params[s..s + d.fan_out]);
                let mut xhat = vec![0.0; rows * d.fan_out];
                let mut rstd = vec![0.0; rows];
                for r in 0..rows {
                    let zr = &mut z[r * d.fan_out..(r + 1) * d.fan_out];
                    let mu = zr.iter().sum::<f64>() / d.fan_out as f64;
                    let var = zr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d.fan_out as f64;
                    let rs = 1.0 / (var + LN_EPS).sqrt();
                    rstd[r] = rs;
                    let xr = &mut xhat[r * d.fan_out..(r + 1) * d.fan_out];
                    for k in 0..d.fan_out {
                        xr[k] = (zr[k] - mu) * rs;
                        zr[k] = gain[k] * xr[k] + shift[k];
                    }
                }
                trunk_xhat.push(xhat);
                trunk_rstd.push(rstd);
            } else {
                trunk_xhat.push(Vec::new());
                trunk_rstd.push(Vec::new());
            }
            let a: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { leak * v }).collect();
            trunk_in.push(std::mem::replace(&mut x, a));
            trunk_pre.push(z);
        }

        // recurrent core
        let lstm_x = x;
        let g4 = 4 * h;
        let mut gates = vec![0.0; rows * g4];
        gemm(rows, self.lstm_in, g4, 1.0, &lstm_x, false, &params[self.wx..], false, 0.0, &mut gates);
        add_bias(&mut gates, &params[self.bl..self.bl + g4]);
        let mut c = vec![0.0; rows * h];
        let mut hs = vec![0.0; rows * h];
        let mut tanh_c = vec![0.0; rows * h];
        let (h0, c0) = match init {
            Some(st) => (st.hidden.clone(), st.cell.clone()),
            None => (vec![0.0; batch * h], vec![0.0; batch * h]),
        };
        let wh = &params[self.wh..self.wh + h * g4];
        for t in 0..steps {
            let (r0, r1) = (t * batch, (t + 1) * batch);
            {
                let h_prev: &[f64] = if t == 0 { &h0 } else { &hs[(r0 - batch) * h..r0 * h] };
                gemm(batch, h, g4, 1.0, h_prev, false, wh, false, 1.0, &mut gates[r0 * g4..r1 * g4]);
            }
            for b in 0..batch {
                let r = r0 + b;
                let m = input.active.map_or(1.0, |a| a[r]);
                let gr = &mut gates[r * g4..(r + 1) * g4];
                for k in 0..h {
                    gr[k] = sigmoid(gr[k]);
                    gr[h + k] = sigmoid(gr[h + k]);
                    gr[2 * h + k] = gr[2 * h + k].tanh();
                    gr[3 * h + k] = sigmoid(gr[3 * h + k]);
                }
                for k in 0..h {
                    let cp = if t == 0 { c0[b * h + k] } else { c[(r - batch) * h + k] };
                    let cn = gr[h + k] * cp + gr[k] * gr[2 * h + k];
                    let tc = cn.tanh();
                    tanh_c[r * h + k] = tc;
                    c[r * h + k] = m * cn;
                    hs[r * h + k] = m * gr[3 * h + k] * tc;
                }
            }
        }

        // head
        let a = self.spec.action_dim;
        let mut x = vec![0.0; rows * (h + a)];
        for r in 0..rows {
            x[r * (h + a)..r * (h + a) + h].copy_from_slice(&hs[r * h..(r + 1) * h]);
            if let Some(act) = input.actions {
                x[r * (h + a) + h..(r + 1) * (h + a)].copy_from_slice(&act[r * a..(r + 1) * a]);
            }
        }
        let mut head_in = Vec::with_capacity(self.head.len());
        let mut head_pre = Vec::with_capacity(self.head.len());
        for d in &self.head {
            let mut z = vec![0.0; rows * d.fan_out];
            gemm(rows, d.fan_in, d.fan_out, 1.0, &x, false, &params[d.w..], false, 0.0, &mut z);
            add_bias(&mut z, &params[d.b..d.b + d.fan_out]);
            let act: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { leak * v }).collect();
            head_in.push(std::mem::replace(&mut x, act));
            head_pre.push(z);
        }
        let d = &self.out;
        let mut output = vec![0.0; rows * d.fan_out];
        gemm(rows, d.fan_in, d.fan_out, 1.0, &x, false, &params[d.w..], false, 0.0, &mut output);
        add_bias(&mut output, &params[d.b..d.b + d.fan_out]);

        let final_state = if steps == 0 {
            RecurrentState { hidden: h0.clone(), cell: c0.clone() }
        } else {
            let r0 = (steps - 1) * batch;
            RecurrentState { hidden: hs[r0 * h..].to_vec(), cell: c[r0 * h..].to_vec() }
        };
        Ok(Forward {
            steps,
            batch,
            output,
            final_state,
            trunk_in,
            trunk_xhat,
            trunk_rstd,
            trunk_pre,
            lstm_x,
            gates,
            c,
            h: hs,
            tanh_c,
            h0,
            c0,
            active: input.active.map(|a| a.to_vec()),
            head_in,
            head_pre,
            out_in: x,
        })
    }

    fn check_seed(&self, fwd: &Forward, d_out: &[f64], burn_in: usize) -> Result<()> {
        let expect = fwd.steps * fwd.batch * self.spec.output_dim;
        if d_out.len() != expect {
            return Err(Error::Usage(format!(
                "output gradient has {} entries, expected {expect} (one per network output)",
                d_out.len()
            )));
        }
        if burn_in > fwd.steps {
            return Err(Error::Usage(format!("burn-in {burn_in} exceeds window length {}", fwd.steps)));
        }
        Ok(())
    }

    /// Head backward over rows `r0..`; returns `d(head input)` for those rows.
    fn head_backward(&self, params: &[f64], fwd: &Forward, d_out: &[f64], r0: usize, grads: &mut [f64]) -> Vec<f64> {
        let rows = fwd.steps * fwd.batch - r0;
        let leak = self.spec.leak;
        let d = &self.out;
        let mut dz = d_out[r0 * d.fan_out..].to_vec();
        let mut layer_in: &[f64] = &fwd.out_in[r0 * d.fan_in..];
        gemm(d.fan_in, rows, d.fan_out, 1.0, layer_in, true, &dz, false, 1.0, &mut grads[d.w..d.w + d.fan_in * d.fan_out]);
        col_sums_into(&dz, &mut grads[d.b..d.b + d.fan_out]);
        let mut dx = vec![0.0; rows * d.fan_in];
        gemm(rows, d.fan_out, d.fan_in, 1.0, &dz, false, &params[d.w..], true, 0.0, &mut dx);
        for (li, d) in self.head.iter().enumerate().rev() {
            let pre = &fwd.head_pre[li][r0 * d.fan_out..];
            dz = dx;
            for (g, &z) in dz.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *g *= leak;
                }
            }
            layer_in = &fwd.head_in[li][r0 * d.fan_in..];
            gemm(d.fan_in, rows, d.fan_out, 1.0, layer_in, true, &dz, false, 1.0, &mut grads[d.w..d.w + d.fan_in * d.fan_out]);
            col_sums_into(&dz, &mut grads[d.b..d.b + d.fan_out]);
            dx = vec![0.0; rows * d.fan_in];
            gemm(rows, d.fan_out, d.fan_in, 1.0, &dz, false, &params[d.w..], true, 0.0, &mut dx);
        }
        dx
    }

    /// Gradient of `sum(d_out * output)` with respect to the action inputs
    /// only. Cheaper than [`Network::backward`]: stops at the head.
    pub fn action_grad(&self, params: &[f64], fwd: &Forward, d_out: &[f64]) -> Result<Vec<f64>> {
        self.check_seed(fwd, d_out, 0)?;
        let a = self.spec.action_dim;
        if a == 0 {
            return Err(Error::Usage("network takes no action input".into()));
        }
        let mut scratch = vec![0.0; self.n_params];
        let dx = self.head_backward(params, fwd, d_out, 0, &mut scratch);
        let h = self.spec.hidden;
        Ok(dx.chunks_exact(h + a).flat_map(|r| r[h..].to_vec()).collect())
    }

    /// Exact gradient of `sum(d_out * output)` over the window. The first
    /// `burn_in` steps only provide the recurrent state: their outputs carry
    /// no gradient and nothing flows back into them.
    pub fn backward(&self, params: &[f64], fwd: &Forward, d_out: &[f64], burn_in: usize) -> Result<Gradients> {
        self.check_seed(fwd, d_out, burn_in)?;
        let (steps, batch) = (fwd.steps, fwd.batch);
        let h = self.spec.hidden;
        let a = self.spec.action_dim;
        let g4 = 4 * h;
        let mut grads = vec![0.0; self.n_params];
        let mut d_actions = vec![0.0; steps * batch * a];
        if burn_in == steps {
            return Ok(Gradients { params: grads, actions: d_actions });
        }
        let r0 = burn_in * batch;
        let rows = steps * batch - r0;

        let dx = self.head_backward(params, fwd, d_out, r0, &mut grads);
        let mut dh_out = vec![0.0; rows * h];
        for (r, row) in dx.chunks_exact(h + a).enumerate() {
            dh_out[r * h..(r + 1) * h].copy_from_slice(&row[..h]);
            d_actions[(r0 + r) * a..(r0 + r + 1) * a].copy_from_slice(&row[h..]);
        }

        // recurrent core, back through time down to the end of the burn-in
        let mut dgates = vec![0.0; rows * g4];
        let mut dh_next = vec![0.0; batch * h];
        let mut dc_next = vec![0.0; batch * h];
        let wh = &params[self.wh..self.wh + h * g4];
        for t in (burn_in..steps).rev() {
            let rt = t * batch;
            for b in 0..batch {
                let r = rt + b;
                let m = fwd.active.as_ref().map_or(1.0, |v| v[r]);
                let gr = &fwd.gates[r * g4..(r + 1) * g4];
                let dg = &mut dgates[(r - r0) * g4..(r - r0 + 1) * g4];
                for k in 0..h {
                    let dh = m * (dh_out[(r - r0) * h + k] + dh_next[b * h + k]);
                    let (i, f, g, o) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                    let tc = fwd.tanh_c[r * h + k];
                    let cp = if t == 0 { fwd.c0[b * h + k] } else { fwd.c[(r - batch) * h + k] };
                    let dc = m * dc_next[b * h + k] + dh * o * (1.0 - tc * tc);
                    dg[k] = dc * g * i * (1.0 - i);
                    dg[h + k] = dc * cp * f * (1.0 - f);
                    dg[2 * h + k] = dc * i * (1.0 - g * g);
                    dg[3 * h + k] = dh * tc * o * (1.0 - o);
                    dc_next[b * h + k] = dc * f;
                }
            }
            let dg_t = &dgates[(rt - r0) * g4..(rt - r0 + batch) * g4];
            let h_prev: &[f64] = if t == 0 { &fwd.h0 } else { &fwd.h[(rt - batch) * h..rt * h] };
            gemm(h, batch, g4, 1.0, h_prev, true, dg_t, false, 1.0, &mut grads[self.wh..self.wh + h * g4]);
            if t > burn_in {
                gemm(batch, g4, h, 1.0, dg_t, false, wh, true, 0.0, &mut dh_next);
            }
        }
        let lx = &fwd.lstm_x[r0 * self.lstm_in..];
        gemm(self.lstm_in, rows, g4, 1.0, lx, true, &dgates, false, 1.0, &mut grads[self.wx..self.wx + self.lstm_in * g4]);
        col_sums_into(&dgates, &mut grads[self.bl..self.bl + g4]);
        if self.trunk.is_empty() {
            return Ok(Gradients { params: grads, actions: d_actions });
        }
        let mut dx = vec![0.0; rows * self.lstm_in];
        gemm(rows, g4, self.lstm_in, 1.0, &dgates, false, &params[self.wx..], true, 0.0, &mut dx);

        let leak = self.spec.leak;
        for (li, d) in self.trunk.iter().enumerate().rev() {
            let pre = &fwd.trunk_pre[li][r0 * d.fan_out..];
            let mut dz = dx;
            for (g, &z) in dz.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *g *= leak;
                }
            }
            if let Some((gi, si)) = d.ln {
                let xhat = &fwd.trunk_xhat[li][r0 * d.fan_out..];
                let rstd = &fwd.trunk_rstd[li][r0..];
                let n = d.fan_out as f64;
                for r in 0..rows {
                    let dy = &mut dz[r * d.fan_out..(r + 1) * d.fan_out];
                    let xh = &xhat[r * d.fan_out..(r + 1) * d.fan_out];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for k in 0..d.fan_out {
                        grads[gi + k] += dy[k] * xh[k];
                        grads[si + k] += dy[k];
                        let dxh = dy[k] * params[gi + k];
                        s1 += dxh;
                        s2 += dxh * xh[k];
                        dy[k] = dxh;
                    }
                    let (m1, m2) = (s1 / n, s2 / n);
                    for k in 0..d.fan_out {
                        dy[k] = rstd[r] * (dy[k] - m1 - xh[k] * m2);
                    }
                }
            }
            let layer_in = &fwd.trunk_in[li][r0 * d.fan_in..];
            gemm(d.fan_in, rows, d.fan_out, 1.0, layer_in, true, &dz, false, 1.0, &mut grads[d.w..d.w + d.fan_in * d.fan_out]);
            col_sums_into(&dz, &mut grads[d.b..d.b + d.fan_out]);
            if li == 0 {
                break;
            }
            dx = vec![0.0; rows * d.fan_in];
            gemm(rows, d.fan_out, d.fan_in, 1.0, &dz, false, &params[d.w..], true, 0.0, &mut dx);
        }
        Ok(Gradients { params: grads, actions: d_actions })
    }
}

/// Fills `out` (`rows x cols`, row-major) with a matrix whose shorter side
/// is orthonormal: Gram-Schmidt on Gaussian vectors.
pub fn orthogonal_into<R: Rng + ?Sized>(out: &mut [f64], rows: usize, cols: usize, rng: &mut R) {
    let (n, m) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    // n orthonormal vectors of length m
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &vecs {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nrm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nrm);
            vecs.push(v);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols { vecs[c][r] } else { vecs[r][c] };
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn layer_norm_of_constant_vector_is_the_shift() {
        let spec = NetSpec { input_dim: 2, trunk: vec![4], hidden: 1, head: vec![], action_dim: 0, output_dim: 1, layer_norm: true, leak: 0.01 };
        let net = Network::new(spec).unwrap();
        let mut params = vec![0.0; net.n_params()];
        let shift = [0.5, -1.25, 2.0, 0.0];
        for b in net.blocks().to_vec() {
            match b.name.as_str() {
                // zero weights and a common bias make the pre-normalisation row constant
                "trunk0.b" => params[b.range()].iter_mut().for_each(|x| *x = 3.0),
                "trunk0.ln_gain" => params[b.range()].iter_mut().for_each(|x| *x = 7.0),
                "trunk0.ln_shift" => params[b.range()].copy_from_slice(&shift),
                _ => {}
            }
        }
        let input = SeqInput { steps: 1, batch: 1, obs: &[0.4, -0.2], actions: None, active: None };
        let fwd = net.forward(&params, &input, None).unwrap();
        assert!(fwd.trunk_xhat[0].iter().all(|&x| x == 0.0));
        assert_eq!(fwd.trunk_pre[0], shift.to_vec());
    }

    #[test]
    fn linear_output_layer_gradient_is_outer_product() {
        // loss = 0.5 |y|^2 with y = x W + b: dW = x^T y, db = sum y
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = NetSpec { input_dim: 3, trunk: vec![], hidden: 4, head: vec![], action_dim: 0, output_dim: 2, layer_norm: false, leak: 0.01 };
        let net = Network::new(spec).unwrap();
        let params = net.init_params(InitScheme::Normal, InitScheme::Orthogonal, &mut rng);
        let obs: Vec<f64> = (0..3 * 5).map(|k| (k as f64 * 0.7).sin()).collect();
        let input = SeqInput { steps: 5, batch: 1, obs: &obs, actions: None, active: None };
        let fwd = net.forward(&params, &input, None).unwrap();
        let y = fwd.output.clone();
        let g = net.backward(&params, &fwd, &y, 0).unwrap();
        let w = net.blocks().iter().find(|b| b.name == "out.w").unwrap();
        let b = net.blocks().iter().find(|b| b.name == "out.b").unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let expect: f64 = (0..5).map(|r| fwd.out_in[r * 4 + i] * y[r * 2 + j]).sum();
                assert!((g.params[w.offset + i * 2 + j] - expect).abs() < 1e-14);
            }
        }
        for j in 0..2 {
            let expect: f64 = (0..5).map(|r| y[r * 2 + j]).sum();
            assert!((g.params[b.offset + j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (r, c) in [(6, 6), (4, 9), (9, 4)] {
            let mut m = vec![0.0; r * c];
            orthogonal_into(&mut m, r, c, &mut rng);
            let n = r.min(c);
            for a in 0..n {
                for b in 0..n {
                    let d: f64 = if r >= c {
                        (0..r).map(|k| m[k * c + a] * m[k * c + b]).sum()
                    } else {
                        (0..c).map(|k| m[a * c + k] * m[b * c + k]).sum()
                    };
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((d - e).abs() < 1e-12);
                }
            }
        }
    }
}
