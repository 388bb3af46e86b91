//! Time-resolved gridded fields and their point sampling.
//!
//! A [`FieldSeries`] is immutable once built. Environments only ever read it
//! through [`FieldSeries::sample`], which interpolates bilinearly in space and
//! linearly in time. Concentration gradients are formed on the nodes first
//! (central differences, one-sided at the edges) and then interpolated the
//! same way as the other fields.
//!
//! The on-disk representation is the little-endian ODRF v1 layout written by
//! [`save`] and read by [`load`].

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::{Error, Result, Vec2};

pub const MAGIC: &[u8; 4] = b"ODRF";
pub const VERSION: u32 = 1;
/// Bytes before the first frame: magic, four u32 and eleven f64.
pub const HEADER_LEN: usize = 4 + 4 * 4 + 11 * 8;

/// Slack allowed on time queries at the ends of the window, in units of
/// `frame_dt`. Absorbs round-off from `t0 + k * dt` accumulation.
const TIME_SLACK: f64 = 1e-9;

/// Physical parameters the fields were generated with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldMeta {
    pub re: f64,
    pub sc: f64,
    pub j: f64,
    pub delta: f64,
}

/// One recorded snapshot. Arrays are row-major with x varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub c: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    nx: usize,
    ny: usize,
    dx: f64,
    origin: Vec2,
    frame_dt: f64,
    t0: f64,
    source: Vec2,
    meta: FieldMeta,
    frames: Vec<Frame>,
}

/// Local percept at a point: concentration, its gradient and the flow velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub c: f64,
    pub grad_c: Vec2,
    pub u_f: Vec2,
}

impl FieldSeries {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nx: usize,
        ny: usize,
        dx: f64,
        origin: Vec2,
        frame_dt: f64,
        t0: f64,
        source: Vec2,
        meta: FieldMeta,
        frames: Vec<Frame>,
    ) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Usage(format!("grid must be at least 2x2, got {nx}x{ny}")));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::Usage(format!("grid spacing must be positive, got {dx}")));
        }
        if frames.len() < 2 {
            return Err(Error::Usage(format!("need at least 2 frames, got {}", frames.len())));
        }
        if !(frame_dt > 0.0 && frame_dt.is_finite()) {
            return Err(Error::Usage(format!("frame_dt must be positive, got {frame_dt}")));
        }
        let n = nx * ny;
        for (k, f) in frames.iter().enumerate() {
            if f.u.len() != n || f.v.len() != n || f.c.len() != n {
                return Err(Error::Usage(format!(
                    "frame {k}: arrays must have {n} entries (u={}, v={}, c={})",
                    f.u.len(),
                    f.v.len(),
                    f.c.len()
                )));
            }
        }
        Ok(Self { nx, ny, dx, origin, frame_dt, t0, source, meta, frames })
    }

    /// Builds a series by evaluating `f(t, x, y) -> (u, v, c)` at every node
    /// of every frame, with `t` measured from `t0 = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn(
        nx: usize,
        ny: usize,
        dx: f64,
        origin: Vec2,
        n_frames: usize,
        frame_dt: f64,
        source: Vec2,
        meta: FieldMeta,
        f: impl Fn(f64, f64, f64) -> (f64, f64, f64),
    ) -> Result<Self> {
        let frames = (0..n_frames)
            .map(|k| {
                let t = k as f64 * frame_dt;
                let mut fr = Frame { u: vec![0.0; nx * ny], v: vec![0.0; nx * ny], c: vec![0.0; nx * ny] };
                for j in 0..ny {
                    for i in 0..nx {
                        let (u, v, c) = f(t, origin[0] + i as f64 * dx, origin[1] + j as f64 * dx);
                        fr.u[j * nx + i] = u as f32;
                        fr.v[j * nx + i] = v as f32;
                        fr.c[j * nx + i] = c as f32;
                    }
                }
                fr
            })
            .collect();
        Self::new(nx, ny, dx, origin, frame_dt, 0.0, source, meta, frames)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn frame_dt(&self) -> f64 {
        self.frame_dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_last(&self) -> f64 {
        self.t0 + self.frame_dt * (self.frames.len() - 1) as f64
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn source_position(&self) -> Vec2 {
        self.source
    }

    pub fn meta(&self) -> FieldMeta {
        self.meta
    }

    /// Lower-left and upper-right corners of the sampling hull.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let hi = [
            self.origin[0] + self.dx * (self.nx - 1) as f64,
            self.origin[1] + self.dx * (self.ny - 1) as f64,
        ];
        (self.origin, hi)
    }

    pub fn contains(&self, x: Vec2) -> bool {
        let (lo, hi) = self.bounds();
        x[0] >= lo[0] && x[0] <= hi[0] && x[1] >= lo[1] && x[1] <= hi[1]
    }

    /// Hex digest of the grid geometry and physical parameters, excluding the
    /// source position. Checkpoints record it to catch mismatched field banks.
    pub fn grid_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.nx as u64).to_le_bytes());
        h.update((self.ny as u64).to_le_bytes());
        for v in [
            self.dx,
            self.origin[0],
            self.origin[1],
            self.frame_dt,
            self.meta.re,
            self.meta.sc,
            self.meta.j,
            self.meta.delta,
        ] {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }

    /// Hex digest of the full header including the source position.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.grid_hash().as_bytes());
        h.update(self.source[0].to_le_bytes());
        h.update(self.source[1].to_le_bytes());
        h.update(self.t0.to_le_bytes());
        h.update((self.frames.len() as u64).to_le_bytes());
        hex_digest(h)
    }

    /// Interpolated percept at position `x` and time `t`.
    pub fn sample(&self, x: Vec2, t: f64) -> Result<FieldSample> {
        if !(x[0].is_finite() && x[1].is_finite()) || !self.contains(x) {
            let (lo, hi) = self.bounds();
            return Err(Error::OutOfDomain(format!(
                "position ({:.4}, {:.4}) outside [{:.3}, {:.3}]x[{:.3}, {:.3}]",
                x[0], x[1], lo[0], hi[0], lo[1], hi[1]
            )));
        }
        let (k, wt) = self.time_bracket(t)?;

        let fx = (x[0] - self.origin[0]) / self.dx;
        let fy = (x[1] - self.origin[1]) / self.dx;
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        let wx = fx - i as f64;
        let wy = fy - j as f64;

        let a = self.sample_frame(&self.frames[k], i, j, wx, wy);
        if wt == 0.0 {
            return Ok(a);
        }
        let b = self.sample_frame(&self.frames[k + 1], i, j, wx, wy);
        let lerp = |p: f64, q: f64| p + wt * (q - p);
        Ok(FieldSample {
            c: lerp(a.c, b.c),
            grad_c: [lerp(a.grad_c[0], b.grad_c[0]), lerp(a.grad_c[1], b.grad_c[1])],
            u_f: [lerp(a.u_f[0], b.u_f[0]), lerp(a.u_f[1], b.u_f[1])],
        })
    }

    fn time_bracket(&self, t: f64) -> Result<(usize, f64)> {
        let n = self.frames.len();
        let ft = (t - self.t0) / self.frame_dt;
        let last = (n - 1) as f64;
        if !ft.is_finite() || ft < -TIME_SLACK || ft > last + TIME_SLACK {
            return Err(Error::OutOfDomain(format!(
                "time {t:.6} outside [{:.6}, {:.6}]",
                self.t0,
                self.t_last()
            )));
        }
        let ft = ft.clamp(0.0, last);
        let k = (ft.floor() as usize).min(n - 2);
        Ok((k, ft - k as f64))
    }

    fn sample_frame(&self, f: &Frame, i: usize, j: usize, wx: f64, wy: f64) -> FieldSample {
        let nx = self.nx;
        let idx = |ii: usize, jj: usize| jj * nx + ii;
        let w = [
            (1.0 - wx) * (1.0 - wy),
            wx * (1.0 - wy),
            (1.0 - wx) * wy,
            wx * wy,
        ];
        let nodes = [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)];
        let mut out = FieldSample { c: 0.0, grad_c: [0.0; 2], u_f: [0.0; 2] };
        for (&(ii, jj), &wk) in nodes.iter().zip(&w) {
            let n = idx(ii, jj);
            let g = self.nodal_gradient(&f.c, ii, jj);
            out.c += wk * f.c[n] as f64;
            out.u_f[0] += wk * f.u[n] as f64;
            out.u_f[1] += wk * f.v[n] as f64;
            out.grad_c[0] += wk * g[0];
            out.grad_c[1] += wk * g[1];
        }
        out
    }

    fn nodal_gradient(&self, c: &[f32], i: usize, j: usize) -> Vec2 {
        let nx = self.nx;
        let at = |ii: usize, jj: usize| c[jj * nx + ii] as f64;
        let gx = if i == 0 {
            (at(1, j) - at(0, j)) / self.dx
        } else if i == nx - 1 {
            (at(i, j) - at(i - 1, j)) / self.dx
        } else {
            (at(i + 1, j) - at(i - 1, j)) / (2.0 * self.dx)
        };
        let gy = if j == 0 {
            (at(i, 1) - at(i, 0)) / self.dx
        } else if j == self.ny - 1 {
            (at(i, j) - at(i, j - 1)) / self.dx
        } else {
            (at(i, j + 1) - at(i, j - 1)) / (2.0 * self.dx)
        };
        [gx, gy]
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialized size of a series with the given dimensions.
pub fn encoded_len(nx: usize, ny: usize, n_frames: usize) -> usize {
    HEADER_LEN + n_frames * 3 * nx * ny * 4
}

pub fn save<W: Write>(series: &FieldSeries, sink: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(series.nx, series.ny, series.frames.len()));
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, series.nx as u32, series.ny as u32, series.frames.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        series.dx,
        series.origin[0],
        series.origin[1],
        series.frame_dt,
        series.t0,
        series.source[0],
        series.source[1],
        series.meta.re,
        series.meta.sc,
        series.meta.j,
        series.meta.delta,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for f in &series.frames {
        for arr in [&f.u, &f.v, &f.c] {
            for x in arr.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated while reading {what}: expected {} bytes, stream has {}",
                    self.pos + n,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load<R: Read>(source: &mut R) -> Result<FieldSeries> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<FieldSeries> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
    }
    let nx = cur.u32("nx")? as usize;
    let ny = cur.u32("ny")? as usize;
    let n_frames = cur.u32("n_frames")? as usize;
    let dx = cur.f64("dx")?;
    let origin = [cur.f64("origin_x")?, cur.f64("origin_y")?];
    let frame_dt = cur.f64("frame_dt")?;
    let t0 = cur.f64("t0")?;
    let source = [cur.f64("source_x")?, cur.f64("source_y")?];
    let meta = FieldMeta {
        re: cur.f64("Re")?,
        sc: cur.f64("Sc")?,
        j: cur.f64("J")?,
        delta: cur.f64("delta")?,
    };

    let expected = encoded_len(nx, ny, n_frames);
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: cur.pos.min(bytes.len()),
            message: format!("expected {expected} bytes for {nx}x{ny}x{n_frames}, found {}", bytes.len()),
        });
    }
    let n = nx * ny;
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let u = cur.f32s(n, &format!("frame {k} u"))?;
        let v = cur.f32s(n, &format!("frame {k} v"))?;
        let c = cur.f32s(n, &format!("frame {k} c"))?;
        frames.push(Frame { u, v, c });
    }
    FieldSeries::new(nx, ny, dx, origin, frame_dt, t0, source, meta, frames).map_err(|e| Error::Format {
        offset: HEADER_LEN,
        message: e.to_string(),
    })
}
