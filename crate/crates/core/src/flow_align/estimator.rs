use serde::{Deserialize, Serialize};

use super::warp::sample_bilinear;
use super::{FlowDirection, FlowField};
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const BUILTIN_BACKEND: &str = "builtin-pyramid";

/// Dense flow estimator. Implementations may keep scratch state, so a handle
/// is used from one thread at a time.
pub trait FlowBackend {
    fn name(&self) -> &str;

    /// Flow mapping `src` coordinates toward `dst`: `src(x) ~ dst(x + flow(x))`.
    fn estimate(&mut self, src: &Frame, dst: &Frame) -> Result<FlowField>;
}

/// Validates sizes, runs the backend and checks its output.
pub fn estimate_flow(src: &Frame, dst: &Frame, backend: &mut dyn FlowBackend) -> Result<FlowField> {
    src.ensure_same_dims(dst, "estimate_flow")?;
    let flow = backend.estimate(src, dst)?;
    flow.ensure_dims(src.width(), src.height(), "estimate_flow")?;
    if flow.dx().iter().chain(flow.dy()).any(|v| !v.is_finite()) {
        return Err(Error::Backend { backend: backend.name().to_string(), cause: "non-finite flow".into() });
    }
    Ok(flow)
}

/// Looks up a registered backend by name.
pub fn backend_by_name(name: &str) -> Result<Box<dyn FlowBackend + Send>> {
    match name {
        BUILTIN_BACKEND => Ok(Box::new(PyramidFlow::default())),
        other => Err(Error::Backend {
            backend: other.to_string(),
            cause: format!("unknown flow backend (available: {BUILTIN_BACKEND})"),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidFlowConfig {
    pub levels: usize,
    /// Block-matching search radius at the coarsest level, in pixels of that level.
    pub search_radius: usize,
    /// Refinement iterations per level.
    pub iterations: usize,
    /// Half-size of the square aggregation window.
    pub window_radius: usize,
    /// Tikhonov weight on each refinement increment.
    pub damping: f64,
}

impl Default for PyramidFlowConfig {
    fn default() -> Self {
        Self { levels: 3, search_radius: 3, iterations: 5, window_radius: 2, damping: 1e-3 }
    }
}

/// Coarse-to-fine estimator: exhaustive block matching on the coarsest level,
/// then damped Lucas-Kanade refinement with median filtering on every level.
#[derive(Clone, Debug, Default)]
pub struct PyramidFlow {
    pub config: PyramidFlowConfig,
}

impl PyramidFlow {
    pub fn new(config: PyramidFlowConfig) -> Self {
        Self { config }
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let s = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                v.push(s * 0.25);
            }
        }
        Plane { w, h, v }
    }

    /// Sum over a (2r+1)^2 window, clamped at the border.
    fn box_sum(&self, r: usize) -> Plane {
        let (w, h) = (self.w, self.h);
        let mut rows = vec![0.0f32; w * h];
        let mut padded = vec![0.0f32; w.max(h) + 2 * r];
        for y in 0..h {
            let src = &self.v[y * w..(y + 1) * w];
            for (i, p) in padded[..w + 2 * r].iter_mut().enumerate() {
                *p = src[i.saturating_sub(r).min(w - 1)];
            }
            sliding_sum(&padded[..w + 2 * r], r, &mut rows[y * w..(y + 1) * w]);
        }
        let mut v = vec![0.0f32; w * h];
        let mut col = vec![0.0f32; h];
        for x in 0..w {
            for (i, p) in padded[..h + 2 * r].iter_mut().enumerate() {
                *p = rows[i.saturating_sub(r).min(h - 1) * w + x];
            }
            sliding_sum(&padded[..h + 2 * r], r, &mut col);
            for (y, &c) in col.iter().enumerate() {
                v[y * w + x] = c;
            }
        }
        Plane { w, h, v }
    }

    fn median3(&self) -> Plane {
        let mut v = Vec::with_capacity(self.v.len());
        let mut buf = [0.0f32; 9];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut k = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        buf[k] = self.at(x + dx, y + dy);
                        k += 1;
                    }
                }
                buf.sort_by(f32::total_cmp);
                v.push(buf[4]);
            }
        }
        Plane { w: self.w, h: self.h, v }
    }
}

/// `out[i] = sum(padded[i..i + 2r + 1])`.
fn sliding_sum(padded: &[f32], r: usize, out: &mut [f32]) {
    let win = 2 * r + 1;
    let mut acc: f32 = padded[..win].iter().sum();
    out[0] = acc;
    for i in 1..out.len() {
        acc += padded[i + win - 1] - padded[i - 1];
        out[i] = acc;
    }
}

fn pyramid(frame: &Frame, levels: usize) -> Vec<Plane> {
    let mut out = vec![Plane { w: frame.width(), h: frame.height(), v: frame.luma() }];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.w < 16 || last.h < 16 {
            break;
        }
        out.push(last.downsample());
    }
    out
}

/// Integer displacement minimising windowed SSD, with a small bias toward
/// short vectors so textureless regions stay at zero.
fn block_match(src: &Plane, dst: &Plane, radius: usize, win: usize) -> (Plane, Plane) {
    let (w, h) = (src.w, src.h);
    let r = radius as isize;
    let mut best = vec![f32::INFINITY; w * h];
    let mut fx = vec![0.0f32; w * h];
    let mut fy = vec![0.0f32; w * h];
    for dy in -r..=r {
        for dx in -r..=r {
            let diff = Plane {
                w,
                h,
                v: (0..w * h)
                    .map(|i| {
                        let (x, y) = ((i % w) as isize, (i / w) as isize);
                        let d = src.v[i] - dst.at(x + dx, y + dy);
                        d * d
                    })
                    .collect(),
            };
            let ssd = diff.box_sum(win);
            let bias = 1e-4 * (dx * dx + dy * dy) as f32;
            for i in 0..w * h {
                let cost = ssd.v[i] + bias;
                if cost < best[i] {
                    best[i] = cost;
                    fx[i] = dx as f32;
                    fy[i] = dy as f32;
                }
            }
        }
    }
    (Plane { w, h, v: fx }, Plane { w, h, v: fy })
}

/// Lucas-Kanade refinement linearised around the source frame, so the
/// structure tensor is computed once per level.
fn refine(src: &Plane, dst: &Plane, fx: &mut Plane, fy: &mut Plane, cfg: &PyramidFlowConfig) {
    let (w, h) = (src.w, src.h);
    let n = w * h;
    let mut gx = vec![0.0f32; n];
    let mut gy = vec![0.0f32; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = 0.5 * (src.at(x + 1, y) - src.at(x - 1, y));
            gy[i] = 0.5 * (src.at(x, y + 1) - src.at(x, y - 1));
        }
    }
    let boxed = |v: Vec<f32>| Plane { w, h, v }.box_sum(cfg.window_radius).v;
    let sxx = boxed(gx.iter().map(|g| g * g).collect());
    let sxy = boxed(gx.iter().zip(&gy).map(|(a, b)| a * b).collect());
    let syy = boxed(gy.iter().map(|g| g * g).collect());
    for _ in 0..cfg.iterations {
        let mut xt = vec![0.0f32; n];
        let mut yt = vec![0.0f32; n];
        for i in 0..n {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let warped = sample_bilinear(&dst.v, w, h, x + f64::from(fx.v[i]), y + f64::from(fy.v[i])) as f32;
            let gt = warped - src.v[i];
            xt[i] = gx[i] * gt;
            yt[i] = gy[i] * gt;
        }
        let (sxt, syt) = (boxed(xt), boxed(yt));
        for i in 0..n {
            let a = f64::from(sxx[i]) + cfg.damping;
            let b = f64::from(sxy[i]);
            let c = f64::from(syy[i]) + cfg.damping;
            let (p, q) = (-f64::from(sxt[i]), -f64::from(syt[i]));
            let det = a * c - b * b;
            if det <= 0.0 {
                continue;
            }
            fx.v[i] += ((c * p - b * q) / det).clamp(-1.0, 1.0) as f32;
            fy.v[i] += ((a * q - b * p) / det).clamp(-1.0, 1.0) as f32;
        }
    }
    *fx = fx.median3();
    *fy = fy.median3();
}

/// Bilinear resize of a flow component to a finer level, scaling vectors by 2.
fn upsample_flow(f: &Plane, w: usize, h: usize) -> Plane {
    let v = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            2.0 * sample_bilinear(&f.v, f.w, f.h, (x + 0.5) / 2.0 - 0.5, (y + 0.5) / 2.0 - 0.5) as f32
        })
        .collect();
    Plane { w, h, v }
}

impl FlowBackend for PyramidFlow {
    fn name(&self) -> &str {
        BUILTIN_BACKEND
    }

    fn estimate(&mut self, src: &Frame, dst: &Frame) -> Result<FlowField> {
        src.ensure_same_dims(dst, "estimate_flow")?;
        if self.config.levels == 0 {
            return Err(Error::Backend { backend: BUILTIN_BACKEND.into(), cause: "levels must be at least 1".into() });
        }
        let ps = pyramid(src, self.config.levels);
        let pd = pyramid(dst, self.config.levels);
        let top = ps.len() - 1;
        let (mut fx, mut fy) = block_match(&ps[top], &pd[top], self.config.search_radius, self.config.window_radius);
        for level in (0..=top).rev() {
            let (s, d) = (&ps[level], &pd[level]);
            if level != top {
                fx = upsample_flow(&fx, s.w, s.h);
                fy = upsample_flow(&fy, s.w, s.h);
            }
            refine(s, d, &mut fx, &mut fy, &self.config);
        }
        Ok(FlowField::from_components(src.width(), src.height(), fx.v, fy.v)?.with_direction(FlowDirection::Forward))
    }
}
