use vdeblur_autograd::Resampler;

use super::FlowField;
use crate::error::Result;
use crate::frame::Frame;

/// Four taps and weights for bilinear sampling at `(px, py)`, with the
/// position clamped to the image border.
fn bilinear_taps(px: f64, py: f64, width: usize, height: usize) -> ([u32; 4], [f64; 4]) {
    let px = px.clamp(0.0, (width - 1) as f64);
    let py = py.clamp(0.0, (height - 1) as f64);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let idx = |x: usize, y: usize| (y * width + x) as u32;
    (
        [idx(x0, y0), idx(x1, y0), idx(x0, y1), idx(x1, y1)],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

/// Bilinearly samples a single plane at a continuous position (clamp-to-edge).
pub fn sample_bilinear(plane: &[f32], width: usize, height: usize, px: f64, py: f64) -> f64 {
    let (t, w) = bilinear_taps(px, py, width, height);
    (0..4).map(|j| w[j] * f64::from(plane[t[j] as usize])).sum()
}

/// Resampling map for backward warping: output pixel `x` reads the source at
/// `x + flow(x)`.
pub fn bilinear_plan(flow: &FlowField) -> Resampler {
    let (w, h) = flow.dims();
    let mut taps = Vec::with_capacity(w * h);
    let mut weights = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(x, y);
            let (t, wt) = bilinear_taps(x as f64 + f64::from(dx), y as f64 + f64::from(dy), w, h);
            taps.push(t);
            weights.push(wt);
        }
    }
    Resampler::new(h, w, h, w, taps, weights)
}

/// `output(x) = bilinear(src, x + flow(x))`, clamping samples to the border.
pub fn warp_backward(src: &Frame, flow: &FlowField) -> Result<Frame> {
    flow.ensure_dims(src.width(), src.height(), "warp_backward")?;
    let plan = bilinear_plan(flow);
    let mut out = Frame::new(src.width(), src.height());
    plan.apply(src.data(), out.data_mut());
    Ok(out)
}
