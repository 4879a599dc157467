use serde::{Deserialize, Serialize};

use super::warp::sample_bilinear;
use super::FlowField;
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionParams {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self { alpha1: 0.01, alpha2: 0.5 }
    }
}

impl OcclusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 >= 0.0 && self.alpha2 >= 0.0 {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "occlusion thresholds must be non-negative (alpha1 {}, alpha2 {})",
                self.alpha1, self.alpha2
            )))
        }
    }
}

/// Binary per-pixel visibility: 1 where the pixel is consistently tracked,
/// 0 where it is treated as occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMap {
    width: usize,
    height: usize,
    mask: Vec<f32>,
}

impl OcclusionMap {
    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, mask: vec![1.0; width * height] }
    }

    pub fn new(width: usize, height: usize, mask: Vec<f32>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::Dimension(format!("mask has {} values for {width}x{height}", mask.len())));
        }
        if let Some(v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Argument(format!("occlusion mask must be binary, found {v}")));
        }
        Ok(Self { width, height, mask })
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.mask[y * self.width + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.mask
    }

    /// Fraction of pixels marked visible.
    pub fn visible_fraction(&self) -> f64 {
        self.mask.iter().map(|&v| f64::from(v)).sum::<f64>() / self.mask.len().max(1) as f64
    }
}

/// Forward/backward consistency check.
///
/// `w_f` maps the reference frame to the neighbour and `w_b` maps the
/// neighbour back; `w_b` is sampled bilinearly at `x + w_f(x)`.
pub fn detect_occlusion(w_f: &FlowField, w_b: &FlowField, params: &OcclusionParams) -> Result<OcclusionMap> {
    params.validate()?;
    let (w, h) = w_f.dims();
    w_b.ensure_dims(w, h, "detect_occlusion")?;
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = w_f.at(x, y);
            let (fx, fy) = (f64::from(fx), f64::from(fy));
            let (px, py) = (x as f64 + fx, y as f64 + fy);
            let bx = sample_bilinear(w_b.dx(), w, h, px, py);
            let by = sample_bilinear(w_b.dy(), w, h, px, py);
            let lhs = ((fx + bx).powi(2) + (fy + by).powi(2)).sqrt();
            let rhs = params.alpha1 * (fx * fx + fy * fy + bx * bx + by * by) + params.alpha2;
            mask.push(if lhs < rhs { 1.0 } else { 0.0 });
        }
    }
    Ok(OcclusionMap { width: w, height: h, mask })
}

/// Keeps warped pixels where visible and falls back to the central frame
/// where occluded.
pub fn revise_warped(central: &Frame, warped: &Frame, occ: &OcclusionMap) -> Result<Frame> {
    central.ensure_same_dims(warped, "revise_warped")?;
    if occ.dims() != central.dims() {
        return Err(Error::Dimension(format!(
            "revise_warped: mask is {:?} but frames are {:?}",
            occ.dims(),
            central.dims()
        )));
    }
    let mut out = central.clone();
    let n = central.plane_len();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if occ.mask[i % n] == 1.0 {
            *v = warped.data()[i];
        }
    }
    Ok(out)
}
