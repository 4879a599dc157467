//! Frame aggregation network: per-pixel reliability weights over three
//! candidate frames (warped previous output, current deblurred frame, warped
//! next deblurred frame), merged as a convex combination.

use serde::{Deserialize, Serialize};
use vdeblur_autograd::{Graph, Real, Var};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{ensure_divisible, Conv, Init, ParamBuilder};

const FLOW_FEATURES: usize = 8;

/// Logit bias that makes an untrained network pass the centre candidate
/// through (other weights are about `e^-12`).
pub const CENTER_BIAS: f32 = 12.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FanConfig {
    pub width: usize,
    /// Flows are divided by this before entering the network.
    pub flow_scale: f32,
}

impl Default for FanConfig {
    fn default() -> Self {
        Self { width: 32, flow_scale: 8.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Fan {
    pub flow_scale: f32,
    pub flow: Conv,
    pub input: Conv,
    pub down: Conv,
    pub mid: Conv,
    pub up: Conv,
    pub logits: Conv,
}

impl Fan {
    pub fn new(pb: &mut ParamBuilder, cfg: &FanConfig, logit_init: Init, logit_bias: [f32; 3]) -> Result<Self> {
        let c = cfg.width;
        if c == 0 || !(cfg.flow_scale > 0.0) {
            return Err(Error::Config("fan.width and fan.flow_scale must be positive".into()));
        }
        let fan = Self {
            flow_scale: cfg.flow_scale,
            flow: pb.conv("fan.flow", 4, FLOW_FEATURES, 3, 1, Init::He)?,
            input: pb.conv("fan.in", 9 + 2 + FLOW_FEATURES, c, 3, 1, Init::He)?,
            down: pb.conv("fan.down", c, c, 3, 2, Init::He)?,
            mid: pb.conv("fan.mid", c, c, 3, 1, Init::He)?,
            up: pb.conv("fan.up", 2 * c, c, 3, 1, Init::He)?,
            logits: pb.conv("fan.logits", c, 3, 3, 1, logit_init)?,
        };
        pb.set_bias(&fan.logits, &logit_bias)?;
        Ok(fan)
    }

    /// Reliability maps `[N, 3, H, W]`, softmax-normalised over the channel axis.
    ///
    /// `candidates` is `[N, 9, H, W]` (three RGB frames), `occlusion` is
    /// `[N, 2, H, W]` and `flows` is `[N, 4, H, W]` in pixels.
    pub fn reliability<T: Real>(&self, g: &mut Graph<T>, candidates: Var, occlusion: Var, flows: Var) -> Result<Var> {
        let [n, c, h, w] = g.shape(candidates);
        if c != 9 || g.shape(occlusion) != [n, 2, h, w] || g.shape(flows) != [n, 4, h, w] {
            return Err(Error::Dimension(format!(
                "fan_reliability: candidates {:?}, occlusion {:?}, flows {:?}",
                g.shape(candidates),
                g.shape(occlusion),
                g.shape(flows)
            )));
        }
        ensure_divisible(h, w, 2, "fan_reliability")?;
        let flows = g.scale(flows, T::from_f64(1.0 / f64::from(self.flow_scale)));
        let ff = self.flow.forward_relu(g, flows)?;
        let x = g.concat_channels(&[candidates, occlusion, ff])?;
        let e = self.input.forward_relu(g, x)?;
        let d = self.down.forward_relu(g, e)?;
        let d = self.mid.forward_relu(g, d)?;
        let u = g.upsample2x(d);
        let cat = g.concat_channels(&[u, e])?;
        let u = self.up.forward_relu(g, cat)?;
        let logits = self.logits.forward(g, u)?;
        Ok(g.softmax_channels(logits))
    }
}

/// `sum_k candidate_k * rm_k`, one weight per pixel shared across RGB.
pub fn aggregate<T: Real>(g: &mut Graph<T>, candidates: [Var; 3], rms: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (k, &c) in candidates.iter().enumerate() {
        let m = g.slice_channels(rms, k, 1)?;
        terms.push(g.mul_broadcast(c, m)?);
    }
    let s = g.add(terms[0], terms[1])?;
    Ok(g.add(s, terms[2])?)
}

/// Per-pixel weights for the previous, centre and next candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityTriplet {
    width: usize,
    height: usize,
    maps: [Vec<f32>; 3],
}

impl ReliabilityTriplet {
    pub const TOLERANCE: f32 = 1e-5;

    pub fn new(width: usize, height: usize, maps: [Vec<f32>; 3]) -> Result<Self> {
        if maps.iter().any(|m| m.len() != width * height) {
            return Err(Error::Dimension(format!("reliability maps do not cover {width}x{height}")));
        }
        for i in 0..width * height {
            let (a, b, c) = (maps[0][i], maps[1][i], maps[2][i]);
            if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > Self::TOLERANCE || !(a + b + c).is_finite() {
                return Err(Error::Argument(format!("reliability maps not normalised at pixel {i}: {a}, {b}, {c}")));
            }
        }
        Ok(Self { width, height, maps })
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        let third = vec![1.0 / 3.0; width * height];
        Self { width, height, maps: [third.clone(), third.clone(), third] }
    }

    /// Builds a triplet from a `[1, 3, H, W]` map tensor.
    pub fn from_tensor<T: Real>(t: &vdeblur_autograd::Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 {
            return Err(Error::Dimension(format!("reliability tensor must be [1, 3, H, W], got {:?}", t.shape())));
        }
        let plane = |k: usize| t.data()[k * h * w..(k + 1) * h * w].iter().map(|v| v.as_f64() as f32).collect();
        Self::new(w, h, [plane(0), plane(1), plane(2)])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn map(&self, k: usize) -> &[f32] {
        &self.maps[k]
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.maps[k].iter().map(|&v| f64::from(v)).sum::<f64>() / self.maps[k].len().max(1) as f64
    }
}

/// Value-level aggregation of three candidate frames.
pub fn fan_aggregate(candidates: [&Frame; 3], rms: &ReliabilityTriplet) -> Result<Frame> {
    for c in &candidates[1..] {
        candidates[0].ensure_same_dims(c, "fan_aggregate")?;
    }
    if candidates[0].dims() != rms.dims() {
        return Err(Error::Dimension(format!(
            "fan_aggregate: maps are {:?}, frames {:?}",
            rms.dims(),
            candidates[0].dims()
        )));
    }
    let n = candidates[0].plane_len();
    let mut out = Frame::new(rms.width, rms.height);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let p = i % n;
        *v = candidates[0].data()[i] * rms.maps[0][p]
            + candidates[1].data()[i] * rms.maps[1][p]
            + candidates[2].data()[i] * rms.maps[2][p];
    }
    Ok(out)
}
