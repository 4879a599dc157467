//! Alignment-based deconvolution network: a U-Net over the centre frame and
//! its two occlusion-revised aligned neighbours, predicting a residual
//! correction of the centre frame.

use serde::{Deserialize, Serialize};
use vdeblur_autograd::{Graph, Real, Var};

use crate::error::{Error, Result};
use crate::nn::{ensure_divisible, Conv, Init, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbdnPreset {
    /// Same width at every level.
    Light,
    /// Width doubles at every level.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbdnConfig {
    pub preset: AbdnPreset,
    /// Width of the first level.
    pub width: usize,
    /// Number of downsampling levels.
    pub depth: usize,
}

impl Default for AbdnConfig {
    fn default() -> Self {
        Self { preset: AbdnPreset::Light, width: 32, depth: 3 }
    }
}

impl AbdnConfig {
    pub fn level_width(&self, level: usize) -> usize {
        match self.preset {
            AbdnPreset::Light => self.width,
            AbdnPreset::Full => self.width << level,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Abdn {
    pub depth: usize,
    pub input: Conv,
    /// Per level: strided conv, then a conv at the reduced size.
    pub down: Vec<(Conv, Conv)>,
    /// Per level, deepest first: conv after upsampling and skip concatenation.
    pub up: Vec<Conv>,
    pub out: Conv,
}

impl Abdn {
    pub fn new(pb: &mut ParamBuilder, cfg: &AbdnConfig, out_init: Init) -> Result<Self> {
        if cfg.width == 0 || cfg.depth == 0 {
            return Err(Error::Config("abdn.width and abdn.depth must be positive".into()));
        }
        let w = |l| cfg.level_width(l);
        let input = pb.conv("abdn.in", 9, w(0), 3, 1, Init::He)?;
        let mut down = Vec::with_capacity(cfg.depth);
        for l in 1..=cfg.depth {
            down.push((
                pb.conv(&format!("abdn.down{l}.stride"), w(l - 1), w(l), 3, 2, Init::He)?,
                pb.conv(&format!("abdn.down{l}.conv"), w(l), w(l), 3, 1, Init::He)?,
            ));
        }
        let mut up = Vec::with_capacity(cfg.depth);
        for l in (1..=cfg.depth).rev() {
            up.push(pb.conv(&format!("abdn.up{l}"), w(l) + w(l - 1), w(l - 1), 3, 1, Init::He)?);
        }
        let out = pb.conv("abdn.out", w(0), 3, 3, 1, out_init)?;
        Ok(Self { depth: cfg.depth, input, down, up, out })
    }

    /// Each input is `[N, 3, H, W]`; H and W must be divisible by `2^depth`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, forward: Var, center: Var, backward: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(center);
        ensure_divisible(h, w, 1 << self.depth, "abdn_forward")?;
        let x = g.concat_channels(&[forward, center, backward])?;
        let mut skips = vec![self.input.forward_relu(g, x)?];
        for (stride, conv) in &self.down {
            let prev = *skips.last().expect("non-empty");
            let d = stride.forward_relu(g, prev)?;
            skips.push(conv.forward_relu(g, d)?);
        }
        let mut cur = skips.pop().expect("non-empty");
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = g.upsample2x(cur);
            let cat = g.concat_channels(&[u, skip])?;
            cur = conv.forward_relu(g, cat)?;
        }
        let r = self.out.forward(g, cur)?;
        let d = g.add(center, r)?;
        Ok(g.clamp(d, T::zero(), T::one()))
    }
}
