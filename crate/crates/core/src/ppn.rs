//! Preprocessing network: a shared strided encoder applied to three
//! (blurry, companion) frame pairs, non-local attention across the three
//! feature grids, and a decoder that predicts a residual correction of each
//! blurry frame.

use serde::{Deserialize, Serialize};
use vdeblur_autograd::{Graph, Real, Var};

use crate::error::{Error, Result};
use crate::nn::{avg_pool2_plan, ensure_divisible, Conv, Init, ParamBuilder};

/// Total downsampling factor of the encoder.
pub const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpnConfig {
    pub width: usize,
    pub nlb_blocks: usize,
    /// Key/value paths are 2x subsampled when a feature grid has more
    /// positions than this.
    pub subsample_above: usize,
}

impl Default for PpnConfig {
    fn default() -> Self {
        Self { width: 32, nlb_blocks: 3, subsample_above: 64 * 64 }
    }
}

/// Embedded-Gaussian non-local block with a residual connection:
/// `z = x + W_z(softmax(theta(x)^T phi(x)) g(x))`.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub out: Conv,
    pub subsample_above: usize,
}

impl NonLocalBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        inner: usize,
        out_init: Init,
        subsample_above: usize,
    ) -> Result<Self> {
        Ok(Self {
            theta: pb.conv(&format!("{name}.theta"), channels, inner, 1, 1, Init::He)?,
            phi: pb.conv(&format!("{name}.phi"), channels, inner, 1, 1, Init::He)?,
            g: pb.conv(&format!("{name}.g"), channels, inner, 1, 1, Init::He)?,
            out: pb.conv(&format!("{name}.out"), inner, channels, 1, 1, out_init)?,
            subsample_above,
        })
    }

    /// Attention matrix `[1, 1, queries, keys]` and the value matrix
    /// `[1, 1, inner, keys]`.
    fn attend<T: Real>(&self, gr: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let [n, _, h, w] = gr.shape(x);
        if n != 1 {
            return Err(Error::Dimension(format!("non-local block expects a single grid, got batch {n}")));
        }
        let inner = self.theta.cout;
        let theta = self.theta.forward(gr, x)?;
        let theta = gr.reshape(theta, [1, 1, inner, h * w])?;
        let mut phi = self.phi.forward(gr, x)?;
        let mut g = self.g.forward(gr, x)?;
        let mut keys = h * w;
        if h * w > self.subsample_above {
            let plan = avg_pool2_plan(h, w);
            phi = gr.resample(phi, plan.clone())?;
            g = gr.resample(g, plan)?;
            keys = (h / 2) * (w / 2);
        }
        let phi = gr.reshape(phi, [1, 1, inner, keys])?;
        let g = gr.reshape(g, [1, 1, inner, keys])?;
        let affinity = gr.matmul(theta, true, phi, false)?;
        Ok((gr.softmax_rows(affinity), g))
    }

    /// Row-stochastic attention weights, one row per query position.
    pub fn attention<T: Real>(&self, gr: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(self.attend(gr, x)?.0)
    }

    pub fn forward<T: Real>(&self, gr: &mut Graph<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = gr.shape(x);
        let (attn, g) = self.attend(gr, x)?;
        let y = gr.matmul(g, false, attn, true)?;
        let y = gr.reshape(y, [1, self.theta.cout, h, w])?;
        let z = self.out.forward(gr, y)?;
        Ok(gr.add(x, z)?)
    }
}

#[derive(Clone, Debug)]
pub struct Ppn {
    pub width: usize,
    pub enc: [Conv; 3],
    pub blocks: Vec<NonLocalBlock>,
    pub dec: [Conv; 2],
    pub out: Conv,
}

impl Ppn {
    pub fn new(pb: &mut ParamBuilder, cfg: &PpnConfig, out_init: Init) -> Result<Self> {
        let c = cfg.width;
        if c == 0 {
            return Err(Error::Config("ppn.width must be positive".into()));
        }
        let fused = 3 * c;
        let blocks = (0..cfg.nlb_blocks)
            .map(|i| NonLocalBlock::new(pb, &format!("ppn.nlb{i}"), fused, fused / 2, out_init, cfg.subsample_above))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: c,
            enc: [
                pb.conv("ppn.enc0", 6, c, 3, 1, Init::He)?,
                pb.conv("ppn.enc1", c, c, 3, 2, Init::He)?,
                pb.conv("ppn.enc2", c, c, 3, 2, Init::He)?,
            ],
            blocks,
            dec: [pb.conv("ppn.dec0", c, c, 3, 1, Init::He)?, pb.conv("ppn.dec1", c + 6, c, 3, 1, Init::He)?],
            out: pb.conv("ppn.out", c, 3, 3, 1, out_init)?,
        })
    }

    /// `[N, 6, H, W]` frame groups to `[N, C, H/4, W/4]` features.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, groups: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(groups);
        if c != 6 {
            return Err(Error::Dimension(format!("ppn_encode expects 6 channels, got {c}")));
        }
        ensure_divisible(h, w, STRIDE, "ppn_encode")?;
        let mut f = groups;
        for conv in &self.enc {
            f = conv.forward_relu(g, f)?;
        }
        Ok(f)
    }

    /// Mixes three feature grids `[3, C, h, w]` through the chained
    /// non-local blocks on their channel concatenation.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, f: Var, use_nlb: bool) -> Result<Var> {
        let [n, c, h, w] = g.shape(f);
        if n != 3 || c != self.width {
            return Err(Error::Dimension(format!("non_local_fuse expects [3, {}, h, w], got {:?}", self.width, [n, c, h, w])));
        }
        if !use_nlb {
            return Ok(f);
        }
        let mut total = g.reshape(f, [1, 3 * c, h, w])?;
        for block in &self.blocks {
            total = block.forward(g, total)?;
        }
        Ok(g.reshape(total, [3, c, h, w])?)
    }

    /// Features back to full resolution, plus a residual from the blurry frames.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, f: Var, groups: Var, blurry: Var) -> Result<Var> {
        let u = g.upsample2x(f);
        let u = self.dec[0].forward_relu(g, u)?;
        let u = g.upsample2x(u);
        let cat = g.concat_channels(&[u, groups])?;
        let u = self.dec[1].forward_relu(g, cat)?;
        let r = self.out.forward(g, u)?;
        let p = g.add(blurry, r)?;
        Ok(g.clamp(p, T::zero(), T::one()))
    }

    /// `blurry` and `companions` are `[3, 3, H, W]` (previous, centre, next);
    /// returns the three enhanced frames in the same layout.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, blurry: Var, companions: Var, use_nlb: bool) -> Result<Var> {
        if g.shape(blurry) != g.shape(companions) || g.shape(blurry)[..2] != [3, 3] {
            return Err(Error::Dimension(format!(
                "ppn_forward expects two [3, 3, H, W] inputs, got {:?} and {:?}",
                g.shape(blurry),
                g.shape(companions)
            )));
        }
        let groups = g.concat_channels(&[blurry, companions])?;
        let f = self.encode(g, groups)?;
        let f = self.fuse(g, f, use_nlb)?;
        self.decode(g, f, groups, blurry)
    }
}
