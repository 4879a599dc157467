//! Small layer helpers shared by the three networks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vdeblur_autograd::{Graph, ParamId, ParamStore, Real, Resampler, Tensor, Var};

use crate::error::{Error, Result};

/// Weight initialisation for a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    He,
    /// He scaled by a constant factor.
    Scaled(f32),
    Zero,
}

/// 2-D convolution with bias. Holds parameter handles only, so the same
/// layer evaluates on any precision the store is cast to.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        Ok(g.conv2d(x, w, Some(b), self.stride, self.kernel / 2)?)
    }

    pub fn forward_relu<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.relu(y))
    }
}

/// Creates named parameters with deterministic random initialisation.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, init: Init) -> Result<Conv> {
        let fan_in = (cin * kernel * kernel) as f32;
        let std = match init {
            Init::He => (2.0 / fan_in).sqrt(),
            Init::Scaled(s) => s * (2.0 / fan_in).sqrt(),
            Init::Zero => 0.0,
        };
        let n = cout * cin * kernel * kernel;
        let values = if std > 0.0 {
            let normal = Normal::new(0.0f32, std).map_err(|e| Error::Argument(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        let weight = self.store.insert(format!("{name}.weight"), Tensor::from_vec([cout, cin, kernel, kernel], values)?)?;
        let bias = self.store.insert(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
        Ok(Conv { weight, bias, cin, cout, kernel, stride })
    }

    pub fn set_bias(&mut self, conv: &Conv, values: &[f32]) -> Result<()> {
        if values.len() != conv.cout {
            return Err(Error::Argument(format!("bias needs {} values, got {}", conv.cout, values.len())));
        }
        self.store.get_mut(conv.bias).data_mut().copy_from_slice(values);
        Ok(())
    }
}

/// 2x2 average pooling as a resampling map (odd trailing rows/columns are dropped).
pub fn avg_pool2_plan(h: usize, w: usize) -> Arc<Resampler> {
    let (oh, ow) = (h / 2, w / 2);
    let mut taps = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = |dx: usize, dy: usize| ((2 * y + dy) * w + 2 * x + dx) as u32;
            taps.push([i(0, 0), i(1, 0), i(0, 1), i(1, 1)]);
        }
    }
    Arc::new(Resampler::new(h, w, oh, ow, taps, vec![[0.25; 4]; oh * ow]))
}

pub(crate) fn ensure_divisible(h: usize, w: usize, factor: usize, what: &str) -> Result<()> {
    if h % factor == 0 && w % factor == 0 && h > 0 && w > 0 {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: {w}x{h} is not divisible by {factor}")))
    }
}
