use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BlurSharpPair, TrainingSequence};
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Square crop side; `None` keeps the full frame.
    pub crop: Option<usize>,
    pub flips: bool,
    pub color_jitter: bool,
    /// Variance of the zero-mean Gaussian noise added to blurry frames.
    pub noise_variance: f32,
    pub gain_range: (f32, f32),
    pub bias_range: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: None,
            flips: true,
            color_jitter: true,
            noise_variance: 0.01,
            gain_range: (0.9, 1.1),
            bias_range: (-0.05, 0.05),
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self { crop: None, flips: false, color_jitter: false, noise_variance: 0.0, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug)]
struct Draw {
    x0: usize,
    y0: usize,
    size: (usize, usize),
    hflip: bool,
    vflip: bool,
    gain: [f32; 3],
    bias: [f32; 3],
}

fn transform(f: &Frame, d: &Draw) -> Frame {
    let (w, h) = d.size;
    Frame::from_fn(w, h, |c, x, y| {
        let sx = if d.hflip { w - 1 - x } else { x };
        let sy = if d.vflip { h - 1 - y } else { y };
        (f.get(c, d.x0 + sx, d.y0 + sy) * d.gain[c] + d.bias[c]).clamp(0.0, 1.0)
    })
}

/// Applies one shared random crop, flip and colour jitter to every frame of
/// the sequence (blurry and sharp alike), then adds Gaussian noise to the
/// blurry frames only.
///
/// Crop/flip/jitter parameters and noise come from separate random streams,
/// so toggling noise leaves the geometric transform unchanged.
pub fn augment(seq: &TrainingSequence, config: &AugmentConfig, seed: u64) -> Result<TrainingSequence> {
    let (w, h) = seq.dims();
    let size = match config.crop {
        Some(c) if c > w || c > h => {
            return Err(Error::Argument(format!("crop {c} exceeds frame size {w}x{h}")));
        }
        Some(0) => return Err(Error::Argument("crop size must be positive".into())),
        Some(c) => (c, c),
        None => (w, h),
    };
    if !(config.noise_variance >= 0.0) {
        return Err(Error::Argument("noise variance must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(0..=w - size.0);
    let y0 = rng.gen_range(0..=h - size.1);
    let (hflip, vflip) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let gain: [f32; 3] = std::array::from_fn(|_| rng.gen_range(config.gain_range.0..=config.gain_range.1));
    let bias: [f32; 3] = std::array::from_fn(|_| rng.gen_range(config.bias_range.0..=config.bias_range.1));
    let draw = Draw {
        x0,
        y0,
        size,
        hflip: config.flips && hflip,
        vflip: config.flips && vflip,
        gain: if config.color_jitter { gain } else { [1.0; 3] },
        bias: if config.color_jitter { bias } else { [0.0; 3] },
    };

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let normal = Normal::new(0.0f32, config.noise_variance.sqrt())
        .map_err(|e| Error::Argument(format!("noise distribution: {e}")))?;

    let pairs = seq
        .pairs()
        .iter()
        .map(|p| {
            let mut blurry = transform(&p.blurry, &draw);
            if config.noise_variance > 0.0 {
                for v in blurry.data_mut() {
                    *v = (*v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
                }
            }
            BlurSharpPair::new(blurry, transform(&p.sharp, &draw))
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSequence::new(pairs)
}
