//! Blurry/sharp training data: procedural scenes, blur synthesis by frame
//! accumulation, augmentation, and on-disk dataset ingestion.

mod augment;
mod ingest;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use ingest::{ingest_directory, read_manifest, write_clip, write_manifest, Layout, MANIFEST_FILE};
pub use synth::{make_toy_clip, make_toy_sequence, synthesize_blur, MotionSpec, ToySpec};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Ground-truth sharp frames of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpSequence {
    pub frames: Vec<Frame>,
    pub fps_tag: u32,
}

impl SharpSequence {
    pub fn new(frames: Vec<Frame>, fps_tag: u32) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Argument("empty sharp sequence".into()))?;
        for f in &frames {
            first.ensure_same_dims(f, "sharp sequence")?;
            if !f.in_unit_range() {
                return Err(Error::Argument("sharp frame values must lie in [0, 1]".into()));
            }
        }
        Ok(Self { frames, fps_tag })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurSharpPair {
    pub blurry: Frame,
    pub sharp: Frame,
}

impl BlurSharpPair {
    pub fn new(blurry: Frame, sharp: Frame) -> Result<Self> {
        blurry.ensure_same_dims(&sharp, "blurry/sharp pair")?;
        Ok(Self { blurry, sharp })
    }
}

/// Consecutive blurry/sharp pairs; at least three so a full window exists.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    pairs: Vec<BlurSharpPair>,
}

impl TrainingSequence {
    pub const MIN_LEN: usize = 3;

    pub fn new(pairs: Vec<BlurSharpPair>) -> Result<Self> {
        if pairs.len() < Self::MIN_LEN {
            return Err(Error::Argument(format!(
                "training sequences need at least {} frames, got {}",
                Self::MIN_LEN,
                pairs.len()
            )));
        }
        for p in &pairs {
            pairs[0].blurry.ensure_same_dims(&p.blurry, "training sequence")?;
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[BlurSharpPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pairs[0].blurry.dims()
    }

    pub fn blurry(&self) -> Vec<Frame> {
        self.pairs.iter().map(|p| p.blurry.clone()).collect()
    }

    pub fn sharp(&self) -> Vec<Frame> {
        self.pairs.iter().map(|p| p.sharp.clone()).collect()
    }

    /// Contiguous sub-sequence `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<TrainingSequence> {
        if start + len > self.pairs.len() {
            return Err(Error::Argument(format!(
                "window [{start}, {}) exceeds sequence of {}",
                start + len,
                self.pairs.len()
            )));
        }
        TrainingSequence::new(self.pairs[start..start + len].to_vec())
    }
}

/// A named training sequence, as stored under `<root>/<id>/`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub sequence: TrainingSequence,
}
