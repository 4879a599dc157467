//! Optical-flow alignment of neighbouring frames: flow estimation backends,
//! bilinear backward warping, forward/backward consistency occlusion
//! detection, and occlusion-revised composition.

mod align;
mod cache;
mod estimator;
mod occlusion;
mod warp;

pub use align::{align_triplet, AlignedTriplet, AlignmentPlan, FlowSession, NeighborAlignment};
pub use cache::{read_flow, write_flow, FlowCache};
pub use estimator::{backend_by_name, estimate_flow, FlowBackend, PyramidFlow, PyramidFlowConfig, BUILTIN_BACKEND};
pub use occlusion::{detect_occlusion, revise_warped, OcclusionMap, OcclusionParams};
pub use warp::{bilinear_plan, sample_bilinear, warp_backward};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowDirection {
    Forward,
    Backward,
}

impl FlowDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowDirection::Forward => "forward",
            FlowDirection::Backward => "backward",
        }
    }
}

/// Dense per-pixel displacement `(dx, dy)` in pixels.
///
/// `flow(x)` maps a pixel of the source frame to its position in the
/// destination frame: `src(x) ~ dst(x + flow(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
    pub direction: FlowDirection,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, 0.0, 0.0)
    }

    pub fn uniform(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let n = width * height;
        Self { width, height, dx: vec![dx; n], dy: vec![dy; n], direction: FlowDirection::Forward }
    }

    pub fn from_components(width: usize, height: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::Dimension(format!("flow components do not cover {width}x{height}")));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::Argument("flow vectors must be finite".into()));
        }
        Ok(Self { width, height, dx, dy, direction: FlowDirection::Forward })
    }

    pub fn with_direction(mut self, direction: FlowDirection) -> Self {
        self.direction = direction;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn set(&mut self, x: usize, y: usize, v: (f32, f32)) {
        let i = y * self.width + x;
        self.dx[i] = v.0;
        self.dy[i] = v.1;
    }

    pub(crate) fn ensure_dims(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if self.dims() == (width, height) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: flow is {}x{} but frame is {width}x{height}",
                self.width, self.height
            )))
        }
    }
}
