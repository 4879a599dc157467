//! Recurrent video deblurring in three stages.
//!
//! Each step takes three consecutive blurry frames plus restored frames carried
//! over from the previous step and
//!
//! 1. enhances all three with a shared encoder/decoder whose bottleneck mixes
//!    the frames through chained non-local attention blocks ([`ppn`]),
//! 2. aligns the enhanced neighbours to the centre frame with optical flow,
//!    replaces occluded pixels, and deblurs the centre with a U-Net
//!    ([`abdn`], [`flow_align`]),
//! 3. merges the previous output, the previous deblurred frame and the newly
//!    deblurred frame with per-pixel reliability weights ([`fan`]).
//!
//! [`pipeline`] runs the recurrence over a video, [`training`] fits the three
//! networks jointly, and [`evaluation`] scores outputs by PSNR.

pub mod abdn;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fan;
pub mod flow_align;
pub mod frame;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod ppn;
pub mod training;
pub mod video_data;

pub use error::{Error, Result};
pub use frame::Frame;
