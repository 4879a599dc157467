use std::collections::VecDeque;
use std::sync::Arc;

use vdeblur_autograd::Resampler;

use super::estimator::{estimate_flow, FlowBackend};
use super::occlusion::{detect_occlusion, revise_warped, OcclusionMap, OcclusionParams};
use super::warp::bilinear_plan;
use super::{FlowDirection, FlowField};
use crate::error::{Error, Result};
use crate::frame::Frame;

/// A flow backend plus optional record/replay of the flows it produces.
///
/// Recording captures every estimated field in call order; replaying feeds a
/// recorded list back instead of estimating, which keeps alignment fixed
/// while network weights are perturbed.
pub struct FlowSession {
    backend: Box<dyn FlowBackend + Send>,
    recording: Option<Vec<FlowField>>,
    replay: Option<VecDeque<FlowField>>,
}

impl FlowSession {
    pub fn new(backend: Box<dyn FlowBackend + Send>) -> Self {
        Self { backend, recording: None, replay: None }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn start_recording(&mut self) {
        self.recording = Some(Vec::new());
    }

    pub fn take_recording(&mut self) -> Vec<FlowField> {
        self.recording.take().unwrap_or_default()
    }

    pub fn replay(&mut self, flows: Vec<FlowField>) {
        self.replay = Some(flows.into());
    }

    pub fn stop_replay(&mut self) {
        self.replay = None;
    }

    pub fn estimate(&mut self, src: &Frame, dst: &Frame) -> Result<FlowField> {
        let flow = match self.replay.as_mut() {
            Some(queue) => {
                let flow = queue.pop_front().ok_or_else(|| Error::State("flow replay exhausted".into()))?;
                flow.ensure_dims(src.width(), src.height(), "flow replay")?;
                flow
            }
            None => estimate_flow(src, dst, self.backend.as_mut())?,
        };
        if let Some(rec) = self.recording.as_mut() {
            rec.push(flow.clone());
        }
        Ok(flow)
    }
}

/// How one neighbour maps onto the reference frame.
#[derive(Clone, Debug)]
pub struct NeighborAlignment {
    /// Backward warp of the neighbour onto the reference grid.
    pub plan: Arc<Resampler>,
    pub occlusion: OcclusionMap,
    /// Reference -> neighbour.
    pub forward: FlowField,
    /// Neighbour -> reference.
    pub backward: FlowField,
}

impl NeighborAlignment {
    pub fn estimate(
        session: &mut FlowSession,
        reference: &Frame,
        neighbor: &Frame,
        params: &OcclusionParams,
    ) -> Result<Self> {
        reference.ensure_same_dims(neighbor, "align")?;
        let forward = session.estimate(reference, neighbor)?.with_direction(FlowDirection::Forward);
        let backward = session.estimate(neighbor, reference)?.with_direction(FlowDirection::Backward);
        let occlusion = detect_occlusion(&forward, &backward, params)?;
        Ok(Self { plan: Arc::new(bilinear_plan(&forward)), occlusion, forward, backward })
    }

    pub fn warp(&self, neighbor: &Frame) -> Result<Frame> {
        self.forward.ensure_dims(neighbor.width(), neighbor.height(), "warp")?;
        let mut out = Frame::new(neighbor.width(), neighbor.height());
        self.plan.apply(neighbor.data(), out.data_mut());
        Ok(out)
    }
}

/// Alignment of both neighbours of a centre frame.
#[derive(Clone, Debug)]
pub struct AlignmentPlan {
    pub prev: NeighborAlignment,
    pub next: NeighborAlignment,
}

impl AlignmentPlan {
    pub fn estimate(
        session: &mut FlowSession,
        prev: &Frame,
        center: &Frame,
        next: &Frame,
        params: &OcclusionParams,
    ) -> Result<Self> {
        Ok(Self {
            prev: NeighborAlignment::estimate(session, center, prev, params)?,
            next: NeighborAlignment::estimate(session, center, next, params)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AlignedTriplet {
    pub warped_forward: Frame,
    pub warped_backward: Frame,
    /// Previous frame aligned to the centre, occluded pixels taken from the centre.
    pub revised_forward: Frame,
    /// Next frame aligned to the centre, occluded pixels taken from the centre.
    pub revised_backward: Frame,
    pub occ_prev: OcclusionMap,
    pub occ_next: OcclusionMap,
    /// centre->prev, prev->centre, centre->next, next->centre.
    pub flows: [FlowField; 4],
}

pub fn align_triplet(
    prev: &Frame,
    center: &Frame,
    next: &Frame,
    session: &mut FlowSession,
    params: &OcclusionParams,
) -> Result<AlignedTriplet> {
    prev.ensure_same_dims(center, "align_triplet")?;
    next.ensure_same_dims(center, "align_triplet")?;
    let plan = AlignmentPlan::estimate(session, prev, center, next, params)?;
    let warped_forward = plan.prev.warp(prev)?;
    let warped_backward = plan.next.warp(next)?;
    Ok(AlignedTriplet {
        revised_forward: revise_warped(center, &warped_forward, &plan.prev.occlusion)?,
        revised_backward: revise_warped(center, &warped_backward, &plan.next.occlusion)?,
        warped_forward,
        warped_backward,
        occ_prev: plan.prev.occlusion,
        occ_next: plan.next.occlusion,
        flows: [plan.prev.forward, plan.prev.backward, plan.next.forward, plan.next.backward],
    })
}
