//! The recurrent dataflow over a video.
//!
//! The step for centre frame `c` sees blurry frames `c-1, c, c+1` (edge
//! frames are repeated at the ends of the video), produces the deblurred
//! frame `D_c`, and finalises the aggregated frame `A_{c-1}`, which needs
//! `D_c` as its reverse candidate. A final [`Pipeline::finish`] emits the
//! last frame. Output `A_t` therefore depends on blurry frames up to `t+2`.
//!
//! Carried state between steps:
//! * `D_{c-1}`: companion of the previous-slot blurry frame and the reference
//!   frame of the next aggregation,
//! * the next-slot enhanced frame of the previous step (same frame index as the
//!   new centre): companion of the centre-slot blurry frame,
//! * `A_{c-2}`: warped onto `D_{c-1}` as the forward aggregation candidate.

use std::sync::Arc;

use vdeblur_autograd::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::fan::{aggregate, ReliabilityTriplet};
use crate::flow_align::{backend_by_name, AlignmentPlan, FlowField, FlowSession, NeighborAlignment, OcclusionMap};
use crate::frame::Frame;
use crate::model::{DanModel, StageToggles};

pub(crate) fn constant<T: Real>(g: &mut Graph<T>, f: &Frame) -> Var {
    g.constant(f.to_tensor::<T>())
}

pub(crate) fn frame_of<T: Real>(g: &Graph<T>, v: Var) -> Result<Frame> {
    Frame::from_tensor(g.value(v))
}

/// Frame value of a stage output that feeds flow estimation.
fn checked_frame<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<Frame> {
    let f = frame_of(g, v)?;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn mask_of<T: Real>(occ: &OcclusionMap) -> Arc<Vec<T>> {
    Arc::new(occ.values().iter().map(|&v| T::from_f64(f64::from(v))).collect())
}

/// Recurrent state as graph nodes.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct GraphState {
    pub prev_deblurred: Option<Var>,
    pub carried: Option<Var>,
    pub prev_aggregated: Option<Var>,
}

pub(crate) struct FanTrace {
    pub aggregated: Var,
    pub reliability: Var,
    pub occlusion: [OcclusionMap; 2],
}

pub(crate) struct StepTrace {
    /// `[3, 3, H, W]`: enhanced previous, centre and next frames.
    pub preprocessed: Var,
    pub deblurred: Var,
    pub occlusion: [OcclusionMap; 2],
    pub fan: Option<FanTrace>,
}

impl StepTrace {
    pub fn next_state<T: Real>(&self, g: &mut Graph<T>, state: &GraphState) -> Result<GraphState> {
        Ok(GraphState {
            prev_deblurred: Some(self.deblurred),
            carried: Some(g.slice_batch(self.preprocessed, 2, 1)?),
            prev_aggregated: self.fan.as_ref().map(|f| f.aggregated).or(state.prev_aggregated),
        })
    }
}

/// Warps `neighbor` onto `reference`; `None` substitutes the reference itself.
fn fan_candidate<T: Real>(
    model: &DanModel,
    g: &mut Graph<T>,
    flows: &mut FlowSession,
    reference: &Frame,
    neighbor: Option<Var>,
    fallback: Var,
) -> Result<(Var, OcclusionMap, FlowField)> {
    let (w, h) = reference.dims();
    match neighbor {
        Some(n) => {
            let nf = checked_frame(g, n, "aggregation candidate")?;
            let al = NeighborAlignment::estimate(flows, reference, &nf, &model.config.occlusion)?;
            let warped = g.resample(n, al.plan.clone())?;
            Ok((warped, al.occlusion, al.forward))
        }
        None => Ok((fallback, OcclusionMap::ones(w, h), FlowField::zeros(w, h))),
    }
}

/// Aggregation for the frame whose deblurred estimate is `reference`.
pub(crate) fn fan_step<T: Real>(
    model: &DanModel,
    g: &mut Graph<T>,
    flows: &mut FlowSession,
    toggles: &StageToggles,
    prev_aggregated: Option<Var>,
    reference: Var,
    next_deblurred: Option<Var>,
) -> Result<FanTrace> {
    let rf = checked_frame(g, reference, "deblurred frame")?;
    let (w, h) = rf.dims();
    let (fwd, occ_f, flow_f) = fan_candidate(model, g, flows, &rf, prev_aggregated, reference)?;
    let (rev, occ_r, flow_r) = fan_candidate(model, g, flows, &rf, next_deblurred, reference)?;
    let mut occ = Vec::with_capacity(2 * w * h);
    for m in [&occ_f, &occ_r] {
        if toggles.occ_fan {
            occ.extend(m.values().iter().map(|&v| T::from_f64(f64::from(v))));
        } else {
            occ.extend(std::iter::repeat(T::one()).take(w * h));
        }
    }
    let occ = g.constant(Tensor::from_vec([1, 2, h, w], occ)?);
    let fl: Vec<T> = [flow_f.dx(), flow_f.dy(), flow_r.dx(), flow_r.dy()]
        .iter()
        .flat_map(|p| p.iter().map(|&v| T::from_f64(f64::from(v))))
        .collect();
    let fl = g.constant(Tensor::from_vec([1, 4, h, w], fl)?);
    let candidates = g.concat_channels(&[fwd, reference, rev])?;
    let reliability = model.fan.reliability(g, candidates, occ, fl)?;
    let aggregated = aggregate(g, [fwd, reference, rev], reliability)?;
    Ok(FanTrace { aggregated, reliability, occlusion: [occ_f, occ_r] })
}

/// One recurrent step on a graph. `blurry` holds `[1, 3, H, W]` nodes for
/// the previous, centre and next frames.
pub(crate) fn run_step<T: Real>(
    model: &DanModel,
    g: &mut Graph<T>,
    flows: &mut FlowSession,
    toggles: &StageToggles,
    blurry: [Var; 3],
    state: &GraphState,
) -> Result<StepTrace> {
    let b = g.concat_batch(&blurry)?;
    let preprocessed = if toggles.use_ppn {
        let companions = [state.prev_deblurred.unwrap_or(blurry[0]), state.carried.unwrap_or(blurry[1]), blurry[2]];
        let c = g.concat_batch(&companions)?;
        model.ppn.forward(g, b, c, toggles.use_nlb)?
    } else {
        b
    };
    let slots: Vec<Var> = (0..3).map(|k| g.slice_batch(preprocessed, k, 1)).collect::<std::result::Result<_, _>>()?;
    let frames = slots.iter().map(|&v| checked_frame(g, v, "preprocessed frame")).collect::<Result<Vec<_>>>()?;
    let plan = AlignmentPlan::estimate(flows, &frames[0], &frames[1], &frames[2], &model.config.occlusion)?;
    let mut revised = [slots[0]; 2];
    for (k, (al, &slot)) in [(&plan.prev, &slots[0]), (&plan.next, &slots[2])].into_iter().enumerate() {
        let warped = g.resample(slot, al.plan.clone())?;
        revised[k] = if toggles.occ_abdn { g.blend_mask(slots[1], warped, mask_of(&al.occlusion))? } else { warped };
    }
    let deblurred = model.abdn.forward(g, revised[0], slots[1], revised[1])?;
    let fan = match state.prev_deblurred {
        Some(reference) => {
            Some(fan_step(model, g, flows, toggles, state.prev_aggregated, reference, Some(deblurred))?)
        }
        None => None,
    };
    Ok(StepTrace { preprocessed, deblurred, occlusion: [plan.prev.occlusion, plan.next.occlusion], fan })
}

/// Blurry-frame indices of the window centred on `c` in a video of `len` frames.
pub fn window_indices(c: usize, len: usize) -> [usize; 3] {
    [c.saturating_sub(1), c, (c + 1).min(len - 1)]
}

/// Recurrent state carried between steps, as frame values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecurrentState {
    pub prev_deblurred: Option<Frame>,
    pub carried_preprocessed: Option<Frame>,
    pub prev_aggregated: Option<Frame>,
}

impl RecurrentState {
    fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        for f in [&self.prev_deblurred, &self.carried_preprocessed, &self.prev_aggregated].into_iter().flatten() {
            if f.dims() != dims {
                return Err(Error::State(format!("state frame is {:?} but window frames are {dims:?}", f.dims())));
            }
        }
        Ok(())
    }

    fn to_graph<T: Real>(&self, g: &mut Graph<T>) -> GraphState {
        GraphState {
            prev_deblurred: self.prev_deblurred.as_ref().map(|f| constant(g, f)),
            carried: self.carried_preprocessed.as_ref().map(|f| constant(g, f)),
            prev_aggregated: self.prev_aggregated.as_ref().map(|f| constant(g, f)),
        }
    }

    fn from_graph<T: Real>(g: &Graph<T>, s: &GraphState) -> Result<Self> {
        let get = |v: Option<Var>| v.map(|v| frame_of(g, v)).transpose();
        Ok(Self {
            prev_deblurred: get(s.prev_deblurred)?,
            carried_preprocessed: get(s.carried)?,
            prev_aggregated: get(s.prev_aggregated)?,
        })
    }
}

/// Per-stage results of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Enhanced previous, centre and next frames.
    pub preprocessed: [Frame; 3],
    pub deblurred: Frame,
    /// Occlusion maps of the previous and next neighbours used for deblurring.
    pub occlusion: [OcclusionMap; 2],
    pub aggregation: Option<Aggregation>,
}

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub frame: Frame,
    pub reliability: ReliabilityTriplet,
    pub occlusion: [OcclusionMap; 2],
}

fn aggregation_of<T: Real>(g: &Graph<T>, f: &FanTrace) -> Result<Aggregation> {
    Ok(Aggregation {
        frame: frame_of(g, f.aggregated)?,
        reliability: ReliabilityTriplet::from_tensor(g.value(f.reliability))?,
        occlusion: f.occlusion.clone(),
    })
}

/// Streaming inference driver.
pub struct Pipeline<'m> {
    model: &'m DanModel,
    flows: FlowSession,
    toggles: StageToggles,
    state: RecurrentState,
    dims: Option<(usize, usize)>,
    finished: bool,
}

impl<'m> Pipeline<'m> {
    pub fn new(model: &'m DanModel, toggles: StageToggles) -> Result<Self> {
        Ok(Self::with_session(model, toggles, FlowSession::new(backend_by_name(&model.config.flow_backend)?)))
    }

    pub fn with_session(model: &'m DanModel, toggles: StageToggles, flows: FlowSession) -> Self {
        Self { model, flows, toggles, state: RecurrentState::default(), dims: None, finished: false }
    }

    pub fn state(&self) -> &RecurrentState {
        &self.state
    }

    pub fn into_session(self) -> FlowSession {
        self.flows
    }

    /// Processes the window `(prev, centre, next)`. Returns the stage
    /// outputs; `aggregation` is present from the second step on and holds
    /// the output for the previous centre frame.
    pub fn step(&mut self, window: [&Frame; 3]) -> Result<StepOutput> {
        if self.finished {
            return Err(Error::State("pipeline already finished".into()));
        }
        let dims = window[1].dims();
        for f in &window {
            if f.dims() != dims {
                return Err(Error::Dimension(format!("window frames differ in size: {:?} vs {dims:?}", f.dims())));
            }
        }
        let m = self.model.config.size_multiple();
        if dims.0 % m != 0 || dims.1 % m != 0 {
            return Err(Error::Dimension(format!("frame size {}x{} must be a multiple of {m}", dims.0, dims.1)));
        }
        self.state.check_dims(dims)?;
        let mut g = Graph::new(&self.model.params);
        let blurry = window.map(|f| constant(&mut g, f));
        let gs = self.state.to_graph(&mut g);
        let trace = run_step(self.model, &mut g, &mut self.flows, &self.toggles, blurry, &gs)?;
        let next = trace.next_state(&mut g, &gs)?;
        let pre: Vec<Frame> = (0..3)
            .map(|k| Frame::from_tensor(&slice_batch_value(g.value(trace.preprocessed), k)?))
            .collect::<Result<_>>()?;
        let out = StepOutput {
            preprocessed: [pre[0].clone(), pre[1].clone(), pre[2].clone()],
            deblurred: frame_of(&g, trace.deblurred)?,
            occlusion: trace.occlusion.clone(),
            aggregation: trace.fan.as_ref().map(|f| aggregation_of(&g, f)).transpose()?,
        };
        self.state = RecurrentState::from_graph(&g, &next)?;
        self.dims = Some(dims);
        Ok(out)
    }

    /// Emits the aggregated last frame, using its own deblurred estimate in
    /// place of the missing next frame.
    pub fn finish(&mut self) -> Result<Option<Aggregation>> {
        if self.finished {
            return Err(Error::State("pipeline already finished".into()));
        }
        self.finished = true;
        let Some(d) = self.state.prev_deblurred.clone() else { return Ok(None) };
        let mut g = Graph::new(&self.model.params);
        let reference = constant(&mut g, &d);
        let prev = self.state.prev_aggregated.as_ref().map(|f| constant(&mut g, f));
        let trace = fan_step(self.model, &mut g, &mut self.flows, &self.toggles, prev, reference, None)?;
        aggregation_of(&g, &trace).map(Some)
    }
}

fn slice_batch_value<T: Real>(t: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [_, c, h, w] = t.shape();
    let n = c * h * w;
    Ok(Tensor::from_vec([1, c, h, w], t.data()[k * n..(k + 1) * n].to_vec())?)
}

/// Everything a full pass over a video produced.
#[derive(Clone, Debug, Default)]
pub struct PipelineOutput {
    /// Final output, one per input frame.
    pub aggregated: Vec<Frame>,
    /// Enhanced centre frame of each step.
    pub preprocessed: Vec<Frame>,
    pub deblurred: Vec<Frame>,
    /// Per-step details, kept when requested.
    pub steps: Vec<StepOutput>,
    pub reliability: Vec<ReliabilityTriplet>,
    pub fan_occlusion: Vec<[OcclusionMap; 2]>,
}

pub fn run_video(model: &DanModel, blurry: &[Frame], toggles: StageToggles, keep_intermediates: bool) -> Result<PipelineOutput> {
    if blurry.len() < 3 {
        return Err(Error::Argument(format!("a video needs at least 3 frames, got {}", blurry.len())));
    }
    let mut pipe = Pipeline::new(model, toggles)?;
    let mut out = PipelineOutput::default();
    let record = |out: &mut PipelineOutput, agg: Aggregation| {
        out.aggregated.push(agg.frame);
        if keep_intermediates {
            out.reliability.push(agg.reliability);
            out.fan_occlusion.push(agg.occlusion);
        }
    };
    for c in 0..blurry.len() {
        let [p, m, n] = window_indices(c, blurry.len());
        let mut step = pipe.step([&blurry[p], &blurry[m], &blurry[n]])?;
        out.preprocessed.push(step.preprocessed[1].clone());
        out.deblurred.push(step.deblurred.clone());
        if let Some(agg) = step.aggregation.take() {
            record(&mut out, agg);
        }
        if keep_intermediates {
            out.steps.push(step);
        }
    }
    if let Some(agg) = pipe.finish()? {
        record(&mut out, agg);
    }
    Ok(out)
}
