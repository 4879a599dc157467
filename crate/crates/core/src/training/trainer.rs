use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdeblur_autograd::{Gradients, Graph, ParamStore, Real, Tensor, Var};

use super::{save_checkpoint, Adam, AdamState, Checkpoint, LossBreakdown, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{mean_psnr, PsnrOptions};
use crate::flow_align::{backend_by_name, FlowSession};
use crate::model::{DanModel, StageToggles};
use crate::pipeline::{fan_step, run_step, run_video, window_indices, GraphState};
use crate::video_data::{augment, TrainingSequence};

/// Loss of one sequence and, when requested, its parameter gradients.
#[derive(Clone, Debug)]
pub struct SequenceLoss<T> {
    pub losses: LossBreakdown,
    pub grads: Option<Gradients<T>>,
}

struct Terms {
    vars: Vec<Var>,
    parts: [f64; 3],
}

impl Terms {
    fn add<T: Real>(&mut self, g: &mut Graph<T>, x: Var, target: &Arc<Tensor<T>>, weight: T, stage: usize) -> Result<()> {
        let e = g.mse(x, target.clone())?;
        let s = g.scale(e, weight);
        self.parts[stage] += g.value(s).data()[0].as_f64();
        self.vars.push(s);
        Ok(())
    }
}

/// Runs the recurrent pipeline over `seq` and accumulates the stage losses.
///
/// Gradients flow through the recurrent state within windows of
/// `bptt_window` steps (0: the whole sequence); state entering a window is a
/// constant. The forward values do not depend on the window.
pub fn sequence_loss<T: Real>(
    model: &DanModel,
    store: &ParamStore<T>,
    flows: &mut FlowSession,
    toggles: &StageToggles,
    seq: &TrainingSequence,
    bptt_window: usize,
    with_grads: bool,
) -> Result<SequenceLoss<T>> {
    let len = seq.len();
    if len == 0 {
        return Err(Error::Contract("empty training sequence".into()));
    }
    if store.len() != model.params.len() {
        return Err(Error::Contract("parameter store does not belong to this model".into()));
    }
    let (w, h) = seq.dims();
    let m = model.config.size_multiple();
    if w % m != 0 || h % m != 0 {
        return Err(Error::Dimension(format!("training frames {w}x{h} must be multiples of {m}")));
    }
    let blurry: Vec<Tensor<T>> = seq.pairs().iter().map(|p| p.blurry.to_tensor()).collect();
    let sharp: Vec<Arc<Tensor<T>>> = seq.pairs().iter().map(|p| Arc::new(p.sharp.to_tensor())).collect();
    let inv_l = T::from_f64(1.0 / len as f64);
    let inv_3l = T::from_f64(1.0 / (3 * len) as f64);
    let window = if bptt_window == 0 { len } else { bptt_window };

    let mut state: [Option<Tensor<T>>; 3] = Default::default();
    let mut parts = [0.0f64; 3];
    let mut grads = with_grads.then(|| Gradients::for_store(store));
    let mut start = 0;
    while start < len {
        let end = (start + window).min(len);
        let mut g = Graph::new(store);
        let [d, c, a] = state.clone().map(|t| t.map(|t| g.constant(t)));
        let mut gs = GraphState { prev_deblurred: d, carried: c, prev_aggregated: a };
        let mut terms = Terms { vars: Vec::new(), parts: [0.0; 3] };
        for c in start..end {
            let idx = window_indices(c, len);
            let b = idx.map(|i| g.constant(blurry[i].clone()));
            let trace = run_step(model, &mut g, flows, toggles, b, &gs)?;
            if toggles.use_ppn {
                for (k, &t) in idx.iter().enumerate() {
                    let slot = g.slice_batch(trace.preprocessed, k, 1)?;
                    terms.add(&mut g, slot, &sharp[t], inv_3l, 0)?;
                }
            }
            terms.add(&mut g, trace.deblurred, &sharp[c], inv_l, 1)?;
            if let Some(f) = &trace.fan {
                terms.add(&mut g, f.aggregated, &sharp[c - 1], inv_l, 2)?;
            }
            gs = trace.next_state(&mut g, &gs)?;
        }
        if end == len {
            let reference = gs.prev_deblurred.expect("at least one step ran");
            let f = fan_step(model, &mut g, flows, toggles, gs.prev_aggregated, reference, None)?;
            terms.add(&mut g, f.aggregated, &sharp[len - 1], inv_l, 2)?;
        }
        if let Some(acc) = grads.as_mut() {
            let loss = g.sum(&terms.vars)?;
            acc.merge(&g.backward(loss)?);
        }
        for (p, t) in parts.iter_mut().zip(terms.parts) {
            *p += t;
        }
        let value = |v: Option<Var>| v.map(|v| g.value(v).clone());
        state = [value(gs.prev_deblurred), value(gs.carried), value(gs.prev_aggregated)];
        start = end;
    }
    Ok(SequenceLoss { losses: LossBreakdown::new(parts[0], parts[1], parts[2]), grads })
}

pub const METRICS_HEADER: &str = "iteration,l_ppn,l_abdn,l_fan,l_total,lr,val_psnr";

/// One line of the metrics log. `iteration` is 0-based; the losses are those
/// evaluated before that iteration's update.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        let val = self.val_psnr.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{},{}", self.iteration, l.l_ppn, l.l_abdn, l.l_fan, l.l_total, self.lr, val)
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Owns the model and optimiser during training.
pub struct Trainer {
    pub model: DanModel,
    pub config: TrainConfig,
    adam: Adam,
    iteration: u64,
    flows: FlowSession,
    snapshot: String,
}

impl Trainer {
    pub fn new(model: DanModel, config: TrainConfig) -> Result<Self> {
        config.validate(&model.config)?;
        let adam = Adam::new(&model.params, config.betas, config.eps);
        let flows = FlowSession::new(backend_by_name(&model.config.flow_backend)?);
        Ok(Self { model, config, adam, iteration: 0, flows, snapshot: String::new() })
    }

    /// Continues from a checkpoint with its stored training configuration.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = DanModel::from_params(ck.model, ck.params)?;
        let mut t = Self::new(model, ck.train)?;
        if let Some(state) = ck.adam {
            state.check_matches(&t.model.params)?;
            t.adam.state = state;
        }
        t.iteration = ck.iteration;
        t.snapshot = ck.snapshot;
        Ok(t)
    }

    /// Configuration text embedded in checkpoints.
    pub fn set_snapshot(&mut self, snapshot: impl Into<String>) {
        self.snapshot = snapshot.into();
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            model: self.model.config.clone(),
            train: self.config.clone(),
            params: self.model.params.clone(),
            adam: Some(self.adam.state.clone()),
            snapshot: self.snapshot.clone(),
        }
    }

    /// The augmented window used for batch element `b` of iteration `iter`;
    /// a pure function of the seed, `iter` and `b`.
    pub fn sample(&self, data: &[TrainingSequence], iter: u64, b: usize) -> Result<TrainingSequence> {
        if data.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed ^ mix(iter ^ mix(b as u64))));
        let clip = &data[rng.gen_range(0..data.len())];
        let len = self.config.seq_len.min(clip.len());
        let start = rng.gen_range(0..=clip.len() - len);
        augment(&clip.window(start, len)?, &self.config.augmentation(), rng.gen())
    }

    /// One optimisation step over a batch of sampled windows.
    pub fn step(&mut self, data: &[TrainingSequence]) -> Result<MetricsRow> {
        let iter = self.iteration;
        let lr = self.config.lr_at(iter);
        let mut grads = Gradients::for_store(&self.model.params);
        let mut losses = Vec::with_capacity(self.config.batch);
        for b in 0..self.config.batch {
            let seq = self.sample(data, iter, b)?;
            let r = sequence_loss(
                &self.model,
                &self.model.params,
                &mut self.flows,
                &self.config.toggles,
                &seq,
                self.config.bptt_window,
                true,
            )
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::Divergence { iteration: iter, detail: format!("non-finite {what}") },
                e => e,
            })?;
            losses.push(r.losses);
            grads.merge(&r.grads.expect("gradients requested"));
        }
        let mean = LossBreakdown::mean(&losses);
        if !mean.is_finite() {
            return Err(Error::Divergence { iteration: iter, detail: format!("non-finite loss {mean:?}") });
        }
        if !grads.all_finite() {
            return Err(Error::Divergence { iteration: iter, detail: "non-finite gradient".into() });
        }
        grads.scale(1.0 / self.config.batch as f32);
        self.adam.step(&mut self.model.params, &grads, lr);
        if let Some((_, name, _)) = self.model.params.iter().find(|(_, _, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { iteration: iter, detail: format!("parameter {name} became non-finite") });
        }
        self.iteration += 1;
        Ok(MetricsRow { iteration: iter, losses: mean, lr, val_psnr: None })
    }

    /// Mean PSNR of the aggregated output on a held-out sequence.
    pub fn validate(&self, seq: &TrainingSequence) -> Result<f64> {
        let out = run_video(&self.model, &seq.blurry(), self.config.toggles, false)?;
        mean_psnr(&out.aggregated, &seq.sharp(), &PsnrOptions::default())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Held-out sequence scored every `val_every` iterations.
    pub validation: Option<TrainingSequence>,
    /// Receives `metrics.csv`, periodic checkpoints and `final.ckpt`.
    pub out_dir: Option<PathBuf>,
}

/// Trains until `config.max_iters` iterations are complete, appending to the
/// metrics log and writing checkpoints as configured.
pub fn train(
    trainer: &mut Trainer,
    data: &[TrainingSequence],
    opts: &TrainOptions,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = trainer.iteration() == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut rows = Vec::new();
    while trainer.iteration() < trainer.config.max_iters {
        let mut row = trainer.step(data)?;
        let done = trainer.iteration();
        let last = done == trainer.config.max_iters;
        let every = trainer.config.val_every;
        if let Some(val) = &opts.validation {
            if every > 0 && (done % every == 0 || last) {
                row.val_psnr = Some(trainer.validate(val)?);
            }
        }
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = &opts.out_dir {
            let every = trainer.config.checkpoint_every;
            if every > 0 && done % every == 0 && !last {
                save_checkpoint(&dir.join(format!("checkpoint_{done:07}.ckpt")), &trainer.checkpoint())?;
            }
            if last {
                save_checkpoint(&dir.join("final.ckpt"), &trainer.checkpoint())?;
            }
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
