//! Losses, optimisation schedule, truncated backpropagation through the
//! recurrent pipeline, and checkpoints.

mod adam;
mod checkpoint;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::model::{ModelConfig, StageToggles};
use crate::pipeline::{window_indices, PipelineOutput};
use crate::video_data::AugmentConfig;

pub use adam::{Adam, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use trainer::{sequence_loss, train, MetricsRow, SequenceLoss, TrainOptions, Trainer, METRICS_HEADER};

/// Stage losses of one sequence; `l_total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ppn: f64,
    pub l_abdn: f64,
    pub l_fan: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_ppn: f64, l_abdn: f64, l_fan: f64) -> Self {
        Self { l_ppn, l_abdn, l_fan, l_total: l_ppn + l_abdn + l_fan }
    }

    pub fn is_finite(&self) -> bool {
        self.l_ppn.is_finite() && self.l_abdn.is_finite() && self.l_fan.is_finite() && self.l_total.is_finite()
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        Self::new(
            items.iter().map(|l| l.l_ppn).sum::<f64>() / n,
            items.iter().map(|l| l.l_abdn).sum::<f64>() / n,
            items.iter().map(|l| l.l_fan).sum::<f64>() / n,
        )
    }
}

/// Per-frame outputs of every stage over a sequence, indexed by frame.
#[derive(Clone, Debug, Default)]
pub struct StageOutputs {
    /// Enhanced previous, centre and next frames of each step; `None` when
    /// the preprocessing stage was bypassed.
    pub preprocessed: Option<Vec<[Frame; 3]>>,
    pub deblurred: Vec<Frame>,
    pub aggregated: Vec<Frame>,
}

impl StageOutputs {
    /// Collects the outputs of a run made with intermediates kept.
    pub fn from_pipeline(out: &PipelineOutput, use_ppn: bool) -> Result<Self> {
        if use_ppn && out.steps.len() != out.deblurred.len() {
            return Err(Error::Contract("pipeline output lacks per-step intermediates".into()));
        }
        Ok(Self {
            preprocessed: use_ppn.then(|| out.steps.iter().map(|s| s.preprocessed.clone()).collect()),
            deblurred: out.deblurred.clone(),
            aggregated: out.aggregated.clone(),
        })
    }
}

/// Mean-squared-error losses against the sharp frames. The preprocessing
/// loss averages the three enhanced slots of each step, each compared with
/// the sharp frame at the slot's index; all stage losses average over the
/// sequence.
pub fn compute_losses(outputs: &StageOutputs, targets: &[Frame]) -> Result<LossBreakdown> {
    let len = targets.len();
    let check = |what: &str, n: usize| {
        if n == len {
            Ok(())
        } else {
            Err(Error::Contract(format!("{n} {what} outputs for {len} target frames")))
        }
    };
    if len == 0 {
        return Err(Error::Contract("no target frames".into()));
    }
    check("deblurred", outputs.deblurred.len())?;
    check("aggregated", outputs.aggregated.len())?;
    let l = len as f64;
    let l_ppn = match &outputs.preprocessed {
        Some(pre) => {
            check("preprocessed", pre.len())?;
            let mut sum = 0.0;
            for (c, slots) in pre.iter().enumerate() {
                for (slot, &t) in slots.iter().zip(&window_indices(c, len)) {
                    slot.ensure_same_dims(&targets[t], "preprocessing loss")?;
                    sum += slot.mse(&targets[t]);
                }
            }
            sum / (3.0 * l)
        }
        None => 0.0,
    };
    let stage = |frames: &[Frame], what: &str| -> Result<f64> {
        let mut sum = 0.0;
        for (f, t) in frames.iter().zip(targets) {
            f.ensure_same_dims(t, what)?;
            sum += f.mse(t);
        }
        Ok(sum / l)
    };
    Ok(LossBreakdown::new(l_ppn, stage(&outputs.deblurred, "deblurring loss")?, stage(&outputs.aggregated, "aggregation loss")?))
}

/// Optimisation settings. The learning rate is multiplied by
/// `lr_decay_factor` every `lr_decay_every` iterations; when unset the
/// interval is `0.4 * max_iters` (400k of a 1M-iteration run, scaled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: Option<u64>,
    pub batch: usize,
    /// Square training crop; 0 trains on whole frames. Replaces
    /// `augment.crop`.
    pub patch: usize,
    pub seq_len: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub max_iters: u64,
    pub seed: u64,
    /// Steps per backpropagation window; 0 backpropagates through the whole
    /// sequence.
    pub bptt_window: usize,
    pub checkpoint_every: u64,
    pub val_every: u64,
    pub augment: AugmentConfig,
    pub toggles: StageToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: None,
            batch: 5,
            patch: 256,
            seq_len: 20,
            betas: (0.9, 0.999),
            eps: 1e-8,
            max_iters: 1000,
            seed: 0,
            bptt_window: 2,
            checkpoint_every: 0,
            val_every: 0,
            augment: AugmentConfig::default(),
            toggles: StageToggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn decay_interval(&self) -> u64 {
        self.lr_decay_every.unwrap_or_else(|| ((self.max_iters as f64 * 0.4).round() as u64).max(1))
    }

    /// Learning rate used for the 0-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let decays = (iter / self.decay_interval()) as i32;
        self.lr * self.lr_decay_factor.powi(decays)
    }

    /// Augmentation with the crop taken from `patch`.
    pub fn augmentation(&self) -> AugmentConfig {
        AugmentConfig { crop: (self.patch > 0).then_some(self.patch), ..self.augment.clone() }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == Some(0) {
            return bad("lr_decay_every must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        let m = model.size_multiple();
        if self.patch % m != 0 {
            return bad(format!("patch {} must be a multiple of {m}", self.patch));
        }
        Ok(())
    }
}
