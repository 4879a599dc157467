//! The three networks and their shared parameter store.

use serde::{Deserialize, Serialize};
use vdeblur_autograd::{ParamStore, Tensor};

use crate::abdn::{Abdn, AbdnConfig, AbdnPreset};
use crate::error::{Error, Result};
use crate::fan::{Fan, FanConfig, CENTER_BIAS};
use crate::flow_align::{OcclusionParams, BUILTIN_BACKEND};
use crate::nn::{Init, ParamBuilder};
use crate::ppn::{Ppn, PpnConfig, STRIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ppn: PpnConfig,
    pub abdn: AbdnConfig,
    pub fan: FanConfig,
    pub flow_backend: String,
    pub occlusion: OcclusionParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 32-channel networks, 3-level U-Net.
    pub fn toy() -> Self {
        Self {
            ppn: PpnConfig::default(),
            abdn: AbdnConfig::default(),
            fan: FanConfig::default(),
            flow_backend: BUILTIN_BACKEND.to_string(),
            occlusion: OcclusionParams::default(),
        }
    }

    /// 64-channel networks, 4-level U-Net with doubling widths.
    pub fn full() -> Self {
        Self {
            ppn: PpnConfig { width: 64, ..PpnConfig::default() },
            abdn: AbdnConfig { preset: AbdnPreset::Full, width: 64, depth: 4 },
            fan: FanConfig { width: 64, ..FanConfig::default() },
            ..Self::toy()
        }
    }

    /// Frame sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        STRIDE.max(1 << self.abdn.depth).max(2)
    }

    pub fn validate(&self) -> Result<()> {
        self.occlusion.validate()?;
        if self.ppn.width < 2 || self.abdn.width == 0 || self.fan.width == 0 {
            return Err(Error::Config("network widths must be positive (ppn.width at least 2)".into()));
        }
        if self.abdn.depth == 0 || self.abdn.depth > 8 {
            return Err(Error::Config(format!("abdn.depth must be in 1..=8, got {}", self.abdn.depth)));
        }
        Ok(())
    }
}

/// Which stages run. Disabling a stage bypasses it: without PPN the blurry
/// frames go straight to alignment; without occlusion handling the maps are
/// all ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub use_ppn: bool,
    pub use_nlb: bool,
    pub occ_abdn: bool,
    pub occ_fan: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { use_ppn: true, use_nlb: true, occ_abdn: true, occ_fan: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelInit {
    /// Random hidden layers; every residual output layer, non-local output
    /// projection and the aggregation logits are zero, with the logits biased
    /// toward the centre candidate. The whole pipeline then returns its
    /// blurry input (up to ~1e-5 from the aggregation softmax).
    Identity,
    /// Random everywhere, output layers scaled down.
    Training,
}

#[derive(Clone, Debug)]
pub struct DanModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub ppn: Ppn,
    pub abdn: Abdn,
    pub fan: Fan,
}

impl DanModel {
    pub fn new(config: ModelConfig, init: ModelInit, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (out_init, logit_bias) = match init {
            ModelInit::Identity => (Init::Zero, [0.0, CENTER_BIAS, 0.0]),
            ModelInit::Training => (Init::Scaled(0.1), [0.0, 1.0, 0.0]),
        };
        let mut pb = ParamBuilder::new(&mut params, seed);
        let ppn = Ppn::new(&mut pb, &config.ppn, out_init)?;
        let abdn = Abdn::new(&mut pb, &config.abdn, out_init)?;
        let fan = Fan::new(&mut pb, &config.fan, out_init, logit_bias)?;
        Ok(Self { config, params, ppn, abdn, fan })
    }

    /// Rebuilds the layer layout for `config` and takes values from `params`;
    /// every name and shape must match.
    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let mut model = Self::new(config, ModelInit::Identity, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (_, name, value) in params.iter() {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            if model.params.get(id).shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn set_params(&mut self, values: Vec<Tensor<f32>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Argument("parameter count mismatch".into()));
        }
        for (id, v) in self.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *self.params.get_mut(id) = v;
        }
        Ok(())
    }
}
