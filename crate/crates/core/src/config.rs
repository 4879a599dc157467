//! Declarative run configuration: TOML file with `data`, `model`, `train`
//! and `eval` sections, plus dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{fingerprint, AblationMode};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::video_data::{make_toy_clip, write_clip, write_manifest, AugmentConfig, MotionSpec, ToySpec};

/// Procedural dataset written by the `synth` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Sharp frames averaged into each blurry frame.
    pub n_accumulate: usize,
    /// `objects`, `static` or `translate dx=<f> dy=<f>`.
    pub motion: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { videos: 4, frames: 20, width: 32, height: 32, n_accumulate: 7, motion: "objects".into(), seed: 0 }
    }
}

impl SynthConfig {
    pub fn video_id(index: usize) -> String {
        format!("toy_{index:03}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.frames < 3 || self.width == 0 || self.height == 0 || self.n_accumulate == 0 {
            return Err(Error::Config(
                "synth needs videos >= 1, frames >= 3, positive size and n_accumulate >= 1".into(),
            ));
        }
        self.motion.parse::<MotionSpec>().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Writes every video plus the manifest under `root`; returns the ids.
    pub fn generate(&self, root: &Path) -> Result<Vec<String>> {
        self.validate()?;
        let spec = ToySpec::new(self.width, self.height, self.motion.parse()?);
        let ids: Vec<String> = (0..self.videos).map(Self::video_id).collect();
        for (i, id) in ids.iter().enumerate() {
            let clip = make_toy_clip(self.seed.wrapping_add(i as u64), self.frames, &spec, self.n_accumulate)?;
            write_clip(root, id, &clip)?;
        }
        write_manifest(root, &ids)?;
        Ok(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root: written by `synth`, read by `train`.
    pub root: PathBuf,
    pub synth: SynthConfig,
    /// Video id held out from training and scored during it.
    pub validation: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("data/toy"), synth: SynthConfig::default(), validation: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dataset scored by `eval` and `ablate`; defaults to `data.root`.
    pub dataset: Option<PathBuf>,
    pub modes: Vec<String>,
    pub quantized: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { dataset: None, modes: vec!["ppn-only".into(), "ppn+abdn".into(), "full".into()], quantized: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Single-clip overfitting recipe on 32x32 toy frames: whole frames,
    /// no augmentation, 4-step windows, one window per batch.
    pub fn toy_overfit() -> Self {
        Self {
            data: DataConfig { synth: SynthConfig { videos: 1, ..SynthConfig::default() }, ..DataConfig::default() },
            model: ModelConfig::toy(),
            train: TrainConfig {
                lr: 1e-3,
                batch: 1,
                patch: 0,
                seq_len: 4,
                max_iters: 1000,
                augment: AugmentConfig::identity(),
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_value(text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_value(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `key.path=value`
    /// overrides, values parsed as TOML with a bare-string fallback.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_value(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.data.synth.validate()?;
        self.modes()?;
        Ok(())
    }

    pub fn modes(&self) -> Result<Vec<AblationMode>> {
        self.eval.modes.iter().map(|m| m.parse().map_err(|e: Error| Error::Config(e.to_string()))).collect()
    }

    /// Dataset used for evaluation, which must exist.
    pub fn eval_dataset(&self) -> Result<&Path> {
        existing(self.eval.dataset.as_deref().unwrap_or(&self.data.root))
    }

    /// Training dataset root, which must exist.
    pub fn train_dataset(&self) -> Result<&Path> {
        existing(&self.data.root)
    }
}

fn existing(p: &Path) -> Result<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Config(format!("path {} does not exist", p.display())))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{spec}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        let cfg = RunConfig::toy_overfit();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[train]\nlearning_rate = 0.1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[extra]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_replace_file_values() {
        let cfg = RunConfig::load(None, &["train.lr=0.005".into(), "data.root=elsewhere".into(), "train.patch=64".into()])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.data.root, PathBuf::from("elsewhere"));
        assert_eq!(cfg.train.patch, 64);
        assert!(RunConfig::load(None, &["train.lr".into()]).is_err());
        assert!(RunConfig::load(None, &["train.patch=30".into()]).is_err());
    }

    #[test]
    fn bad_modes_fail_validation() {
        assert!(RunConfig::load(None, &["eval.modes=[\"full\", \"fan-only\"]".into()]).is_err());
    }
}
