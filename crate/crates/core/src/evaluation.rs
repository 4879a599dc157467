//! PSNR scoring, benchmark reports and the module-ablation harness.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::model::{DanModel, StageToggles};
use crate::pipeline::run_video;
use crate::video_data::VideoClip;

pub const DEFAULT_PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsnrOptions {
    /// Reported when the frames are identical.
    pub cap: f64,
    /// Round both frames to 8 bits first.
    pub quantized: bool,
}

impl Default for PsnrOptions {
    fn default() -> Self {
        Self { cap: DEFAULT_PSNR_CAP, quantized: false }
    }
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(pred: &Frame, target: &Frame) -> Result<f64> {
    psnr_with(pred, target, &PsnrOptions::default())
}

pub fn psnr_with(pred: &Frame, target: &Frame, opts: &PsnrOptions) -> Result<f64> {
    pred.ensure_same_dims(target, "psnr")?;
    let mse = if opts.quantized { pred.quantized().mse(&target.quantized()) } else { pred.mse(target) };
    Ok(if mse <= 0.0 { opts.cap } else { (10.0 * (1.0 / mse).log10()).min(opts.cap) })
}

/// Mean per-frame PSNR of two equally long frame lists.
pub fn mean_psnr(pred: &[Frame], target: &[Frame], opts: &PsnrOptions) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Contract(format!("cannot score {} frames against {}", pred.len(), target.len())));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| psnr_with(p, t, opts)).sum::<Result<f64>>()?;
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    pub psnr: Vec<f64>,
}

impl VideoScores {
    pub fn mean(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len().max(1) as f64
    }
}

/// Per-frame PSNR for a set of videos.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: String,
    pub videos: Vec<VideoScores>,
}

impl EvalReport {
    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(|v| v.psnr.len()).sum()
    }

    /// Mean over all frames (per-video means weighted by frame count).
    pub fn overall_mean(&self) -> f64 {
        let n = self.frame_count();
        self.videos.iter().flat_map(|v| &v.psnr).sum::<f64>() / n.max(1) as f64
    }

    /// CSV rows `video_id,frame_index,psnr` followed by `#` summary lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("video_id,frame_index,psnr\n");
        for v in &self.videos {
            for (i, p) in v.psnr.iter().enumerate() {
                out.push_str(&format!("{},{},{:.6}\n", v.video_id, i, p));
            }
        }
        out.push_str(&format!("# label {}\n", self.label));
        out.push_str(&format!("# config {}\n", self.fingerprint));
        for v in &self.videos {
            out.push_str(&format!("# video {} frames {} mean {:.6}\n", v.video_id, v.psnr.len(), v.mean()));
        }
        out.push_str(&format!("# overall frames {} mean {:.6}\n", self.frame_count(), self.overall_mean()));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a report from its CSV rows; `#` lines other than the label
    /// and config are ignored since they are derived.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut report = EvalReport { label: String::new(), fingerprint: String::new(), videos: Vec::new() };
        let bad = |line: &str| Error::Argument(format!("malformed report line: {line}"));
        for line in text.lines().skip(1) {
            if let Some(rest) = line.strip_prefix("# label ") {
                report.label = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("# config ") {
                report.fingerprint = rest.to_string();
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                let mut parts = line.split(',');
                let (Some(id), Some(idx), Some(p), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                    return Err(bad(line));
                };
                let idx: usize = idx.parse().map_err(|_| bad(line))?;
                let p: f64 = p.parse().map_err(|_| bad(line))?;
                if report.videos.last().map(|v| v.video_id.as_str()) != Some(id) {
                    report.videos.push(VideoScores { video_id: id.to_string(), psnr: Vec::new() });
                }
                let v = report.videos.last_mut().expect("just pushed");
                if idx != v.psnr.len() {
                    return Err(bad(line));
                }
                v.psnr.push(p);
            }
        }
        Ok(report)
    }
}

/// Short hex digest identifying a configuration.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn model_fingerprint(model: &DanModel, extra: &str) -> String {
    let cfg = toml::to_string(&model.config).unwrap_or_default();
    fingerprint(&format!("{cfg}\n{extra}"))
}

/// Which stage's output a mode reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputStage {
    Preprocessed,
    Deblurred,
    Aggregated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    PpnOnly,
    PpnAbdn,
    Full,
    AbdnOnly,
    NoNlb,
    NoOccAbdn,
    NoOccFan,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::PpnOnly,
        AblationMode::PpnAbdn,
        AblationMode::Full,
        AblationMode::AbdnOnly,
        AblationMode::NoNlb,
        AblationMode::NoOccAbdn,
        AblationMode::NoOccFan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::PpnOnly => "ppn-only",
            AblationMode::PpnAbdn => "ppn+abdn",
            AblationMode::Full => "full",
            AblationMode::AbdnOnly => "abdn-only",
            AblationMode::NoNlb => "no-nlb",
            AblationMode::NoOccAbdn => "no-occ-abdn",
            AblationMode::NoOccFan => "no-occ-fan",
        }
    }

    pub fn toggles(self) -> StageToggles {
        let all = StageToggles::default();
        match self {
            AblationMode::PpnOnly | AblationMode::PpnAbdn | AblationMode::Full => all,
            AblationMode::AbdnOnly => StageToggles { use_ppn: false, use_nlb: false, ..all },
            AblationMode::NoNlb => StageToggles { use_nlb: false, ..all },
            AblationMode::NoOccAbdn => StageToggles { occ_abdn: false, ..all },
            AblationMode::NoOccFan => StageToggles { occ_fan: false, ..all },
        }
    }

    pub fn output(self) -> OutputStage {
        match self {
            AblationMode::PpnOnly => OutputStage::Preprocessed,
            AblationMode::PpnAbdn | AblationMode::AbdnOnly => OutputStage::Deblurred,
            _ => OutputStage::Aggregated,
        }
    }

    /// Modes that remove a stage the later stages were trained to expect;
    /// a faithful comparison retrains with the stage disabled.
    pub fn retrain_recommended(self, trained: &StageToggles) -> bool {
        let t = self.toggles();
        (trained.use_ppn && !t.use_ppn)
            || (trained.use_nlb && !t.use_nlb)
            || (trained.occ_abdn && !t.occ_abdn)
            || (trained.occ_fan && !t.occ_fan)
    }

    /// Fails when the mode needs a stage the checkpoint was trained without.
    pub fn check_compatible(self, trained: &StageToggles) -> Result<()> {
        let t = self.toggles();
        let missing = [
            (t.use_ppn && !trained.use_ppn, "preprocessing network"),
            (t.use_nlb && !trained.use_nlb, "non-local fusion"),
            (t.occ_abdn && !trained.occ_abdn, "deblurring occlusion input"),
            (t.occ_fan && !trained.occ_fan, "aggregation occlusion input"),
        ];
        match missing.iter().find(|(m, _)| *m) {
            Some((_, stage)) => Err(Error::IncompatibleMode {
                mode: self.as_str().to_string(),
                reason: format!("checkpoint was trained without the {stage}"),
            }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "ppn+abdn+fan" => return Ok(AblationMode::Full),
            "ppn" => return Ok(AblationMode::PpnOnly),
            _ => {}
        }
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown ablation mode {s:?}")))
    }
}

/// PSNR of the blurry inputs against the sharp targets.
pub fn baseline(clips: &[VideoClip], opts: &PsnrOptions) -> Result<EvalReport> {
    let videos = clips
        .iter()
        .map(|c| {
            let psnr = c
                .sequence
                .pairs()
                .iter()
                .map(|p| psnr_with(&p.blurry, &p.sharp, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok(VideoScores { video_id: c.id.clone(), psnr })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { label: "blurry".into(), fingerprint: fingerprint("blurry"), videos })
}

fn score_mode(model: &DanModel, clips: &[VideoClip], mode: AblationMode, opts: &PsnrOptions) -> Result<EvalReport> {
    let videos = clips
        .iter()
        .map(|c| {
            let out = run_video(model, &c.sequence.blurry(), mode.toggles(), false)?;
            let frames = match mode.output() {
                OutputStage::Preprocessed => &out.preprocessed,
                OutputStage::Deblurred => &out.deblurred,
                OutputStage::Aggregated => &out.aggregated,
            };
            let psnr = frames
                .iter()
                .zip(c.sequence.pairs())
                .map(|(f, p)| psnr_with(f, &p.sharp, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok(VideoScores { video_id: c.id.clone(), psnr })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        label: mode.as_str().to_string(),
        fingerprint: model_fingerprint(model, &format!("mode={mode} quantized={}", opts.quantized)),
        videos,
    })
}

/// Full-pipeline evaluation: aggregated outputs against the sharp frames.
pub fn evaluate(model: &DanModel, clips: &[VideoClip], opts: &PsnrOptions) -> Result<EvalReport> {
    score_mode(model, clips, AblationMode::Full, opts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub report: EvalReport,
    pub retrain_recommended: bool,
}

pub fn ablate(
    model: &DanModel,
    trained: &StageToggles,
    clips: &[VideoClip],
    mode: AblationMode,
    opts: &PsnrOptions,
) -> Result<AblationReport> {
    mode.check_compatible(trained)?;
    Ok(AblationReport {
        mode,
        report: score_mode(model, clips, mode, opts)?,
        retrain_recommended: mode.retrain_recommended(trained),
    })
}

/// Expected ordering full >= ppn+abdn >= ppn-only, each with a tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub full: f64,
    pub ppn_abdn: f64,
    pub ppn_only: f64,
    pub tolerance: f64,
    pub holds: bool,
}

impl TrendCheck {
    pub fn new(full: f64, ppn_abdn: f64, ppn_only: f64, tolerance: f64) -> Self {
        let holds = full >= ppn_abdn - tolerance && ppn_abdn >= ppn_only - tolerance;
        Self { full, ppn_abdn, ppn_only, tolerance, holds }
    }

    pub fn summary(&self) -> String {
        format!(
            "# trend full {:.4} >= ppn+abdn {:.4} >= ppn-only {:.4} (tolerance {} dB): {}",
            self.full,
            self.ppn_abdn,
            self.ppn_only,
            self.tolerance,
            if self.holds { "holds" } else { "FAILED" }
        )
    }
}
