use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{BlurSharpPair, TrainingSequence, VideoClip};
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Where [`ingest_directory`] expects to find videos.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `path` is one video directory holding `blur/` and `sharp/`.
    Video,
    /// `path` is a dataset root with one subdirectory per video, listed in
    /// `manifest.txt` when present (otherwise every subdirectory, sorted).
    Dataset,
}

fn frame_file(index: usize) -> String {
    format!("{index:05}.png")
}

/// Frame index -> file path for every `NNNNN.png` under `dir`.
fn list_frames(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index: usize = stem
            .parse()
            .map_err(|_| Error::Ingestion(format!("{} is not named by a frame index", path.display())))?;
        frames.insert(index, path);
    }
    Ok(frames)
}

fn ingest_video(dir: &Path, id: &str) -> Result<VideoClip> {
    let blur = list_frames(&dir.join("blur"))?;
    let sharp = list_frames(&dir.join("sharp"))?;
    for (idx, path) in &blur {
        if !sharp.contains_key(idx) {
            return Err(Error::Ingestion(format!(
                "{} has no sharp counterpart {}",
                path.display(),
                dir.join("sharp").join(frame_file(*idx)).display()
            )));
        }
    }
    for (idx, path) in &sharp {
        if !blur.contains_key(idx) {
            return Err(Error::Ingestion(format!(
                "{} has no blurry counterpart {}",
                path.display(),
                dir.join("blur").join(frame_file(*idx)).display()
            )));
        }
    }
    let pairs = blur
        .iter()
        .map(|(idx, bpath)| {
            let b = Frame::load_png(bpath)?;
            let s = Frame::load_png(&sharp[idx])?;
            BlurSharpPair::new(b, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let sequence = TrainingSequence::new(pairs)
        .map_err(|e| Error::Ingestion(format!("video {id} at {}: {e}", dir.display())))?;
    Ok(VideoClip { id: id.to_string(), sequence })
}

pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_manifest(root: &Path, ids: &[String]) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads blurry/sharp PNG pairs, sorted by frame index.
pub fn ingest_directory(path: &Path, layout: Layout) -> Result<Vec<VideoClip>> {
    match layout {
        Layout::Video => {
            let id = path.file_name().and_then(|n| n.to_str()).unwrap_or("video").to_string();
            Ok(vec![ingest_video(path, &id)?])
        }
        Layout::Dataset => {
            let ids = if path.join(MANIFEST_FILE).exists() {
                read_manifest(path)?
            } else {
                let mut ids = Vec::new();
                for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
                    let p = entry.map_err(|e| Error::io(path, e))?.path();
                    if p.is_dir() {
                        ids.push(p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
                    }
                }
                ids.sort();
                ids
            };
            if ids.is_empty() {
                return Err(Error::Ingestion(format!("no videos under {}", path.display())));
            }
            ids.iter().map(|id| ingest_video(&path.join(id), id)).collect()
        }
    }
}

/// Writes `<root>/<id>/{blur,sharp}/NNNNN.png`.
pub fn write_clip(root: &Path, id: &str, seq: &TrainingSequence) -> Result<()> {
    let dir = root.join(id);
    for sub in ["blur", "sharp"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, p) in seq.pairs().iter().enumerate() {
        p.blurry.save_png(&dir.join("blur").join(frame_file(i)))?;
        p.sharp.save_png(&dir.join("sharp").join(frame_file(i)))?;
    }
    Ok(())
}
