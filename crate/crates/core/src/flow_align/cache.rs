use std::fs;
use std::path::{Path, PathBuf};

use super::{FlowDirection, FlowField};
use crate::error::{Error, Result};

/// Writes `H`, `W` as little-endian `u32`, then the `dx` and `dy` planes as
/// little-endian `f32`.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let (w, h) = flow.dims();
    let mut bytes = Vec::with_capacity(8 + 8 * w * h);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in flow.dx().iter().chain(flow.dy()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path, direction: FlowDirection) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Ingestion(format!("flow file {}: {what}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("missing header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 8 * w * h {
        return Err(bad(&format!("expected {} bytes for {w}x{h}, found {}", 8 + 8 * w * h, bytes.len())));
    }
    let mut values =
        bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let dx: Vec<f32> = values.by_ref().take(w * h).collect();
    let dy: Vec<f32> = values.collect();
    Ok(FlowField::from_components(w, h, dx, dy).map_err(|e| bad(&e.to_string()))?.with_direction(direction))
}

/// On-disk flow store keyed by video, frame index and direction.
#[derive(Clone, Debug)]
pub struct FlowCache {
    root: PathBuf,
}

impl FlowCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, video_id: &str, frame_index: usize, direction: FlowDirection) -> PathBuf {
        self.root.join(video_id).join(format!("{frame_index:05}.{}.flow", direction.as_str()))
    }

    pub fn get(&self, video_id: &str, frame_index: usize, direction: FlowDirection) -> Result<Option<FlowField>> {
        let path = self.path(video_id, frame_index, direction);
        if path.exists() {
            read_flow(&path, direction).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn put(&self, video_id: &str, frame_index: usize, flow: &FlowField) -> Result<()> {
        write_flow(&self.path(video_id, frame_index, flow.direction), flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FlowCache::new(dir.path());
        let dx: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 2.0).collect();
        let dy: Vec<f32> = (0..12).map(|i| -(i as f32) * 0.11).collect();
        let flow = FlowField::from_components(4, 3, dx, dy).unwrap().with_direction(FlowDirection::Backward);
        cache.put("clip", 7, &flow).unwrap();
        assert_eq!(cache.get("clip", 7, FlowDirection::Backward).unwrap(), Some(flow));
        assert_eq!(cache.get("clip", 7, FlowDirection::Forward).unwrap(), None);
        let bytes = fs::read(cache.path("clip", 7, FlowDirection::Backward)).unwrap();
        assert_eq!(&bytes[0..8], &[3, 0, 0, 0, 4, 0, 0, 0]);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flow");
        write_flow(&path, &FlowField::zeros(3, 3)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_flow(&path, FlowDirection::Forward).is_err());
    }
}
