//! Binary checkpoint container:
//!
//! ```text
//! magic "VDBLCKPT" | version u32 | manifest length u64 | manifest (TOML)
//! | tensor count u32 | per tensor: name length u32, name, shape 4 x u32, f32 data
//! | SHA-256 of everything before
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vdeblur_autograd::{ParamStore, Tensor};

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VDBLCKPT";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed iterations.
    pub iteration: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState>,
    /// Free-form configuration text of the run that produced this file.
    pub snapshot: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    iteration: u64,
    adam_step: Option<u64>,
    snapshot: String,
    model: ModelConfig,
    train: TrainConfig,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    for d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        iteration: ck.iteration,
        adam_step: ck.adam.as_ref().map(|a| a.step),
        snapshot: ck.snapshot.clone(),
        model: ck.model.clone(),
        train: ck.train.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("cannot serialise manifest: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let n_adam = if ck.adam.is_some() { 2 * ck.params.len() } else { 0 };
    put_u32(&mut out, (ck.params.len() + n_adam) as u32);
    for (_, name, t) in ck.params.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(adam) = &ck.adam {
        adam.check_matches(&ck.params)?;
        for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
            for ((_, name, _), t) in ck.params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CheckpointCorrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u32()? as usize;
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor {name} has an absurd shape {shape:?}")))?;
        let data = self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointCorrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::CheckpointCorrupt("file is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointCorrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let mlen = usize::try_from(r.u64()?).map_err(|_| Error::CheckpointCorrupt("manifest too large".into()))?;
    let text = std::str::from_utf8(r.take(mlen)?).map_err(|_| Error::CheckpointCorrupt("manifest is not UTF-8".into()))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| Error::CheckpointCorrupt(format!("bad manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::CheckpointCorrupt("manifest version disagrees with header".into()));
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(base) = name.strip_prefix(ADAM_M) {
            check_moment(&params, base, &t, m.len())?;
            m.push(t);
        } else if let Some(base) = name.strip_prefix(ADAM_V) {
            check_moment(&params, base, &t, v.len())?;
            v.push(t);
        } else {
            params.insert(name, t).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        }
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes after the last tensor".into()));
    }
    let adam = match manifest.adam_step {
        Some(step) => {
            let state = AdamState { step, m, v };
            state.check_matches(&params)?;
            Some(state)
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::CheckpointCorrupt("optimizer tensors without optimizer step".into())),
    };
    Ok(Checkpoint {
        iteration: manifest.iteration,
        model: manifest.model,
        train: manifest.train,
        params,
        adam,
        snapshot: manifest.snapshot,
    })
}

fn check_moment(params: &ParamStore<f32>, base: &str, t: &Tensor<f32>, k: usize) -> Result<()> {
    let expected = params.ids().nth(k).map(|id| (params.name(id), params.get(id).shape()));
    match expected {
        Some((name, shape)) if name == base && shape == t.shape() => Ok(()),
        _ => Err(Error::CheckpointCorrupt(format!("optimizer tensor for {base} is out of place"))),
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
