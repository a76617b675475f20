//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HYPR"            4 bytes
//! version           u32
//! payload_len       u64
//! payload           payload_len bytes
//! crc32(payload)    u32
//! ```
//!
//! The payload holds a length-prefixed JSON header (configurations, keyframe
//! times, render options), the iteration counter as `u64`, and the parameter
//! tensors. Each tensor is written as a length-prefixed UTF-8 name, a `u32`
//! rank, `u64` dimensions and then `f32` values. Parameters are stored in
//! single precision; models whose parameters are already `f32`-representable
//! (see [`crate::train::snap_to_f32`]) round-trip bit-exactly.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{SampleNetworkConfig, SampleNetworkParams};
use crate::render::{RenderOptions, SamplingFlags, SceneFrame, SceneModel};
use crate::train::TrainConfig;
use crate::volume::{KeyframeVolume, VolumeConfig};

pub const MAGIC: &[u8; 4] = b"HYPR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    network: SampleNetworkConfig,
    volume: VolumeConfig,
    keyframe_times: Vec<f64>,
    render: RenderOptions,
    frame: SceneFrame,
    flags: SamplingFlags,
    train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SceneModel,
    pub train: Option<TrainConfig>,
    pub iteration: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(model: &SceneModel, train: Option<&TrainConfig>, iteration: u64) -> Result<Vec<u8>> {
    let header = Header {
        network: model.network_config.clone(),
        volume: model.volume.config.clone(),
        keyframe_times: model.volume.keyframe_times.clone(),
        render: model.render.clone(),
        frame: model.frame.clone(),
        flags: model.flags,
        train: train.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    put_u32(&mut payload, json.len() as u32);
    payload.extend_from_slice(&json);
    put_u64(&mut payload, iteration);
    let tensors: Vec<_> = model
        .volume
        .params
        .tensors()
        .into_iter()
        .chain(model.network.tensors())
        .collect();
    put_u32(&mut payload, tensors.len() as u32);
    for (name, dims, data) in tensors {
        put_u32(&mut payload, name.len() as u32);
        payload.extend_from_slice(name.as_bytes());
        put_u32(&mut payload, dims.len() as u32);
        for d in dims {
            put_u64(&mut payload, d as u64);
        }
        for &x in data {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc32fast::hash(&payload));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("checkpoint payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + len + 4 {
        return Err(Error::Integrity(format!(
            "checkpoint is {} bytes, header promises {}",
            bytes.len(),
            16 + len + 4
        )));
    }
    let payload = &bytes[16..16 + len];
    let stored = u32::from_le_bytes(bytes[16 + len..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }

    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?)?;
    let iteration = r.u64()?;
    header.network.validate()?;
    let mut volume = KeyframeVolume::zeros(header.volume, header.keyframe_times)?;
    let mut network = SampleNetworkParams::zeros(&header.network);
    let count = r.u32()? as usize;
    {
        let mut targets: Vec<(String, Vec<usize>, &mut [f64])> = {
            let shapes: Vec<(String, Vec<usize>)> = volume
                .params
                .tensors()
                .into_iter()
                .chain(network.tensors())
                .map(|(n, d, _)| (n, d))
                .collect();
            let slots = volume
                .params
                .tensors_mut()
                .into_iter()
                .chain(network.tensors_mut());
            shapes
                .into_iter()
                .zip(slots)
                .map(|((n, d), s)| (n, d, s))
                .collect()
        };
        if count != targets.len() {
            return Err(Error::Integrity(format!(
                "{count} tensors stored, model has {}",
                targets.len()
            )));
        }
        for (name, dims, slot) in targets.iter_mut() {
            let nlen = r.u32()? as usize;
            let stored_name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            if stored_name != name {
                return Err(Error::Integrity(format!(
                    "expected tensor {name}, found {stored_name}"
                )));
            }
            let rank = r.u32()? as usize;
            let stored_dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &stored_dims != dims {
                return Err(Error::Integrity(format!(
                    "tensor {name} has dims {stored_dims:?}, expected {dims:?}"
                )));
            }
            let raw = r.take(4 * slot.len())?;
            for (v, b) in slot.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
            }
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Integrity(
            "trailing bytes after the last tensor".into(),
        ));
    }
    let mut model = SceneModel::new(header.network, network, volume, header.render, header.frame)?;
    model.flags = header.flags;
    Ok(Checkpoint {
        model,
        train: header.train,
        iteration,
    })
}

/// Writes atomically: the bytes go to a sibling temporary file that is then renamed.
pub fn save_checkpoint(
    path: &Path,
    model: &SceneModel,
    train: Option<&TrainConfig>,
    iteration: u64,
) -> Result<()> {
    let bytes = encode(model, train, iteration)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract("checkpoint path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
