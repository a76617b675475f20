//! Frame-streaming wire format.
//!
//! Clients send [`PoseMessage`] JSON text frames. For every pose that is
//! rendered the server replies with a [`FrameMeta`] text frame followed by a
//! binary frame holding the request id (`u32`, little-endian) and a PNG.
//! Malformed messages get an [`ErrorReply`].

use anyhow::{anyhow, bail, ensure, Context, Result};
use base64::Engine;
use hyperreel_core::geometry::Camera;
use hyperreel_core::nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

/// Largest frame edge the server renders.
pub const MAX_FRAME_EDGE: u32 = 2048;
pub const DEFAULT_FOV_Y: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMessage {
    #[serde(rename = "type")]
    pub kind: String,
    /// Row-major camera-to-world matrix.
    pub camera_to_world: Vec<f64>,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub time: f64,
    pub request_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    #[serde(rename = "type")]
    pub kind: String,
    pub request_id: u32,
    pub render_milliseconds: f64,
}

impl FrameMeta {
    pub fn new(request_id: u32, render_milliseconds: f64) -> Self {
        FrameMeta {
            kind: "frame_meta".into(),
            request_id,
            render_milliseconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u32>,
    pub reason: String,
}

impl ErrorReply {
    pub fn new(request_id: Option<u32>, reason: impl Into<String>) -> Self {
        ErrorReply {
            kind: "error".into(),
            request_id,
            reason: reason.into(),
        }
    }
}

pub fn parse_pose_message(text: &str) -> Result<PoseMessage> {
    let msg: PoseMessage = serde_json::from_str(text).context("invalid pose message")?;
    ensure!(
        msg.kind == "pose",
        "unsupported message type '{}'",
        msg.kind
    );
    ensure!(
        msg.camera_to_world.len() == 16,
        "camera_to_world needs 16 values, got {}",
        msg.camera_to_world.len()
    );
    Ok(msg)
}

/// Camera for a row-major pose. Rotations off by more than 1e-3 are
/// rejected; smaller deviations are projected back onto a rotation.
pub fn camera_from_pose(values: &[f64], fov_y: f64, width: u32, height: u32) -> Result<Camera> {
    ensure!(
        values.len() == 16,
        "pose needs 16 values, got {}",
        values.len()
    );
    ensure!(
        values.iter().all(|v| v.is_finite()),
        "pose contains non-finite values"
    );
    ensure!(
        fov_y > 0.0 && fov_y < 180.0,
        "fov_y {fov_y} outside (0, 180)"
    );
    ensure!(
        (1..=MAX_FRAME_EDGE).contains(&width) && (1..=MAX_FRAME_EDGE).contains(&height),
        "frame size {width}x{height} outside 1..={MAX_FRAME_EDGE}"
    );
    let mut pose = Matrix4::from_row_slice(values);
    let rot: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let dev = (rot.transpose() * rot - Matrix3::identity()).abs().max();
    ensure!(
        dev <= 1e-3 && rot.determinant() > 0.0,
        "pose rotation is not orthonormal (deviation {dev:.2e})"
    );
    if dev > 1e-12 {
        let svd = rot.svd(true, true);
        let fixed = svd.u.ok_or_else(|| anyhow!("svd failed"))?
            * svd.v_t.ok_or_else(|| anyhow!("svd failed"))?;
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&fixed);
    }
    pose.set_row(
        3,
        &hyperreel_core::nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0),
    );
    Ok(Camera::with_fov_y(fov_y, width, height, pose)?)
}

/// Decodes the `pose` query parameter: base64 of 16 little-endian `f32` or
/// `f64` values (standard or URL-safe alphabet, padding optional).
pub fn decode_pose_param(text: &str) -> Result<Vec<f64>> {
    use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
    let bytes = [STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD]
        .iter()
        .find_map(|e| e.decode(text).ok())
        .ok_or_else(|| anyhow!("pose is not valid base64"))?;
    match bytes.len() {
        64 => Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect()),
        128 => Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()),
        n => bail!("pose must decode to 64 (f32) or 128 (f64) bytes, got {n}"),
    }
}

pub fn encode_pose_param(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes)
}

pub fn encode_frame(request_id: u32, png: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + png.len());
    out.extend_from_slice(&request_id.to_le_bytes());
    out.extend_from_slice(png);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<(u32, &[u8])> {
    ensure!(bytes.len() >= 4, "frame message shorter than its header");
    Ok((
        u32::from_le_bytes(bytes[..4].try_into().unwrap()),
        &bytes[4..],
    ))
}
