//! Dataset manifests (`hyperreel-dataset/1`), loading, and the bridge from a
//! dataset to a trainable model and ray pool.
//!
//! A dataset is a directory holding `manifest.json` and the PNG images it
//! references. The manifest is a single JSON document:
//!
//! ```json
//! {
//!   "schema": "hyperreel-dataset/1",
//!   "scene_kind": "forward_facing",
//!   "bounds": { "near": 1.5, "far": 6.0 },
//!   "background": [0.05, 0.05, 0.08],
//!   "ndc_reference": { ...camera... },
//!   "cameras": [
//!     { "name": "cam00", "width": 128, "height": 128,
//!       "fx": 137.2, "fy": 137.2, "cx": 64.0, "cy": 64.0,
//!       "camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]] }
//!   ],
//!   "frames": [
//!     { "camera_index": 0, "frame_index": 1, "time": 0.0, "image_path": "images/cam00_f001.png" }
//!   ],
//!   "holdout_cameras": ["cam05"]
//! }
//! ```
//!
//! `camera_to_world` is row-major. Cameras look down their local `-z` axis
//! with `+y` up. `frame_index` is 1-based and `time` is the normalized frame
//! time in `[0, 1]`. Images are 8-bit sRGB PNGs and are decoded to linear RGB
//! on load. Unknown fields are kept, reported as warnings and written back
//! unchanged. `generator` is free-form provenance. `ndc_reference`
//! (forward-facing scenes only) defaults to the first camera; `background`
//! defaults to black.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{camera_rays, Camera, NdcFrame, PrimitiveKind};
use crate::network::{init_params, SampleNetworkConfig, SizeVariant};
use crate::raster::Image;
use crate::render::{RenderOptions, SceneFrame, SceneModel, TimedRay};
use crate::train::{subsample_training_rays, FrameRays, RayPool, TrainConfig, VideoChunk};
use crate::volume::{Aabb, KeyframeVolume, VolumeConfig};

pub const SCHEMA: &str = "hyperreel-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    ForwardFacing,
    OutwardFacing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub camera_to_world: [[f64; 4]; 4],
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl CameraSpec {
    pub fn from_camera(camera: &Camera, name: Option<String>) -> Self {
        CameraSpec {
            name,
            width: camera.width,
            height: camera.height,
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            camera_to_world: std::array::from_fn(|r| std::array::from_fn(|c| camera.pose[(r, c)])),
            extra: BTreeMap::new(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let m = &self.camera_to_world;
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Matrix4::from_fn(|r, c| m[r][c]),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub camera_index: usize,
    /// 1-based frame number.
    pub frame_index: usize,
    pub time: f64,
    pub image_path: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

fn black() -> [f64; 3] {
    [0.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub scene_kind: SceneKind,
    pub bounds: Bounds,
    #[serde(default = "black")]
    pub background: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndc_reference: Option<CameraSpec>,
    pub cameras: Vec<CameraSpec>,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holdout_cameras: Vec<String>,
    /// Free-form provenance written by generators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Value>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Parses JSON into `T`, reporting the path of the offending field on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Spec(format!(
            "{what}: at `{path}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        ))
    })
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text, "manifest")
    }

    /// Descriptions of fields this reader does not know about.
    pub fn unknown_fields(&self) -> Vec<String> {
        let mut out: Vec<String> = self.extra.keys().map(|k| format!("manifest.{k}")).collect();
        for (i, c) in self.cameras.iter().enumerate() {
            out.extend(c.extra.keys().map(|k| format!("cameras[{i}].{k}")));
        }
        if let Some(r) = &self.ndc_reference {
            out.extend(r.extra.keys().map(|k| format!("ndc_reference.{k}")));
        }
        for (i, f) in self.frames.iter().enumerate() {
            out.extend(f.extra.keys().map(|k| format!("frames[{i}].{k}")));
        }
        out
    }

    pub fn n_frames(&self) -> usize {
        self.frames.iter().map(|f| f.frame_index).max().unwrap_or(0)
    }

    pub fn camera_name(&self, index: usize) -> String {
        self.cameras[index]
            .name
            .clone()
            .unwrap_or_else(|| format!("#{index}"))
    }

    pub fn camera_index(&self, name: &str) -> Result<usize> {
        self.cameras
            .iter()
            .enumerate()
            .position(|(i, c)| c.name.as_deref() == Some(name) || format!("#{i}") == name)
            .ok_or_else(|| Error::Spec(format!("camera '{name}' is not in the manifest")))
    }

    pub fn holdout_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.camera_index(n)).collect()
    }

    /// Cameras not listed in `holdout_cameras`.
    pub fn training_cameras(&self) -> Result<Vec<usize>> {
        let held = self.holdout_indices(&self.holdout_cameras)?;
        Ok((0..self.cameras.len())
            .filter(|i| !held.contains(i))
            .collect())
    }

    fn validate(&self, root: &Path) -> Result<()> {
        let fail = |detail: String| Error::Dataset {
            path: root.join(MANIFEST_FILE),
            detail,
        };
        if self.schema != SCHEMA {
            return Err(fail(format!(
                "schema is '{}', expected '{SCHEMA}'",
                self.schema
            )));
        }
        if !(self.bounds.near > 0.0 && self.bounds.far > self.bounds.near) {
            return Err(fail("bounds must satisfy 0 < near < far".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(fail("background must lie in [0, 1]".into()));
        }
        if self.cameras.is_empty() || self.frames.is_empty() {
            return Err(fail(
                "manifest needs at least one camera and one frame".into(),
            ));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.to_camera()
                .map_err(|e| fail(format!("cameras[{i}]: {e}")))?;
        }
        let mut times: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            if f.camera_index >= self.cameras.len() {
                return Err(fail(format!(
                    "frames[{i}].camera_index {} out of range",
                    f.camera_index
                )));
            }
            if f.frame_index == 0 {
                return Err(fail(format!("frames[{i}].frame_index must be 1-based")));
            }
            if !(0.0..=1.0).contains(&f.time) {
                return Err(fail(format!("frames[{i}].time {} outside [0, 1]", f.time)));
            }
            if let Some(&t) = times.get(&f.frame_index) {
                if t != f.time {
                    return Err(fail(format!(
                        "frames[{i}]: frame {} has two different times",
                        f.frame_index
                    )));
                }
            }
            times.insert(f.frame_index, f.time);
        }
        if times
            .values()
            .zip(times.values().skip(1))
            .any(|(a, b)| a > b)
        {
            return Err(fail(
                "frame times must not decrease with frame_index".into(),
            ));
        }
        self.holdout_indices(&self.holdout_cameras)
            .map_err(|e| fail(e.to_string()))?;
        Ok(())
    }
}

/// A validated manifest with decoded linear-RGB images (one per frame entry).
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub warnings: Vec<String>,
}

pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Dataset {
        path: path.clone(),
        detail: format!("cannot read manifest: {e}"),
    })?;
    let manifest = DatasetManifest::from_json(&text).map_err(|e| Error::Dataset {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    manifest.validate(root)?;
    let warnings: Vec<String> = manifest
        .unknown_fields()
        .into_iter()
        .map(|f| format!("ignoring unknown field {f}"))
        .collect();
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    let cameras = manifest
        .cameras
        .iter()
        .map(CameraSpec::to_camera)
        .collect::<Result<Vec<_>>>()?;
    let images = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let img_path = root.join(&f.image_path);
            let img = Image::load_png(&img_path).map_err(|e| Error::Dataset {
                path: img_path.clone(),
                detail: format!("frames[{i}]: cannot load image: {e}"),
            })?;
            let cam = &cameras[f.camera_index];
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(Error::Dataset {
                    path: img_path,
                    detail: format!(
                        "frames[{i}] (camera {}, frame {}): image is {}x{}, camera expects {}x{}",
                        f.camera_index, f.frame_index, img.width, img.height, cam.width, cam.height
                    ),
                });
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        root: root.to_path_buf(),
        manifest,
        cameras,
        images,
        warnings,
    })
}

impl LoadedDataset {
    pub fn n_frames(&self) -> usize {
        self.manifest.n_frames()
    }

    pub fn scene_frame(&self) -> Result<SceneFrame> {
        Ok(match self.manifest.scene_kind {
            SceneKind::ForwardFacing => {
                let reference = match &self.manifest.ndc_reference {
                    Some(r) => r.to_camera()?,
                    None => self.cameras[0].clone(),
                };
                SceneFrame::Ndc {
                    frame: NdcFrame::new(&reference, self.manifest.bounds.near)?,
                }
            }
            SceneKind::OutwardFacing => SceneFrame::World { contract: true },
        })
    }

    /// Fresh model for one video chunk.
    pub fn build_model(&self, config: &TrainConfig, chunk: &VideoChunk) -> Result<SceneModel> {
        let frame = self.scene_frame()?;
        let kind = match self.manifest.scene_kind {
            SceneKind::ForwardFacing => PrimitiveKind::ZPlane,
            SceneKind::OutwardFacing => PrimitiveKind::ConcentricSphere,
        };
        let dynamic = chunk.len() > 1;
        let mut net = SampleNetworkConfig::preset(config.size_variant, kind, dynamic);
        if let Some(n) = config.n_primitives {
            if !matches!(config.size_variant, SizeVariant::Full | SizeVariant::Custom) {
                return Err(Error::contract(
                    "n_primitives can only be overridden for the full size variant",
                ));
            }
            net.n_primitives = n;
        }
        if kind == PrimitiveKind::ConcentricSphere {
            net.anchor_range = (self.manifest.bounds.near.min(0.5), self.manifest.bounds.far);
        }
        net.validate()?;
        let n_keyframes = if dynamic {
            chunk.keyframe_frames.len()
        } else {
            1
        };
        let times = if dynamic {
            chunk.keyframe_times()
        } else {
            vec![0.0]
        };
        let (bbox, far_bound) = match frame {
            SceneFrame::Ndc { .. } => (Aabb::cube(1.0), 4.0),
            SceneFrame::World { .. } => (Aabb::cube(2.0), self.manifest.bounds.far),
        };
        let vcfg = VolumeConfig {
            grid_res: [config.grid_init; 3],
            n_keyframes,
            bbox,
            ..VolumeConfig::default()
        };
        let volume = KeyframeVolume::new(vcfg, times, config.seed.wrapping_add(1))?;
        let network = init_params(&net, config.seed);
        let render = RenderOptions {
            background: self.manifest.background,
            far_bound,
            ..RenderOptions::default()
        };
        SceneModel::new(net, network, volume, render, frame)
    }

    /// Model time of a frame within `chunk`.
    pub fn chunk_time(&self, chunk: &VideoChunk, frame_index: usize) -> Option<f64> {
        (chunk.len() > 1).then(|| chunk.time(frame_index - 1 - chunk.start))
    }

    /// Rays and colors of `cameras` over the frames of `chunk`. Dynamic
    /// chunks are thinned with the per-frame subsampling rule.
    pub fn build_ray_pool(
        &self,
        model: &SceneModel,
        chunk: &VideoChunk,
        cameras: &[usize],
    ) -> Result<RayPool> {
        let frames = self
            .manifest
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| {
                cameras.contains(&f.camera_index)
                    && (chunk.start..chunk.end).contains(&(f.frame_index - 1))
            })
            .map(|(i, f)| {
                let cam = &self.cameras[f.camera_index];
                let time = self.chunk_time(chunk, f.frame_index);
                let rays = camera_rays(cam)
                    .iter()
                    .map(|r| {
                        Ok(TimedRay {
                            ray: model.network_ray(r)?,
                            time,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FrameRays {
                    m: f.frame_index,
                    width: cam.width as usize,
                    height: cam.height as usize,
                    rays,
                    colors: self.images[i].pixels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::contract("no training frames selected"));
        }
        let (rays, colors) = if model.dynamic() {
            subsample_training_rays(&frames)
        } else {
            let mut pool = RayPool::default();
            for f in frames {
                pool.rays.extend(f.rays);
                pool.colors.extend(f.colors);
            }
            (pool.rays, pool.colors)
        };
        Ok(RayPool { rays, colors })
    }
}
