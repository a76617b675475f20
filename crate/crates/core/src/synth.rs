//! Analytic synthetic scenes rendered by exact ray tracing.
//!
//! Cameras sit in the `z = 0` plane and look towards `-z`; scene content lies
//! between the `near` and `far` depths. Spheres are Lambertian under a fixed
//! directional light plus ambient term. The view-dependent disk is a striped,
//! unshaded disk whose depth moves with the horizontal viewing angle, so no
//! single 3D surface explains all views.

use std::path::Path;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Bounds, CameraSpec, DatasetManifest, FrameEntry, SceneKind, MANIFEST_FILE, SCHEMA,
};
use crate::error::{Error, Result};
use crate::geometry::{look_at, Camera, Ray, Vec3};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticVariant {
    DiffuseStatic,
    MovingSphere,
    ViewDependentShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Sinusoidal translation `center + amplitude * sin(2 pi tau / period)` of one sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub sphere: usize,
    pub amplitude: [f64; 3],
    pub period: f64,
}

/// A striped disk facing the cameras. Its depth is
/// `center.z + magnitude * (d.x / -d.z)` for a ray with direction `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub magnitude: f64,
    /// Stripes per world unit along `x`.
    pub stripe_frequency: f64,
    pub colors: [[f64; 3]; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigLayout {
    Grid,
    Ring,
    Spiral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub layout: RigLayout,
    pub count: usize,
    /// Half-extent of the rig in the `z = 0` plane.
    pub radius: f64,
    /// Indices of cameras reserved for evaluation.
    #[serde(default)]
    pub holdout: Vec<usize>,
    /// Cameras look at `(0, 0, -look_at_depth)`; `None` keeps them parallel.
    #[serde(default)]
    pub look_at_depth: Option<f64>,
    /// Uniform random perturbation of camera positions (seeded).
    #[serde(default)]
    pub jitter: f64,
}

fn default_light() -> [f64; 3] {
    [0.4, 0.6, 0.7]
}

fn default_ambient() -> f64 {
    0.3
}

fn default_supersample() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub variant: SyntheticVariant,
    #[serde(default)]
    pub spheres: Vec<SphereSpec>,
    #[serde(default)]
    pub motion: Option<MotionSpec>,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
    pub background: [f64; 3],
    #[serde(default = "default_light")]
    pub light_dir: [f64; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    pub rig: RigSpec,
    pub resolution: [u32; 2],
    pub fov_y: f64,
    pub n_frames: usize,
    pub bounds: Bounds,
    /// Samples per pixel along each axis.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

fn unit_range(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl SyntheticSceneSpec {
    /// Three Lambertian spheres, 12 training cameras plus 2 held out.
    pub fn diffuse_static(resolution: u32) -> Self {
        SyntheticSceneSpec {
            variant: SyntheticVariant::DiffuseStatic,
            spheres: vec![
                SphereSpec {
                    center: [-0.55, -0.2, -3.4],
                    radius: 0.45,
                    albedo: [0.9, 0.25, 0.2],
                },
                SphereSpec {
                    center: [0.45, 0.25, -3.9],
                    radius: 0.55,
                    albedo: [0.25, 0.8, 0.3],
                },
                SphereSpec {
                    center: [0.1, -0.45, -2.8],
                    radius: 0.3,
                    albedo: [0.25, 0.35, 0.9],
                },
            ],
            motion: None,
            shift: None,
            background: [0.08, 0.08, 0.1],
            light_dir: default_light(),
            ambient: default_ambient(),
            rig: RigSpec {
                layout: RigLayout::Spiral,
                count: 14,
                radius: 0.35,
                holdout: vec![2, 7],
                look_at_depth: Some(3.5),
                jitter: 0.0,
            },
            resolution: [resolution, resolution],
            fov_y: 40.0,
            n_frames: 1,
            bounds: Bounds {
                near: 1.5,
                far: 6.0,
            },
            supersample: 2,
        }
    }

    /// One sphere translating sideways over the clip in front of a static one.
    pub fn moving_sphere(resolution: u32, n_frames: usize) -> Self {
        SyntheticSceneSpec {
            variant: SyntheticVariant::MovingSphere,
            spheres: vec![
                SphereSpec {
                    center: [-0.2, 0.0, -3.2],
                    radius: 0.4,
                    albedo: [0.9, 0.3, 0.2],
                },
                SphereSpec {
                    center: [0.5, 0.3, -4.2],
                    radius: 0.5,
                    albedo: [0.3, 0.5, 0.9],
                },
            ],
            motion: Some(MotionSpec {
                sphere: 0,
                amplitude: [0.5, 0.15, 0.0],
                period: 2.0,
            }),
            shift: None,
            background: [0.08, 0.08, 0.1],
            light_dir: default_light(),
            ambient: default_ambient(),
            rig: RigSpec {
                layout: RigLayout::Spiral,
                count: 9,
                radius: 0.35,
                holdout: vec![2],
                look_at_depth: Some(3.5),
                jitter: 0.0,
            },
            resolution: [resolution, resolution],
            fov_y: 40.0,
            n_frames,
            bounds: Bounds {
                near: 1.5,
                far: 6.0,
            },
            supersample: 2,
        }
    }

    /// A striped disk whose apparent depth follows the viewing angle.
    pub fn view_dependent_shift(resolution: u32) -> Self {
        SyntheticSceneSpec {
            variant: SyntheticVariant::ViewDependentShift,
            spheres: vec![SphereSpec {
                center: [0.55, -0.35, -3.0],
                radius: 0.3,
                albedo: [0.9, 0.7, 0.2],
            }],
            motion: None,
            shift: Some(ShiftSpec {
                center: [-0.1, 0.1, -3.6],
                radius: 0.8,
                magnitude: 1.2,
                stripe_frequency: 3.0,
                colors: [[0.9, 0.9, 0.85], [0.15, 0.2, 0.6]],
            }),
            background: [0.08, 0.08, 0.1],
            light_dir: default_light(),
            ambient: default_ambient(),
            rig: RigSpec {
                layout: RigLayout::Spiral,
                count: 14,
                radius: 0.35,
                holdout: vec![2, 7],
                look_at_depth: Some(3.5),
                jitter: 0.0,
            },
            resolution: [resolution, resolution],
            fov_y: 40.0,
            n_frames: 1,
            bounds: Bounds {
                near: 1.5,
                far: 6.0,
            },
            supersample: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Bounds { near, far } = self.bounds;
        if !(near > 0.0 && far > near) {
            return Err(spec_err("bounds: need 0 < near < far"));
        }
        if self.resolution.contains(&0) {
            return Err(spec_err("resolution: dimensions must be positive"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 170.0) {
            return Err(spec_err("fov_y: must lie in (0, 170) degrees"));
        }
        if self.n_frames == 0 {
            return Err(spec_err("n_frames: must be at least 1"));
        }
        if self.supersample == 0 {
            return Err(spec_err("supersample: must be at least 1"));
        }
        if !unit_range(&self.background) {
            return Err(spec_err("background: must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(spec_err("ambient: must lie in [0, 1]"));
        }
        if Vec3::from(self.light_dir).norm() == 0.0 {
            return Err(spec_err("light_dir: must be nonzero"));
        }
        let rig = &self.rig;
        if rig.count == 0 || !(rig.radius >= 0.0) || !(rig.jitter >= 0.0) {
            return Err(spec_err("rig: need count >= 1, radius >= 0, jitter >= 0"));
        }
        if let Some(i) = rig.holdout.iter().find(|&&i| i >= rig.count) {
            return Err(spec_err(format!("rig.holdout: camera {i} does not exist")));
        }
        if rig.holdout.len() >= rig.count {
            return Err(spec_err(
                "rig.holdout: at least one training camera is required",
            ));
        }
        if rig.look_at_depth.is_some_and(|d| !(d > 0.0)) {
            return Err(spec_err("rig.look_at_depth: must be positive"));
        }
        match self.variant {
            SyntheticVariant::MovingSphere => {
                if self.motion.is_none() {
                    return Err(spec_err("motion: required for moving_sphere"));
                }
                if self.n_frames < 2 {
                    return Err(spec_err("n_frames: moving_sphere needs at least 2 frames"));
                }
            }
            SyntheticVariant::ViewDependentShift => {
                if self.shift.is_none() {
                    return Err(spec_err("shift: required for view_dependent_shift"));
                }
            }
            SyntheticVariant::DiffuseStatic => {
                if self.spheres.is_empty() {
                    return Err(spec_err(
                        "spheres: diffuse_static needs at least one sphere",
                    ));
                }
            }
        }
        if self.variant != SyntheticVariant::MovingSphere && self.n_frames != 1 {
            return Err(spec_err("n_frames: static variants have exactly one frame"));
        }
        let inside = |z_lo: f64, z_hi: f64| -far <= z_lo && z_hi <= -near;
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) || !unit_range(&s.albedo) {
                return Err(spec_err(format!(
                    "spheres[{i}]: need radius > 0 and albedo in [0, 1]"
                )));
            }
            let sway = match &self.motion {
                Some(m) if m.sphere == i => m.amplitude[2].abs(),
                _ => 0.0,
            };
            if !inside(s.center[2] - s.radius - sway, s.center[2] + s.radius + sway) {
                return Err(spec_err(format!(
                    "spheres[{i}]: leaves the depth bounds [{near}, {far}]"
                )));
            }
        }
        if let Some(m) = &self.motion {
            if m.sphere >= self.spheres.len() {
                return Err(spec_err(format!(
                    "motion.sphere: sphere {} does not exist",
                    m.sphere
                )));
            }
            if !(m.period > 0.0) {
                return Err(spec_err("motion.period: must be positive"));
            }
        }
        if let Some(d) = &self.shift {
            if !(d.radius > 0.0) || !unit_range(&d.colors[0]) || !unit_range(&d.colors[1]) {
                return Err(spec_err("shift: need radius > 0 and colors in [0, 1]"));
            }
            let half = (0.5 * self.fov_y.to_radians()).tan() * self.resolution[0] as f64
                / self.resolution[1] as f64;
            let reach = d.magnitude.abs() * (half + 0.5);
            if !inside(d.center[2] - reach, d.center[2] + reach) {
                return Err(spec_err(format!(
                    "shift: disk depth leaves the bounds [{near}, {far}]"
                )));
            }
        }
        Ok(())
    }

    pub fn time(&self, frame_index: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            (frame_index - 1) as f64 / (self.n_frames - 1) as f64
        }
    }

    fn sphere_center(&self, i: usize, tau: f64) -> Vec3 {
        let c = Vec3::from(self.spheres[i].center);
        match &self.motion {
            Some(m) if m.sphere == i => {
                c + Vec3::from(m.amplitude) * (2.0 * std::f64::consts::PI * tau / m.period).sin()
            }
            _ => c,
        }
    }

    /// Center of the moving sphere at `tau`, if the scene has one.
    pub fn moving_center(&self, tau: f64) -> Option<Vec3> {
        self.motion
            .as_ref()
            .map(|m| self.sphere_center(m.sphere, tau))
    }

    pub fn camera(&self, pose: Matrix4<f64>) -> Result<Camera> {
        Camera::with_fov_y(self.fov_y, self.resolution[0], self.resolution[1], pose)
    }

    /// Rig cameras; position depends on `seed` only through `rig.jitter`.
    pub fn cameras(&self, seed: u64) -> Result<Vec<Camera>> {
        let rig = &self.rig;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rig.count;
        (0..n)
            .map(|i| {
                let (x, y) = match rig.layout {
                    RigLayout::Grid => {
                        let cols = (n as f64).sqrt().ceil() as usize;
                        let rows = n.div_ceil(cols);
                        let at = |k: usize, m: usize| {
                            if m <= 1 {
                                0.0
                            } else {
                                -1.0 + 2.0 * k as f64 / (m - 1) as f64
                            }
                        };
                        (
                            rig.radius * at(i % cols, cols),
                            -rig.radius * at(i / cols, rows),
                        )
                    }
                    RigLayout::Ring => {
                        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                        (rig.radius * a.cos(), rig.radius * a.sin())
                    }
                    RigLayout::Spiral => {
                        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                        let r = rig.radius * ((i as f64 + 0.5) / n as f64).sqrt();
                        let a = golden * i as f64;
                        (r * a.cos(), r * a.sin())
                    }
                };
                let jx = if rig.jitter > 0.0 {
                    rng.gen_range(-rig.jitter..=rig.jitter)
                } else {
                    0.0
                };
                let jy = if rig.jitter > 0.0 {
                    rng.gen_range(-rig.jitter..=rig.jitter)
                } else {
                    0.0
                };
                let eye = Vec3::new(x + jx, y + jy, 0.0);
                let pose = match rig.look_at_depth {
                    Some(d) => look_at(&eye, &Vec3::new(0.0, 0.0, -d), &Vec3::y())?,
                    None => Matrix4::new_translation(&eye),
                };
                self.camera(pose)
            })
            .collect()
    }

    /// Center camera of the rig, used as the NDC reference.
    pub fn reference_camera(&self) -> Result<Camera> {
        self.camera(Matrix4::identity())
    }

    /// Linear radiance along one ray at time `tau`.
    pub fn trace(&self, ray: &Ray, tau: f64) -> Vec3 {
        let mut best_t = f64::INFINITY;
        let mut color = Vec3::from(self.background);
        let light = Vec3::from(self.light_dir).normalize();
        for (i, s) in self.spheres.iter().enumerate() {
            let c = self.sphere_center(i, tau);
            let oc = ray.origin - c;
            let b = oc.dot(&ray.direction);
            let disc = b * b - (oc.norm_squared() - s.radius * s.radius);
            if disc < 0.0 {
                continue;
            }
            let t = -b - disc.sqrt();
            if t > 0.0 && t < best_t {
                best_t = t;
                let n = (ray.at(t) - c) / s.radius;
                let shade = self.ambient + (1.0 - self.ambient) * n.dot(&light).max(0.0);
                color = Vec3::from(s.albedo) * shade;
            }
        }
        if let Some(d) = &self.shift {
            let dir = ray.direction;
            if dir.z < 0.0 {
                let depth = d.center[2] + d.magnitude * (dir.x / -dir.z);
                let t = (depth - ray.origin.z) / dir.z;
                let p = ray.at(t);
                let (dx, dy) = (p.x - d.center[0], p.y - d.center[1]);
                if t > 0.0 && t < best_t && dx * dx + dy * dy <= d.radius * d.radius {
                    let stripe = (p.x * d.stripe_frequency).floor().rem_euclid(2.0) as usize;
                    color = Vec3::from(d.colors[stripe]);
                }
            }
        }
        color
    }

    /// Supersampled linear-RGB rendering of one view.
    pub fn render_view(&self, camera: &Camera, tau: f64) -> Image {
        let s = self.supersample;
        let inv = 1.0 / (s * s) as f64;
        let pixels = (0..camera.pixel_count())
            .into_par_iter()
            .map(|p| {
                let (x, y) = (
                    (p % camera.width as usize) as f64,
                    (p / camera.width as usize) as f64,
                );
                let mut acc = Vec3::zeros();
                for j in 0..s {
                    for i in 0..s {
                        let u = x + (i as f64 + 0.5) / s as f64;
                        let v = y + (j as f64 + 0.5) / s as f64;
                        acc += self.trace(&camera.ray_through(u, v), tau);
                    }
                }
                acc * inv
            })
            .collect();
        Image {
            width: camera.width,
            height: camera.height,
            pixels,
        }
    }
}

fn image_name(camera: usize, frame: usize) -> String {
    format!("images/cam{camera:02}_f{frame:03}.png")
}

/// Renders every camera at every frame into `out_dir` and writes the manifest.
pub fn generate_synthetic(
    spec: &SyntheticSceneSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let cameras = spec.cameras(seed)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    let jobs: Vec<(usize, usize)> = (1..=spec.n_frames)
        .flat_map(|m| (0..cameras.len()).map(move |c| (c, m)))
        .collect();
    jobs.par_iter().try_for_each(|&(c, m)| {
        spec.render_view(&cameras[c], spec.time(m))
            .save_png(&out_dir.join(image_name(c, m)))
    })?;
    let names: Vec<String> = (0..cameras.len()).map(|i| format!("cam{i:02}")).collect();
    let manifest = DatasetManifest {
        schema: SCHEMA.to_string(),
        scene_kind: SceneKind::ForwardFacing,
        bounds: spec.bounds.clone(),
        background: spec.background,
        ndc_reference: Some(CameraSpec::from_camera(&spec.reference_camera()?, None)),
        cameras: cameras
            .iter()
            .zip(&names)
            .map(|(c, n)| CameraSpec::from_camera(c, Some(n.clone())))
            .collect(),
        frames: jobs
            .iter()
            .map(|&(c, m)| FrameEntry {
                camera_index: c,
                frame_index: m,
                time: spec.time(m),
                image_path: image_name(c, m),
                extra: Default::default(),
            })
            .collect(),
        holdout_cameras: spec.rig.holdout.iter().map(|&i| names[i].clone()).collect(),
        generator: Some(serde_json::json!({ "spec": spec, "seed": seed })),
        extra: Default::default(),
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}
