//! Rays, cameras and the differentiable ray/primitive intersections used to
//! place volume samples.
//!
//! Camera space follows the usual graphics convention: the camera looks down
//! `-z`, `+y` is up, and the frame is right-handed. Pixel centers sit at
//! half-integer coordinates.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Validating constructor. `direction` must already be unit length.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!(
                "ray direction must be unit length, got norm {}",
                direction.norm()
            )));
        }
        if !(t_near >= 0.0 && t_far > t_near) {
            return Err(Error::contract(format!(
                "ray bounds must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    /// Normalizes `direction` and uses `[0, inf)` as the parametric range.
    pub fn towards(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateRay(format!(
                "direction {direction:?} cannot be normalized"
            )));
        }
        Ray::new(origin, direction / n, 0.0, f64::INFINITY)
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Plücker line coordinates `(d, d x o)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlueckerRay {
    pub d: Vec3,
    pub m: Vec3,
}

impl PlueckerRay {
    pub fn features(&self) -> [f64; 6] {
        [self.d.x, self.d.y, self.d.z, self.m.x, self.m.y, self.m.z]
    }
}

pub fn pluecker_encode(origin: &Vec3, direction: &Vec3) -> Result<PlueckerRay> {
    if (direction.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::contract(format!(
            "Plücker encoding needs a unit direction, got norm {}",
            direction.norm()
        )));
    }
    Ok(PlueckerRay {
        d: *direction,
        m: direction.cross(origin),
    })
}

/// Crossings of a ray with the planes `z = -1` (`xy`) and `z = 0` (`uv`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoPlaneRay {
    pub xy: Vec2,
    pub uv: Vec2,
}

impl TwoPlaneRay {
    pub fn features(&self) -> [f64; 4] {
        [self.xy.x, self.xy.y, self.uv.x, self.uv.y]
    }

    /// Rebuilds the ray through both plane crossings, anchored on `z = -1`.
    pub fn to_ray(&self) -> Ray {
        let origin = Vec3::new(self.xy.x, self.xy.y, -1.0);
        let dir = Vec3::new(self.uv.x - self.xy.x, self.uv.y - self.xy.y, 1.0).normalize();
        Ray {
            origin,
            direction: dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }
}

pub fn two_plane_encode(ray: &Ray) -> Result<TwoPlaneRay> {
    let o = ray.origin;
    let d = ray.direction;
    if d.z == 0.0 {
        return Err(Error::DegenerateRay(
            "direction parallel to the two-plane slab".into(),
        ));
    }
    let t_xy = (-1.0 - o.z) / d.z;
    let t_uv = -o.z / d.z;
    let p = o + d * t_xy;
    let q = o + d * t_uv;
    Ok(TwoPlaneRay {
        xy: Vec2::new(p.x, p.y),
        uv: Vec2::new(q.x, q.y),
    })
}

/// Radial contraction of unbounded space into the ball of radius 2.
pub fn contract(x: &Vec3) -> Vec3 {
    let r = x.norm();
    if r <= 1.0 {
        *x
    } else {
        x * ((2.0 - 1.0 / r) / r)
    }
}

/// Vector-Jacobian product of [`contract`] at `x`.
pub fn contract_vjp(x: &Vec3, cotangent: &Vec3) -> Vec3 {
    let r = x.norm();
    if r <= 1.0 {
        return *cotangent;
    }
    let s = 2.0 / r - 1.0 / (r * r);
    let ds_dr = -2.0 / (r * r) + 2.0 / (r * r * r);
    cotangent * s + x * (ds_dr / r * x.dot(cotangent))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Plane `z = param`, in normalized device coordinates.
    ZPlane,
    /// Sphere of radius `param` centered on the origin, in world units.
    ConcentricSphere,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub param: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    pub t: f64,
    pub point: Vec3,
    /// Derivative of `t` with respect to the primitive parameter.
    pub dt_dparam: f64,
}

impl Intersection {
    /// Derivative of the hit point with respect to the primitive parameter.
    pub fn dpoint_dparam(&self, ray: &Ray) -> Vec3 {
        ray.direction * self.dt_dparam
    }
}

/// Intersects `ray` with `primitive`. `id` only labels miss errors.
///
/// Spheres return the exit root when the origin is inside and the nearest
/// positive root otherwise.
pub fn intersect(primitive: &Primitive, ray: &Ray, id: usize) -> Result<Intersection> {
    let o = ray.origin;
    let d = ray.direction;
    match primitive.kind {
        PrimitiveKind::ZPlane => {
            if d.z == 0.0 {
                return Err(Error::DegenerateRay(format!(
                    "ray parallel to z-plane {id} (z = {})",
                    primitive.param
                )));
            }
            let t = (primitive.param - o.z) / d.z;
            if !(t > 0.0) {
                return Err(Error::Miss {
                    primitive: id,
                    detail: format!(
                        "plane z = {} lies behind the origin (t = {t})",
                        primitive.param
                    ),
                });
            }
            let mut point = o + d * t;
            point.z = primitive.param;
            Ok(Intersection {
                t,
                point,
                dt_dparam: 1.0 / d.z,
            })
        }
        PrimitiveKind::ConcentricSphere => {
            let r = primitive.param;
            if !(r > 0.0) {
                return Err(Error::contract(format!(
                    "sphere {id} has non-positive radius {r}"
                )));
            }
            let b = o.dot(&d);
            let c = o.norm_squared() - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return Err(Error::Miss {
                    primitive: id,
                    detail: format!("no real root for radius {r}"),
                });
            }
            let sq = disc.sqrt();
            let (t, dt_dparam) = if c < 0.0 {
                (-b + sq, r / sq)
            } else if -b - sq > 0.0 {
                (-b - sq, -r / sq)
            } else if -b + sq > 0.0 {
                (-b + sq, r / sq)
            } else {
                return Err(Error::Miss {
                    primitive: id,
                    detail: format!("sphere of radius {r} lies behind the origin"),
                });
            };
            Ok(Intersection {
                t,
                point: o + d * t,
                dt_dparam,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CameraModel {
    #[default]
    Pinhole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-to-world rigid transform.
    pub pose: Matrix4<f64>,
    pub model: CameraModel,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
            model: CameraModel::Pinhole,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Pinhole camera with a vertical field of view and centered principal point.
    pub fn with_fov_y(fov_y_deg: f64, width: u32, height: u32, pose: Matrix4<f64>) -> Result<Self> {
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Camera::new(
            fy,
            fy,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            pose,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera dimensions must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::contract("camera focal lengths must be positive"));
        }
        let rot = self.rotation();
        let err = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if err > 1e-5 || (rot.determinant() - 1.0).abs() > 1e-5 {
            return Err(Error::contract(
                "camera pose rotation is not a proper rotation",
            ));
        }
        let last = self.pose.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::contract(
                "camera pose bottom row must be (0, 0, 0, 1)",
            ));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vec3 {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Ray through the (continuous) pixel coordinate `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let dir_cam = Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0);
        let dir = (self.rotation() * dir_cam).normalize();
        Ray {
            origin: self.center(),
            direction: dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        let pc = self.rotation().transpose() * (p - self.center());
        if pc.z >= 0.0 {
            return None;
        }
        let sx = pc.x / -pc.z;
        let sy = pc.y / -pc.z;
        Some(Vec2::new(self.cx + self.fx * sx, self.cy - self.fy * sy))
    }

    /// Same intrinsics at a different pose.
    pub fn with_pose(&self, pose: Matrix4<f64>) -> Camera {
        Camera {
            pose,
            ..self.clone()
        }
    }
}

/// Camera-to-world pose at `eye` looking at `target`.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Matrix4<f64>> {
    let back = eye - target;
    if back.norm() == 0.0 {
        return Err(Error::contract("look_at eye and target coincide"));
    }
    let z = back.normalize();
    let x = up.cross(&z);
    if x.norm() < 1e-12 {
        return Err(Error::contract(
            "look_at up vector is parallel to the view direction",
        ));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&x);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&y);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&z);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(eye);
    Ok(m)
}

/// One ray per pixel in row-major order, through pixel centers.
pub fn camera_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.pixel_count());
    for j in 0..camera.height {
        for i in 0..camera.width {
            rays.push(camera.ray_through(i as f64 + 0.5, j as f64 + 0.5));
        }
    }
    rays
}

/// Forward-facing normalized device coordinates of a reference camera: the
/// reference frustum beyond the near plane maps into `[-1, 1]^3`, with the
/// near plane at `z = -1` and infinity at `z = +1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdcFrame {
    /// Camera-to-world pose of the reference camera, row-major.
    pub reference_pose: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl NdcFrame {
    pub fn new(reference: &Camera, near: f64) -> Result<Self> {
        if !(near > 0.0) {
            return Err(Error::contract("NDC near plane must be positive"));
        }
        let mut pose = [[0.0; 4]; 4];
        for (r, row) in pose.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = reference.pose[(r, c)];
            }
        }
        Ok(NdcFrame {
            reference_pose: pose,
            fx: reference.fx,
            fy: reference.fy,
            cx: reference.cx,
            cy: reference.cy,
            width: reference.width,
            height: reference.height,
            near,
        })
    }

    fn pose(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.reference_pose[r][c])
    }

    fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        let pose = self.pose();
        let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let t = pose.fixed_view::<3, 1>(0, 3).into_owned();
        rot.transpose() * (p - t)
    }

    fn cam_dir(&self, d: &Vec3) -> Vec3 {
        let pose = self.pose();
        pose.fixed_view::<3, 3>(0, 0).transpose() * d
    }

    // ndc.x = ax * (x_c / -z_c) + bx, likewise for y.
    fn affine(&self) -> (f64, f64, f64, f64) {
        let w = self.width as f64;
        let h = self.height as f64;
        (
            2.0 * self.fx / w,
            2.0 * self.cx / w - 1.0,
            2.0 * self.fy / h,
            1.0 - 2.0 * self.cy / h,
        )
    }

    pub fn point_to_ndc(&self, p: &Vec3) -> Vec3 {
        let pc = self.world_to_cam(p);
        let (ax, bx, ay, by) = self.affine();
        Vec3::new(
            ax * (pc.x / -pc.z) + bx,
            ay * (pc.y / -pc.z) + by,
            1.0 + 2.0 * self.near / pc.z,
        )
    }

    pub fn point_from_ndc(&self, q: &Vec3) -> Vec3 {
        let (ax, bx, ay, by) = self.affine();
        let zc = 2.0 * self.near / (q.z - 1.0);
        let pc = Vec3::new((q.x - bx) / ax * -zc, (q.y - by) / ay * -zc, zc);
        let pose = self.pose();
        let h = pose * Vector4::new(pc.x, pc.y, pc.z, 1.0);
        Vec3::new(h.x, h.y, h.z)
    }

    /// Maps a world ray into NDC. The result starts on the near plane
    /// (`z = -1`), has unit direction, and ends at `z = +1` (`t_far`).
    pub fn to_ndc(&self, ray: &Ray) -> Result<Ray> {
        let oc = self.world_to_cam(&ray.origin);
        let dc = self.cam_dir(&ray.direction);
        if !(dc.z < 0.0) {
            return Err(Error::Domain(format!(
                "ray does not travel into the reference frustum (camera-space d_z = {})",
                dc.z
            )));
        }
        let (ax, bx, ay, by) = self.affine();
        let t0 = (-self.near - oc.z) / dc.z;
        let on = oc + dc * t0;
        let p0 = Vec3::new(ax * (on.x / -on.z) + bx, ay * (on.y / -on.z) + by, -1.0);
        let p_inf = Vec3::new(ax * (dc.x / -dc.z) + bx, ay * (dc.y / -dc.z) + by, 1.0);
        let span = p_inf - p0;
        let len = span.norm();
        Ok(Ray {
            origin: p0,
            direction: span / len,
            t_near: 0.0,
            t_far: len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn pluecker_examples() {
        let r = pluecker_encode(&v(0., 0., 0.), &v(0., 0., 1.)).unwrap();
        assert_eq!(r.m, v(0., 0., 0.));
        let r = pluecker_encode(&v(1., 0., 0.), &v(0., 0., 1.)).unwrap();
        assert_eq!(r.d, v(0., 0., 1.));
        assert_eq!(r.m, v(0., 1., 0.));
        let slid = pluecker_encode(&(v(1., 0., 0.) + v(0., 0., 5.)), &v(0., 0., 1.)).unwrap();
        assert_abs_diff_eq!(slid.m, r.m, epsilon = 1e-12);
        assert!(pluecker_encode(&v(0., 0., 0.), &v(0., 0., 2.)).is_err());
    }

    #[test]
    fn two_plane_examples() {
        let r = Ray::towards(v(0., 0., -1.), v(0., 0., 1.)).unwrap();
        let tp = two_plane_encode(&r).unwrap();
        assert_eq!(tp.features(), [0., 0., 0., 0.]);
        let r = Ray::towards(v(0.5, 0., -1.), v(0., 0., 1.)).unwrap();
        let tp = two_plane_encode(&r).unwrap();
        assert_abs_diff_eq!(tp.xy, Vec2::new(0.5, 0.), epsilon = 1e-12);
        assert_abs_diff_eq!(tp.uv, Vec2::new(0.5, 0.), epsilon = 1e-12);
        let r = Ray::towards(v(0., 0., -1.), v(1., 0., 1.)).unwrap();
        let tp = two_plane_encode(&r).unwrap();
        assert_abs_diff_eq!(tp.xy, Vec2::new(0., 0.), epsilon = 1e-12);
        assert_abs_diff_eq!(tp.uv, Vec2::new(1., 0.), epsilon = 1e-12);

        let flat = Ray::towards(v(0., 0., -1.), v(1., 0., 0.)).unwrap();
        assert!(matches!(
            two_plane_encode(&flat),
            Err(Error::DegenerateRay(_))
        ));
    }

    #[test]
    fn two_plane_reconstruction_round_trips() {
        let tp = TwoPlaneRay {
            xy: Vec2::new(0.3, -0.2),
            uv: Vec2::new(-0.1, 0.4),
        };
        let back = two_plane_encode(&tp.to_ray()).unwrap();
        assert_abs_diff_eq!(back.xy, tp.xy, epsilon = 1e-9);
        assert_abs_diff_eq!(back.uv, tp.uv, epsilon = 1e-9);
    }

    #[test]
    fn contract_examples() {
        assert_eq!(contract(&v(0.5, 0., 0.)), v(0.5, 0., 0.));
        assert_abs_diff_eq!(contract(&v(2., 0., 0.)), v(1.5, 0., 0.), epsilon = 1e-12);
        assert!((contract(&v(1e9, 0., 0.)).norm() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn intersect_examples() {
        let plane = Primitive {
            kind: PrimitiveKind::ZPlane,
            param: 0.0,
        };
        let r = Ray::towards(v(0., 0., -1.), v(0., 0., 1.)).unwrap();
        let hit = intersect(&plane, &r, 0).unwrap();
        assert_eq!(hit.t, 1.0);
        assert_eq!(hit.point, v(0., 0., 0.));

        let sphere = Primitive {
            kind: PrimitiveKind::ConcentricSphere,
            param: 2.0,
        };
        let r = Ray::towards(v(0., 0., 0.), v(1., 0., 0.)).unwrap();
        let hit = intersect(&sphere, &r, 0).unwrap();
        assert_eq!(hit.t, 2.0);
        assert_eq!(hit.point, v(2., 0., 0.));

        let sphere = Primitive {
            kind: PrimitiveKind::ConcentricSphere,
            param: 1.0,
        };
        let r = Ray::towards(v(0., 0., -2.), v(0., 0., 1.)).unwrap();
        let hit = intersect(&sphere, &r, 0).unwrap();
        assert_eq!(hit.t, 1.0);
        assert_abs_diff_eq!(hit.point, v(0., 0., -1.), epsilon = 1e-12);

        // central finite difference on the radius
        let h = 1e-6;
        let tp = intersect(
            &Primitive {
                param: 1.0 + h,
                ..sphere
            },
            &r,
            0,
        )
        .unwrap()
        .t;
        let tm = intersect(
            &Primitive {
                param: 1.0 - h,
                ..sphere
            },
            &r,
            0,
        )
        .unwrap()
        .t;
        let fd = (tp - tm) / (2.0 * h);
        assert!(((fd - hit.dt_dparam) / hit.dt_dparam).abs() < 1e-6);
    }

    #[test]
    fn intersect_misses_name_the_primitive() {
        let sphere = Primitive {
            kind: PrimitiveKind::ConcentricSphere,
            param: 1.0,
        };
        let r = Ray::towards(v(0., 5., -2.), v(0., 0., 1.)).unwrap();
        match intersect(&sphere, &r, 7) {
            Err(Error::Miss { primitive, .. }) => assert_eq!(primitive, 7),
            other => panic!("expected miss, got {other:?}"),
        }
        let behind = Ray::towards(v(0., 0., 2.), v(0., 0., 1.)).unwrap();
        assert!(intersect(&sphere, &behind, 0).is_err());
        let plane = Primitive {
            kind: PrimitiveKind::ZPlane,
            param: -3.0,
        };
        assert!(matches!(
            intersect(&plane, &behind, 2),
            Err(Error::Miss { primitive: 2, .. })
        ));
    }

    #[test]
    fn sphere_exit_root_from_inside() {
        let sphere = Primitive {
            kind: PrimitiveKind::ConcentricSphere,
            param: 3.0,
        };
        let r = Ray::towards(v(0.5, 0., 0.), v(-1., 0., 0.)).unwrap();
        let hit = intersect(&sphere, &r, 0).unwrap();
        assert_abs_diff_eq!(hit.t, 3.5, epsilon = 1e-12);
        assert!(hit.dt_dparam > 0.0);
    }

    fn identity_camera(w: u32, h: u32, f: f64) -> Camera {
        Camera::new(
            f,
            f,
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
            Matrix4::identity(),
        )
        .unwrap()
    }

    #[test]
    fn camera_ray_examples() {
        let cam = Camera::new(1., 1., 0.5, 0.5, 1, 1, Matrix4::identity()).unwrap();
        let rays = camera_rays(&cam);
        assert_eq!(rays.len(), 1);
        assert_abs_diff_eq!(rays[0].direction, v(0., 0., -1.), epsilon = 1e-15);

        let cam = identity_camera(2, 2, 2.0);
        let rays = camera_rays(&cam);
        assert_eq!(rays.len(), 4);
        // pixel (0,0) is up-left of the axis
        assert_abs_diff_eq!(
            rays[0].direction,
            v(-0.25, 0.25, -1.).normalize(),
            epsilon = 1e-12
        );
        let sum: Vec3 = rays.iter().map(|r| r.direction).sum();
        assert_abs_diff_eq!(sum.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sum.y, 0.0, epsilon = 1e-12);
        for r in &rays {
            assert_abs_diff_eq!(r.direction.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn principal_point_ray_is_parallel_to_axis() {
        let pose = look_at(&v(1., 2., 3.), &v(0., 0., 0.), &v(0., 1., 0.)).unwrap();
        let cam = Camera::new(50., 60., 20., 10., 40, 30, pose).unwrap();
        let r = cam.ray_through(20., 10.);
        let axis = -cam.rotation().column(2).into_owned();
        assert_abs_diff_eq!(r.direction, axis, epsilon = 1e-12);
        let p = cam.project(&r.at(4.0)).unwrap();
        assert_abs_diff_eq!(p, Vec2::new(20., 10.), epsilon = 1e-9);
    }

    #[test]
    fn camera_rejects_non_rigid_pose() {
        let mut pose = Matrix4::identity();
        pose[(0, 0)] = 2.0;
        assert!(Camera::new(1., 1., 0., 0., 1, 1, pose).is_err());
        let mut flip = Matrix4::identity();
        flip[(2, 2)] = -1.0;
        assert!(Camera::new(1., 1., 0., 0., 1, 1, flip).is_err());
    }

    #[test]
    fn ndc_axis_and_corner() {
        let cam = identity_camera(64, 48, 40.0);
        let ndc = NdcFrame::new(&cam, 1.0).unwrap();
        let axial = ndc.to_ndc(&cam.ray_through(32., 24.)).unwrap();
        assert_abs_diff_eq!(axial.origin, v(0., 0., -1.), epsilon = 1e-12);
        assert_abs_diff_eq!(axial.direction, v(0., 0., 1.), epsilon = 1e-12);
        assert_abs_diff_eq!(axial.t_far, 2.0, epsilon = 1e-12);

        let corner = ndc.to_ndc(&cam.ray_through(0., 0.)).unwrap();
        assert_abs_diff_eq!(corner.origin.x, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(corner.origin.y, 1.0, epsilon = 1e-12);
        let far_end = corner.at(corner.t_far);
        assert_abs_diff_eq!(far_end, v(-1., 1., 1.), epsilon = 1e-12);
    }

    #[test]
    fn ndc_round_trip_points_on_ray() {
        let ref_pose = look_at(&v(0.1, -0.2, 0.0), &v(0.3, 0.1, -5.0), &v(0., 1., 0.)).unwrap();
        let cam = Camera::new(70., 72., 33., 30., 64, 60, ref_pose).unwrap();
        let ndc = NdcFrame::new(&cam, 0.8).unwrap();
        let world = Ray::towards(v(0.4, 0.2, 0.3), v(-0.1, 0.15, -1.0)).unwrap();
        let ray_ndc = ndc.to_ndc(&world).unwrap();
        let mut max_err: f64 = 0.0;
        for k in 0..8 {
            let p = world.at(2.0 + 1.5 * k as f64);
            let q = ndc.point_to_ndc(&p);
            // q lies on the NDC ray
            let rel = q - ray_ndc.origin;
            let off_line = rel - ray_ndc.direction * rel.dot(&ray_ndc.direction);
            max_err = max_err.max(off_line.norm());
            max_err = max_err.max((ndc.point_from_ndc(&q) - p).norm());
        }
        assert!(max_err < 1e-5, "max error {max_err}");
    }

    #[test]
    fn ndc_rejects_backward_rays() {
        let cam = identity_camera(8, 8, 8.0);
        let ndc = NdcFrame::new(&cam, 1.0).unwrap();
        let back = Ray::towards(v(0., 0., 0.), v(0., 0., 1.)).unwrap();
        assert!(matches!(ndc.to_ndc(&back), Err(Error::Domain(_))));
    }
}
