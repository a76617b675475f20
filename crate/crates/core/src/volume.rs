//! Keyframe-based rank-factorized radiance volume.
//!
//! Appearance and density are each a sum of three plane x line outer
//! products over the axis pairings `(x,y)|(z,t)`, `(x,z)|(y,t)` and
//! `(y,z)|(x,t)`. Line factors carry one column per keyframe; keyframes are
//! discrete snapshots and are never blended. Appearance features pass
//! through per-pairing basis matrices into SH coefficients.
//!
//! Grids are node-aligned: node `i` of an axis with `res` nodes sits at
//! normalized coordinate `i / (res - 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::linalg::Mat;
use crate::sh::{coefficient_count, MAX_SH_DEGREE};

pub const MAX_COMPONENTS: usize = 32;
/// Three color channels of degree-3 SH.
pub const MAX_COEFFS: usize = 48;

/// `(a, b)` axes of each plane factor.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
/// Spatial axis of each line factor.
pub const LINE_AXIS: [usize; 3] = [2, 1, 0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub grid_res: [usize; 3],
    pub n_keyframes: usize,
    /// Components for the `(x,y)|(z,t)`, `(x,z)|(y,t)`, `(y,z)|(x,t)` pairs.
    pub components: [usize; 3],
    pub sh_degree: usize,
    pub bbox: Aabb,
    /// Added to the raw density sum before the softplus.
    pub density_bias: f64,
    /// Standard deviation of the initial factor entries.
    pub init_std: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            grid_res: [32; 3],
            n_keyframes: 1,
            components: [8, 4, 4],
            sh_degree: 2,
            bbox: Aabb::cube(1.0),
            density_bias: -10.0,
            init_std: 0.1,
        }
    }
}

impl VolumeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_res.iter().any(|&r| r == 0) {
            return Err(Error::contract(
                "grid resolution must be positive on every axis",
            ));
        }
        if self.n_keyframes == 0 {
            return Err(Error::contract("volume needs at least one keyframe"));
        }
        if self
            .components
            .iter()
            .any(|&m| m == 0 || m > MAX_COMPONENTS)
        {
            return Err(Error::contract(format!(
                "component counts must lie in 1..={MAX_COMPONENTS}"
            )));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::contract(format!(
                "SH degree above {MAX_SH_DEGREE} is unsupported"
            )));
        }
        if (0..3).any(|a| !(self.bbox.max[a] > self.bbox.min[a])) {
            return Err(Error::contract("bounding box must have positive extent"));
        }
        Ok(())
    }

    /// Scalars per appearance coefficient block (3 channels).
    pub fn coeff_width(&self) -> usize {
        3 * coefficient_count(self.sh_degree)
    }

    /// Closed-form count of stored scalars.
    pub fn parameter_count(&self) -> usize {
        let mut per_field = 0;
        for j in 0..3 {
            let (a, b) = PLANE_AXES[j];
            let c = LINE_AXIS[j];
            per_field += self.components[j]
                * (self.grid_res[a] * self.grid_res[b] + self.grid_res[c] * self.n_keyframes);
        }
        2 * per_field + self.coeff_width() * self.components.iter().sum::<usize>()
    }
}

/// Plane factor with `comps` channels, stored `[a][b][m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFactor {
    pub comps: usize,
    pub res_a: usize,
    pub res_b: usize,
    pub data: Vec<f64>,
}

/// Line factor with one column per keyframe, stored `[c][t][m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LineFactor {
    pub comps: usize,
    pub res_c: usize,
    pub n_t: usize,
    pub data: Vec<f64>,
}

impl PlaneFactor {
    pub fn zeros(comps: usize, res_a: usize, res_b: usize) -> Self {
        PlaneFactor {
            comps,
            res_a,
            res_b,
            data: vec![0.0; comps * res_a * res_b],
        }
    }

    #[inline]
    fn node(&self, ia: usize, ib: usize) -> usize {
        (ia * self.res_b + ib) * self.comps
    }

    pub fn at(&self, ia: usize, ib: usize, m: usize) -> f64 {
        self.data[self.node(ia, ib) + m]
    }

    pub fn set(&mut self, ia: usize, ib: usize, m: usize, v: f64) {
        let k = self.node(ia, ib) + m;
        self.data[k] = v;
    }
}

impl LineFactor {
    pub fn zeros(comps: usize, res_c: usize, n_t: usize) -> Self {
        LineFactor {
            comps,
            res_c,
            n_t,
            data: vec![0.0; comps * res_c * n_t],
        }
    }

    #[inline]
    fn node(&self, ic: usize, t: usize) -> usize {
        (ic * self.n_t + t) * self.comps
    }

    pub fn at(&self, ic: usize, t: usize, m: usize) -> f64 {
        self.data[self.node(ic, t) + m]
    }

    pub fn set(&mut self, ic: usize, t: usize, m: usize, v: f64) {
        let k = self.node(ic, t) + m;
        self.data[k] = v;
    }
}

#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    w: f64,
    /// dw/du
    dw: f64,
}

#[inline]
fn lerp_coord(u: f64, res: usize) -> Lerp {
    if res == 1 {
        return Lerp {
            i0: 0,
            i1: 0,
            w: 0.0,
            dw: 0.0,
        };
    }
    let scale = (res - 1) as f64;
    let g = u * scale;
    let i0 = (g.floor().max(0.0) as usize).min(res - 2);
    Lerp {
        i0,
        i1: i0 + 1,
        w: g - i0 as f64,
        dw: scale,
    }
}

fn plane_eval(p: &PlaneFactor, la: Lerp, lb: Lerp, out: &mut [f64]) {
    let m = p.comps;
    let (w00, w10, w01, w11) = (
        (1.0 - la.w) * (1.0 - lb.w),
        la.w * (1.0 - lb.w),
        (1.0 - la.w) * lb.w,
        la.w * lb.w,
    );
    let n00 = &p.data[p.node(la.i0, lb.i0)..][..m];
    let n10 = &p.data[p.node(la.i1, lb.i0)..][..m];
    let n01 = &p.data[p.node(la.i0, lb.i1)..][..m];
    let n11 = &p.data[p.node(la.i1, lb.i1)..][..m];
    for k in 0..m {
        out[k] = w00 * n00[k] + w10 * n10[k] + w01 * n01[k] + w11 * n11[k];
    }
}

/// Scatters `d_out` onto the plane taps; returns `(d/du_a, d/du_b)`.
fn plane_backward(
    p: &PlaneFactor,
    la: Lerp,
    lb: Lerp,
    d_out: &[f64],
    grad: &mut PlaneFactor,
) -> (f64, f64) {
    let m = p.comps;
    let (w00, w10, w01, w11) = (
        (1.0 - la.w) * (1.0 - lb.w),
        la.w * (1.0 - lb.w),
        (1.0 - la.w) * lb.w,
        la.w * lb.w,
    );
    let idx = [
        p.node(la.i0, lb.i0),
        p.node(la.i1, lb.i0),
        p.node(la.i0, lb.i1),
        p.node(la.i1, lb.i1),
    ];
    let mut da = 0.0;
    let mut db = 0.0;
    for k in 0..m {
        let (v00, v10, v01, v11) = (
            p.data[idx[0] + k],
            p.data[idx[1] + k],
            p.data[idx[2] + k],
            p.data[idx[3] + k],
        );
        let d = d_out[k];
        da += d * ((1.0 - lb.w) * (v10 - v00) + lb.w * (v11 - v01));
        db += d * ((1.0 - la.w) * (v01 - v00) + la.w * (v11 - v10));
        grad.data[idx[0] + k] += w00 * d;
        grad.data[idx[1] + k] += w10 * d;
        grad.data[idx[2] + k] += w01 * d;
        grad.data[idx[3] + k] += w11 * d;
    }
    (da * la.dw, db * lb.dw)
}

fn line_eval(l: &LineFactor, lc: Lerp, t: usize, out: &mut [f64]) {
    let m = l.comps;
    let n0 = &l.data[l.node(lc.i0, t)..][..m];
    let n1 = &l.data[l.node(lc.i1, t)..][..m];
    for k in 0..m {
        out[k] = (1.0 - lc.w) * n0[k] + lc.w * n1[k];
    }
}

fn line_backward(l: &LineFactor, lc: Lerp, t: usize, d_out: &[f64], grad: &mut LineFactor) -> f64 {
    let m = l.comps;
    let (i0, i1) = (l.node(lc.i0, t), l.node(lc.i1, t));
    let mut dc = 0.0;
    for k in 0..m {
        let d = d_out[k];
        dc += d * (l.data[i1 + k] - l.data[i0 + k]);
        grad.data[i0 + k] += (1.0 - lc.w) * d;
        grad.data[i1 + k] += lc.w * d;
    }
    dc * lc.dw
}

/// Bilinear lookup of a plane factor at normalized `(a, b)` (clamped to the unit square).
pub fn sample_plane(factor: &PlaneFactor, a: f64, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; factor.comps];
    plane_eval(
        factor,
        lerp_coord(a.clamp(0.0, 1.0), factor.res_a),
        lerp_coord(b.clamp(0.0, 1.0), factor.res_b),
        &mut out,
    );
    out
}

/// Linear lookup along the spatial axis of keyframe column `keyframe`.
pub fn sample_line(factor: &LineFactor, c: f64, keyframe: usize) -> Result<Vec<f64>> {
    if keyframe >= factor.n_t {
        return Err(Error::Index {
            index: keyframe,
            len: factor.n_t,
        });
    }
    let mut out = vec![0.0; factor.comps];
    line_eval(
        factor,
        lerp_coord(c.clamp(0.0, 1.0), factor.res_c),
        keyframe,
        &mut out,
    );
    Ok(out)
}

/// The three plane/line pairs of one field (appearance or density).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorField {
    pub planes: [PlaneFactor; 3],
    pub lines: [LineFactor; 3],
}

impl FactorField {
    fn zeros(config: &VolumeConfig) -> Self {
        let r = config.grid_res;
        let planes = std::array::from_fn(|j| {
            let (a, b) = PLANE_AXES[j];
            PlaneFactor::zeros(config.components[j], r[a], r[b])
        });
        let lines = std::array::from_fn(|j| {
            LineFactor::zeros(config.components[j], r[LINE_AXIS[j]], config.n_keyframes)
        });
        FactorField { planes, lines }
    }

    fn arrays(&self) -> impl Iterator<Item = &[f64]> {
        self.planes
            .iter()
            .map(|p| p.data.as_slice())
            .chain(self.lines.iter().map(|l| l.data.as_slice()))
    }

    fn arrays_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.planes
            .iter_mut()
            .map(|p| p.data.as_mut_slice())
            .chain(self.lines.iter_mut().map(|l| l.data.as_mut_slice()))
    }

    /// Per-pair plane and line features at `u`, written into `planes`/`lines`.
    fn eval(
        &self,
        lerps: &[Lerp; 3],
        t: usize,
        planes: &mut [[f64; MAX_COMPONENTS]; 3],
        lines: &mut [[f64; MAX_COMPONENTS]; 3],
    ) {
        for j in 0..3 {
            let (a, b) = PLANE_AXES[j];
            plane_eval(&self.planes[j], lerps[a], lerps[b], &mut planes[j]);
            line_eval(&self.lines[j], lerps[LINE_AXIS[j]], t, &mut lines[j]);
        }
    }
}

/// Trainable tensors of a [`KeyframeVolume`]; also used for its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeParams {
    pub appearance: FactorField,
    pub density: FactorField,
    /// Per-pair basis maps, `coeff_width x components[j]`.
    pub basis: [Mat; 3],
}

impl VolumeParams {
    pub fn zeros(config: &VolumeConfig) -> Self {
        VolumeParams {
            appearance: FactorField::zeros(config),
            density: FactorField::zeros(config),
            basis: std::array::from_fn(|j| Mat::zeros(config.coeff_width(), config.components[j])),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.tensors_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (tag, field) in [("app", &self.appearance), ("density", &self.density)] {
            for (j, p) in field.planes.iter().enumerate() {
                out.push((
                    format!("{tag}.plane{j}"),
                    vec![p.res_a, p.res_b, p.comps],
                    p.data.as_slice(),
                ));
            }
            for (j, l) in field.lines.iter().enumerate() {
                out.push((
                    format!("{tag}.line{j}"),
                    vec![l.res_c, l.n_t, l.comps],
                    l.data.as_slice(),
                ));
            }
        }
        for (j, b) in self.basis.iter().enumerate() {
            out.push((format!("basis{j}"), vec![b.rows, b.cols], b.data.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.appearance.arrays_mut());
        out.extend(self.density.arrays_mut());
        out.extend(self.basis.iter_mut().map(|b| b.data.as_mut_slice()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, s)| s.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldPart {
    Appearance,
    Density,
}

/// Density and SH coefficients at one point.
#[derive(Clone, Copy, Debug)]
pub struct PointQuery {
    pub sigma: f64,
    pub raw_sigma: f64,
    pub coeffs: [f64; MAX_COEFFS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeVolume {
    pub config: VolumeConfig,
    pub keyframe_times: Vec<f64>,
    pub params: VolumeParams,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl KeyframeVolume {
    /// Randomly initialized volume; factors ~ N(0, init_std), basis maps
    /// scaled-uniform.
    pub fn new(config: VolumeConfig, keyframe_times: Vec<f64>, seed: u64) -> Result<Self> {
        let mut v = KeyframeVolume::zeros(config, keyframe_times)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, v.config.init_std).map_err(|e| Error::contract(e.to_string()))?;
        for s in v
            .params
            .appearance
            .arrays_mut()
            .chain(v.params.density.arrays_mut())
        {
            for x in s.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
        for b in &mut v.params.basis {
            let a = (6.0 / (b.rows + b.cols) as f64).sqrt();
            for x in b.data.iter_mut() {
                *x = rand::Rng::gen_range(&mut rng, -a..=a);
            }
        }
        Ok(v)
    }

    pub fn zeros(config: VolumeConfig, keyframe_times: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if keyframe_times.len() != config.n_keyframes {
            return Err(Error::contract(format!(
                "{} keyframe times given for {} keyframes",
                keyframe_times.len(),
                config.n_keyframes
            )));
        }
        if keyframe_times.iter().any(|t| !(0.0..=1.0).contains(t))
            || keyframe_times.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::contract(
                "keyframe times must be strictly increasing within [0, 1]",
            ));
        }
        let params = VolumeParams::zeros(&config);
        Ok(KeyframeVolume {
            config,
            keyframe_times,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Normalized, clamped coordinates and their derivative w.r.t. `x`.
    fn unit_coords(&self, x: &Vec3) -> ([f64; 3], [f64; 3]) {
        let bb = &self.config.bbox;
        let mut u = [0.0; 3];
        let mut du = [0.0; 3];
        for a in 0..3 {
            let ext = bb.max[a] - bb.min[a];
            let v = (x[a] - bb.min[a]) / ext;
            if (0.0..=1.0).contains(&v) {
                u[a] = v;
                du[a] = 1.0 / ext;
            } else {
                u[a] = v.clamp(0.0, 1.0);
            }
        }
        (u, du)
    }

    fn lerps(&self, u: &[f64; 3]) -> [Lerp; 3] {
        std::array::from_fn(|a| lerp_coord(u[a], self.config.grid_res[a]))
    }

    fn check_keyframe(&self, i: usize) -> Result<()> {
        if i >= self.config.n_keyframes {
            return Err(Error::Index {
                index: i,
                len: self.config.n_keyframes,
            });
        }
        Ok(())
    }

    /// Density and SH coefficients at `x` in keyframe `i`.
    pub fn query(&self, x: &Vec3, i: usize) -> PointQuery {
        let (u, _) = self.unit_coords(x);
        let lerps = self.lerps(&u);
        let comps = self.config.components;
        let mut planes = [[0.0; MAX_COMPONENTS]; 3];
        let mut lines = [[0.0; MAX_COMPONENTS]; 3];

        self.params.density.eval(&lerps, i, &mut planes, &mut lines);
        let mut raw = 0.0;
        for j in 0..3 {
            for m in 0..comps[j] {
                raw += planes[j][m] * lines[j][m];
            }
        }

        self.params
            .appearance
            .eval(&lerps, i, &mut planes, &mut lines);
        let width = self.config.coeff_width();
        let mut coeffs = [0.0; MAX_COEFFS];
        for j in 0..3 {
            let b = &self.params.basis[j];
            let mut feat = [0.0; MAX_COMPONENTS];
            for m in 0..comps[j] {
                feat[m] = planes[j][m] * lines[j][m];
            }
            for (r, c) in coeffs[..width].iter_mut().enumerate() {
                let row = b.row(r);
                let mut s = 0.0;
                for m in 0..comps[j] {
                    s += row[m] * feat[m];
                }
                *c += s;
            }
        }
        let pre = raw + self.config.density_bias;
        PointQuery {
            sigma: softplus(pre),
            raw_sigma: raw,
            coeffs,
        }
    }

    /// Accumulates parameter gradients of a [`query`](Self::query) and
    /// returns the gradient with respect to `x`.
    pub fn query_backward(
        &self,
        x: &Vec3,
        i: usize,
        d_sigma: f64,
        d_coeffs: &[f64],
        grads: &mut VolumeParams,
    ) -> Vec3 {
        let (u, du_dx) = self.unit_coords(x);
        let lerps = self.lerps(&u);
        let comps = self.config.components;
        let mut planes = [[0.0; MAX_COMPONENTS]; 3];
        let mut lines = [[0.0; MAX_COMPONENTS]; 3];
        let mut d_u = [0.0; 3];

        if d_sigma != 0.0 {
            self.params.density.eval(&lerps, i, &mut planes, &mut lines);
            let mut raw = 0.0;
            for j in 0..3 {
                for m in 0..comps[j] {
                    raw += planes[j][m] * lines[j][m];
                }
            }
            let d_raw = d_sigma * crate::network::sigmoid(raw + self.config.density_bias);
            for j in 0..3 {
                let mut d_plane = [0.0; MAX_COMPONENTS];
                let mut d_line = [0.0; MAX_COMPONENTS];
                for m in 0..comps[j] {
                    d_plane[m] = d_raw * lines[j][m];
                    d_line[m] = d_raw * planes[j][m];
                }
                self.scatter(
                    FieldPart::Density,
                    j,
                    &lerps,
                    i,
                    &d_plane,
                    &d_line,
                    grads,
                    &mut d_u,
                );
            }
        }

        let width = self.config.coeff_width();
        if d_coeffs[..width].iter().any(|&d| d != 0.0) {
            self.params
                .appearance
                .eval(&lerps, i, &mut planes, &mut lines);
            for j in 0..3 {
                let b = &self.params.basis[j];
                let gb = &mut grads.basis[j];
                let mut d_feat = [0.0; MAX_COMPONENTS];
                for r in 0..width {
                    let dc = d_coeffs[r];
                    if dc == 0.0 {
                        continue;
                    }
                    let row = b.row(r);
                    let grow = gb.row_mut(r);
                    for m in 0..comps[j] {
                        d_feat[m] += row[m] * dc;
                        grow[m] += dc * planes[j][m] * lines[j][m];
                    }
                }
                let mut d_plane = [0.0; MAX_COMPONENTS];
                let mut d_line = [0.0; MAX_COMPONENTS];
                for m in 0..comps[j] {
                    d_plane[m] = d_feat[m] * lines[j][m];
                    d_line[m] = d_feat[m] * planes[j][m];
                }
                self.scatter(
                    FieldPart::Appearance,
                    j,
                    &lerps,
                    i,
                    &d_plane,
                    &d_line,
                    grads,
                    &mut d_u,
                );
            }
        }
        Vec3::new(d_u[0] * du_dx[0], d_u[1] * du_dx[1], d_u[2] * du_dx[2])
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter(
        &self,
        part: FieldPart,
        j: usize,
        lerps: &[Lerp; 3],
        t: usize,
        d_plane: &[f64],
        d_line: &[f64],
        grads: &mut VolumeParams,
        d_u: &mut [f64; 3],
    ) {
        let (field, gfield) = match part {
            FieldPart::Appearance => (&self.params.appearance, &mut grads.appearance),
            FieldPart::Density => (&self.params.density, &mut grads.density),
        };
        let (a, b) = PLANE_AXES[j];
        let c = LINE_AXIS[j];
        let (da, db) = plane_backward(
            &field.planes[j],
            lerps[a],
            lerps[b],
            d_plane,
            &mut gfield.planes[j],
        );
        let dc = line_backward(&field.lines[j], lerps[c], t, d_line, &mut gfield.lines[j]);
        d_u[a] += da;
        d_u[b] += db;
        d_u[c] += dc;
    }

    /// SH coefficients `A(x, tau_i)`, three channel blocks.
    pub fn query_appearance(&self, x: &Vec3, i: usize) -> Result<Vec<f64>> {
        self.check_keyframe(i)?;
        Ok(self.query(x, i).coeffs[..self.config.coeff_width()].to_vec())
    }

    /// Strictly positive density `softplus(raw + bias)`.
    pub fn query_density(&self, x: &Vec3, i: usize) -> Result<f64> {
        self.check_keyframe(i)?;
        Ok(self.query(x, i).sigma)
    }

    /// Resamples every factor onto a finer grid; the keyframe axis is untouched.
    pub fn upsample(&self, new_res: [usize; 3]) -> Result<KeyframeVolume> {
        let old = self.config.grid_res;
        if (0..3).any(|a| new_res[a] < old[a]) {
            return Err(Error::contract(format!(
                "cannot shrink the grid from {old:?} to {new_res:?}"
            )));
        }
        let config = VolumeConfig {
            grid_res: new_res,
            ..self.config.clone()
        };
        let mut out = KeyframeVolume::zeros(config, self.keyframe_times.clone())?;
        let node = |i: usize, res: usize| {
            if res == 1 {
                0.0
            } else {
                i as f64 / (res - 1) as f64
            }
        };
        for (src, dst) in [
            (&self.params.appearance, &mut out.params.appearance),
            (&self.params.density, &mut out.params.density),
        ] {
            for j in 0..3 {
                let p = &src.planes[j];
                let q = &mut dst.planes[j];
                for ia in 0..q.res_a {
                    for ib in 0..q.res_b {
                        let la = lerp_coord(node(ia, q.res_a), p.res_a);
                        let lb = lerp_coord(node(ib, q.res_b), p.res_b);
                        let k = q.node(ia, ib);
                        plane_eval(p, la, lb, &mut q.data[k..k + q.comps]);
                    }
                }
                let l = &src.lines[j];
                let r = &mut dst.lines[j];
                for ic in 0..r.res_c {
                    let lc = lerp_coord(node(ic, r.res_c), l.res_c);
                    for t in 0..r.n_t {
                        let k = r.node(ic, t);
                        line_eval(l, lc, t, &mut r.data[k..k + r.comps]);
                    }
                }
            }
        }
        out.params.basis = self.params.basis.clone();
        Ok(out)
    }

    fn field(&self, part: FieldPart) -> &FactorField {
        match part {
            FieldPart::Appearance => &self.params.appearance,
            FieldPart::Density => &self.params.density,
        }
    }

    /// Mean squared difference between adjacent entries, computed per factor
    /// array (planes along both axes, lines along the spatial axis only) and
    /// averaged over the six arrays of the field.
    pub fn tv_norm(&self, part: FieldPart) -> f64 {
        tv_field(self.field(part), None, 0.0)
    }

    /// Adds `scale * d tv_norm / d params` into `grads`; returns `tv_norm`.
    pub fn tv_norm_grad(&self, part: FieldPart, scale: f64, grads: &mut VolumeParams) -> f64 {
        let g = match part {
            FieldPart::Appearance => &mut grads.appearance,
            FieldPart::Density => &mut grads.density,
        };
        tv_field(self.field(part), Some(g), scale)
    }

    /// Mean absolute value over the density factors.
    pub fn l1_norm(&self) -> f64 {
        let (sum, count) = self
            .params
            .density
            .arrays()
            .fold((0.0, 0usize), |(s, c), a| {
                (s + a.iter().map(|v| v.abs()).sum::<f64>(), c + a.len())
            });
        sum / count as f64
    }

    pub fn l1_norm_grad(&self, scale: f64, grads: &mut VolumeParams) -> f64 {
        let count: usize = self.params.density.arrays().map(|a| a.len()).sum();
        let w = scale / count as f64;
        for (src, dst) in self.params.density.arrays().zip(grads.density.arrays_mut()) {
            for (v, g) in src.iter().zip(dst.iter_mut()) {
                if *v > 0.0 {
                    *g += w;
                } else if *v < 0.0 {
                    *g -= w;
                }
            }
        }
        self.l1_norm()
    }
}

fn tv_field(field: &FactorField, mut grads: Option<&mut FactorField>, scale: f64) -> f64 {
    let mut total = 0.0;
    let per_array = scale / 6.0;
    for j in 0..3 {
        let p = &field.planes[j];
        let pairs = p.comps
            * ((p.res_a.saturating_sub(1)) * p.res_b + p.res_a * (p.res_b.saturating_sub(1)));
        if pairs > 0 {
            let norm = 1.0 / pairs as f64;
            let mut sum = 0.0;
            let mut visit = |i0: usize, i1: usize, grads: &mut Option<&mut FactorField>| {
                let d = p.data[i1] - p.data[i0];
                sum += d * d;
                if let Some(g) = grads.as_deref_mut() {
                    let gd = 2.0 * d * norm * per_array;
                    g.planes[j].data[i1] += gd;
                    g.planes[j].data[i0] -= gd;
                }
            };
            for ia in 0..p.res_a {
                for ib in 0..p.res_b {
                    for m in 0..p.comps {
                        let k = p.node(ia, ib) + m;
                        if ia + 1 < p.res_a {
                            visit(k, p.node(ia + 1, ib) + m, &mut grads);
                        }
                        if ib + 1 < p.res_b {
                            visit(k, p.node(ia, ib + 1) + m, &mut grads);
                        }
                    }
                }
            }
            total += sum * norm;
        }
        let l = &field.lines[j];
        let pairs = l.comps * l.n_t * l.res_c.saturating_sub(1);
        if pairs > 0 {
            let norm = 1.0 / pairs as f64;
            let mut sum = 0.0;
            for ic in 0..l.res_c - 1 {
                for t in 0..l.n_t {
                    for m in 0..l.comps {
                        let i0 = l.node(ic, t) + m;
                        let i1 = l.node(ic + 1, t) + m;
                        let d = l.data[i1] - l.data[i0];
                        sum += d * d;
                        if let Some(g) = grads.as_deref_mut() {
                            let gd = 2.0 * d * norm * per_array;
                            g.lines[j].data[i1] += gd;
                            g.lines[j].data[i0] -= gd;
                        }
                    }
                }
            }
            total += sum * norm;
        }
    }
    total / 6.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config(res: usize, n_t: usize) -> VolumeConfig {
        VolumeConfig {
            grid_res: [res; 3],
            n_keyframes: n_t,
            ..VolumeConfig::default()
        }
    }

    fn times(n: usize) -> Vec<f64> {
        if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        }
    }

    #[test]
    fn plane_sampling_examples() {
        let mut p = PlaneFactor::zeros(1, 2, 2);
        p.set(0, 0, 0, 0.0);
        p.set(0, 1, 0, 1.0);
        p.set(1, 0, 0, 2.0);
        p.set(1, 1, 0, 3.0);
        assert_abs_diff_eq!(sample_plane(&p, 0.5, 0.5)[0], 1.5, epsilon = 1e-15);
        assert_eq!(sample_plane(&p, 1.0, 0.0)[0], 2.0);
        let mut c = PlaneFactor::zeros(2, 3, 4);
        c.data.fill(0.7);
        for (a, b) in [(0.0, 0.0), (0.31, 0.77), (1.0, 1.0)] {
            for v in sample_plane(&c, a, b) {
                assert_abs_diff_eq!(v, 0.7, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn line_sampling_examples() {
        let mut l = LineFactor::zeros(1, 2, 1);
        l.set(1, 0, 0, 2.0);
        assert_abs_diff_eq!(sample_line(&l, 0.25, 0).unwrap()[0], 0.5, epsilon = 1e-15);
        assert!(matches!(
            sample_line(&l, 0.25, 1),
            Err(Error::Index { index: 1, len: 1 })
        ));
        let mut l = LineFactor::zeros(1, 3, 2);
        l.set(1, 1, 0, 4.0);
        assert_eq!(sample_line(&l, 0.5, 1).unwrap()[0], 4.0);
        assert_eq!(sample_line(&l, 0.5, 0).unwrap()[0], 0.0);
    }

    #[test]
    fn zero_volume_queries() {
        let v = KeyframeVolume::zeros(small_config(4, 2), times(2)).unwrap();
        let x = Vec3::new(0.1, -0.3, 0.2);
        assert!(v.query_appearance(&x, 1).unwrap().iter().all(|&a| a == 0.0));
        assert_abs_diff_eq!(v.query_density(&x, 0).unwrap(), 4.54e-5, epsilon = 1e-7);
        assert!(v.query_density(&x, 2).is_err());
    }

    #[test]
    fn ones_pair_gives_component_count() {
        let mut cfg = small_config(4, 1);
        cfg.density_bias = 0.0;
        cfg.components = [4, 4, 4];
        let mut v = KeyframeVolume::zeros(cfg, times(1)).unwrap();
        v.params.density.planes[0].data.fill(1.0);
        v.params.density.lines[0].data.fill(1.0);
        let sigma = v.query_density(&Vec3::new(0.2, 0.4, -0.6), 0).unwrap();
        assert_abs_diff_eq!(sigma, softplus(4.0), epsilon = 1e-12);
        assert_abs_diff_eq!(sigma, 4.018_149_927_917_809, epsilon = 1e-12);

        v.params.appearance.planes[0].data.fill(1.0);
        v.params.appearance.lines[0].data.fill(1.0);
        // column-sum map: every output row sums the features
        v.params.basis[0].data.fill(1.0);
        let a = v.query_appearance(&Vec3::new(-0.5, 0.1, 0.9), 0).unwrap();
        assert!(a.iter().all(|&c| (c - 4.0).abs() < 1e-12));
    }

    #[test]
    fn density_is_positive_everywhere() {
        let mut v = KeyframeVolume::new(small_config(5, 2), times(2), 3).unwrap();
        v.params.density.planes[1]
            .data
            .iter_mut()
            .for_each(|x| *x *= -400.0);
        for k in 0..50 {
            let x = Vec3::new(
                (k as f64 * 0.37).sin() * 1.4,
                (k as f64 * 0.91).cos(),
                k as f64 / 25.0 - 1.0,
            );
            assert!(v.query_density(&x, k % 2).unwrap() > 0.0);
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = small_config(8, 1);
        let v = KeyframeVolume::zeros(cfg.clone(), times(1)).unwrap();
        let expect = 2 * (8 * (64 + 8) + 4 * (64 + 8) + 4 * (64 + 8)) + 27 * 16;
        assert_eq!(cfg.parameter_count(), expect);
        assert_eq!(v.parameter_count(), expect);

        let doubled = VolumeConfig {
            n_keyframes: 2,
            ..cfg.clone()
        };
        assert_eq!(
            doubled.parameter_count() - cfg.parameter_count(),
            2 * 16 * 8
        );

        let big = |nt| VolumeConfig {
            grid_res: [128; 3],
            n_keyframes: nt,
            ..VolumeConfig::default()
        };
        let ratio = big(13).parameter_count() as f64 / big(1).parameter_count() as f64;
        assert!(ratio < 1.1, "ratio {ratio}");
    }

    #[test]
    fn upsample_preserves_queries() {
        let v = KeyframeVolume::new(small_config(4, 2), times(2), 9).unwrap();
        let same = v.upsample([4, 4, 4]).unwrap();
        let finer = v.upsample([7, 9, 13]).unwrap();
        assert!(finer.parameter_count() > v.parameter_count());
        assert!(v.upsample([3, 4, 4]).is_err());
        for k in 0..20 {
            let x = Vec3::new(
                (k as f64 * 0.61).sin(),
                (k as f64 * 0.23).cos(),
                (k as f64 * 0.47).sin() * 0.9,
            );
            let a = v.query(&x, k % 2);
            let b = same.query(&x, k % 2);
            assert!((a.raw_sigma - b.raw_sigma).abs() < 1e-6);
            // products of piecewise-linear factors are not exactly preserved
            // off-node, but stay close on a smooth-enough random field
            let c = finer.query(&x, k % 2);
            assert!(c.sigma.is_finite());
        }
    }

    #[test]
    fn upsampled_constant_stays_constant_and_ramps_interpolate() {
        let mut v = KeyframeVolume::zeros(small_config(2, 1), times(1)).unwrap();
        v.params.density.planes[0].data.fill(0.3);
        let up = v.upsample([4, 4, 4]).unwrap();
        assert!(up.params.density.planes[0]
            .data
            .iter()
            .all(|&x| (x - 0.3).abs() < 1e-15));

        // ramp along a: 0 at a=0, 1 at a=1
        for ib in 0..2 {
            for m in 0..8 {
                v.params.appearance.planes[0].set(1, ib, m, 1.0);
            }
        }
        let up = v.upsample([3, 3, 3]).unwrap();
        let p = &up.params.appearance.planes[0];
        assert_abs_diff_eq!(
            p.at(1, 0, 0),
            0.5 * (p.at(0, 0, 0) + p.at(2, 0, 0)),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(p.at(1, 2, 3), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tv_examples() {
        let mut v = KeyframeVolume::zeros(small_config(2, 1), times(1)).unwrap();
        assert_eq!(v.tv_norm(FieldPart::Appearance), 0.0);
        for s in v.params.tensors_mut() {
            s.fill(1.25);
        }
        assert_eq!(v.tv_norm(FieldPart::Density), 0.0);

        // single plane [[0,1],[0,1]]: two unit diffs along b, none along a,
        // 4 adjacent pairs per component -> 0.5 for that array, / 6 arrays
        let mut v = KeyframeVolume::zeros(small_config(2, 1), times(1)).unwrap();
        let p = &mut v.params.density.planes[0];
        for ia in 0..2 {
            for m in 0..p.comps {
                p.set(ia, 1, m, 1.0);
            }
        }
        assert_abs_diff_eq!(v.tv_norm(FieldPart::Density), 0.5 / 6.0, epsilon = 1e-15);

        let mut w = KeyframeVolume::new(small_config(3, 2), times(2), 4).unwrap();
        let before = w.tv_norm(FieldPart::Appearance);
        for s in w.params.tensors_mut() {
            s.iter_mut().for_each(|x| *x *= 2.0);
        }
        assert_abs_diff_eq!(
            w.tv_norm(FieldPart::Appearance),
            4.0 * before,
            epsilon = 1e-12
        );
    }

    #[test]
    fn l1_examples() {
        let mut v = KeyframeVolume::zeros(small_config(3, 2), times(2)).unwrap();
        assert_eq!(v.l1_norm(), 0.0);
        for s in v.params.density.arrays_mut() {
            s.fill(-0.4);
        }
        assert_abs_diff_eq!(v.l1_norm(), 0.4, epsilon = 1e-15);
        v.params.appearance.planes[2].data.fill(9.0);
        assert_abs_diff_eq!(v.l1_norm(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let v = KeyframeVolume::new(small_config(3, 2), times(2), 21).unwrap();
        let mut g = v.params.zeros_like();
        v.tv_norm_grad(FieldPart::Density, 1.0, &mut g);
        v.l1_norm_grad(0.5, &mut g);
        let f = |vol: &KeyframeVolume| vol.tv_norm(FieldPart::Density) + 0.5 * vol.l1_norm();
        let h = 1e-6;
        for (idx, k) in [(6usize, 3usize), (8, 11), (9, 0), (11, 5)] {
            let mut p = v.clone();
            p.params.tensors_mut()[idx][k] += h;
            let mut m = v.clone();
            m.params.tensors_mut()[idx][k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = g.tensors()[idx].2[k];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1e-3),
                "tensor {idx}[{k}]: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn invalid_keyframe_times_are_rejected() {
        assert!(KeyframeVolume::zeros(small_config(2, 2), vec![0.5, 0.5]).is_err());
        assert!(KeyframeVolume::zeros(small_config(2, 2), vec![0.0]).is_err());
        assert!(KeyframeVolume::zeros(small_config(2, 1), vec![1.5]).is_err());
    }
}
