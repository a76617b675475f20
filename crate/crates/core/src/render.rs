//! Differentiable per-ray and per-frame rendering of a [`SceneModel`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    camera_rays, contract, contract_vjp, pluecker_encode, two_plane_encode, Camera, NdcFrame,
    PrimitiveKind, Ray, Vec3,
};
use crate::linalg::Mat;
use crate::network::{
    encode_input, generate_samples, generate_samples_vjp, NetworkTape, PredictionCotangent,
    RayCode, SampleNetworkConfig, SampleNetworkParams, SamplePoints, SamplePrediction,
};
use crate::raster::Image;
use crate::sh::{eval_sh, eval_sh_vjp};
use crate::volume::{KeyframeVolume, PointQuery, VolumeParams, MAX_COEFFS};

/// Smallest allowed distance between a z-plane primitive and the NDC near plane.
const PLANE_MARGIN: f64 = 1e-4;
const SPHERE_MIN_RADIUS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: [f64; 3],
    #[serde(default = "default_true")]
    pub sort_samples: bool,
    pub far_bound: f64,
    pub chunk_rays: usize,
}

fn default_true() -> bool {
    true
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0; 3],
            sort_samples: true,
            far_bound: 2.0,
            chunk_rays: 4096,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.far_bound > 0.0 && self.far_bound.is_finite()) {
            return Err(Error::contract("far_bound must be positive and finite"));
        }
        if self.chunk_rays == 0 {
            return Err(Error::contract("chunk_rays must be at least 1"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::contract("background must lie in [0,1]^3"));
        }
        Ok(())
    }

    pub fn background(&self) -> Vec3 {
        Vec3::from(self.background)
    }
}

/// Where network-space rays live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneFrame {
    /// Forward-facing capture: world rays are mapped into NDC of a reference camera.
    Ndc { frame: NdcFrame },
    /// Rays stay in world space; `contract` applies the unbounded-scene contraction
    /// to sample points before volume lookup.
    World { contract: bool },
}

/// Switches used by ablations. Both are on for the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingFlags {
    pub offsets: bool,
    pub velocities: bool,
}

impl Default for SamplingFlags {
    fn default() -> Self {
        SamplingFlags {
            offsets: true,
            velocities: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub network_config: SampleNetworkConfig,
    pub network: SampleNetworkParams,
    pub volume: KeyframeVolume,
    pub render: RenderOptions,
    pub frame: SceneFrame,
    pub flags: SamplingFlags,
}

/// How the backward pass treats primitives clamped to their valid range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClampGradient {
    /// True derivative: clamped primitive parameters get no gradient.
    Exact,
    /// Training surrogate: a clamped primitive keeps the gradient taken at
    /// the bound when a descent step would move it back into range. With the
    /// exact rule, primitives pushed out early in training stay dead.
    Restoring,
}

/// Gradients for every trainable tensor of a [`SceneModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub network: SampleNetworkParams,
    pub volume: VolumeParams,
}

impl ModelGrads {
    pub fn zeros_like(model: &SceneModel) -> Self {
        ModelGrads {
            network: model.network.zeros_like(),
            volume: model.volume.params.zeros_like(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.volume.tensors_mut();
        out.extend(self.network.tensors_mut());
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let mut theirs = other.clone();
        for (a, b) in self.tensors_mut().into_iter().zip(theirs.tensors_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }
}

impl SceneModel {
    pub fn new(
        network_config: SampleNetworkConfig,
        network: SampleNetworkParams,
        volume: KeyframeVolume,
        render: RenderOptions,
        frame: SceneFrame,
    ) -> Result<Self> {
        let model = SceneModel {
            network_config,
            network,
            volume,
            render,
            frame,
            flags: SamplingFlags::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config.validate()?;
        self.network.check_shapes(&self.network_config)?;
        self.volume.config.validate()?;
        self.render.validate()?;
        if self.volume.config.n_keyframes > 1 && !self.network_config.dynamic {
            return Err(Error::contract(
                "a volume with several keyframes needs a dynamic sample network",
            ));
        }
        if self.volume.keyframe_times.len() != self.volume.config.n_keyframes {
            return Err(Error::contract(
                "keyframe time count does not match the volume",
            ));
        }
        Ok(())
    }

    pub fn dynamic(&self) -> bool {
        self.network_config.dynamic
    }

    /// Maps a world-space ray into the space the network and volume operate in.
    pub fn network_ray(&self, world: &Ray) -> Result<Ray> {
        match &self.frame {
            SceneFrame::Ndc { frame } => frame.to_ndc(world),
            SceneFrame::World { .. } => Ok(*world),
        }
    }

    pub fn ray_code(&self, ray: &Ray) -> Result<RayCode> {
        Ok(match self.network_config.primitive_kind {
            PrimitiveKind::ZPlane => RayCode::TwoPlane(two_plane_encode(ray)?),
            PrimitiveKind::ConcentricSphere => {
                RayCode::Pluecker(pluecker_encode(&ray.origin, &ray.direction)?)
            }
        })
    }

    fn contracts(&self) -> bool {
        matches!(self.frame, SceneFrame::World { contract: true })
    }

    /// Range predicted primitive parameters are clamped into so that every
    /// primitive intersects the ray.
    fn parameter_range(&self, ray: &Ray) -> (f64, f64) {
        match self.network_config.primitive_kind {
            PrimitiveKind::ZPlane => (-1.0 + PLANE_MARGIN, 1.0),
            PrimitiveKind::ConcentricSphere => {
                let inside = ray.origin.norm() * (1.0 + 1e-6) + 1e-9;
                let lo = inside.max(SPHERE_MIN_RADIUS);
                (lo, self.render.far_bound.max(lo))
            }
        }
    }
}

/// Index of the keyframe nearest to `tau` and its time; ties go to the earlier keyframe.
pub fn nearest_keyframe(tau: f64, keyframe_times: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &t) in keyframe_times.iter().enumerate().skip(1) {
        if (t - tau).abs() < (keyframe_times[best] - tau).abs() {
            best = i;
        }
    }
    (best, keyframe_times[best])
}

pub fn advect(x: &Vec3, v: &Vec3, tau: f64, tau_i: f64) -> Vec3 {
    x + v * (tau_i - tau)
}

pub fn modulate_color(color: &Vec3, scale: &Vec3, shift: &Vec3) -> Vec3 {
    (color.component_mul(scale) + shift).map(|c| c.clamp(0.0, 1.0))
}

/// Returns `(d_color, d_scale, d_shift)`; clamped channels pass no gradient.
pub fn modulate_color_vjp(
    color: &Vec3,
    scale: &Vec3,
    shift: &Vec3,
    d_out: &Vec3,
) -> (Vec3, Vec3, Vec3) {
    let raw = color.component_mul(scale) + shift;
    let d = Vec3::from_fn(|c, _| {
        if (0.0..=1.0).contains(&raw[c]) {
            d_out[c]
        } else {
            0.0
        }
    });
    (d.component_mul(scale), d.component_mul(color), d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: Vec3,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

pub fn composite(
    colors: &[Vec3],
    densities: &[f64],
    deltas: &[f64],
    background: &Vec3,
) -> Result<Composite> {
    let n = colors.len();
    if densities.len() != n || deltas.len() != n {
        return Err(Error::contract("composite inputs differ in length"));
    }
    if let Some(s) = densities.iter().find(|&&s| !(s >= 0.0)) {
        return Err(Error::contract(format!("negative density {s}")));
    }
    if let Some(d) = deltas.iter().find(|&&d| !(d >= 0.0)) {
        return Err(Error::contract(format!("negative delta {d}")));
    }
    let mut weights = Vec::with_capacity(n);
    let mut trans = 1.0;
    let mut color = Vec3::zeros();
    for k in 0..n {
        let decay = (-densities[k] * deltas[k]).exp();
        let w = trans * (1.0 - decay);
        color += colors[k] * w;
        weights.push(w);
        trans *= decay;
    }
    let opacity = 1.0 - trans;
    color += background * trans;
    Ok(Composite {
        color,
        weights,
        opacity,
    })
}

/// Cotangents of [`composite`] with respect to colors, densities and deltas.
pub struct CompositeGrad {
    pub colors: Vec<Vec3>,
    pub densities: Vec<f64>,
    pub deltas: Vec<f64>,
}

pub fn composite_vjp(
    colors: &[Vec3],
    densities: &[f64],
    deltas: &[f64],
    background: &Vec3,
    out: &Composite,
    d_color: &Vec3,
) -> CompositeGrad {
    let n = colors.len();
    let mut grad = CompositeGrad {
        colors: out.weights.iter().map(|w| d_color * *w).collect(),
        densities: vec![0.0; n],
        deltas: vec![0.0; n],
    };
    // suffix = sum_{i>k} w_i (c_i - bg) . d_color
    let mut suffix = 0.0;
    let mut trans_after: Vec<f64> = Vec::with_capacity(n);
    let mut trans = 1.0;
    for k in 0..n {
        trans *= (-densities[k] * deltas[k]).exp();
        trans_after.push(trans);
    }
    for k in (0..n).rev() {
        let own = (colors[k] - background).dot(d_color);
        let dx = trans_after[k] * own - suffix;
        grad.densities[k] = dx * deltas[k];
        grad.deltas[k] = dx * densities[k];
        suffix += out.weights[k] * own;
    }
    grad
}

/// Result of rendering one ray. Per-sample vectors are in compositing order.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub color: Vec3,
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// A ray already mapped into network space, with its time if the model is dynamic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedRay {
    pub ray: Ray,
    pub time: Option<f64>,
}

/// Everything the backward pass needs from one ray's forward pass.
#[derive(Clone, Debug)]
pub struct RayTrace {
    prediction: SamplePrediction,
    effective: SamplePrediction,
    clamped: Vec<bool>,
    samples: SamplePoints,
    keyframe: usize,
    lag: f64,
    advected: Vec<Vec3>,
    queries: Vec<PointQuery>,
    query_points: Vec<Vec3>,
    raw_rgb: Vec<Vec3>,
    rgb: Vec<Vec3>,
    order: Vec<usize>,
    deltas: Vec<f64>,
    last_open: bool,
    composite: Composite,
}

impl RayTrace {
    pub fn color(&self) -> Vec3 {
        self.composite.color
    }

    pub fn to_render(&self) -> RayRender {
        let distances: Vec<f64> = self
            .order
            .iter()
            .map(|&k| self.samples.distances[k])
            .collect();
        let depth = self
            .composite
            .weights
            .iter()
            .zip(&distances)
            .map(|(w, t)| w * t)
            .sum();
        RayRender {
            color: self.composite.color,
            weights: self.composite.weights.clone(),
            distances,
            depth,
            opacity: self.composite.opacity,
        }
    }
}

/// Forward state for a batch of rays.
pub struct BatchTrace {
    tape: NetworkTape,
    pub rays: Vec<RayTrace>,
}

impl BatchTrace {
    pub fn colors(&self) -> Vec<Vec3> {
        self.rays.iter().map(RayTrace::color).collect()
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>, stage: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.into(),
        })
    }
}

fn trace_ray(model: &SceneModel, ray: &TimedRay, head: &[f64]) -> Result<RayTrace> {
    let cfg = &model.network_config;
    check_finite(head.iter().copied(), "sample network")?;
    let prediction = SamplePrediction::decode(cfg, head);
    let mut effective = prediction.clone();
    let (lo, hi) = model.parameter_range(&ray.ray);
    let clamped = effective
        .primitive_params
        .iter_mut()
        .map(|p| {
            let c = p.clamp(lo, hi);
            let changed = c != *p;
            *p = c;
            changed
        })
        .collect::<Vec<_>>();
    if !model.flags.offsets {
        effective
            .offsets
            .iter_mut()
            .for_each(|e| *e = Vec3::zeros());
    }
    let samples = generate_samples(&effective, &ray.ray, cfg.primitive_kind)?;
    let n = samples.points.len();

    let (keyframe, lag) = match ray.time {
        Some(tau) => {
            let (i, tau_i) = nearest_keyframe(tau, &model.volume.keyframe_times);
            (i, tau_i - tau)
        }
        None => (0, 0.0),
    };
    let advected: Vec<Vec3> = match (&effective.velocities, ray.time) {
        (Some(vel), Some(_)) if model.flags.velocities => samples
            .points
            .iter()
            .zip(vel)
            .map(|(x, v)| x + v * lag)
            .collect(),
        _ => samples.points.clone(),
    };
    let query_points: Vec<Vec3> = if model.contracts() {
        advected.iter().map(contract).collect()
    } else {
        advected.clone()
    };
    let queries: Vec<PointQuery> = query_points
        .iter()
        .map(|x| model.volume.query(x, keyframe))
        .collect();
    let nc = model.volume.config.coeff_width();
    check_finite(
        queries
            .iter()
            .flat_map(|q| std::iter::once(q.sigma).chain(q.coeffs[..nc].iter().copied())),
        "volume query",
    )?;

    let deg = model.volume.config.sh_degree;
    let dir = ray.ray.direction;
    let raw_rgb: Vec<Vec3> = queries
        .iter()
        .map(|q| eval_sh(deg, &q.coeffs[..nc], &dir))
        .collect();
    let rgb: Vec<Vec3> = (0..n)
        .map(|k| {
            modulate_color(
                &raw_rgb[k],
                &effective.color_scale[k],
                &effective.color_shift[k],
            )
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    if model.render.sort_samples {
        order.sort_by(|&a, &b| samples.distances[a].total_cmp(&samples.distances[b]));
    }
    let t_end = ray.ray.t_far.min(model.render.far_bound);
    let mut deltas = Vec::with_capacity(n);
    let mut last_open = false;
    for j in 0..n {
        let t = samples.distances[order[j]];
        if j + 1 < n {
            deltas.push(samples.distances[order[j + 1]] - t);
        } else {
            last_open = t_end > t;
            deltas.push((t_end - t).max(0.0));
        }
    }
    let colors: Vec<Vec3> = order.iter().map(|&k| rgb[k]).collect();
    let sigmas: Vec<f64> = order.iter().map(|&k| queries[k].sigma).collect();
    let comp = composite(&colors, &sigmas, &deltas, &model.render.background())?;
    check_finite(comp.color.iter().copied(), "compositing")?;
    Ok(RayTrace {
        prediction,
        effective,
        clamped,
        samples,
        keyframe,
        lag,
        advected,
        queries,
        query_points,
        raw_rgb,
        rgb,
        order,
        deltas,
        last_open,
        composite: comp,
    })
}

/// Pulls `d_color` back through one ray, accumulating volume gradients and
/// writing the network head cotangent into `d_head`.
fn backward_ray(
    model: &SceneModel,
    ray: &TimedRay,
    tr: &RayTrace,
    d_color: &Vec3,
    d_volume: &mut VolumeParams,
    d_head: &mut [f64],
    clamp: ClampGradient,
) {
    let cfg = &model.network_config;
    let n = tr.order.len();
    let colors: Vec<Vec3> = tr.order.iter().map(|&k| tr.rgb[k]).collect();
    let sigmas: Vec<f64> = tr.order.iter().map(|&k| tr.queries[k].sigma).collect();
    let cg = composite_vjp(
        &colors,
        &sigmas,
        &tr.deltas,
        &model.render.background(),
        &tr.composite,
        d_color,
    );

    let mut d_dist = vec![0.0; n];
    for j in 0..n {
        let dd = cg.deltas[j];
        if j + 1 < n {
            d_dist[tr.order[j + 1]] += dd;
            d_dist[tr.order[j]] -= dd;
        } else if tr.last_open {
            d_dist[tr.order[j]] -= dd;
        }
    }

    let mut cot = PredictionCotangent::zeros(n);
    let mut d_points = vec![Vec3::zeros(); n];
    let deg = model.volume.config.sh_degree;
    let nc = model.volume.config.coeff_width();
    let dir = ray.ray.direction;
    let mut d_coeffs = [0.0; MAX_COEFFS];
    for (j, &k) in tr.order.iter().enumerate() {
        let (d_raw, d_scale, d_shift) = modulate_color_vjp(
            &tr.raw_rgb[k],
            &tr.effective.color_scale[k],
            &tr.effective.color_shift[k],
            &cg.colors[j],
        );
        cot.color_scale[k] = d_scale;
        cot.color_shift[k] = d_shift;
        d_coeffs[..nc].iter_mut().for_each(|c| *c = 0.0);
        eval_sh_vjp(deg, &tr.raw_rgb[k], &dir, &d_raw, &mut d_coeffs[..nc]);
        let d_query = model.volume.query_backward(
            &tr.query_points[k],
            tr.keyframe,
            cg.densities[j],
            &d_coeffs[..nc],
            d_volume,
        );
        let d_adv = if model.contracts() {
            contract_vjp(&tr.advected[k], &d_query)
        } else {
            d_query
        };
        if ray.time.is_some() && model.flags.velocities && tr.effective.velocities.is_some() {
            cot.velocities[k] = d_adv * tr.lag;
        }
        d_points[k] = d_adv;
    }
    generate_samples_vjp(
        &tr.effective,
        &ray.ray,
        &tr.samples,
        &d_points,
        &d_dist,
        &mut cot,
    );
    for k in 0..n {
        if tr.clamped[k] {
            let excess = tr.prediction.primitive_params[k] - tr.effective.primitive_params[k];
            if clamp == ClampGradient::Exact || excess * cot.primitive_params[k] <= 0.0 {
                cot.primitive_params[k] = 0.0;
            }
        }
        if !model.flags.offsets {
            cot.offsets[k] = Vec3::zeros();
            cot.gate_logits[k] = 0.0;
        }
    }
    cot.write_head(cfg, &tr.prediction, d_head);
}

fn network_input(model: &SceneModel, rays: &[TimedRay]) -> Result<Mat> {
    let cfg = &model.network_config;
    let width = cfg.input_width();
    let mut input = Mat::zeros(rays.len(), width);
    for (r, ray) in rays.iter().enumerate() {
        if ray.time.is_some() != cfg.dynamic {
            return Err(Error::contract(if cfg.dynamic {
                "dynamic model requires a time"
            } else {
                "static model does not take a time"
            }));
        }
        if let Some(tau) = ray.time {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::contract(format!("time {tau} outside [0,1]")));
            }
        }
        let code = model.ray_code(&ray.ray)?;
        input
            .row_mut(r)
            .copy_from_slice(&encode_input(cfg, &code, ray.time)?);
    }
    Ok(input)
}

/// Forward pass over a batch of network-space rays.
pub fn forward_rays(model: &SceneModel, rays: &[TimedRay]) -> Result<BatchTrace> {
    let input = network_input(model, rays)?;
    let tape = model.network.forward_batch(&model.network_config, input);
    let traces = rays
        .iter()
        .enumerate()
        .map(|(r, ray)| trace_ray(model, ray, tape.output.row(r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTrace { tape, rays: traces })
}

/// Backward pass matching [`forward_rays`]; accumulates into `grads`.
pub fn backward_rays(
    model: &SceneModel,
    rays: &[TimedRay],
    trace: &BatchTrace,
    d_colors: &[Vec3],
    grads: &mut ModelGrads,
    clamp: ClampGradient,
) {
    assert_eq!(rays.len(), d_colors.len(), "one color cotangent per ray");
    let cfg = &model.network_config;
    let mut d_head = Mat::zeros(rays.len(), cfg.head_width());
    for (r, ray) in rays.iter().enumerate() {
        backward_ray(
            model,
            ray,
            &trace.rays[r],
            &d_colors[r],
            &mut grads.volume,
            d_head.row_mut(r),
            clamp,
        );
    }
    model
        .network
        .backward_batch(cfg, &trace.tape, &d_head, &mut grads.network);
}

fn timed(model: &SceneModel, world: &Ray, time: Option<f64>) -> Result<TimedRay> {
    Ok(TimedRay {
        ray: model.network_ray(world)?,
        time,
    })
}

pub fn render_ray(model: &SceneModel, world: &Ray, time: Option<f64>) -> Result<RayRender> {
    let ray = timed(model, world, time)?;
    let trace = forward_rays(model, std::slice::from_ref(&ray))?;
    Ok(trace.rays[0].to_render())
}

/// Renders world-space rays in chunks of `render.chunk_rays`, in parallel.
pub fn render_rays(model: &SceneModel, world: &[Ray], time: Option<f64>) -> Result<Vec<Vec3>> {
    let rays = world
        .iter()
        .map(|r| timed(model, r, time))
        .collect::<Result<Vec<_>>>()?;
    let chunks = rays
        .par_chunks(model.render.chunk_rays)
        .map(|chunk| forward_rays(model, chunk).map(|t| t.colors()))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn render_frame(model: &SceneModel, camera: &Camera, time: Option<f64>) -> Result<Image> {
    camera.validate()?;
    let colors = render_rays(model, &camera_rays(camera), time)?;
    Image::new(camera.width, camera.height, colors)
}
