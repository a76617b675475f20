//! Loss, schedules, Adam, ray subsampling, video chunking and the training loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::network::SizeVariant;
use crate::render::{backward_rays, forward_rays, ClampGradient, ModelGrads, SceneModel, TimedRay};
use crate::volume::{FieldPart, KeyframeVolume};

/// Iteration count the reference schedule is expressed in; periods and
/// upsample points scale by `total_iters / REFERENCE_ITERS`.
pub const REFERENCE_ITERS: f64 = 15_000.0;
const REFERENCE_PERIOD: f64 = 30_000.0;
const REFERENCE_UPSAMPLES: [f64; 5] = [4_000.0, 6_000.0, 8_000.0, 10_000.0, 12_000.0];
/// Rays per gradient work unit. Fixed so the reduction order never depends
/// on the thread count.
const WORK_UNIT_RAYS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub lr_volume: f64,
    pub lr_network: f64,
    pub w_tv: f64,
    pub tv_decay: f64,
    pub w_l1_start: f64,
    pub w_l1_end: f64,
    pub keyframe_interval: usize,
    pub chunk_frames: usize,
    pub total_iters: usize,
    /// `None` derives the scaled reference schedule from `total_iters`.
    pub upsample_iters: Option<Vec<usize>>,
    pub seed: u64,
    pub size_variant: SizeVariant,
    pub n_primitives: Option<usize>,
    pub grid_init: usize,
    pub grid_final: usize,
    /// Learning rates decay exponentially to this fraction of their initial value.
    pub lr_decay_target: f64,
    pub grad_clip_network: f64,
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_rays: 16_384,
            lr_volume: 0.02,
            lr_network: 0.0075,
            w_tv: 0.05,
            tv_decay: 0.1,
            w_l1_start: 8e-5,
            w_l1_end: 4e-5,
            keyframe_interval: 4,
            chunk_frames: 50,
            total_iters: 15_000,
            upsample_iters: None,
            seed: 0,
            size_variant: SizeVariant::Full,
            n_primitives: None,
            grid_init: 32,
            grid_final: 128,
            lr_decay_target: 0.1,
            grad_clip_network: 10.0,
            checkpoint_every: 0,
            checkpoint_path: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_volume,
            self.lr_network,
            self.tv_decay,
            self.lr_decay_target,
            self.grad_clip_network,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::contract(
                "learning rates, decays and clip norm must be positive",
            ));
        }
        if [self.w_tv, self.w_l1_start, self.w_l1_end]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::contract("regularizer weights must be non-negative"));
        }
        if self.batch_rays == 0
            || self.keyframe_interval == 0
            || self.chunk_frames == 0
            || self.log_every == 0
        {
            return Err(Error::contract(
                "batch_rays, keyframe_interval, chunk_frames and log_every must be positive",
            ));
        }
        if self.grid_init < 2 || self.grid_final < self.grid_init {
            return Err(Error::contract(
                "grid resolutions must satisfy 2 <= grid_init <= grid_final",
            ));
        }
        let ups = self.upsample_schedule();
        if ups.windows(2).any(|w| w[0] >= w[1])
            || ups.last().is_some_and(|&u| u >= self.total_iters)
        {
            return Err(Error::contract(
                "upsample_iters must be strictly increasing and below total_iters",
            ));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::contract("checkpoint_every requires checkpoint_path"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.total_iters as f64 / REFERENCE_ITERS
    }

    /// Length of one TV decay period and of the L1 ramp.
    pub fn period(&self) -> f64 {
        (REFERENCE_PERIOD * self.scale()).max(1.0)
    }

    pub fn upsample_schedule(&self) -> Vec<usize> {
        match &self.upsample_iters {
            Some(v) => v.clone(),
            None => {
                if self.grid_final == self.grid_init {
                    return Vec::new();
                }
                let mut out: Vec<usize> = REFERENCE_UPSAMPLES
                    .iter()
                    .map(|&u| (u * self.scale()).round() as usize)
                    .filter(|&u| u > 0)
                    .collect();
                out.dedup();
                out.retain(|&u| u < self.total_iters);
                out
            }
        }
    }

    /// Cube resolution reached after the `j`-th upsample (0-based) of `count`.
    pub fn upsample_resolution(&self, j: usize, count: usize) -> usize {
        let (a, b) = ((self.grid_init as f64).ln(), (self.grid_final as f64).ln());
        let f = (j + 1) as f64 / count as f64;
        (a + (b - a) * f).exp().round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub w_tv: f64,
    pub w_l1: f64,
    pub upsample: Option<[usize; 3]>,
}

pub fn schedule(iteration: usize, config: &TrainConfig) -> Schedule {
    let period = config.period();
    let it = iteration as f64;
    let w_tv = config.w_tv * config.tv_decay.powi((it / period).floor() as i32);
    let f = (it / period).min(1.0);
    let w_l1 = config.w_l1_start + (config.w_l1_end - config.w_l1_start) * f;
    let ups = config.upsample_schedule();
    let upsample = ups.iter().position(|&u| u == iteration).map(|j| {
        let r = config.upsample_resolution(j, ups.len());
        [r; 3]
    });
    Schedule {
        w_tv,
        w_l1,
        upsample,
    }
}

/// Learning-rate multiplier at `iteration`.
pub fn lr_factor(iteration: usize, config: &TrainConfig) -> f64 {
    config
        .lr_decay_target
        .powf(iteration as f64 / config.total_iters.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub total: f64,
    pub l2: f64,
    pub tv_term: f64,
    pub l1_term: f64,
    pub w_tv: f64,
    pub w_l1: f64,
}

/// Mean squared error over rays and channels, plus its gradient per ray.
fn l2_and_grad(predicted: &[Vec3], target: &[Vec3]) -> (f64, Vec<Vec3>) {
    let scale = 1.0 / (3.0 * predicted.len() as f64);
    let mut sum = 0.0;
    let grads = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            sum += d.norm_squared();
            d * (2.0 * scale)
        })
        .collect();
    (sum * scale, grads)
}

pub fn loss(
    predicted: &[Vec3],
    target: &[Vec3],
    volume: &KeyframeVolume,
    w_tv: f64,
    w_l1: f64,
) -> Result<LossReport> {
    if predicted.is_empty() {
        return Err(Error::contract("loss of an empty batch"));
    }
    if predicted.len() != target.len() {
        return Err(Error::contract(
            "predicted and target batches differ in length",
        ));
    }
    let (l2, _) = l2_and_grad(predicted, target);
    let tv = volume.tv_norm(FieldPart::Appearance) + volume.tv_norm(FieldPart::Density);
    let l1 = volume.l1_norm();
    Ok(LossReport {
        iteration: 0,
        total: l2 + w_tv * tv + w_l1 * l1,
        l2,
        tv_term: tv,
        l1_term: l1,
        w_tv,
        w_l1,
    })
}

/// Loss over a batch together with the gradient of its total. `clamp`
/// selects the exact derivative or the training surrogate for clamped
/// primitives.
pub fn loss_and_grads(
    model: &SceneModel,
    rays: &[TimedRay],
    targets: &[Vec3],
    w_tv: f64,
    w_l1: f64,
    clamp: ClampGradient,
) -> Result<(LossReport, ModelGrads)> {
    if rays.is_empty() || rays.len() != targets.len() {
        return Err(Error::contract(
            "loss needs a nonempty batch with one target per ray",
        ));
    }
    let batch = rays.len() as f64;
    let units: Vec<(f64, ModelGrads)> = rays
        .par_chunks(WORK_UNIT_RAYS)
        .zip(targets.par_chunks(WORK_UNIT_RAYS))
        .map(|(r, t)| {
            let trace = forward_rays(model, r)?;
            let colors = trace.colors();
            let mut sum = 0.0;
            let d: Vec<Vec3> = colors
                .iter()
                .zip(t)
                .map(|(p, q)| {
                    let e = p - q;
                    sum += e.norm_squared();
                    e * (2.0 / (3.0 * batch))
                })
                .collect();
            let mut g = ModelGrads::zeros_like(model);
            backward_rays(model, r, &trace, &d, &mut g, clamp);
            Ok((sum, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = units.into_iter();
    let (mut sq, mut grads) = iter.next().expect("nonempty batch");
    for (s, g) in iter {
        sq += s;
        grads.add_assign(&g);
    }
    let l2 = sq / (3.0 * batch);
    let vol = &model.volume;
    let tv = vol.tv_norm_grad(FieldPart::Appearance, w_tv, &mut grads.volume)
        + vol.tv_norm_grad(FieldPart::Density, w_tv, &mut grads.volume);
    let l1 = vol.l1_norm_grad(w_l1, &mut grads.volume);
    let report = LossReport {
        iteration: 0,
        total: l2 + w_tv * tv + w_l1 * l1,
        l2,
        tv_term: tv,
        l1_term: l1,
        w_tv,
        w_l1,
    };
    Ok((report, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_tensors(tensors: &[&mut [f64]]) -> Self {
        AdamState::new(&tensors.iter().map(|t| t.len()).collect::<Vec<_>>())
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::contract("optimizer tensor count mismatch"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::contract("optimizer tensor shape mismatch"));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Per-axis downsampling factor for 1-based frame number `m`.
pub fn subsample_factor(m: usize) -> usize {
    if m % 8 == 0 {
        1
    } else if m % 4 == 0 {
        4
    } else {
        8
    }
}

/// Row-major rays and colors of one training image.
#[derive(Clone, Debug)]
pub struct FrameRays<R> {
    /// 1-based frame number.
    pub m: usize,
    pub width: usize,
    pub height: usize,
    pub rays: Vec<R>,
    pub colors: Vec<Vec3>,
}

/// Keeps every pixel of frames divisible by 8, a nearest-neighbor ×4 grid for
/// other multiples of 4 and a ×8 grid for the rest.
pub fn subsample_training_rays<R: Clone>(frames: &[FrameRays<R>]) -> (Vec<R>, Vec<Vec3>) {
    let mut rays = Vec::new();
    let mut colors = Vec::new();
    for f in frames {
        let s = subsample_factor(f.m);
        for y in 0..f.height / s {
            for x in 0..f.width / s {
                let i = (y * s + s / 2) * f.width + x * s + s / 2;
                rays.push(f.rays[i].clone());
                colors.push(f.colors[i]);
            }
        }
    }
    (rays, colors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoChunk {
    pub start: usize,
    pub end: usize,
    pub keyframe_frames: Vec<usize>,
}

impl VideoChunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Normalized time of local frame index `local`.
    pub fn time(&self, local: usize) -> f64 {
        if self.len() <= 1 {
            0.0
        } else {
            local as f64 / (self.len() - 1) as f64
        }
    }

    pub fn keyframe_times(&self) -> Vec<f64> {
        self.keyframe_frames
            .iter()
            .map(|&f| self.time(f - self.start))
            .collect()
    }
}

pub fn chunk_video(
    n_frames: usize,
    chunk_frames: usize,
    keyframe_interval: usize,
) -> Result<Vec<VideoChunk>> {
    if n_frames == 0 || chunk_frames == 0 || keyframe_interval == 0 {
        return Err(Error::contract(
            "chunk_video needs positive frame, chunk and interval counts",
        ));
    }
    Ok((0..n_frames)
        .step_by(chunk_frames)
        .map(|start| {
            let end = (start + chunk_frames).min(n_frames);
            VideoChunk {
                start,
                end,
                keyframe_frames: (start..end).step_by(keyframe_interval).collect(),
            }
        })
        .collect())
}

/// Training rays in network space with their target colors.
#[derive(Clone, Debug, Default)]
pub struct RayPool {
    pub rays: Vec<TimedRay>,
    pub colors: Vec<Vec3>,
}

/// Rounds every trainable parameter to the nearest `f32`, the checkpoint precision.
pub fn snap_to_f32(model: &mut SceneModel) {
    for t in model
        .volume
        .params
        .tensors_mut()
        .into_iter()
        .chain(model.network.tensors_mut())
    {
        t.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

fn first_non_finite(model: &SceneModel) -> Option<String> {
    let names = model
        .volume
        .params
        .tensors()
        .into_iter()
        .chain(model.network.tensors());
    names
        .filter(|(_, _, d)| d.iter().any(|x| !x.is_finite()))
        .map(|(n, _, _)| n)
        .next()
}

/// Progress notifications emitted by [`train`].
pub enum TrainEvent<'a> {
    Progress {
        report: &'a LossReport,
        elapsed_seconds: f64,
    },
    Upsampled {
        iteration: usize,
        resolution: [usize; 3],
    },
    Checkpoint {
        iteration: usize,
        model: &'a SceneModel,
    },
}

/// Optimizes `model` on `pool` and returns the loss history.
pub fn train(
    model: &mut SceneModel,
    pool: &RayPool,
    config: &TrainConfig,
    mut observe: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    model.validate()?;
    let mut history = Vec::new();
    if config.total_iters == 0 {
        return Ok(history);
    }
    if pool.rays.is_empty() || pool.rays.len() != pool.colors.len() {
        return Err(Error::contract(
            "training needs a nonempty ray pool with one color per ray",
        ));
    }
    snap_to_f32(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_7973);
    let mut order: Vec<usize> = (0..pool.rays.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam_vol = AdamState::for_tensors(&model.volume.params.tensors_mut());
    let mut adam_net = AdamState::for_tensors(&model.network.tensors_mut());
    let batch = config.batch_rays.min(pool.rays.len());
    let start = Instant::now();
    let mut rays = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);

    for iteration in 0..config.total_iters {
        let sched = schedule(iteration, config);
        if let Some(res) = sched.upsample {
            model.volume = model.volume.upsample(res)?;
            snap_to_f32(model);
            adam_vol = AdamState::for_tensors(&model.volume.params.tensors_mut());
            observe(TrainEvent::Upsampled {
                iteration,
                resolution: res,
            })?;
        }

        rays.clear();
        targets.clear();
        while rays.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            rays.push(pool.rays[i]);
            targets.push(pool.colors[i]);
        }

        let (mut report, mut grads) = match loss_and_grads(
            model,
            &rays,
            &targets,
            sched.w_tv,
            sched.w_l1,
            ClampGradient::Restoring,
        ) {
            Ok(v) => v,
            Err(Error::NonFinite { stage }) => {
                let detail = match first_non_finite(model) {
                    Some(name) => format!("non-finite parameter {name} (stage {stage})"),
                    None => format!("non-finite value in {stage}"),
                };
                return Err(Error::Diverged { iteration, detail });
            }
            Err(e) => return Err(e),
        };
        report.iteration = iteration;
        if !report.total.is_finite() {
            let detail = match first_non_finite(model) {
                Some(name) => format!("non-finite parameter {name}"),
                None => "non-finite loss".into(),
            };
            return Err(Error::Diverged { iteration, detail });
        }

        clip_grad_norm(&mut grads.network.tensors_mut(), config.grad_clip_network);
        let f = lr_factor(iteration, config);
        {
            let g: Vec<&[f64]> = grads
                .volume
                .tensors()
                .into_iter()
                .map(|(_, _, d)| d)
                .collect();
            adam_step(
                &mut adam_vol,
                &mut model.volume.params.tensors_mut(),
                &g,
                config.lr_volume * f,
            )?;
        }
        {
            let g: Vec<&[f64]> = grads
                .network
                .tensors()
                .into_iter()
                .map(|(_, _, d)| d)
                .collect();
            adam_step(
                &mut adam_net,
                &mut model.network.tensors_mut(),
                &g,
                config.lr_network * f,
            )?;
        }
        snap_to_f32(model);

        if iteration % config.log_every == 0 || iteration + 1 == config.total_iters {
            observe(TrainEvent::Progress {
                report: &report,
                elapsed_seconds: start.elapsed().as_secs_f64(),
            })?;
        }
        history.push(report);
        if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
            observe(TrainEvent::Checkpoint {
                iteration: iteration + 1,
                model,
            })?;
        }
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub per_tensor: usize,
    pub seed: u64,
    pub w_tv: f64,
    pub w_l1: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            per_tensor: 12,
            seed: 0,
            w_tv: 0.05,
            w_l1: 8e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
    /// Parameters skipped because the objective has a kink within `epsilon`.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference check of `analytic` against `f` at the listed
/// coordinates of `x`. Coordinates where the one-sided slopes disagree by
/// more than 1% are reported as kinks and skipped.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    epsilon: f64,
    floor: f64,
) -> (Vec<(usize, f64, f64)>, usize) {
    let f0 = f(x);
    let mut xp = x.to_vec();
    let mut out = Vec::new();
    let mut kinks = 0;
    for &i in indices {
        xp[i] = x[i] + epsilon;
        let fp = f(&xp);
        xp[i] = x[i] - epsilon;
        let fm = f(&xp);
        xp[i] = x[i];
        let fwd = (fp - f0) / epsilon;
        let bwd = (f0 - fm) / epsilon;
        let central = (fp - fm) / (2.0 * epsilon);
        if relative_error(fwd, bwd, floor.max(1e-4 * central.abs())) > 1e-2 {
            kinks += 1;
            continue;
        }
        out.push((i, analytic[i], central));
    }
    (out, kinks)
}

fn model_tensor_names(model: &SceneModel) -> Vec<String> {
    let mut names: Vec<String> = model
        .volume
        .params
        .tensors()
        .into_iter()
        .map(|(n, _, _)| n)
        .collect();
    names.extend(model.network.tensors().into_iter().map(|(n, _, _)| n));
    names
}

fn model_tensors_mut(model: &mut SceneModel) -> Vec<&mut [f64]> {
    let mut out = model.volume.params.tensors_mut();
    out.extend(model.network.tensors_mut());
    out
}

/// Compares reverse-mode gradients of the training loss with central
/// differences on `per_tensor` random entries of every parameter tensor.
pub fn grad_check(
    model: &SceneModel,
    rays: &[TimedRay],
    targets: &[Vec3],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, mut grads) = loss_and_grads(
        model,
        rays,
        targets,
        options.w_tv,
        options.w_l1,
        ClampGradient::Exact,
    )?;
    let names = model_tensor_names(model);
    let analytic: Vec<Vec<f64>> = grads
        .tensors_mut()
        .into_iter()
        .map(|t| t.to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = model.clone();
    let mut entries = Vec::new();
    let mut kinks = 0;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let picks: Vec<usize> = (0..options.per_tensor.min(len))
            .map(|_| rng.gen_range(0..len))
            .collect();
        let base = model_tensors_mut(&mut work)[ti].to_vec();
        let eval = |vals: &[f64], work: &mut SceneModel| -> f64 {
            model_tensors_mut(work)[ti].copy_from_slice(vals);
            let trace = forward_rays(work, rays);
            match trace {
                Ok(t) => loss(
                    &t.colors(),
                    targets,
                    &work.volume,
                    options.w_tv,
                    options.w_l1,
                )
                .map_or(f64::NAN, |r| r.total),
                Err(_) => f64::NAN,
            }
        };
        let (found, k) = finite_difference_check(
            |v| eval(v, &mut work),
            &base,
            &analytic[ti],
            &picks,
            options.epsilon,
            options.floor,
        );
        model_tensors_mut(&mut work)[ti].copy_from_slice(&base);
        kinks += k;
        for (index, a, nmr) in found {
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index,
                analytic: a,
                numeric: nmr,
                rel_error: relative_error(a, nmr, options.floor),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries,
        kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            total_iters: 15_000,
            ..TrainConfig::default()
        };
        let s = schedule(0, &cfg);
        assert_eq!((s.w_tv, s.w_l1), (0.05, 8e-5));
        let p = cfg.period() as usize;
        assert_eq!(p, 30_000);
        assert!((schedule(p, &cfg).w_tv - 0.005).abs() < 1e-15);
        assert_eq!(schedule(p, &cfg).w_l1, 4e-5);
        assert_eq!(schedule(3 * p, &cfg).w_l1, 4e-5);
        assert_eq!(
            cfg.upsample_schedule(),
            vec![4000, 6000, 8000, 10000, 12000]
        );
        assert_eq!(schedule(4000, &cfg).upsample, Some([42; 3]));
        assert_eq!(schedule(12000, &cfg).upsample, Some([128; 3]));
        assert_eq!(schedule(4001, &cfg).upsample, None);
    }

    #[test]
    fn compressed_schedule_scales() {
        let cfg = TrainConfig {
            total_iters: 3000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.period(), 6000.0);
        assert_eq!(cfg.upsample_schedule(), vec![800, 1200, 1600, 2000, 2400]);
        cfg.validate().unwrap();
        let bad = TrainConfig {
            upsample_iters: Some(vec![5, 5]),
            total_iters: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 0.0];
        let mut st = AdamState::new(&[3]);
        adam_step(&mut st, &mut [&mut p[..]], &[&g[..]], 0.01).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
        let mut short = vec![0.0; 2];
        assert!(adam_step(&mut st, &mut [&mut short[..]], &[&g[..]], 0.01).is_err());
    }

    #[test]
    fn alg1_counts() {
        let frame = |m| FrameRays {
            m,
            width: 64,
            height: 64,
            rays: vec![(); 4096],
            colors: vec![Vec3::zeros(); 4096],
        };
        assert_eq!(subsample_training_rays(&[frame(8)]).0.len(), 4096);
        assert_eq!(subsample_training_rays(&[frame(4)]).0.len(), 256);
        assert_eq!(subsample_training_rays(&[frame(5)]).0.len(), 64);
    }

    #[test]
    fn chunk_examples() {
        let c = chunk_video(50, 50, 4).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].keyframe_frames.len(), 13);
        assert_eq!(*c[0].keyframe_frames.last().unwrap(), 48);
        let one = chunk_video(1, 50, 4).unwrap();
        assert_eq!(one[0].time(0), 0.0);
        assert_eq!(one[0].keyframe_times(), vec![0.0]);
        let r: Vec<_> = chunk_video(120, 50, 4)
            .unwrap()
            .iter()
            .map(|c| (c.start, c.end))
            .collect();
        assert_eq!(r, vec![(0, 50), (50, 100), (100, 120)]);
    }

    #[test]
    fn fd_check_is_exact_for_affine_maps() {
        let w = [0.5, -1.25, 3.0];
        let f = |x: &[f64]| 2.0 + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (res, kinks) =
            finite_difference_check(f, &[0.1, 0.2, 0.3], &w, &[0, 1, 2], 1e-3, 1e-12);
        assert_eq!(kinks, 0);
        for (_, a, n) in res {
            assert!(relative_error(a, n, 1e-12) <= 1e-10);
        }
    }
}
