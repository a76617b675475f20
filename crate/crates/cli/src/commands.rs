//! Implementations behind the `hyperreel` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use hyperreel_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hyperreel_core::dataset::{
    load_dataset, parse_json, CameraSpec, DatasetManifest, LoadedDataset,
};
use hyperreel_core::geometry::Camera;
use hyperreel_core::metrics::{psnr, ssim};
use hyperreel_core::raster::Image;
use hyperreel_core::render::{render_frame, SamplingFlags, SceneModel};
use hyperreel_core::synth::{generate_synthetic, SyntheticSceneSpec};
use hyperreel_core::train::{chunk_video, train, TrainConfig, TrainEvent, VideoChunk};
use serde::{Deserialize, Serialize};

/// Model time for a requested frame time. Static models ignore time and
/// dynamic models clamp it to `[0, 1]`; either case yields a warning.
pub fn resolve_time(
    model: &SceneModel,
    time: Option<f64>,
) -> Result<(Option<f64>, Option<String>)> {
    if !model.dynamic() {
        return Ok((
            None,
            time.map(|t| format!("static model: ignoring time {t}")),
        ));
    }
    let t = time.unwrap_or(0.0);
    ensure!(t.is_finite(), "time must be finite");
    let c = t.clamp(0.0, 1.0);
    Ok((
        Some(c),
        (c != t).then(|| format!("time {t} clamped to {c}")),
    ))
}

/// Renders one view and encodes it as an sRGB PNG. The CLI and the server
/// both go through here, so their frames are byte-identical.
pub fn render_png(model: &SceneModel, camera: &Camera, time: Option<f64>) -> Result<Vec<u8>> {
    let (time, warning) = resolve_time(model, time)?;
    if let Some(w) = warning {
        log::warn!("{w}");
    }
    Ok(render_frame(model, camera, time)?.encode_png()?)
}

pub fn synth(
    spec: &SyntheticSceneSpec,
    seed: u64,
    out_dir: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    if out_dir.exists() {
        let occupied = out_dir
            .read_dir()
            .with_context(|| format!("reading {}", out_dir.display()))?
            .next()
            .is_some();
        ensure!(
            !occupied || force,
            "{} is not empty (pass --force to overwrite)",
            out_dir.display()
        );
        if occupied {
            let images = out_dir.join("images");
            if images.is_dir() {
                std::fs::remove_dir_all(&images)?;
            }
        }
    }
    Ok(generate_synthetic(spec, seed, out_dir)?)
}

pub fn read_spec(path: &Path) -> Result<SyntheticSceneSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_json(&text, &path.display().to_string())?)
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_json(&text, &path.display().to_string())?)
}

/// One line of the JSONL loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub chunk: usize,
    pub iteration: usize,
    pub total: f64,
    pub l2: f64,
    pub tv: f64,
    pub l1: f64,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub final_l2: Vec<f64>,
    pub seconds: f64,
}

/// Checkpoint path of chunk `i` out of `n`.
pub fn chunk_checkpoint_path(out: &Path, i: usize, n: usize) -> PathBuf {
    if n == 1 {
        return out.to_path_buf();
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-chunk{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}-chunk{i}"),
    };
    out.with_file_name(name)
}

pub fn dataset_chunks(data: &LoadedDataset, config: &TrainConfig) -> Result<Vec<VideoChunk>> {
    Ok(chunk_video(
        data.n_frames(),
        config.chunk_frames,
        config.keyframe_interval,
    )?)
}

/// Trains one model per video chunk on the non-holdout cameras.
/// Trains every chunk of `data`. `flags` disables sampling features for
/// ablations.
pub fn train_dataset(
    data: &LoadedDataset,
    config: &TrainConfig,
    flags: SamplingFlags,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    let cameras = data.manifest.training_cameras()?;
    let chunks = dataset_chunks(data, config)?;
    let mut log = match log_path {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let start = Instant::now();
    let mut summary = TrainSummary {
        checkpoints: Vec::new(),
        final_l2: Vec::new(),
        seconds: 0.0,
    };
    for (ci, chunk) in chunks.iter().enumerate() {
        let mut model = data.build_model(config, chunk)?;
        model.flags = flags;
        let pool = data.build_ray_pool(&model, chunk, &cameras)?;
        log::info!(
            "chunk {ci}: frames {}..{}, {} rays, {} keyframes",
            chunk.start + 1,
            chunk.end,
            pool.rays.len(),
            model.volume.keyframe_times.len()
        );
        let path = chunk_checkpoint_path(out, ci, chunks.len());
        let mut chunk_cfg = config.clone();
        if let Some(p) = &config.checkpoint_path {
            chunk_cfg.checkpoint_path = Some(chunk_checkpoint_path(p, ci, chunks.len()));
        }
        let mut io_error = None;
        let history = train(&mut model, &pool, &chunk_cfg, |event| {
            match event {
                TrainEvent::Progress {
                    report,
                    elapsed_seconds,
                } => {
                    if report.iteration % 100 == 0 {
                        log::info!(
                            "chunk {ci} iter {} loss {:.6} l2 {:.6}",
                            report.iteration,
                            report.total,
                            report.l2
                        );
                    }
                    if let Some(w) = log.as_mut() {
                        let rec = LossRecord {
                            chunk: ci,
                            iteration: report.iteration,
                            total: report.total,
                            l2: report.l2,
                            tv: report.tv_term,
                            l1: report.l1_term,
                            elapsed_seconds,
                        };
                        if let Err(e) = serde_json::to_writer(&mut *w, &rec)
                            .map_err(std::io::Error::from)
                            .and_then(|_| writeln!(w))
                        {
                            io_error = Some(e);
                        }
                    }
                }
                TrainEvent::Upsampled {
                    iteration,
                    resolution,
                } => {
                    log::info!("chunk {ci} iter {iteration}: volume upsampled to {resolution:?}");
                }
                TrainEvent::Checkpoint { iteration, model } => {
                    if let Some(p) = &chunk_cfg.checkpoint_path {
                        save_checkpoint(p, model, Some(&chunk_cfg), iteration as u64)?;
                    }
                }
            }
            Ok(())
        })?;
        if let Some(e) = io_error {
            return Err(e).context("writing loss log");
        }
        save_checkpoint(&path, &model, Some(config), config.total_iters as u64)?;
        summary
            .final_l2
            .push(history.last().map_or(f64::NAN, |r| r.l2));
        summary.checkpoints.push(path);
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: CameraSpec = parse_json(&text, &path.display().to_string())?;
    Ok(spec.to_camera()?)
}

pub fn render_to_file(
    checkpoint: &Checkpoint,
    camera: &Camera,
    time: Option<f64>,
    out: &Path,
) -> Result<()> {
    let png = render_png(&checkpoint.model, camera, time)?;
    std::fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameScore {
    pub camera: String,
    pub frame_index: usize,
    pub time: f64,
    pub keyframe: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub render_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Means over frames that are not keyframes; `None` for static models.
    pub mean_psnr_non_keyframe: Option<f64>,
    pub mean_ssim_non_keyframe: Option<f64>,
    pub frames_per_second: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores `model` on the holdout views of video chunk `chunk_index`. Metrics
/// compare 8-bit sRGB renders against the dataset images.
pub fn evaluate(
    model: &SceneModel,
    data: &LoadedDataset,
    config: &TrainConfig,
    chunk_index: usize,
    holdout: Option<&[String]>,
) -> Result<EvalReport> {
    let names = holdout
        .map(<[String]>::to_vec)
        .unwrap_or_else(|| data.manifest.holdout_cameras.clone());
    ensure!(!names.is_empty(), "no holdout cameras to evaluate");
    let cams = data.manifest.holdout_indices(&names)?;
    let chunks = dataset_chunks(data, config)?;
    let Some(chunk) = chunks.get(chunk_index) else {
        bail!(
            "chunk {chunk_index} does not exist ({} chunks)",
            chunks.len()
        );
    };
    ensure!(
        model.dynamic() == (chunk.len() > 1),
        "checkpoint is {} but chunk {chunk_index} has {} frames",
        if model.dynamic() { "dynamic" } else { "static" },
        chunk.len()
    );
    let mut frames = Vec::new();
    let mut render_total = 0.0;
    for (i, f) in data.manifest.frames.iter().enumerate() {
        if !cams.contains(&f.camera_index)
            || !(chunk.start..chunk.end).contains(&(f.frame_index - 1))
        {
            continue;
        }
        let time = data.chunk_time(chunk, f.frame_index);
        let t0 = Instant::now();
        let rendered = render_frame(model, &data.cameras[f.camera_index], time)?;
        let secs = t0.elapsed().as_secs_f64();
        render_total += secs;
        let pred =
            Image::from_srgb8(rendered.width, rendered.height, &rendered.to_srgb8())?.to_display();
        let target = data.images[i].to_display();
        frames.push(FrameScore {
            camera: data.manifest.camera_name(f.camera_index),
            frame_index: f.frame_index,
            time: time.unwrap_or(0.0),
            keyframe: chunk.keyframe_frames.contains(&(f.frame_index - 1)),
            psnr: psnr(&target, &pred)?,
            ssim: ssim(&target, &pred)?,
            render_seconds: secs,
        });
    }
    ensure!(
        !frames.is_empty(),
        "no holdout frames in chunk {chunk_index}"
    );
    let dynamic = model.dynamic();
    let non_key = || frames.iter().filter(|f| !f.keyframe);
    Ok(EvalReport {
        mean_psnr: mean(frames.iter().map(|f| f.psnr)).unwrap_or(f64::NAN),
        mean_ssim: mean(frames.iter().map(|f| f.ssim)).unwrap_or(f64::NAN),
        mean_psnr_non_keyframe: if dynamic {
            mean(non_key().map(|f| f.psnr))
        } else {
            None
        },
        mean_ssim_non_keyframe: if dynamic {
            mean(non_key().map(|f| f.ssim))
        } else {
            None
        },
        frames_per_second: frames.len() as f64 / render_total.max(1e-9),
        frames,
    })
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_data(path: &Path) -> Result<LoadedDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_paths() {
        let p = Path::new("/tmp/run/model.hypr");
        assert_eq!(chunk_checkpoint_path(p, 0, 1), p);
        assert_eq!(
            chunk_checkpoint_path(p, 2, 3),
            Path::new("/tmp/run/model-chunk2.hypr")
        );
        assert_eq!(
            chunk_checkpoint_path(Path::new("m"), 1, 2),
            Path::new("m-chunk1")
        );
    }
}
