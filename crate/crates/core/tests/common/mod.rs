#![allow(dead_code)]

use hyperreel_core::geometry::{PrimitiveKind, Ray, Vec3};
use hyperreel_core::network::{init_params, SampleNetworkConfig, SizeVariant};
use hyperreel_core::render::{RenderOptions, SceneFrame, SceneModel, TimedRay};
use hyperreel_core::volume::{Aabb, KeyframeVolume, VolumeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small, fully random model: 4 primitives, 2-layer network, 2^3 grid.
pub fn small_model(
    seed: u64,
    kind: PrimitiveKind,
    n_keyframes: usize,
    dynamic: bool,
) -> SceneModel {
    let mut cfg = SampleNetworkConfig::preset(SizeVariant::Custom, kind, dynamic);
    cfg.n_layers = 2;
    cfg.hidden_width = 12;
    cfg.n_primitives = 4;
    let mut network = init_params(&cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let head = network.layers.last_mut().unwrap();
    for w in head.weight.data.iter_mut() {
        *w += rng.gen_range(-0.3..0.3);
    }
    for b in head.bias.iter_mut() {
        *b += rng.gen_range(-0.2..0.2);
    }
    let layout = cfg.layout();
    head.bias[layout.gate..layout.gate + layout.n]
        .iter_mut()
        .for_each(|b| *b = rng.gen_range(-1.0..1.0));
    let (bbox, frame) = match kind {
        PrimitiveKind::ZPlane => (Aabb::cube(1.0), SceneFrame::World { contract: false }),
        PrimitiveKind::ConcentricSphere => (Aabb::cube(2.0), SceneFrame::World { contract: true }),
    };
    let vcfg = VolumeConfig {
        grid_res: [2, 2, 2],
        n_keyframes,
        components: [2, 3, 2],
        sh_degree: 2,
        bbox,
        density_bias: 0.0,
        init_std: 0.5,
    };
    let times: Vec<f64> = (0..n_keyframes)
        .map(|i| {
            if n_keyframes == 1 {
                0.0
            } else {
                i as f64 / (n_keyframes - 1) as f64
            }
        })
        .collect();
    let volume = KeyframeVolume::new(vcfg, times, seed + 1).unwrap();
    let render = RenderOptions {
        background: [0.2, 0.5, 0.8],
        sort_samples: true,
        far_bound: 6.0,
        chunk_rays: 64,
    };
    SceneModel::new(cfg, network, volume, render, frame).unwrap()
}

/// Random network-space rays suited to the model's primitive kind.
pub fn random_rays(model: &SceneModel, count: usize, seed: u64) -> Vec<TimedRay> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let ray = match model.network_config.primitive_kind {
                PrimitiveKind::ZPlane => {
                    let o = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), -1.0);
                    let d = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0)
                        .normalize();
                    let t_far = 2.0 / d.z;
                    Ray::new(o, d, 0.0, t_far).unwrap()
                }
                PrimitiveKind::ConcentricSphere => {
                    let o = Vec3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    );
                    let d = Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalize();
                    Ray::new(o, d, 0.0, f64::INFINITY).unwrap()
                }
            };
            let time = model.dynamic().then(|| rng.gen_range(0.0..1.0));
            TimedRay { ray, time }
        })
        .collect()
}

pub fn random_colors(count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
        .collect()
}
