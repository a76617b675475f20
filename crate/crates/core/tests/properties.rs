mod common;

use common::{random_rays, small_model};
use hyperreel_core::geometry::{
    contract, intersect, pluecker_encode, two_plane_encode, Primitive, PrimitiveKind, Ray, Vec3,
};
use hyperreel_core::metrics::{psnr, ssim};
use hyperreel_core::network::{
    forward, generate_samples, init_params, RayCode, SampleNetworkConfig, SizeVariant,
};
use hyperreel_core::raster::Image;
use hyperreel_core::render::{composite, forward_rays, nearest_keyframe};
use hyperreel_core::sh::eval_sh;
use hyperreel_core::train::{loss, subsample_factor};
use hyperreel_core::volume::{FieldPart, KeyframeVolume, VolumeConfig};
use proptest::prelude::*;

fn vec3(range: std::ops::Range<f64>) -> impl Strategy<Value = Vec3> {
    (range.clone(), range.clone(), range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vec3> {
    vec3(-1.0..1.0)
        .prop_filter("nonzero", |v| v.norm() > 1e-3)
        .prop_map(|v| v.normalize())
}

fn image(w: u32, h: u32) -> impl Strategy<Value = Image> {
    prop::collection::vec(vec3(0.0..1.0), (w * h) as usize)
        .prop_map(move |p| Image::new(w, h, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pluecker_constraint_and_slide_invariance(o in vec3(-5.0..5.0), d in unit(), s in -10.0f64..10.0) {
        let a = pluecker_encode(&o, &d).unwrap();
        prop_assert!(a.d.dot(&a.m).abs() < 1e-6);
        prop_assert!((a.d.norm() - 1.0).abs() < 1e-6);
        let b = pluecker_encode(&(o + d * s), &d).unwrap();
        prop_assert!((a.m - b.m).amax() < 1e-6 && (a.d - b.d).amax() < 1e-12);
    }

    #[test]
    fn two_plane_reencoding(x in -1.0f64..1.0, y in -1.0f64..1.0, u in -1.0f64..1.0, v in -1.0f64..1.0) {
        let ray = Ray::towards(Vec3::new(x, y, -1.0), Vec3::new(u - x, v - y, 1.0)).unwrap();
        let enc = two_plane_encode(&ray).unwrap();
        let again = two_plane_encode(&enc.to_ray()).unwrap();
        for (p, q) in enc.features().iter().zip(again.features()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn plane_hits_lie_on_the_plane(o in vec3(-0.5..0.5), d in unit(), z in -0.9f64..0.9) {
        let o = Vec3::new(o.x, o.y, -1.0);
        let d = Vec3::new(d.x * 0.5, d.y * 0.5, d.z.abs() + 0.2).normalize();
        let ray = Ray::towards(o, d).unwrap();
        let hit = intersect(&Primitive { kind: PrimitiveKind::ZPlane, param: z }, &ray, 0).unwrap();
        prop_assert!((hit.point.z - z).abs() < 1e-6);
        prop_assert!((ray.at(hit.t) - hit.point).amax() < 1e-9);
    }

    #[test]
    fn sphere_hits_lie_on_the_sphere(o in vec3(-0.4..0.4), d in unit(), r in 0.8f64..5.0) {
        let ray = Ray::towards(o, d).unwrap();
        let hit = intersect(&Primitive { kind: PrimitiveKind::ConcentricSphere, param: r }, &ray, 0).unwrap();
        prop_assert!((hit.point.norm() - r).abs() < 1e-6);
        prop_assert!(hit.t > 0.0);
    }

    #[test]
    fn intersection_adjoint_matches_differences(o in vec3(-0.4..0.4), d in unit(), r in 0.8f64..5.0, z in -0.9f64..0.9) {
        let eps = 1e-4;
        let sphere = Ray::towards(o, d).unwrap();
        let plane = Ray::towards(Vec3::new(o.x, o.y, -1.0), Vec3::new(d.x * 0.5, d.y * 0.5, d.z.abs() + 0.2)).unwrap();
        for (kind, param, ray) in [(PrimitiveKind::ConcentricSphere, r, sphere), (PrimitiveKind::ZPlane, z, plane)] {
            let at = |p: f64| intersect(&Primitive { kind, param: p }, &ray, 0).unwrap();
            let hit = at(param);
            let numeric = (at(param + eps).t - at(param - eps).t) / (2.0 * eps);
            let err = (hit.dt_dparam - numeric).abs() / hit.dt_dparam.abs().max(1e-6);
            prop_assert!(err <= 1e-4, "{kind:?}: analytic {} numeric {numeric}", hit.dt_dparam);
        }
    }

    #[test]
    fn contraction_is_identity_inside_and_lipschitz(a in vec3(-4.0..4.0), b in vec3(-4.0..4.0)) {
        if a.norm() <= 1.0 {
            prop_assert_eq!(contract(&a), a);
        }
        prop_assert!(contract(&a).norm() < 2.0);
        if a.norm() >= 1.0 && b.norm() >= 1.0 {
            prop_assert!((contract(&a) - contract(&b)).norm() <= (a - b).norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn composite_weights_are_a_partition(
        sigma in prop::collection::vec(0.0f64..50.0, 1..16),
        seed in 0u64..1000,
    ) {
        let n = sigma.len();
        let deltas: Vec<f64> = (0..n).map(|k| ((seed + k as u64) % 7) as f64 * 0.1).collect();
        let colors = vec![Vec3::new(0.3, 0.6, 0.9); n];
        let out = composite(&colors, &sigma, &deltas, &Vec3::zeros()).unwrap();
        let total: f64 = out.weights.iter().sum();
        prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&total));
        prop_assert!((total - out.opacity).abs() < 1e-12);
    }

    #[test]
    fn nearest_keyframe_minimizes_distance(tau in 0.0f64..1.0, n in 1usize..8) {
        let times: Vec<f64> = (0..n).map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 }).collect();
        let (i, t) = nearest_keyframe(tau, &times);
        prop_assert_eq!(t, times[i]);
        for (j, &u) in times.iter().enumerate() {
            prop_assert!((t - tau).abs() < (u - tau).abs() || ((t - tau).abs() == (u - tau).abs() && i <= j));
        }
    }

    #[test]
    fn sh_colors_are_open_unit_interval(coeffs in prop::collection::vec(-20.0f64..20.0, 27), d in unit()) {
        let rgb = eval_sh(2, &coeffs, &d);
        prop_assert!(rgb.iter().all(|&c| c > 0.0 && c < 1.0));
    }

    #[test]
    fn density_is_positive(x in vec3(-2.0..2.0), seed in 0u64..50) {
        let vol = KeyframeVolume::new(VolumeConfig { grid_res: [6, 5, 4], n_keyframes: 2, ..VolumeConfig::default() }, vec![0.0, 1.0], seed).unwrap();
        prop_assert!(vol.query(&x, 1).sigma > 0.0);
    }

    #[test]
    fn regularizers_are_nonnegative(seed in 0u64..50) {
        let vol = KeyframeVolume::new(VolumeConfig { grid_res: [4, 4, 4], ..VolumeConfig::default() }, vec![0.0], seed).unwrap();
        prop_assert!(vol.tv_norm(FieldPart::Appearance) >= 0.0 && vol.tv_norm(FieldPart::Density) >= 0.0);
        prop_assert!(vol.l1_norm() >= 0.0);
    }

    #[test]
    fn gated_offsets_stay_bounded(seed in 0u64..200, o in vec3(-0.5..0.5), d in unit()) {
        let cfg = SampleNetworkConfig::preset(SizeVariant::Tiny, PrimitiveKind::ZPlane, false);
        let params = init_params(&cfg, seed);
        let ray = Ray::towards(Vec3::new(o.x, o.y, -1.0), Vec3::new(d.x * 0.3, d.y * 0.3, 1.0)).unwrap();
        let code = RayCode::TwoPlane(two_plane_encode(&ray).unwrap());
        let pred = forward(&params, &cfg, &code, None).unwrap();
        let samples = generate_samples(&pred, &ray, PrimitiveKind::ZPlane).unwrap();
        for (k, g) in pred.gates().iter().enumerate() {
            prop_assert!(*g < 0.01);
            prop_assert!(pred.offsets[k].iter().all(|e| e.abs() < 1.0));
            let shift = samples.points[k] - intersect(&Primitive { kind: PrimitiveKind::ZPlane, param: pred.primitive_params[k] }, &ray, k).unwrap().point;
            prop_assert!(shift.amax() <= *g);
        }
    }

    #[test]
    fn loss_decomposition(seed in 0u64..100) {
        let model = small_model(seed, PrimitiveKind::ZPlane, 1, false);
        let rays = random_rays(&model, 4, seed);
        let trace = forward_rays(&model, &rays).unwrap();
        let targets = common::random_colors(4, seed + 1);
        let (w_tv, w_l1) = (0.3, 0.02);
        let r = loss(&trace.colors(), &targets, &model.volume, w_tv, w_l1).unwrap();
        prop_assert!((r.total - (r.l2 + w_tv * r.tv_term + w_l1 * r.l1_term)).abs() <= 1e-9);
    }

    #[test]
    fn metric_symmetry(a in image(9, 8), b in image(9, 8)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn subsample_factor_enumeration() {
    for m in 1..=64 {
        let expect = if m % 8 == 0 {
            1
        } else if m % 4 == 0 {
            4
        } else {
            8
        };
        assert_eq!(subsample_factor(m), expect, "frame {m}");
    }
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let base = Image::filled(16, 16, Vec3::repeat(0.5));
    let noisy = |amp: f64| {
        let px = (0..256)
            .map(|i| Vec3::repeat(0.5 + amp * if i % 3 == 0 { 1.0 } else { -1.0 }))
            .collect();
        Image::new(16, 16, px).unwrap()
    };
    let scores: Vec<f64> = [0.01, 0.05, 0.2]
        .iter()
        .map(|&a| psnr(&base, &noisy(a)).unwrap())
        .collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}
