mod common;

use common::small_model;
use hyperreel_core::checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, FORMAT_VERSION,
};
use hyperreel_core::dataset::{load_dataset, DatasetManifest, MANIFEST_FILE};
use hyperreel_core::error::Error;
use hyperreel_core::geometry::PrimitiveKind;
use hyperreel_core::render::{render_frame, SamplingFlags};
use hyperreel_core::synth::{generate_synthetic, SyntheticSceneSpec};
use hyperreel_core::train::{snap_to_f32, TrainConfig};

fn snapped(
    seed: u64,
    kind: PrimitiveKind,
    nt: usize,
    dynamic: bool,
) -> hyperreel_core::render::SceneModel {
    let mut m = small_model(seed, kind, nt, dynamic);
    snap_to_f32(&mut m);
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, (kind, nt, dynamic)) in [
        (PrimitiveKind::ZPlane, 3, true),
        (PrimitiveKind::ConcentricSphere, 1, false),
    ]
    .into_iter()
    .enumerate()
    {
        let mut model = snapped(i as u64, kind, nt, dynamic);
        model.flags = SamplingFlags {
            offsets: false,
            velocities: true,
        };
        let cfg = TrainConfig {
            total_iters: 77,
            ..TrainConfig::default()
        };
        let path = dir.path().join(format!("m{i}.hypr"));
        save_checkpoint(&path, &model, Some(&cfg), 77).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.iteration, 77);
        assert_eq!(back.train.as_ref(), Some(&cfg));
        let bits = |m: &hyperreel_core::render::SceneModel| -> Vec<u64> {
            let mut m = m.clone();
            let mut out: Vec<u64> = Vec::new();
            for t in m
                .volume
                .params
                .tensors_mut()
                .into_iter()
                .chain(m.network.tensors_mut())
            {
                out.extend(t.iter().map(|v| v.to_bits()));
            }
            out
        };
        assert_eq!(bits(&back.model), bits(&model));
        assert_eq!(back.model, model);
        // re-encoding the decoded model reproduces the file
        assert_eq!(
            encode(&back.model, Some(&cfg), 77).unwrap(),
            std::fs::read(&path).unwrap()
        );
    }
}

#[test]
fn checkpoint_rejects_damage() {
    let model = snapped(4, PrimitiveKind::ZPlane, 2, true);
    let bytes = encode(&model, None, 0).unwrap();
    assert!(matches!(
        decode(&bytes[..bytes.len() - 1]),
        Err(Error::Integrity(_))
    ));
    assert!(matches!(decode(&bytes[..10]), Err(Error::Integrity(_))));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::Integrity(_))));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(
        matches!(decode(&version), Err(Error::Version { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION)
    );
}

#[test]
fn checkpoint_re_renders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec::diffuse_static(16);
    generate_synthetic(&spec, 0, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let cfg = TrainConfig {
        grid_init: 8,
        grid_final: 8,
        size_variant: hyperreel_core::network::SizeVariant::Tiny,
        ..TrainConfig::default()
    };
    let chunk = hyperreel_core::train::chunk_video(1, 50, 4)
        .unwrap()
        .remove(0);
    let mut model = data.build_model(&cfg, &chunk).unwrap();
    snap_to_f32(&mut model);
    let back = decode(&encode(&model, None, 0).unwrap()).unwrap().model;
    let a = render_frame(&model, &data.cameras[0], None).unwrap();
    let b = render_frame(&back, &data.cameras[0], None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn manifest_round_trip_and_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let manifest =
        generate_synthetic(&SyntheticSceneSpec::moving_sphere(8, 3), 1, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.to_json().unwrap(), text);
    let parsed = DatasetManifest::from_json(&text).unwrap();
    assert_eq!(parsed.to_json().unwrap(), text);
    assert!(load_dataset(dir.path()).unwrap().warnings.is_empty());

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["rig_notes"] = "hand-placed".into();
    value["cameras"][1]["lens"] = "50mm".into();
    std::fs::write(
        dir.path().join(MANIFEST_FILE),
        serde_json::to_string(&value).unwrap(),
    )
    .unwrap();
    let warned = load_dataset(dir.path()).unwrap().warnings;
    assert_eq!(warned.len(), 2, "{warned:?}");
    assert!(warned.iter().any(|w| w.contains("manifest.rig_notes")));
    assert!(warned.iter().any(|w| w.contains("cameras[1].lens")));
}

#[test]
fn manifest_errors_name_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&SyntheticSceneSpec::diffuse_static(8), 0, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["cameras"][2]["width"] = 9.into();
    std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(
        err.contains("frames[2]") && err.contains("8x8") && err.contains("9x8"),
        "{err}"
    );

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["bounds"]["near"] = "close".into();
    std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("bounds.near"), "{err}");

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["schema"] = "hyperreel-dataset/9".into();
    std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    assert!(load_dataset(dir.path())
        .unwrap_err()
        .to_string()
        .contains("schema"));
}

#[test]
fn synthetic_images_match_re_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec::moving_sphere(12, 4);
    generate_synthetic(&spec, 5, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let cams = spec.cameras(5).unwrap();
    for (f, img) in data.manifest.frames.iter().zip(&data.images) {
        let again = spec.render_view(&cams[f.camera_index], f.time);
        assert_eq!(again.to_srgb8(), img.to_srgb8(), "frame {:?}", f.image_path);
        assert_eq!(f.time, spec.time(f.frame_index));
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut spec = SyntheticSceneSpec::diffuse_static(8);
    spec.rig.jitter = 0.05;
    generate_synthetic(&spec, 3, a.path()).unwrap();
    generate_synthetic(&spec, 3, b.path()).unwrap();
    for name in [
        MANIFEST_FILE,
        "images/cam00_f001.png",
        "images/cam03_f001.png",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn moving_sphere_stays_in_bounds() {
    let spec = SyntheticSceneSpec::moving_sphere(16, 50);
    spec.validate().unwrap();
    let r = spec.spheres[spec.motion.as_ref().unwrap().sphere].radius;
    for m in 1..=50 {
        let c = spec.moving_center(spec.time(m)).unwrap();
        assert!(-c.z - r >= spec.bounds.near && -c.z + r <= spec.bounds.far);
    }
}
