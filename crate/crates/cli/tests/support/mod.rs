#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;

use hyperreel::commands::{dataset_chunks, evaluate, EvalReport};
use hyperreel_core::dataset::{load_dataset, LoadedDataset};
use hyperreel_core::network::SizeVariant;
use hyperreel_core::render::{SamplingFlags, SceneModel};
use hyperreel_core::synth::{generate_synthetic, SyntheticSceneSpec};
use hyperreel_core::train::{train, LossReport, TrainConfig};

pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Minimal blocking HTTP/1.1 GET.
pub fn http_get(addr: SocketAddr, path: &str) -> HttpResponse {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .expect("header terminator");
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut lines = head.split("\r\n");
    let status = lines
        .next()
        .unwrap()
        .split(' ')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let headers: Vec<(String, String)> = lines
        .filter_map(|l| {
            l.split_once(':')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect();
    let mut body = raw[split + 4..].to_vec();
    if headers
        .iter()
        .any(|(k, v)| k.eq_ignore_ascii_case("transfer-encoding") && v.contains("chunked"))
    {
        body = dechunk(&body);
    }
    HttpResponse {
        status,
        headers,
        body,
    }
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let eol = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size =
            usize::from_str_radix(std::str::from_utf8(&data[..eol]).unwrap().trim(), 16).unwrap();
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[eol + 2..eol + 2 + size]);
        data = &data[eol + 2 + size + 2..];
    }
}

/// Training settings used for the desk-scale experiments. The regularizer
/// weights are far below the defaults: at the default strength the TV and L1
/// terms collapse the freshly initialized factors before the density gate
/// opens on these small scenes.
pub fn desk_config(total_iters: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_rays: 4096,
        total_iters,
        seed,
        size_variant: SizeVariant::Tiny,
        grid_init: 32,
        grid_final: 96,
        w_tv: 1e-3,
        w_l1_start: 8e-7,
        w_l1_end: 4e-7,
        log_every: 100,
        ..TrainConfig::default()
    }
}

pub fn synth_dataset(spec: &SyntheticSceneSpec, seed: u64, dir: &Path) -> LoadedDataset {
    generate_synthetic(spec, seed, dir).unwrap();
    load_dataset(dir).unwrap()
}

/// Trains the first chunk of `data` with `flags` and scores its holdout views.
pub fn train_and_eval(
    data: &LoadedDataset,
    config: &TrainConfig,
    flags: SamplingFlags,
) -> (SceneModel, Vec<LossReport>, EvalReport) {
    let chunk = dataset_chunks(data, config).unwrap().remove(0);
    let mut model = data.build_model(config, &chunk).unwrap();
    model.flags = flags;
    let cameras = data.manifest.training_cameras().unwrap();
    let pool = data.build_ray_pool(&model, &chunk, &cameras).unwrap();
    let history = train(&mut model, &pool, config, |_| Ok(())).unwrap();
    let report = evaluate(&model, data, config, 0, None).unwrap();
    (model, history, report)
}
