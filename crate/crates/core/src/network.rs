//! The ray-conditioned sample prediction network.
//!
//! A ray (two-plane or Plücker code, plus time for dynamic scenes) is
//! positionally encoded and pushed through a leaky-ReLU MLP. A single linear
//! head is partitioned, per primitive, into
//! `[primitive, offset(3), gate, velocity(3, dynamic only), scale(3), shift(3)]`
//! blocks, each stored contiguously across primitives in that order.
//!
//! Primitive outputs are residuals on top of stratified anchors, offsets go
//! through `tanh`, gates through a sigmoid, and color scale is `1 + output`,
//! so a network with zeroed weights reproduces the anchors exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersect, PlueckerRay, Primitive, PrimitiveKind, Ray, TwoPlaneRay, Vec3};
use crate::linalg::{gemm, n, t, Mat};

/// Scales the head's initial weights so fresh predictions sit on the anchors.
const HEAD_INIT_SCALE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeVariant {
    Full,
    Small,
    Tiny,
    /// Any depth, width and primitive count.
    Custom,
}

impl std::str::FromStr for SizeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(SizeVariant::Full),
            "small" => Ok(SizeVariant::Small),
            "tiny" => Ok(SizeVariant::Tiny),
            "custom" => Ok(SizeVariant::Custom),
            other => Err(Error::contract(format!("unknown size variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleNetworkConfig {
    pub n_layers: usize,
    pub hidden_width: usize,
    pub n_primitives: usize,
    pub primitive_kind: PrimitiveKind,
    pub ray_pe_freqs: usize,
    pub time_pe_freqs: usize,
    pub leaky_slope: f64,
    pub dynamic: bool,
    pub size_variant: SizeVariant,
    /// Interval spanned by the stratified anchors: NDC depth for planes,
    /// world radius for spheres.
    pub anchor_range: (f64, f64),
    /// Initial gate logit.
    pub gate_init: f64,
}

impl SampleNetworkConfig {
    pub fn preset(variant: SizeVariant, kind: PrimitiveKind, dynamic: bool) -> Self {
        let (n_layers, hidden_width, n_primitives) = match variant {
            SizeVariant::Full => (6, 256, 32),
            SizeVariant::Small => (4, 256, 16),
            SizeVariant::Tiny | SizeVariant::Custom => (4, 128, 8),
        };
        let anchor_range = match kind {
            PrimitiveKind::ZPlane => (-1.0, 1.0),
            PrimitiveKind::ConcentricSphere => (0.5, 4.0),
        };
        SampleNetworkConfig {
            n_layers,
            hidden_width,
            n_primitives,
            primitive_kind: kind,
            ray_pe_freqs: 1,
            time_pe_freqs: 2,
            leaky_slope: 0.01,
            dynamic,
            size_variant: variant,
            anchor_range,
            gate_init: -5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = match self.size_variant {
            SizeVariant::Full => (6, 256, None),
            SizeVariant::Small => (4, 256, Some(16)),
            SizeVariant::Tiny => (4, 128, Some(8)),
            SizeVariant::Custom => (self.n_layers, self.hidden_width, None),
        };
        if self.n_layers == 0 || self.hidden_width == 0 {
            return Err(Error::contract(
                "network needs at least one hidden layer of nonzero width",
            ));
        }
        if (self.n_layers, self.hidden_width) != (expect.0, expect.1) {
            return Err(Error::contract(format!(
                "{:?} variant requires {} layers of width {}, got {} x {}",
                self.size_variant, expect.0, expect.1, self.n_layers, self.hidden_width
            )));
        }
        if let Some(np) = expect.2 {
            if self.n_primitives != np {
                return Err(Error::contract(format!(
                    "{:?} variant predicts exactly {np} primitives, got {}",
                    self.size_variant, self.n_primitives
                )));
            }
        }
        if self.n_primitives == 0 {
            return Err(Error::contract(
                "network must predict at least one primitive",
            ));
        }
        let (lo, hi) = self.anchor_range;
        if !(lo < hi) {
            return Err(Error::contract("anchor range must be increasing"));
        }
        if self.primitive_kind == PrimitiveKind::ConcentricSphere && !(lo > 0.0) {
            return Err(Error::contract("sphere anchors must have positive radii"));
        }
        Ok(())
    }

    /// Raw ray-code width: 4 for two-plane codes, 6 for Plücker codes.
    pub fn ray_code_width(&self) -> usize {
        match self.primitive_kind {
            PrimitiveKind::ZPlane => 4,
            PrimitiveKind::ConcentricSphere => 6,
        }
    }

    pub fn input_width(&self) -> usize {
        let mut w = self.ray_code_width() * (1 + 2 * self.ray_pe_freqs);
        if self.dynamic {
            w += 1 + 2 * self.time_pe_freqs;
        }
        w
    }

    pub fn head_width(&self) -> usize {
        self.n_primitives * if self.dynamic { 14 } else { 11 }
    }

    pub fn layout(&self) -> HeadLayout {
        let np = self.n_primitives;
        let velocity = if self.dynamic { Some(5 * np) } else { None };
        let scale = if self.dynamic { 8 * np } else { 5 * np };
        HeadLayout {
            n: np,
            offset: np,
            gate: 4 * np,
            velocity,
            scale,
            shift: scale + 3 * np,
        }
    }

    /// Stratified anchors at the midpoints of `n` equal cells of `anchor_range`.
    pub fn anchors(&self) -> Vec<f64> {
        let (lo, hi) = self.anchor_range;
        let np = self.n_primitives as f64;
        (0..self.n_primitives)
            .map(|k| lo + (hi - lo) * (k as f64 + 0.5) / np)
            .collect()
    }
}

/// Start offsets of each block in the head output row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub n: usize,
    pub offset: usize,
    pub gate: usize,
    pub velocity: Option<usize>,
    pub scale: usize,
    pub shift: usize,
}

/// `[x, sin(2^j pi x), cos(2^j pi x)]` for `j < n_freqs`, blockwise over `x`.
pub fn positional_encode(x: &[f64], n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * n_freqs));
    out.extend_from_slice(x);
    for j in 0..n_freqs {
        let w = std::f64::consts::PI * (1u64 << j) as f64;
        out.extend(x.iter().map(|v| (w * v).sin()));
        out.extend(x.iter().map(|v| (w * v).cos()));
    }
    out
}

pub fn positional_encode_vjp(x: &[f64], n_freqs: usize, cotangent: &[f64]) -> Vec<f64> {
    let k = x.len();
    let mut dx = cotangent[..k].to_vec();
    for j in 0..n_freqs {
        let w = std::f64::consts::PI * (1u64 << j) as f64;
        let base = k * (1 + 2 * j);
        for i in 0..k {
            dx[i] += cotangent[base + i] * w * (w * x[i]).cos();
            dx[i] -= cotangent[base + k + i] * w * (w * x[i]).sin();
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RayCode {
    TwoPlane(TwoPlaneRay),
    Pluecker(PlueckerRay),
}

impl RayCode {
    pub fn features(&self) -> Vec<f64> {
        match self {
            RayCode::TwoPlane(r) => r.features().to_vec(),
            RayCode::Pluecker(r) => r.features().to_vec(),
        }
    }
}

/// Builds the encoded network input for one ray.
pub fn encode_input(
    config: &SampleNetworkConfig,
    code: &RayCode,
    time: Option<f64>,
) -> Result<Vec<f64>> {
    match (code, config.primitive_kind) {
        (RayCode::TwoPlane(_), PrimitiveKind::ZPlane)
        | (RayCode::Pluecker(_), PrimitiveKind::ConcentricSphere) => {}
        _ => {
            return Err(Error::contract(
                "ray code does not match the primitive kind",
            ))
        }
    }
    if time.is_some() != config.dynamic {
        return Err(Error::contract(if config.dynamic {
            "dynamic network requires a time input"
        } else {
            "static network does not take a time input"
        }));
    }
    let feats = code.features();
    if feats.iter().any(|v| !v.is_finite()) || time.is_some_and(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            stage: "network input".into(),
        });
    }
    let mut input = positional_encode(&feats, config.ray_pe_freqs);
    if let Some(tau) = time {
        input.extend(positional_encode(&[tau], config.time_pe_freqs));
    }
    Ok(input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`, row-major.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleNetworkParams {
    /// Hidden layers followed by the output head.
    pub layers: Vec<DenseLayer>,
}

pub fn init_params(config: &SampleNetworkConfig, seed: u64) -> SampleNetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![config.input_width()];
    widths.extend(std::iter::repeat(config.hidden_width).take(config.n_layers));
    widths.push(config.head_width());
    let n_dense = widths.len() - 1;
    let mut layers = Vec::with_capacity(n_dense);
    for l in 0..n_dense {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let mut a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        if l + 1 == n_dense {
            a *= HEAD_INIT_SCALE;
        }
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-a..=a))
            .collect();
        layers.push(DenseLayer {
            weight: Mat::from_vec(fan_out, fan_in, data),
            bias: vec![0.0; fan_out],
        });
    }
    let layout = config.layout();
    let head = layers.last_mut().expect("network has a head layer");
    head.bias[layout.gate..layout.gate + layout.n].fill(config.gate_init);
    SampleNetworkParams { layers }
}

/// Activations recorded by [`SampleNetworkParams::forward_batch`], one row per ray.
#[derive(Clone, Debug)]
pub struct NetworkTape {
    pub input: Mat,
    pre: Vec<Mat>,
    post: Vec<Mat>,
    pub output: Mat,
}

impl SampleNetworkParams {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &SampleNetworkConfig) -> Self {
        let mut widths = vec![config.input_width()];
        widths.extend(std::iter::repeat(config.hidden_width).take(config.n_layers));
        widths.push(config.head_width());
        SampleNetworkParams {
            layers: widths
                .windows(2)
                .map(|w| DenseLayer {
                    weight: Mat::zeros(w[1], w[0]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SampleNetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Mat::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, config: &SampleNetworkConfig) -> Result<()> {
        if self.layers.len() != config.n_layers + 1 {
            return Err(Error::contract(
                "network layer count does not match its config",
            ));
        }
        let mut width = config.input_width();
        for (i, l) in self.layers.iter().enumerate() {
            let out = if i == config.n_layers {
                config.head_width()
            } else {
                config.hidden_width
            };
            if l.weight.cols != width || l.weight.rows != out || l.bias.len() != out {
                return Err(Error::contract(format!(
                    "network layer {i} has the wrong shape"
                )));
            }
            width = out;
        }
        Ok(())
    }

    /// Named flat views of every parameter tensor (weights row-major).
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("net.{i}.weight"),
                vec![l.weight.rows, l.weight.cols],
                l.weight.data.as_slice(),
            ));
            out.push((
                format!("net.{i}.bias"),
                vec![l.bias.len()],
                l.bias.as_slice(),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.data.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    pub fn forward_batch(&self, config: &SampleNetworkConfig, input: Mat) -> NetworkTape {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Mat> = Vec::with_capacity(self.layers.len());
        let batch = input.rows;
        for (i, layer) in self.layers.iter().enumerate() {
            let h = if i == 0 { &input } else { &post[i - 1] };
            let mut z = Mat::zeros(batch, layer.weight.rows);
            for r in 0..batch {
                z.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(1.0, n(h), t(&layer.weight), 1.0, &mut z);
            if i + 1 < self.layers.len() {
                let slope = config.leaky_slope;
                let a = Mat {
                    rows: z.rows,
                    cols: z.cols,
                    data: z
                        .data
                        .iter()
                        .map(|&v| if v > 0.0 { v } else { slope * v })
                        .collect(),
                };
                pre.push(z);
                post.push(a);
            } else {
                pre.push(z);
            }
        }
        let output = pre.last().expect("head output").clone();
        NetworkTape {
            input,
            pre,
            post,
            output,
        }
    }

    /// Accumulates parameter gradients into `grads` and returns input gradients.
    pub fn backward_batch(
        &self,
        config: &SampleNetworkConfig,
        tape: &NetworkTape,
        d_output: &Mat,
        grads: &mut SampleNetworkParams,
    ) -> Mat {
        let batch = tape.input.rows;
        let mut dz = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            let h = if i == 0 {
                &tape.input
            } else {
                &tape.post[i - 1]
            };
            let g = &mut grads.layers[i];
            gemm(1.0, t(&dz), n(h), 1.0, &mut g.weight);
            for r in 0..batch {
                for (b, d) in g.bias.iter_mut().zip(dz.row(r)) {
                    *b += d;
                }
            }
            let mut dh = Mat::zeros(batch, self.layers[i].weight.cols);
            gemm(1.0, n(&dz), n(&self.layers[i].weight), 0.0, &mut dh);
            if i > 0 {
                let z = &tape.pre[i - 1];
                for (d, &zv) in dh.data.iter_mut().zip(&z.data) {
                    if zv <= 0.0 {
                        *d *= config.leaky_slope;
                    }
                }
            }
            dz = dh;
        }
        dz
    }
}

/// Decoded per-ray network output.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub primitive_params: Vec<f64>,
    /// `tanh`-activated offsets `e_k`.
    pub offsets: Vec<Vec3>,
    pub gate_logits: Vec<f64>,
    pub velocities: Option<Vec<Vec3>>,
    pub color_scale: Vec<Vec3>,
    pub color_shift: Vec<Vec3>,
}

fn vec3_at(row: &[f64], base: usize, k: usize) -> Vec3 {
    Vec3::new(
        row[base + 3 * k],
        row[base + 3 * k + 1],
        row[base + 3 * k + 2],
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SamplePrediction {
    pub fn decode(config: &SampleNetworkConfig, head: &[f64]) -> Self {
        let lay = config.layout();
        let anchors = config.anchors();
        let np = lay.n;
        SamplePrediction {
            primitive_params: (0..np).map(|k| anchors[k] + head[k]).collect(),
            offsets: (0..np)
                .map(|k| vec3_at(head, lay.offset, k).map(f64::tanh))
                .collect(),
            gate_logits: head[lay.gate..lay.gate + np].to_vec(),
            velocities: lay
                .velocity
                .map(|b| (0..np).map(|k| vec3_at(head, b, k)).collect()),
            color_scale: (0..np)
                .map(|k| vec3_at(head, lay.scale, k).add_scalar(1.0))
                .collect(),
            color_shift: (0..np).map(|k| vec3_at(head, lay.shift, k)).collect(),
        }
    }

    pub fn gates(&self) -> Vec<f64> {
        self.gate_logits.iter().map(|&d| sigmoid(d)).collect()
    }

    pub fn len(&self) -> usize {
        self.primitive_params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitive_params.is_empty()
    }
}

/// Cotangents for every field of a [`SamplePrediction`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionCotangent {
    pub primitive_params: Vec<f64>,
    pub offsets: Vec<Vec3>,
    pub gate_logits: Vec<f64>,
    pub velocities: Vec<Vec3>,
    pub color_scale: Vec<Vec3>,
    pub color_shift: Vec<Vec3>,
}

impl PredictionCotangent {
    pub fn zeros(np: usize) -> Self {
        PredictionCotangent {
            primitive_params: vec![0.0; np],
            offsets: vec![Vec3::zeros(); np],
            gate_logits: vec![0.0; np],
            velocities: vec![Vec3::zeros(); np],
            color_scale: vec![Vec3::zeros(); np],
            color_shift: vec![Vec3::zeros(); np],
        }
    }

    /// Pulls the cotangent back through [`SamplePrediction::decode`] into
    /// the head-output row `d_head`.
    pub fn write_head(
        &self,
        config: &SampleNetworkConfig,
        prediction: &SamplePrediction,
        d_head: &mut [f64],
    ) {
        let lay = config.layout();
        for k in 0..lay.n {
            d_head[k] = self.primitive_params[k];
            let e = prediction.offsets[k];
            for c in 0..3 {
                d_head[lay.offset + 3 * k + c] = self.offsets[k][c] * (1.0 - e[c] * e[c]);
                d_head[lay.scale + 3 * k + c] = self.color_scale[k][c];
                d_head[lay.shift + 3 * k + c] = self.color_shift[k][c];
                if let Some(b) = lay.velocity {
                    d_head[b + 3 * k + c] = self.velocities[k][c];
                }
            }
            d_head[lay.gate + k] = self.gate_logits[k];
        }
    }
}

/// Runs the network on a single ray.
pub fn forward(
    params: &SampleNetworkParams,
    config: &SampleNetworkConfig,
    code: &RayCode,
    time: Option<f64>,
) -> Result<SamplePrediction> {
    let input = encode_input(config, code, time)?;
    let width = input.len();
    let tape = params.forward_batch(config, Mat::from_vec(1, width, input));
    let head = tape.output.row(0);
    if head.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "sample network output".into(),
        });
    }
    Ok(SamplePrediction::decode(config, head))
}

/// Sample points produced by intersecting a ray with predicted primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoints {
    /// Offset sample positions `x_k`.
    pub points: Vec<Vec3>,
    /// Pre-offset intersection distances `t_k`.
    pub distances: Vec<f64>,
    pub dt_dparam: Vec<f64>,
    pub gates: Vec<f64>,
}

pub fn generate_samples(
    prediction: &SamplePrediction,
    ray: &Ray,
    kind: PrimitiveKind,
) -> Result<SamplePoints> {
    let np = prediction.len();
    let mut out = SamplePoints {
        points: Vec::with_capacity(np),
        distances: Vec::with_capacity(np),
        dt_dparam: Vec::with_capacity(np),
        gates: Vec::with_capacity(np),
    };
    for k in 0..np {
        let hit = intersect(
            &Primitive {
                kind,
                param: prediction.primitive_params[k],
            },
            ray,
            k,
        )?;
        let gate = sigmoid(prediction.gate_logits[k]);
        out.points.push(hit.point + prediction.offsets[k] * gate);
        out.distances.push(hit.t);
        out.dt_dparam.push(hit.dt_dparam);
        out.gates.push(gate);
    }
    Ok(out)
}

/// Pulls cotangents on sample points and distances back onto the
/// prediction fields they depend on, accumulating into `cot`.
pub fn generate_samples_vjp(
    prediction: &SamplePrediction,
    ray: &Ray,
    samples: &SamplePoints,
    d_points: &[Vec3],
    d_distances: &[f64],
    cot: &mut PredictionCotangent,
) {
    for k in 0..prediction.len() {
        let g = samples.gates[k];
        let dp = d_points[k];
        let dt = ray.direction.dot(&dp) + d_distances[k];
        cot.primitive_params[k] += dt * samples.dt_dparam[k];
        cot.offsets[k] += dp * g;
        cot.gate_logits[k] += g * (1.0 - g) * prediction.offsets[k].dot(&dp);
    }
}

/// Cotangent on the outputs of `forward` followed by `generate_samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCotangent {
    pub points: Vec<Vec3>,
    pub distances: Vec<f64>,
    pub velocities: Vec<Vec3>,
    pub color_scale: Vec<Vec3>,
    pub color_shift: Vec<Vec3>,
}

impl SampleCotangent {
    pub fn zeros(np: usize) -> Self {
        SampleCotangent {
            points: vec![Vec3::zeros(); np],
            distances: vec![0.0; np],
            velocities: vec![Vec3::zeros(); np],
            color_scale: vec![Vec3::zeros(); np],
            color_shift: vec![Vec3::zeros(); np],
        }
    }
}

/// Gradients of a sampling pass with respect to the parameters and the raw
/// ray code / time inputs.
#[derive(Clone, Debug)]
pub struct SampleVjp {
    pub params: SampleNetworkParams,
    pub ray_code: Vec<f64>,
    pub time: Option<f64>,
}

/// Reverse-mode gradient of `generate_samples(forward(..))`.
pub fn vjp(
    params: &SampleNetworkParams,
    config: &SampleNetworkConfig,
    code: &RayCode,
    time: Option<f64>,
    ray: &Ray,
    cotangent: &SampleCotangent,
) -> Result<SampleVjp> {
    let input = encode_input(config, code, time)?;
    let width = input.len();
    let tape = params.forward_batch(config, Mat::from_vec(1, width, input));
    let prediction = SamplePrediction::decode(config, tape.output.row(0));
    let samples = generate_samples(&prediction, ray, config.primitive_kind)?;
    let np = config.n_primitives;
    let mut cot = PredictionCotangent::zeros(np);
    generate_samples_vjp(
        &prediction,
        ray,
        &samples,
        &cotangent.points,
        &cotangent.distances,
        &mut cot,
    );
    cot.velocities.clone_from(&cotangent.velocities);
    cot.color_scale.clone_from(&cotangent.color_scale);
    cot.color_shift.clone_from(&cotangent.color_shift);
    let mut d_head = Mat::zeros(1, config.head_width());
    cot.write_head(config, &prediction, d_head.row_mut(0));
    let mut grads = params.zeros_like();
    let d_input = params.backward_batch(config, &tape, &d_head, &mut grads);
    let feats = code.features();
    let ray_width = feats.len() * (1 + 2 * config.ray_pe_freqs);
    let d_in = d_input.row(0);
    let ray_code = positional_encode_vjp(&feats, config.ray_pe_freqs, &d_in[..ray_width]);
    let time =
        time.map(|tau| positional_encode_vjp(&[tau], config.time_pe_freqs, &d_in[ray_width..])[0]);
    Ok(SampleVjp {
        params: grads,
        ray_code,
        time,
    })
}
