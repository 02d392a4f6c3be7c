//! Fine-controller networks (keypoint or conv features, optional depth decoder)
//! over the four input modalities, and the pose-initialisation network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, CameraModel, SpeedCap, Twist};
use crate::icp::InitPrediction;
use crate::imaging::Image;
use crate::nn::{loss_total, Adam, AdamConfig, Checkpoint, CheckpointError, LayerSpec, Mode, Module, NnError, Param, Real, Sequential, Tensor};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("observation mismatch: {0}")]
    Observation(String),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Grayscale,
    Depth,
    StereoIr,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::StereoIr, Modality::Depth, Modality::Grayscale];

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Grayscale | Modality::Depth => 1,
            Modality::StereoIr => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Grayscale => "grayscale",
            Modality::Depth => "depth",
            Modality::StereoIr => "stereo_ir",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s || (s == "gray" && *m == Modality::Grayscale) || (s == "ir" && *m == Modality::StereoIr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    Keypoint,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub features: Features,
    pub depth_recon: bool,
}

impl ArchSpec {
    pub const KEYPOINT_RECON: ArchSpec = ArchSpec {
        features: Features::Keypoint,
        depth_recon: true,
    };

    pub const ALL: [ArchSpec; 4] = [
        ArchSpec {
            features: Features::Keypoint,
            depth_recon: true,
        },
        ArchSpec {
            features: Features::Keypoint,
            depth_recon: false,
        },
        ArchSpec {
            features: Features::Conv,
            depth_recon: true,
        },
        ArchSpec {
            features: Features::Conv,
            depth_recon: false,
        },
    ];

    pub fn name(&self) -> String {
        let f = match self.features {
            Features::Keypoint => "keypoint",
            Features::Conv => "conv",
        };
        if self.depth_recon {
            format!("{f}_recon")
        } else {
            f.to_string()
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Widths and sizes shared by every variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub keypoints: usize,
    pub widths: [usize; 3],
    pub hidden: usize,
    pub dropout: f64,
    pub sigma: f64,
    pub input: usize,
    pub outputs: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            keypoints: 16,
            widths: [16, 16, 32],
            hidden: 128,
            dropout: 0.1,
            sigma: 2.0,
            input: 64,
            outputs: 4,
        }
    }
}

impl NetConfig {
    /// Pose-initialisation network: 128×128 input, (u, v, depth, sin θ, cos θ).
    pub fn init_net() -> Self {
        Self {
            input: 128,
            outputs: 5,
            ..Self::default()
        }
    }

    fn map_size(&self) -> usize {
        self.input / 8
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    }
}

fn trunk_specs(c: usize, cfg: &NetConfig) -> Vec<LayerSpec> {
    let [a, b, d] = cfg.widths;
    let mut s = Vec::new();
    for (i, o) in [(c, a), (a, b), (b, d)] {
        s.extend([conv(i, o, 3, 2, 1), LayerSpec::BatchNorm { channels: o }, LayerSpec::Relu]);
    }
    s.push(conv(d, cfg.keypoints, 3, 1, 1));
    s
}

fn feature_specs(features: Features, cfg: &NetConfig) -> Vec<LayerSpec> {
    match features {
        Features::Keypoint => vec![LayerSpec::SpatialSoftArgmax],
        Features::Conv => vec![conv(cfg.keypoints, 2, 3, 2, 1), LayerSpec::Relu, LayerSpec::Flatten],
    }
}

fn head_specs(inputs: usize, cfg: &NetConfig) -> Vec<LayerSpec> {
    let h = cfg.hidden;
    vec![
        LayerSpec::Linear { inputs, outputs: h },
        LayerSpec::BatchNorm { channels: h },
        LayerSpec::Dropout { rate: cfg.dropout },
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: h, outputs: h },
        LayerSpec::BatchNorm { channels: h },
        LayerSpec::Dropout { rate: cfg.dropout },
        LayerSpec::Relu,
        LayerSpec::Linear {
            inputs: h,
            outputs: cfg.outputs,
        },
    ]
}

fn decoder_specs(features: Features, cfg: &NetConfig) -> Vec<LayerSpec> {
    let m = cfg.map_size();
    let mut s = Vec::new();
    if features == Features::Keypoint {
        s.push(LayerSpec::Heatmap {
            sigma: cfg.sigma,
            height: m,
            width: m,
        });
    }
    let up = |i, o| LayerSpec::UpConv {
        in_ch: i,
        out_ch: o,
        kernel: 2,
        stride: 2,
    };
    s.extend([
        up(cfg.keypoints, 8),
        LayerSpec::BatchNorm { channels: 8 },
        LayerSpec::Relu,
        up(8, 4),
        LayerSpec::BatchNorm { channels: 4 },
        LayerSpec::Relu,
        up(4, 1),
    ]);
    s
}

/// Encoder trunk → features → MLP head, with an optional depth decoder fed from
/// the keypoints (keypoint variant) or the trunk map (conv variant).
#[derive(Debug, Clone)]
pub struct PolicyNet<T: Real> {
    pub arch: ArchSpec,
    pub modality: Modality,
    pub cfg: NetConfig,
    pub trunk: Sequential<T>,
    pub features: Sequential<T>,
    pub head: Sequential<T>,
    pub decoder: Option<Sequential<T>>,
    last_features: Option<Tensor<T>>,
}

impl<T: Real> PolicyNet<T> {
    pub fn build(arch: ArchSpec, modality: Modality, cfg: NetConfig, rng: &mut impl Rng) -> Result<Self, PolicyError> {
        if cfg.input % 8 != 0 || cfg.input < 16 {
            return Err(NnError::InvalidLayer(format!("input size {} must be a multiple of 8 and ≥ 16", cfg.input)).into());
        }
        let trunk = Sequential::build(&trunk_specs(modality.channels(), &cfg), rng)?;
        let features = Sequential::build(&feature_specs(arch.features, &cfg), rng)?;
        let map = trunk.output_shape(&[1, modality.channels(), cfg.input, cfg.input])?;
        let feat = features.output_shape(&map)?;
        let head = Sequential::build(&head_specs(feat[1], &cfg), rng)?;
        let decoder = if arch.depth_recon {
            Some(Sequential::build(&decoder_specs(arch.features, &cfg), rng)?)
        } else {
            None
        };
        Ok(Self {
            arch,
            modality,
            cfg,
            trunk,
            features,
            head,
            decoder,
            last_features: None,
        })
    }

    pub fn cast<U: Real>(&self) -> PolicyNet<U> {
        PolicyNet {
            arch: self.arch,
            modality: self.modality,
            cfg: self.cfg,
            trunk: self.trunk.cast(),
            features: self.features.cast(),
            head: self.head.cast(),
            decoder: self.decoder.as_ref().map(|d| d.cast()),
            last_features: None,
        }
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.modality.channels(), self.cfg.input, self.cfg.input]
    }

    /// Keypoints from the last forward pass, N×2K, when the features are keypoints.
    pub fn last_keypoints(&self) -> Option<&Tensor<T>> {
        match self.arch.features {
            Features::Keypoint => self.last_features.as_ref(),
            Features::Conv => None,
        }
    }

    fn parts(&self) -> [(&'static str, Option<&Sequential<T>>); 4] {
        [
            ("trunk", Some(&self.trunk)),
            ("features", Some(&self.features)),
            ("head", Some(&self.head)),
            ("decoder", self.decoder.as_ref()),
        ]
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut full = serde_json::json!({
            "arch": self.arch,
            "modality": self.modality,
            "net": self.cfg,
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (full.as_object_mut(), meta) {
            obj.extend(extra);
        }
        let mut ck = Checkpoint::new(full);
        for (part, seq) in self.parts() {
            if let Some(seq) = seq {
                for (name, shape, v) in seq.state() {
                    ck.push(&format!("{part}.{name}"), &shape, v);
                }
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        let field = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| PolicyError::Meta(format!("missing `{k}`")));
        let arch: ArchSpec = serde_json::from_value(field("arch")?).map_err(|e| PolicyError::Meta(e.to_string()))?;
        let modality: Modality = serde_json::from_value(field("modality")?).map_err(|e| PolicyError::Meta(e.to_string()))?;
        let cfg: NetConfig = serde_json::from_value(field("net")?).map_err(|e| PolicyError::Meta(e.to_string()))?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = Self::build(arch, modality, cfg, &mut rng)?;
        let load = |part: &str, seq: &mut Sequential<T>| seq.load_state(|n| ck.get_f64(&format!("{part}.{n}")));
        load("trunk", &mut net.trunk)?;
        load("features", &mut net.features)?;
        load("head", &mut net.head)?;
        if let Some(d) = net.decoder.as_mut() {
            load("decoder", d)?;
        }
        Ok(net)
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<(), PolicyError> {
        Ok(self.to_checkpoint(meta).save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value), PolicyError> {
        let ck = Checkpoint::load(dir)?;
        Ok((Self::from_checkpoint(&ck)?, ck.meta))
    }
}

impl<T: Real> Module<T> for PolicyNet<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>, NnError> {
        let map = self.trunk.run(x, mode)?;
        let feat = self.features.run(&map, mode)?;
        let action = self.head.run(&feat, mode)?;
        let mut out = vec![action];
        if let Some(dec) = self.decoder.as_mut() {
            let src = match self.arch.features {
                Features::Keypoint => &feat,
                Features::Conv => &map,
            };
            out.push(dec.run(src, mode)?);
        }
        self.last_features = Some(feat);
        Ok(out)
    }

    fn backward(&mut self, grads: &[Tensor<T>]) -> Result<Tensor<T>, NnError> {
        let expected = 1 + self.decoder.is_some() as usize;
        if grads.len() != expected {
            return Err(NnError::Shape(format!("expected {expected} gradients, got {}", grads.len())));
        }
        let mut g_feat = self.head.back(&grads[0])?;
        let mut g_map_extra = None;
        if let Some(dec) = self.decoder.as_mut() {
            let g = dec.back(&grads[1])?;
            match self.arch.features {
                Features::Keypoint => g_feat.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += *b),
                Features::Conv => g_map_extra = Some(g),
            }
        }
        let mut g_map = self.features.back(&g_feat)?;
        if let Some(g) = g_map_extra {
            g_map.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += *b);
        }
        self.trunk.back(&g_map)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.trunk.params_mut();
        p.extend(self.features.params_mut());
        p.extend(self.head.params_mut());
        if let Some(d) = self.decoder.as_mut() {
            p.extend(d.params_mut());
        }
        p
    }
}

/// Depth in metres to network units; missing returns stay at −1.
pub fn normalize_depth(d: f32) -> f32 {
    if d > 0.0 {
        (d - 0.3) / 0.3
    } else {
        -1.0
    }
}

/// HWC image to a 1×C×H×W tensor.
pub fn image_to_tensor(img: &Image) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[1, img.channels, img.height, img.width]);
    write_chw(img, &mut t.data);
    t
}

/// Writes an HWC image into a CHW slice.
pub fn write_chw(img: &Image, out: &mut [f32]) {
    let hw = img.height * img.width;
    for (p, px) in img.data.chunks(img.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * hw + p] = v;
        }
    }
}

/// Network output unit per action component (vx, vy, vz, yaw rate).
pub fn action_scale(cap: &SpeedCap) -> [f64; 4] {
    [cap.linear, cap.linear, cap.linear, cap.angular]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: Twist,
    /// (u, v) per keypoint in [0, 1)², rows then columns.
    pub keypoints: Option<Vec<(f64, f64)>>,
    pub depth_recon: Option<Image>,
}

/// Fine-controller network plus the velocity units it was trained in.
#[derive(Debug, Clone)]
pub struct Policy {
    pub net: PolicyNet<f32>,
    pub cap: SpeedCap,
}

impl Policy {
    pub fn new(net: PolicyNet<f32>, cap: SpeedCap) -> Self {
        Self { net, cap }
    }

    pub fn act(&mut self, obs: &Image) -> Result<PolicyOutput, PolicyError> {
        let c = self.net.modality.channels();
        let n = self.net.cfg.input;
        if obs.channels != c || obs.height != n || obs.width != n {
            return Err(PolicyError::Observation(format!(
                "{} policy expects {n}×{n}×{c}, got {}×{}×{}",
                self.net.modality.name(),
                obs.height,
                obs.width,
                obs.channels
            )));
        }
        let out = self.net.forward(&image_to_tensor(obs), Mode::Eval)?;
        let s = action_scale(&self.cap);
        let raw: Vec<f64> = out[0].data.iter().zip(s).map(|(&y, k)| y as f64 * k).collect();
        let mut action = Twist::from_array([raw[0], raw[1], raw[2], raw[3]]);
        if !action.is_finite() {
            action = Twist::zero();
        }
        let keypoints = self.net.last_keypoints().map(|k| k.data.chunks(2).map(|p| (p[0] as f64, p[1] as f64)).collect());
        let depth_recon = out.get(1).map(|d| Image::from_vec(n, n, 1, d.data.clone()).expect("decoder output is n×n"));
        Ok(PolicyOutput {
            action: action.clipped(&self.cap),
            keypoints,
            depth_recon,
        })
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<(), PolicyError> {
        let mut m = serde_json::json!({ "role": "fine", "cap": [self.cap.linear, self.cap.angular] });
        if let (Some(o), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            o.extend(extra);
        }
        self.net.save(dir, m)
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value), PolicyError> {
        let (net, meta) = PolicyNet::load(dir)?;
        let cap = meta
            .get("cap")
            .and_then(|c| serde_json::from_value::<[f64; 2]>(c.clone()).ok())
            .ok_or_else(|| PolicyError::Meta("missing speed cap".into()))?;
        Ok((
            Self {
                net,
                cap: SpeedCap {
                    linear: cap[0],
                    angular: cap[1],
                },
            },
            meta,
        ))
    }
}

/// Raw init-network outputs to an anchor prediction in full-frame pixels.
pub fn decode_init_output(raw: &[f64], cam: &CameraModel) -> InitPrediction {
    let w = cam.width as f64;
    let h = cam.height as f64;
    let below = |x: f64| x.clamp(0.0, 1.0 - 1e-9);
    InitPrediction {
        u: below(raw[0]) * w,
        v: below(raw[1]) * h,
        depth: (raw[2] * 0.3 + 0.3).max(0.01),
        theta: wrap_angle(raw[3].atan2(raw[4])),
    }
}

/// Ground truth to init-network targets; inverse of [`decode_init_output`].
pub fn encode_init_target(p: &InitPrediction, cam: &CameraModel) -> [f32; 5] {
    [
        (p.u / cam.width as f64) as f32,
        (p.v / cam.height as f64) as f32,
        ((p.depth - 0.3) / 0.3) as f32,
        p.theta.sin() as f32,
        p.theta.cos() as f32,
    ]
}

pub fn init_pose_net_forward(net: &mut PolicyNet<f32>, padded: &Image, cam: &CameraModel) -> Result<InitPrediction, PolicyError> {
    let [_, c, n, _] = net.input_shape(1);
    if padded.height != n || padded.width != n || padded.channels != c {
        return Err(PolicyError::Observation(format!(
            "init network expects {n}×{n}×{c}, got {}×{}×{}",
            padded.height, padded.width, padded.channels
        )));
    }
    let out = net.forward(&image_to_tensor(padded), Mode::Eval)?;
    let raw: Vec<f64> = out[0].data.iter().map(|&v| v as f64).collect();
    if raw.len() != 5 {
        return Err(PolicyError::Observation(format!("init network has {} outputs, expected 5", raw.len())));
    }
    Ok(decode_init_output(&raw, cam))
}

/// In-memory supervised set: CHW inputs, flat targets, optional depth maps.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub input_shape: [usize; 3],
    pub inputs: Vec<f32>,
    pub target_dim: usize,
    pub targets: Vec<f32>,
    /// 1×H×W per sample, already normalised.
    pub depth: Option<Vec<f32>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        if self.target_dim == 0 {
            0
        } else {
            self.targets.len() / self.target_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>) {
        let il = self.input_len();
        let [c, h, w] = self.input_shape;
        let mut x = Vec::with_capacity(idx.len() * il);
        let mut y = Vec::with_capacity(idx.len() * self.target_dim);
        let mut d = self.depth.as_ref().map(|_| Vec::with_capacity(idx.len() * h * w));
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * il..(i + 1) * il]);
            y.extend_from_slice(&self.targets[i * self.target_dim..(i + 1) * self.target_dim]);
            if let (Some(d), Some(src)) = (d.as_mut(), self.depth.as_ref()) {
                d.extend_from_slice(&src[i * h * w..(i + 1) * h * w]);
            }
        }
        let n = idx.len();
        (
            Tensor::from_vec(&[n, c, h, w], x).expect("gathered input"),
            Tensor::from_vec(&[n, self.target_dim], y).expect("gathered targets"),
            d.map(|d| Tensor::from_vec(&[n, 1, h, w], d).expect("gathered depth")),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            adam: AdamConfig::default(),
            lr_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub actions: f64,
    pub reconstruction: f64,
}

/// One optimiser step on one batch; returns the batch loss before the update.
pub fn train_step<T: Real>(net: &mut PolicyNet<T>, opt: &mut Adam, x: &Tensor<T>, y: &Tensor<T>, depth: Option<&Tensor<T>>) -> Result<(f64, f64, f64), PolicyError> {
    let out = net.forward(x, Mode::Train)?;
    let recon = match (out.get(1), depth) {
        (Some(r), Some(d)) => Some((r, d)),
        (Some(_), None) => return Err(PolicyError::Observation("decoder needs depth targets".into())),
        _ => None,
    };
    let l = loss_total(&out[0], y, recon)?;
    let mut grads = vec![l.grad_actions];
    if let Some(g) = l.grad_depth {
        grads.push(g);
    }
    net.zero_grad();
    net.backward(&grads)?;
    opt.step(net.params_mut());
    Ok((l.total, l.actions, l.reconstruction))
}

/// Mini-batch training with a seeded shuffle per epoch.
pub fn train(net: &mut PolicyNet<f32>, data: &TrainingSet, cfg: &TrainConfig, rng: &mut impl Rng, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>, PolicyError> {
    let [c, h, w] = data.input_shape;
    if c != net.modality.channels() || h != net.cfg.input || w != net.cfg.input || data.target_dim != net.cfg.outputs {
        return Err(PolicyError::Observation(format!(
            "training set {:?}/{} does not fit a {}-channel {}px network with {} outputs",
            data.input_shape,
            data.target_dim,
            net.modality.channels(),
            net.cfg.input,
            net.cfg.outputs
        )));
    }
    if net.decoder.is_some() && data.depth.is_none() {
        return Err(PolicyError::Observation("decoder needs depth targets".into()));
    }
    let n = data.len();
    let batch = cfg.batch.max(2);
    let per_epoch = n / batch;
    if per_epoch == 0 {
        return Err(PolicyError::Observation(format!("{n} samples cannot fill a batch of {batch}")));
    }
    let total_steps = (per_epoch * cfg.epochs).max(1) as f64;
    let mut opt = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut tot, mut act, mut rec) = (0.0, 0.0, 0.0);
        for b in 0..per_epoch {
            let progress = (epoch * per_epoch + b) as f64 / total_steps;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.cfg.lr = cfg.adam.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine);
            let (x, y, d) = data.gather(&order[b * batch..(b + 1) * batch]);
            let d = if net.decoder.is_some() { d } else { None };
            let (l, a, r) = train_step(net, &mut opt, &x, &y, d.as_ref())?;
            tot += l;
            act += a;
            rec += r;
        }
        let k = per_epoch as f64;
        let s = EpochStats {
            epoch,
            loss: tot / k,
            actions: act / k,
            reconstruction: rec / k,
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            input: 16,
            keypoints: 4,
            widths: [4, 4, 6],
            hidden: 12,
            ..NetConfig::default()
        }
    }

    #[test]
    fn shapes_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in ArchSpec::ALL {
            for m in Modality::ALL {
                let mut net = PolicyNet::<f32>::build(arch, m, NetConfig::default(), &mut rng).unwrap();
                let x = Tensor::zeros(&net.input_shape(2));
                let out = net.forward(&x, Mode::Eval).unwrap();
                assert_eq!(out[0].shape, vec![2, 4]);
                assert_eq!(out.len(), 1 + arch.depth_recon as usize);
                if arch.depth_recon {
                    assert_eq!(out[1].shape, vec![2, 1, 64, 64]);
                }
                match arch.features {
                    Features::Keypoint => {
                        let k = net.last_keypoints().unwrap();
                        assert_eq!(k.shape, vec![2, 32]);
                        assert!(k.data.iter().all(|&v| (0.0..1.0).contains(&v)));
                    }
                    Features::Conv => assert!(net.last_keypoints().is_none()),
                }
            }
        }
    }

    #[test]
    fn parameter_counts_within_five_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in Modality::ALL {
            let counts: Vec<usize> = ArchSpec::ALL
                .iter()
                .map(|a| PolicyNet::<f32>::build(*a, m, NetConfig::default(), &mut rng).unwrap().num_params())
                .collect();
            let lo = *counts.iter().min().unwrap() as f64;
            let hi = *counts.iter().max().unwrap() as f64;
            assert!(hi / lo <= 1.05, "{m:?}: {counts:?}");
        }
    }

    #[test]
    fn variants_share_trunk_and_head_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = PolicyNet::<f32>::build(ArchSpec::ALL[0], Modality::Rgb, NetConfig::default(), &mut rng).unwrap();
        let b = PolicyNet::<f32>::build(ArchSpec::ALL[3], Modality::Rgb, NetConfig::default(), &mut rng).unwrap();
        assert_eq!(a.trunk.specs(), b.trunk.specs());
        assert_eq!(a.head.specs()[1..], b.head.specs()[1..]);
    }

    #[test]
    fn composed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in ArchSpec::ALL {
            let net32 = PolicyNet::<f32>::build(arch, Modality::Rgb, small(), &mut rng).unwrap();
            let mut net = net32.cast::<f64>();
            let x = Tensor::from_vec(&[2, 3, 16, 16], (0..2 * 3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = grad_check(&mut net, &x, 1e-5, 60, Mode::Eval, 9).unwrap();
            assert!(r.max_rel_error < 1e-3, "{arch:?}: {r:?}");
        }
    }

    #[test]
    fn act_is_clipped_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cap = SpeedCap {
            linear: 0.05,
            angular: 0.5,
        };
        let net = PolicyNet::build(ArchSpec::KEYPOINT_RECON, Modality::Rgb, NetConfig::default(), &mut rng).unwrap();
        let mut p = Policy::new(net, cap);
        let obs = Image::from_vec(64, 64, 3, (0..64 * 64 * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let a = p.act(&obs).unwrap();
        let b = p.act(&obs).unwrap();
        assert_eq!(a, b);
        assert!(a.action.is_finite() && a.action.within(&cap));
        assert_eq!(a.keypoints.as_ref().unwrap().len(), 16);
        assert_eq!(a.depth_recon.as_ref().unwrap().height, 64);
        assert!(p.act(&Image::new(64, 64, 1)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cap = SpeedCap {
            linear: 0.05,
            angular: 0.5,
        };
        let net = PolicyNet::build(ArchSpec::ALL[2], Modality::StereoIr, NetConfig::default(), &mut rng).unwrap();
        let mut p = Policy::new(net, cap);
        p.save(dir.path(), serde_json::json!({"seed": 6})).unwrap();
        let (mut q, meta) = Policy::load(dir.path()).unwrap();
        assert_eq!(meta["seed"], 6);
        let obs = Image::filled(64, 64, 2, 0.3);
        assert_eq!(p.act(&obs).unwrap(), q.act(&obs).unwrap());
    }

    #[test]
    fn init_decoding() {
        let cam = CameraModel::default_sensor(Pose::identity());
        let p = decode_init_output(&[1.7, -0.2, 0.0, 3.5f64.sin(), 3.5f64.cos()], &cam);
        assert!(p.u < 848.0 && p.u >= 0.0 && p.v == 0.0);
        assert!((p.depth - 0.3).abs() < 1e-12);
        assert!((p.theta - (-2.783)).abs() < 1e-3);
        let t = encode_init_target(&InitPrediction { u: 300.0, v: 200.0, depth: 0.35, theta: -0.3 }, &cam);
        let back = decode_init_output(&t.map(|v| v as f64), &cam);
        assert!((back.u - 300.0).abs() < 1e-3 && (back.theta + 0.3).abs() < 1e-6);
    }

    #[test]
    fn one_step_decreases_loss() {
        for arch in ArchSpec::ALL {
            for m in Modality::ALL {
                let mut wins = 0;
                for trial in 0..10u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
                    let cfg = NetConfig {
                        dropout: 0.0,
                        ..NetConfig::default()
                    };
                    let mut net = PolicyNet::<f32>::build(arch, m, cfg, &mut rng).unwrap();
                    let shape = net.input_shape(8);
                    let x = Tensor::from_vec(&shape, (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
                    let y = Tensor::from_vec(&[8, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                    let d = Tensor::from_vec(&[8, 1, 64, 64], (0..8 * 4096).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                    let d = arch.depth_recon.then_some(&d);
                    let mut opt = Adam::new(AdamConfig::default());
                    let before = eval_loss(&mut net, &x, &y, d);
                    train_step(&mut net, &mut opt, &x, &y, d).unwrap();
                    let after = eval_loss(&mut net, &x, &y, d);
                    wins += (after < before) as usize;
                }
                assert!(wins >= 9, "{arch:?} {m:?}: {wins}/10");
            }
        }
    }

    fn eval_loss(net: &mut PolicyNet<f32>, x: &Tensor<f32>, y: &Tensor<f32>, d: Option<&Tensor<f32>>) -> f64 {
        let out = net.forward(x, Mode::Train).unwrap();
        loss_total(&out[0], y, out.get(1).zip(d)).unwrap().total
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut net = PolicyNet::<f32>::build(ArchSpec::KEYPOINT_RECON, Modality::Grayscale, small(), &mut rng).unwrap();
            let n = 40;
            let data = TrainingSet {
                input_shape: [1, 16, 16],
                inputs: (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
                target_dim: 4,
                targets: (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                depth: Some((0..n * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            };
            let cfg = TrainConfig {
                epochs: 3,
                batch: 8,
                ..TrainConfig::default()
            };
            let stats = train(&mut net, &data, &cfg, &mut rng, |_| {}).unwrap();
            (stats, net.to_checkpoint(serde_json::Value::Null).data)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.last().unwrap().loss < a[0].loss);
    }
}
