//! Visual, dynamics and geometry randomisation, plus the assisted-stereo depth
//! artifact pipeline. Every draw goes through a labelled, seeded [`RngStream`].

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose, SpeedCap, Twist};
use crate::imaging::Image;
use crate::renderer::{Light, LightKind, Material, Primitive, Scene, SensorFrame, Texture};

#[derive(Debug, Error)]
pub enum RandError {
    #[error("sensor frame has no emitter masks")]
    MissingEmitterMasks,
    #[error("invalid randomisation config: {0}")]
    InvalidConfig(String),
}

/// Deterministic random stream identified by a seed and a purpose label.
#[derive(Debug, Clone)]
pub struct RngStream {
    pub seed: u64,
    pub label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        Self {
            seed,
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Sub-stream for item `index` of a family, e.g. one episode of a dataset.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        Self::new(seed, &format!("{label}/{index}"))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, name: &str) -> Result<(), RandError> {
        if self.lo <= self.hi && self.lo.is_finite() && self.hi.is_finite() {
            Ok(())
        } else {
            Err(RandError::InvalidConfig(format!("{name}: lo > hi")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightRand {
    pub count: [usize; 2],
    pub intensity: Span,
    /// Each colour channel is 1 minus up to this amount.
    pub color_jitter: f64,
    pub radius: Span,
    pub height: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureRand {
    pub probability: f64,
    pub contrast: Span,
    pub frequency: Span,
}

/// Per-timestep pose jitter. Translations are per-axis bounds in meters,
/// rotations per-axis bounds in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJitter {
    pub camera_translation: f64,
    pub camera_rotation: f64,
    pub gripper_translation: f64,
    pub gripper_rotation: f64,
    pub ring_translation: f64,
    pub ring_rotation: f64,
    pub crop_jitter: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthArtifactConfig {
    /// Proportional noise: std of the relative error is `noise_coeff · depth`.
    pub noise_coeff: f64,
    pub min_cutoff: f64,
    pub open_kernels: Vec<usize>,
    pub dilate_kernels: Vec<usize>,
    pub median_kernels: Vec<usize>,
    pub warp_cells: usize,
    pub warp_amplitude: Span,
    pub gaussian_sigma: Span,
    pub drop_fraction: f64,
}

impl Default for DepthArtifactConfig {
    fn default() -> Self {
        Self {
            noise_coeff: 0.005,
            min_cutoff: 0.15,
            open_kernels: vec![1, 3, 5],
            dilate_kernels: vec![1, 3, 5, 7],
            median_kernels: vec![1, 3, 5, 7],
            warp_cells: 4,
            warp_amplitude: Span::new(0.0, 1.5),
            gaussian_sigma: Span::new(0.0, 1.0),
            drop_fraction: 0.001,
        }
    }
}

impl DepthArtifactConfig {
    /// Every stage reduced to the identity apart from the raw occlusion mask.
    pub fn bypass() -> Self {
        Self {
            noise_coeff: 0.0,
            min_cutoff: 0.0,
            open_kernels: vec![1],
            dilate_kernels: vec![1],
            median_kernels: vec![1],
            warp_cells: 4,
            warp_amplitude: Span::fixed(0.0),
            gaussian_sigma: Span::fixed(0.0),
            drop_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandConfig {
    /// Half-width of the uniform albedo jitter around each component's nominal colour.
    pub color_jitter: f64,
    pub lights: LightRand,
    pub ambient: Span,
    pub texture: TextureRand,
    /// Std per twist axis (m/s, m/s, m/s, rad/s).
    pub action_noise: [f64; 4],
    pub pose_jitter: PoseJitter,
    pub depth: DepthArtifactConfig,
}

impl Default for RandConfig {
    fn default() -> Self {
        Self {
            color_jitter: 0.12,
            lights: LightRand {
                count: [1, 3],
                intensity: Span::new(0.3, 0.9),
                color_jitter: 0.25,
                radius: Span::new(0.2, 1.0),
                height: Span::new(0.4, 1.5),
            },
            ambient: Span::new(0.1, 0.4),
            texture: TextureRand {
                probability: 0.5,
                contrast: Span::new(0.1, 0.5),
                frequency: Span::new(30.0, 300.0),
            },
            action_noise: [0.003, 0.003, 0.003, 0.03],
            pose_jitter: PoseJitter {
                camera_translation: 0.003,
                camera_rotation: 0.015,
                gripper_translation: 0.001,
                gripper_rotation: 0.01,
                ring_translation: 0.0005,
                ring_rotation: 0.01,
                crop_jitter: 4,
            },
            depth: DepthArtifactConfig::default(),
        }
    }
}

impl RandConfig {
    /// No randomisation at all; lights are kept fixed by callers that skip `randomize_visuals`.
    pub fn none() -> Self {
        let mut c = Self::default();
        c.color_jitter = 0.0;
        c.texture.probability = 0.0;
        c.action_noise = [0.0; 4];
        c.pose_jitter = PoseJitter {
            camera_translation: 0.0,
            camera_rotation: 0.0,
            gripper_translation: 0.0,
            gripper_rotation: 0.0,
            ring_translation: 0.0,
            ring_rotation: 0.0,
            crop_jitter: 0,
        };
        c.depth = DepthArtifactConfig::bypass();
        c
    }

    pub fn validate(&self) -> Result<(), RandError> {
        let bad = |m: &str| Err(RandError::InvalidConfig(m.to_string()));
        if !(self.color_jitter >= 0.0) {
            return bad("color_jitter must be >= 0");
        }
        if self.lights.count[0] > self.lights.count[1] {
            return bad("lights.count: lo > hi");
        }
        self.lights.intensity.check("lights.intensity")?;
        self.lights.radius.check("lights.radius")?;
        self.lights.height.check("lights.height")?;
        self.ambient.check("ambient")?;
        self.texture.contrast.check("texture.contrast")?;
        self.texture.frequency.check("texture.frequency")?;
        if !(0.0..=1.0).contains(&self.texture.probability) {
            return bad("texture.probability must be in [0, 1]");
        }
        if self.action_noise.iter().any(|s| !(*s >= 0.0)) {
            return bad("action_noise stds must be >= 0");
        }
        let pj = &self.pose_jitter;
        let jit = [
            pj.camera_translation,
            pj.camera_rotation,
            pj.gripper_translation,
            pj.gripper_rotation,
            pj.ring_translation,
            pj.ring_rotation,
        ];
        if jit.iter().any(|v| !(*v >= 0.0)) || pj.crop_jitter < 0 {
            return bad("pose_jitter ranges must be >= 0");
        }
        let d = &self.depth;
        d.warp_amplitude.check("depth.warp_amplitude")?;
        d.gaussian_sigma.check("depth.gaussian_sigma")?;
        if d.warp_amplitude.lo < 0.0 || d.gaussian_sigma.lo < 0.0 {
            return bad("depth warp amplitude and sigma must be >= 0");
        }
        let kernels_ok = |k: &Vec<usize>| !k.is_empty() && k.iter().all(|&v| v % 2 == 1);
        if !kernels_ok(&d.open_kernels) || !kernels_ok(&d.dilate_kernels) || !kernels_ok(&d.median_kernels) {
            return bad("morphology kernels must be non-empty lists of odd sizes");
        }
        if !(d.noise_coeff >= 0.0 && d.min_cutoff >= 0.0 && (0.0..=1.0).contains(&d.drop_fraction) && d.warp_cells >= 1) {
            return bad("depth artifact parameters out of range");
        }
        Ok(())
    }
}

fn jitter_albedo(m: &mut Material, amp: f64, rng: &mut impl Rng) {
    if amp > 0.0 {
        for c in &mut m.albedo {
            *c = (*c as f64 + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0) as f32;
        }
    }
}

fn maybe_texture(m: &mut Material, cfg: &TextureRand, rng: &mut impl Rng) {
    if cfg.probability > 0.0 && rng.gen_bool(cfg.probability) {
        m.texture = Some(Texture {
            seed: rng.next_u64(),
            frequency: cfg.frequency.sample(rng),
            contrast: cfg.contrast.sample(rng) as f32,
            octaves: 3,
        });
    }
}

/// Component-wise colour jitter, fresh lights and ambient, and random grayscale textures.
pub fn randomize_visuals(scene: &Scene, cfg: &RandConfig, rng: &mut RngStream) -> Scene {
    let mut s = scene.clone();
    // one colour draw per component, shared by its primitives
    let component = |prims: &mut Vec<Primitive>, rng: &mut RngStream| {
        let Some(orig) = prims.first().map(|p| p.material) else { return };
        let mut m = orig;
        jitter_albedo(&mut m, cfg.color_jitter, rng);
        maybe_texture(&mut m, &cfg.texture, rng);
        let delta: Vec<f32> = (0..3).map(|c| m.albedo[c] - orig.albedo[c]).collect();
        for p in prims.iter_mut() {
            for c in 0..3 {
                p.material.albedo[c] = (p.material.albedo[c] + delta[c]).clamp(0.0, 1.0);
            }
            if m.texture != orig.texture {
                p.material.texture = m.texture;
            }
        }
    };
    jitter_albedo(&mut s.table.material, cfg.color_jitter, rng);
    maybe_texture(&mut s.table.material, &cfg.texture, rng);
    component(&mut s.peg, rng);
    component(&mut s.ring, rng);
    component(&mut s.gripper, rng);
    for d in &mut s.distractors {
        jitter_albedo(&mut d.material, cfg.color_jitter, rng);
    }

    let lc = &cfg.lights;
    let n = rng.gen_range(lc.count[0]..=lc.count[1]);
    s.lights = (0..n)
        .map(|_| {
            let az = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = lc.radius.sample(rng);
            let h = lc.height.sample(rng);
            let c = |rng: &mut RngStream| (1.0 - rng.gen_range(0.0..=lc.color_jitter.max(0.0))) as f32;
            Light {
                kind: LightKind::Point {
                    position: [r * az.cos(), r * az.sin(), h],
                },
                color: [c(rng), c(rng), c(rng)],
                intensity: lc.intensity.sample(rng) as f32,
            }
        })
        .collect();
    let a = cfg.ambient.sample(rng) as f32;
    s.ambient = [a, a, a];
    s
}

/// Adds zero-mean Gaussian noise per axis, then re-applies the speed cap.
pub fn perturb_action(a: &Twist, cfg: &RandConfig, cap: &SpeedCap, rng: &mut RngStream) -> Twist {
    let mut v = a.to_array();
    for (x, &std) in v.iter_mut().zip(&cfg.action_noise) {
        if std > 0.0 {
            *x += Normal::new(0.0, std).expect("std checked").sample(rng);
        }
    }
    Twist::from_array(v).clipped(cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryJitter {
    pub scene: Scene,
    pub camera: CameraModel,
    /// Integer pixel offset added to the crop centre.
    pub crop_offset: (i64, i64),
}

fn small_pose(trans: f64, rot: f64, rng: &mut impl Rng) -> Pose {
    let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let t = Vector3::new(u(trans), u(trans), u(trans));
    let w = Vector3::new(u(rot), u(rot), u(rot));
    Pose::new(UnitQuaternion::from_scaled_axis(w), t)
}

/// Per-timestep jitter of the camera mount, gripper, grasped ring and crop centre.
pub fn perturb_geometry(scene: &Scene, cam: &CameraModel, cfg: &RandConfig, rng: &mut RngStream) -> GeometryJitter {
    let pj = &cfg.pose_jitter;
    let mut s = scene.clone();
    let mut c = *cam;
    let cam_j = small_pose(pj.camera_translation, pj.camera_rotation, rng);
    c.extrinsic = c.extrinsic.compose(&cam_j);
    let g = small_pose(pj.gripper_translation, pj.gripper_rotation, rng);
    for p in &mut s.gripper {
        p.pose = g.compose(&p.pose);
    }
    let r = small_pose(pj.ring_translation, pj.ring_rotation, rng);
    for p in &mut s.ring {
        p.pose = r.compose(&p.pose);
    }
    let cj = pj.crop_jitter;
    let crop_offset = if cj > 0 {
        (rng.gen_range(-cj..=cj), rng.gen_range(-cj..=cj))
    } else {
        (0, 0)
    };
    GeometryJitter {
        scene: s,
        camera: c,
        crop_offset,
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth two-channel gradient-noise displacement field, zero mean per channel,
/// scaled so the largest magnitude equals `amplitude`.
pub fn perlin_field(h: usize, w: usize, cells: usize, amplitude: f64, rng: &mut RngStream) -> Image {
    let mut out = Image::new(h, w, 2);
    if h == 0 || w == 0 || amplitude == 0.0 {
        return out;
    }
    let cells = cells.max(1);
    let cell = h.max(w) as f64 / cells as f64;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let gw = (w as f64 / cell).ceil() as usize + 1;
    for ch in 0..2 {
        let grads: Vec<(f64, f64)> = (0..gh * gw)
            .map(|_| {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            })
            .collect();
        let mut vals = vec![0.0f64; h * w];
        for y in 0..h {
            let fy = y as f64 / cell;
            let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
            for x in 0..w {
                let fx = x as f64 / cell;
                let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
                let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
                    let g = grads[gy * gw + gx];
                    g.0 * dx + g.1 * dy
                };
                let n00 = dot(iy, ix, ty, tx);
                let n01 = dot(iy, ix + 1, ty, tx - 1.0);
                let n10 = dot(iy + 1, ix, ty - 1.0, tx);
                let n11 = dot(iy + 1, ix + 1, ty - 1.0, tx - 1.0);
                let (sx, sy) = (fade(tx), fade(ty));
                let a = n00 + (n01 - n00) * sx;
                let b = n10 + (n11 - n10) * sx;
                vals[y * w + x] = a + (b - a) * sy;
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter_mut().for_each(|v| *v -= mean);
        let peak = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
        for (i, v) in vals.iter().enumerate() {
            out.data[i * 2 + ch] = (v * scale) as f32;
        }
    }
    out
}

/// Binary mask stored as 0/1 bytes, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    fn window(&self, k: usize, f: impl Fn(usize, usize) -> u8) -> Mask {
        let r = (k / 2) as i64;
        let mut out = Mask::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (mut ones, mut n) = (0usize, 0usize);
                for dy in -r..=r {
                    let yy = y as i64 + dy;
                    if yy < 0 || yy >= self.height as i64 {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as i64 + dx;
                        if xx < 0 || xx >= self.width as i64 {
                            continue;
                        }
                        ones += self.data[yy as usize * self.width + xx as usize] as usize;
                        n += 1;
                    }
                }
                out.data[y * self.width + x] = f(ones, n);
            }
        }
        out
    }

    pub fn erode(&self, k: usize) -> Mask {
        if k <= 1 {
            return self.clone();
        }
        self.window(k, |ones, n| (ones == n) as u8)
    }

    pub fn dilate(&self, k: usize) -> Mask {
        if k <= 1 {
            return self.clone();
        }
        self.window(k, |ones, _| (ones > 0) as u8)
    }

    pub fn open(&self, k: usize) -> Mask {
        self.erode(k).dilate(k)
    }

    pub fn median(&self, k: usize) -> Mask {
        if k <= 1 {
            return self.clone();
        }
        self.window(k, |ones, n| (2 * ones > n) as u8)
    }
}

/// Pixels of the depth view where either stereo imager cannot see the emitter.
pub fn raw_occlusion_mask(frame: &SensorFrame) -> Result<Mask, RandError> {
    let (Some(left), Some(right)) = (&frame.emitter_mask_left, &frame.emitter_mask_right) else {
        return Err(RandError::MissingEmitterMasks);
    };
    let depth = &frame.depth_perfect;
    let (h, w) = (depth.height, depth.width);
    let margin = frame.right_mask_margin as i64;
    let mut m = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut occluded = left.data[i] < 0.5;
            let d = depth.data[i] as f64;
            if d > 0.0 {
                let xr = (x as f64 + margin as f64 - frame.disparity_scale / d).round() as i64;
                occluded |= xr < 0 || xr >= right.width as i64 || right.data[y * right.width + xr as usize] < 0.5;
            }
            m.data[i] = occluded as u8;
        }
    }
    Ok(m)
}

fn pick(k: &[usize], rng: &mut impl Rng) -> usize {
    k[rng.gen_range(0..k.len())]
}

/// Bilinear lookup at a displaced position (missing pixels are never filled in by
/// the warp; the caller skips them). Taps with nonzero weight that fall
/// outside the image make the sample missing; if any such tap is missing depth,
/// the nearest tap is used instead.
fn warp_sample(img: &Image, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    let mut acc = 0.0f64;
    let mut any_zero = false;
    let mut nearest = (f64::NEG_INFINITY, 0.0f32);
    for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
            let wgt = wy * wx;
            if wgt <= 0.0 {
                continue;
            }
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy < 0 || xx < 0 || yy >= img.height as i64 || xx >= img.width as i64 {
                return 0.0;
            }
            let v = img.data[yy as usize * img.width + xx as usize];
            any_zero |= v == 0.0;
            if wgt > nearest.0 {
                nearest = (wgt, v);
            }
            acc += wgt * v as f64;
        }
    }
    if any_zero {
        nearest.1
    } else {
        acc as f32
    }
}

/// Gaussian blur over valid (nonzero) pixels only; zero pixels stay zero.
fn masked_gaussian(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let (h, w) = (img.height, img.width);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if src[i] == 0.0 {
                    continue;
                }
                let (mut s, mut n) = (0.0f64, 0.0f64);
                for (j, kv) in k.iter().enumerate() {
                    let o = j as i64 - r;
                    let (yy, xx) = if horizontal { (y as i64, x as i64 + o) } else { (y as i64 + o, x as i64) };
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let v = src[yy as usize * w + xx as usize];
                    if v != 0.0 {
                        s += kv * v as f64;
                        n += kv;
                    }
                }
                out[i] = (s / n) as f32;
            }
        }
        out
    };
    let a = pass(&img.data, true);
    let b = pass(&a, false);
    Image::from_vec(h, w, 1, b).expect("same shape")
}

/// Realistic depth from a perfect depth frame and its emitter masks.
pub fn simulate_depth_artifacts(frame: &SensorFrame, cfg: &DepthArtifactConfig, rng: &mut RngStream) -> Result<Image, RandError> {
    let perfect = &frame.depth_perfect;
    let (h, w) = (perfect.height, perfect.width);

    // (a) + (b)
    let raw = raw_occlusion_mask(frame)?;
    let mask = raw
        .open(pick(&cfg.open_kernels, rng))
        .dilate(pick(&cfg.dilate_kernels, rng))
        .median(pick(&cfg.median_kernels, rng));

    // (c) .. (e)
    let mut depth = perfect.clone();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..h * w {
        let p = perfect.data[i];
        if mask.data[i] == 1 || p <= 0.0 {
            depth.data[i] = 0.0;
            continue;
        }
        let d = p as f64;
        let eps = cfg.noise_coeff * d * noise.sample(rng);
        let noisy = d * (1.0 + eps);
        depth.data[i] = if noisy < cfg.min_cutoff || d < cfg.min_cutoff || noisy <= 0.0 {
            0.0
        } else {
            noisy as f32
        };
    }

    // (f)
    let amp = cfg.warp_amplitude.sample(rng);
    let sigma = cfg.gaussian_sigma.sample(rng);
    if amp > 0.0 {
        let field = perlin_field(h, w, cfg.warp_cells, amp, rng);
        let src = depth.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if src.data[i] == 0.0 {
                    continue;
                }
                let (dx, dy) = (field.data[2 * i] as f64, field.data[2 * i + 1] as f64);
                depth.data[i] = warp_sample(&src, y as f64 + dy, x as f64 + dx);
            }
        }
    }
    depth = masked_gaussian(&depth, sigma);

    // (g)
    let n = (cfg.drop_fraction * (h * w) as f64).ceil() as usize;
    if n > 0 {
        for i in index::sample(rng, h * w, n.min(h * w)) {
            depth.data[i] = 0.0;
        }
    }
    Ok(depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_rotation;
    use crate::renderer::{render, PegShape, Shape, StereoRig, Table};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn scene() -> Scene {
        Scene {
            table: Table {
                half_x: 1.0,
                half_y: 1.0,
                material: Material::plain([0.5, 0.4, 0.3]),
            },
            object_pose: Pose::from_translation(0.0, 0.0, 0.04),
            peg_shape: PegShape::Round,
            peg: vec![Primitive::new(
                Shape::Cylinder {
                    radius: 0.015,
                    half_height: 0.02,
                },
                Pose::from_translation(0.0, 0.0, -0.02),
                Material::plain([0.2, 0.6, 0.2]),
            )],
            hole_clearance: 0.005,
            ee_pose: Pose::from_translation(0.0, 0.0, 0.25),
            ring: vec![],
            gripper: vec![Primitive::new(
                Shape::Box { half: [0.005, 0.01, 0.02] },
                Pose::from_translation(0.03, 0.0, 0.02),
                Material::plain([0.3, 0.3, 0.3]),
            )],
            lights: vec![],
            ambient: [0.3; 3],
            background: [0.0; 3],
            distractors: vec![],
            stereo: StereoRig::default(),
        }
    }

    fn camera() -> CameraModel {
        let rot = look_rotation(&Vector3::new(0.0, 0.0, -1.0), &Vector3::new(1.0, 0.0, 0.0));
        CameraModel::default_sensor(Pose::new(rot, Vector3::new(0.0, 0.0, 0.0))).scaled(0.2)
    }

    #[test]
    fn rng_streams_are_labelled_and_reproducible() {
        let mut a = RngStream::new(7, "vis");
        let mut b = RngStream::new(7, "vis");
        let mut c = RngStream::new(7, "act");
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let vc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
    }

    #[test]
    fn degenerate_visual_config_only_touches_lights() {
        let mut cfg = RandConfig::default();
        cfg.color_jitter = 0.0;
        cfg.texture.probability = 0.0;
        let s = scene();
        let r = randomize_visuals(&s, &cfg, &mut RngStream::new(1, "v"));
        let mut r2 = r.clone();
        r2.lights = s.lights.clone();
        r2.ambient = s.ambient;
        assert_eq!(r2, s);
        assert!(!r.lights.is_empty());
    }

    #[test]
    fn table_albedo_mean_matches_nominal() {
        let cfg = RandConfig::default();
        let s = scene();
        let mut rng = RngStream::new(2, "v");
        let n = 1000;
        let mut sum = [0.0f64; 3];
        for _ in 0..n {
            let r = randomize_visuals(&s, &cfg, &mut rng);
            for c in 0..3 {
                sum[c] += r.table.material.albedo[c] as f64;
            }
        }
        let sigma = cfg.color_jitter / 3f64.sqrt();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let nominal = s.table.material.albedo[c] as f64;
            assert!((mean - nominal).abs() < 3.0 * sigma / (n as f64).sqrt(), "channel {c}: {mean}");
        }
    }

    #[test]
    fn visuals_deterministic() {
        let cfg = RandConfig::default();
        let s = scene();
        let a = randomize_visuals(&s, &cfg, &mut RngStream::new(3, "v"));
        let b = randomize_visuals(&s, &cfg, &mut RngStream::new(3, "v"));
        assert_eq!(a, b);
    }

    #[test]
    fn action_noise_statistics() {
        let cap = SpeedCap { linear: 10.0, angular: 10.0 };
        let mut cfg = RandConfig::default();
        cfg.action_noise = [0.01, 0.02, 0.03, 0.1];
        let mut rng = RngStream::new(4, "a");
        let n = 10_000;
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let t = perturb_action(&Twist::zero(), &cfg, &cap, &mut rng).to_array();
            for k in 0..4 {
                sq[k] += t[k] * t[k];
            }
        }
        for k in 0..4 {
            let std = (sq[k] / n as f64).sqrt();
            assert!((std / cfg.action_noise[k] - 1.0).abs() < 0.05, "axis {k}: {std}");
        }
        cfg.action_noise = [0.0; 4];
        let t = Twist::new(0.01, -0.02, 0.0, 0.1);
        assert_eq!(perturb_action(&t, &cfg, &cap, &mut rng), t);
    }

    #[test]
    fn action_noise_respects_cap() {
        let cap = SpeedCap { linear: 0.05, angular: 0.5 };
        let mut cfg = RandConfig::default();
        cfg.action_noise = [0.05, 0.05, 0.05, 1.0];
        let mut rng = RngStream::new(5, "a");
        for _ in 0..2000 {
            assert!(perturb_action(&Twist::new(0.05, 0.0, 0.0, 0.5), &cfg, &cap, &mut rng).within(&cap));
        }
    }

    #[test]
    fn geometry_jitter_bounds() {
        let s = scene();
        let cam = camera();
        let none = RandConfig::none();
        let g = perturb_geometry(&s, &cam, &none, &mut RngStream::new(6, "g"));
        assert_eq!(g.scene, s);
        assert_eq!(g.camera, cam);
        assert_eq!(g.crop_offset, (0, 0));

        let cfg = RandConfig::default();
        let pj = &cfg.pose_jitter;
        let mut rng = RngStream::new(6, "g");
        for _ in 0..100_000 {
            let p = small_pose(pj.camera_translation, pj.camera_rotation, &mut rng);
            assert!(p.translation.iter().all(|v| v.abs() <= pj.camera_translation));
        }
        for _ in 0..1000 {
            let g = perturb_geometry(&s, &cam, &cfg, &mut rng);
            assert!(g.crop_offset.0.abs() <= pj.crop_jitter && g.crop_offset.1.abs() <= pj.crop_jitter);
            let d = g.scene.gripper[0].pose.translation - s.gripper[0].pose.translation;
            // rotation about the finger's parent origin moves it at most |p|·angle
            let bound = 3f64.sqrt() * pj.gripper_translation + s.gripper[0].pose.translation.norm() * 3f64.sqrt() * pj.gripper_rotation;
            assert!(d.norm() <= bound + 1e-12);
        }
    }

    #[test]
    fn perlin_zero_bounded_smooth() {
        let mut rng = RngStream::new(8, "p");
        assert!(perlin_field(32, 48, 4, 0.0, &mut rng).data.iter().all(|&v| v == 0.0));
        let f = perlin_field(64, 96, 3, 2.5, &mut rng);
        assert!(f.data.iter().all(|v| v.abs() <= 2.5 + 1e-6));
        for ch in 0..2 {
            let vals: Vec<f64> = (0..64 * 96).map(|i| f.data[2 * i + ch] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            let mut cov = 0.0;
            for y in 0..64 {
                for x in 0..95 {
                    cov += (vals[y * 96 + x] - mean) * (vals[y * 96 + x + 1] - mean);
                }
            }
            assert!(cov / var > 0.9);
        }
    }

    proptest! {
        #[test]
        fn opening_shrinks_dilation_grows(bits in proptest::collection::vec(0u8..2, 20 * 17), k in prop::sample::select(vec![1usize, 3, 5, 7])) {
            let m = Mask { height: 20, width: 17, data: bits };
            let o = m.open(k);
            let d = m.dilate(k);
            for i in 0..m.data.len() {
                prop_assert!(o.data[i] <= m.data[i]);
                prop_assert!(d.data[i] >= m.data[i]);
            }
        }
    }

    fn rendered() -> SensorFrame {
        let mut s = scene();
        s.ee_pose = Pose::from_translation(0.01, 0.0, 0.16);
        render(&s, &camera()).unwrap()
    }

    #[test]
    fn bypass_reproduces_masked_perfect_depth() {
        let f = rendered();
        let raw = raw_occlusion_mask(&f).unwrap();
        assert!(raw.count() > 0);
        let out = simulate_depth_artifacts(&f, &DepthArtifactConfig::bypass(), &mut RngStream::new(9, "d")).unwrap();
        for i in 0..out.data.len() {
            let expect = if raw.data[i] == 1 { 0.0 } else { f.depth_perfect.data[i] };
            assert_eq!(out.data[i].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn cutoff_and_drop_fraction() {
        let f = rendered();
        let mut cfg = DepthArtifactConfig::default();
        cfg.min_cutoff = 0.15;
        let out = simulate_depth_artifacts(&f, &cfg, &mut RngStream::new(10, "d")).unwrap();
        for i in 0..out.data.len() {
            if f.depth_perfect.data[i] < 0.15 {
                assert_eq!(out.data[i], 0.0);
            }
            assert!(out.data[i] >= 0.0);
        }
        // drop step alone on an unoccluded constant frame
        let mut g = f.clone();
        g.depth_perfect.data.iter_mut().for_each(|d| *d = 0.5);
        g.emitter_mask_left.as_mut().unwrap().data.iter_mut().for_each(|m| *m = 1.0);
        g.emitter_mask_right.as_mut().unwrap().data.iter_mut().for_each(|m| *m = 1.0);
        let mut only_drop = DepthArtifactConfig::bypass();
        only_drop.drop_fraction = 0.001;
        let out = simulate_depth_artifacts(&g, &only_drop, &mut RngStream::new(11, "d")).unwrap();
        let zeros = out.data.iter().filter(|&&d| d == 0.0).count();
        assert!(zeros as f64 >= 0.001 * out.data.len() as f64);
    }

    #[test]
    fn artifacts_deterministic_and_need_masks() {
        let f = rendered();
        let cfg = DepthArtifactConfig::default();
        let a = simulate_depth_artifacts(&f, &cfg, &mut RngStream::new(12, "d")).unwrap();
        let b = simulate_depth_artifacts(&f, &cfg, &mut RngStream::new(12, "d")).unwrap();
        assert_eq!(a, b);
        let mut g = f.clone();
        g.emitter_mask_right = None;
        assert!(matches!(
            simulate_depth_artifacts(&g, &cfg, &mut RngStream::new(12, "d")),
            Err(RandError::MissingEmitterMasks)
        ));
    }
}
