//! Per-pixel raycasting of the insertion scene as seen by the wrist camera.
//!
//! The renderer produces colour, grayscale, perfect depth and an assisted-stereo
//! IR pair with emitter-visibility masks. Rendering is a pure function of the
//! scene and camera; any sub-window of the sensor can be rendered on its own and
//! matches the corresponding pixels of a full-frame render exactly.

mod primitives;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, GeometryError, Pose};
use crate::imaging::{crop_and_resize, Image};
use crate::noise;

pub use primitives::Shape;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degenerate camera: {0}")]
    Camera(#[from] GeometryError),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Procedural grayscale texture multiplied onto a material's albedo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    /// Lattice cells per meter.
    pub frequency: f64,
    /// 0 leaves the albedo untouched, 1 lets the texture reach black.
    pub contrast: f32,
    pub octaves: u32,
}

impl Texture {
    pub fn factor(&self, p: &Vector3<f64>) -> f32 {
        let f = self.frequency;
        let n = noise::fractal_noise3(self.seed, p.x * f, p.y * f, p.z * f, self.octaves) as f32;
        1.0 - self.contrast + self.contrast * n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f32; 3],
    pub texture: Option<Texture>,
}

impl Material {
    pub fn plain(albedo: [f32; 3]) -> Self {
        Self { albedo, texture: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Pose in the parent frame (object, end effector, or world for distractors).
    pub pose: Pose,
    pub material: Material,
}

impl Primitive {
    pub fn new(shape: Shape, pose: Pose, material: Material) -> Self {
        Self { shape, pose, material }
    }
}

/// Horizontal table plane at z = 0 bounded by ±half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub half_x: f64,
    pub half_y: f64,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PegShape {
    Round,
    Square,
    Irregular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightKind {
    Point { position: [f64; 3] },
    /// Direction pointing from the scene towards the light.
    Directional { direction: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub kind: LightKind,
    pub color: [f32; 3],
    pub intensity: f32,
}

/// Assisted-stereo sensor head: the main camera is the left imager, the right imager
/// sits `baseline` meters along the camera x axis and the emitter halfway between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub baseline: f64,
    pub emitter_power: f32,
    /// Pattern cells per unit of tangent angle.
    pub pattern_frequency: f64,
    pub pattern_density: f64,
    pub pattern_seed: u64,
    pub ir_ambient: f32,
    /// Closest depth the right-view mask must cover, which sets its column margin.
    pub min_depth: f64,
}

impl Default for StereoRig {
    fn default() -> Self {
        Self {
            baseline: 0.05,
            emitter_power: 0.8,
            pattern_frequency: 200.0,
            pattern_density: 0.35,
            pattern_seed: 0x1d_5eed,
            ir_ambient: 0.05,
            min_depth: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub table: Table,
    pub object_pose: Pose,
    pub peg_shape: PegShape,
    /// Peg primitives in the object frame (origin at the centre of the peg top).
    pub peg: Vec<Primitive>,
    /// Radial clearance between ring hole and peg.
    pub hole_clearance: f64,
    pub ee_pose: Pose,
    /// Grasped ring primitives in the end-effector frame.
    pub ring: Vec<Primitive>,
    /// Gripper finger primitives in the end-effector frame.
    pub gripper: Vec<Primitive>,
    pub lights: Vec<Light>,
    pub ambient: [f32; 3],
    pub background: [f32; 3],
    /// Extra primitives in the world frame.
    pub distractors: Vec<Primitive>,
    pub stereo: StereoRig,
}

impl Scene {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.table.half_x > 0.0 && self.table.half_y > 0.0) {
            return Err(RenderError::InvalidScene("table must have positive extent".into()));
        }
        let all = self
            .peg
            .iter()
            .chain(&self.ring)
            .chain(&self.gripper)
            .chain(&self.distractors);
        for p in all {
            if !p.shape.is_valid() {
                return Err(RenderError::InvalidScene(format!("invalid primitive {:?}", p.shape)));
            }
        }
        if self.peg.is_empty() {
            return Err(RenderError::InvalidScene("scene has no peg".into()));
        }
        if self.hole_clearance <= 0.0 {
            return Err(RenderError::InvalidScene("ring hole clearance must be positive".into()));
        }
        Ok(())
    }

    /// Every primitive with its world pose.
    pub fn world_primitives(&self) -> Vec<Primitive> {
        let mut out = Vec::with_capacity(self.peg.len() + self.ring.len() + self.gripper.len() + self.distractors.len());
        for p in &self.peg {
            out.push(Primitive {
                pose: self.object_pose.compose(&p.pose),
                ..*p
            });
        }
        for p in self.ring.iter().chain(&self.gripper) {
            out.push(Primitive {
                pose: self.ee_pose.compose(&p.pose),
                ..*p
            });
        }
        out.extend(self.distractors.iter().copied());
        out
    }
}

/// Axis-aligned window of sensor pixels. May extend beyond the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRegion {
    pub u0: i64,
    pub v0: i64,
    pub width: usize,
    pub height: usize,
}

impl PixelRegion {
    pub fn full(cam: &CameraModel) -> Self {
        Self {
            u0: 0,
            v0: 0,
            width: cam.width,
            height: cam.height,
        }
    }

    /// The `size`×`size` window `crop_and_resize` reads for a crop centred on (u, v).
    pub fn centered(u: f64, v: f64, size: usize) -> Self {
        Self {
            u0: (u - size as f64 / 2.0).round() as i64,
            v0: (v - size as f64 / 2.0).round() as i64,
            width: size,
            height: size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub region: Option<PixelRegion>,
    /// Render the IR pair and emitter masks.
    pub stereo: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            region: None,
            stereo: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub region: PixelRegion,
    pub rgb: Image,
    pub gray: Image,
    /// Depth along the optical axis in meters, 0 where nothing is hit.
    pub depth_perfect: Image,
    pub ir_left: Option<Image>,
    pub ir_right: Option<Image>,
    pub emitter_mask_left: Option<Image>,
    /// Right-imager mask covering the frame region extended `right_mask_margin`
    /// columns to the left, so every left-view point with depth above the rig's
    /// minimum depth projects inside it.
    pub emitter_mask_right: Option<Image>,
    pub right_mask_margin: usize,
    /// fx · baseline, so that disparity = disparity_scale / depth.
    pub disparity_scale: f64,
}

impl SensorFrame {
    /// Crops any of this frame's images around a sensor pixel, as `crop_and_resize`
    /// would on the full-frame image.
    pub fn crop(&self, image: &Image, center: (f64, f64), crop: usize, out: usize) -> Image {
        crop_and_resize(
            image,
            (center.0 - self.region.u0 as f64, center.1 - self.region.v0 as f64),
            crop,
            out,
        )
    }
}

struct Prepared {
    shape: Shape,
    rot: Matrix3<f64>,
    inv_rot: Matrix3<f64>,
    center: Vector3<f64>,
    radius2: f64,
    material: Material,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Local coordinates used for texturing.
    pub local: Vector3<f64>,
    pub material: Material,
}

/// Scene flattened to world-frame primitives for tracing.
pub struct Tracer {
    prims: Vec<Prepared>,
    table: Table,
}

impl Tracer {
    pub fn new(scene: &Scene) -> Self {
        let prims = scene
            .world_primitives()
            .into_iter()
            .map(|p| {
                let rot = p.pose.rotation_matrix();
                let r = p.shape.bounding_radius();
                Prepared {
                    shape: p.shape,
                    rot,
                    inv_rot: rot.transpose(),
                    center: p.pose.translation,
                    radius2: r * r,
                    material: p.material,
                }
            })
            .collect();
        Self {
            prims,
            table: scene.table,
        }
    }

    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best_t = t_max;
        let mut best: Option<Hit> = None;
        if d.z < 0.0 {
            let t = -o.z / d.z;
            if t > t_min && t < best_t {
                let p = o + d * t;
                if p.x.abs() <= self.table.half_x && p.y.abs() <= self.table.half_y {
                    best_t = t;
                    best = Some(Hit {
                        t,
                        point: p,
                        normal: Vector3::z(),
                        local: p,
                        material: self.table.material,
                    });
                }
            }
        }
        let dd = d.dot(d);
        for prim in &self.prims {
            let oc = o - prim.center;
            // bounding sphere reject
            let b = oc.dot(d);
            let c = oc.dot(&oc) - prim.radius2;
            if b * b - dd * c < 0.0 {
                continue;
            }
            if c > 0.0 && b > 0.0 {
                continue;
            }
            let lo = prim.inv_rot * oc;
            let ld = prim.inv_rot * d;
            if let Some(h) = prim.shape.intersect(&lo, &ld, t_min, best_t) {
                best_t = h.t;
                best = Some(Hit {
                    t: h.t,
                    point: o + d * h.t,
                    normal: prim.rot * h.normal,
                    local: lo + ld * h.t,
                    material: prim.material,
                });
            }
        }
        best
    }

    /// True when the open segment from `from` to `to` is blocked.
    pub fn occluded(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
        let d = to - from;
        self.trace(from, &d, 1e-7, 1.0 - 1e-7).is_some()
    }
}

fn shade(hit: &Hit, dir: &Vector3<f64>, scene: &Scene) -> [f32; 3] {
    let mut n = hit.normal;
    if n.dot(dir) > 0.0 {
        n = -n;
    }
    let tex = hit.material.texture.map_or(1.0, |t| t.factor(&hit.local));
    let mut light = scene.ambient;
    for l in &scene.lights {
        let ldir = match l.kind {
            LightKind::Point { position } => (Vector3::from(position) - hit.point).normalize(),
            LightKind::Directional { direction } => Vector3::from(direction).normalize(),
        };
        let lam = n.dot(&ldir).max(0.0) as f32 * l.intensity;
        for c in 0..3 {
            light[c] += l.color[c] * lam;
        }
    }
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = (hit.material.albedo[c] * tex * light[c]).clamp(0.0, 1.0);
    }
    out
}

pub fn luminance(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

struct IrContext<'a> {
    emitter: Vector3<f64>,
    cam_inv_rot: Matrix3<f64>,
    rig: &'a StereoRig,
}

impl IrContext<'_> {
    fn pattern(&self, p: &Vector3<f64>) -> f32 {
        let q = self.cam_inv_rot * (p - self.emitter);
        if q.z <= 0.0 {
            return 0.0;
        }
        let f = self.rig.pattern_frequency;
        let a = (q.x / q.z * f).floor() as i64;
        let b = (q.y / q.z * f).floor() as i64;
        if noise::unit(noise::hash3(self.rig.pattern_seed, a, b, 0)) < self.rig.pattern_density {
            1.0
        } else {
            0.3
        }
    }

    /// (IR intensity, emitter visible) at a hit.
    fn illuminate(&self, tracer: &Tracer, hit: &Hit, dir: &Vector3<f64>) -> (f32, bool) {
        let mut n = hit.normal;
        if n.dot(dir) > 0.0 {
            n = -n;
        }
        let from = hit.point + n * 1e-7;
        let visible = !tracer.occluded(&from, &self.emitter);
        if !visible {
            return (self.rig.ir_ambient, false);
        }
        let to_e = self.emitter - hit.point;
        let dist = to_e.norm();
        let cos = n.dot(&(to_e / dist)).max(0.0);
        let falloff = (0.3 / dist).powi(2).min(4.0);
        let v = self.rig.ir_ambient + self.rig.emitter_power * self.pattern(&hit.point) * (cos * falloff) as f32;
        (v.clamp(0.0, 1.0), true)
    }
}

fn pixel_ray(cam_world: &Pose, rot: &Matrix3<f64>, cam: &CameraModel, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
    let d_cam = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    (cam_world.translation, rot * d_cam)
}

/// Whether the stereo head can measure depth at world `point`: the emitter and
/// the right imager both have a clear line to it and it projects at least
/// `margin_px` inside the right image.
pub fn stereo_measurable(scene: &Scene, cam: &CameraModel, point: &Vector3<f64>, margin_px: f64) -> bool {
    let tracer = Tracer::new(scene);
    let cam_world = cam.world_pose(&scene.ee_pose);
    let right = cam_world.compose(&Pose::from_translation(scene.stereo.baseline, 0.0, 0.0));
    let emitter = cam_world.transform_point(&Vector3::new(scene.stereo.baseline / 2.0, 0.0, 0.0));
    let Ok((u, v, _)) = cam.project(&right.inverse().transform_point(point)) else {
        return false;
    };
    let m = margin_px;
    let inside = u >= m && v >= m && u <= cam.width as f64 - 1.0 - m && v <= cam.height as f64 - 1.0 - m;
    inside && !tracer.occluded(point, &emitter) && !tracer.occluded(point, &right.translation)
}

/// Depth (camera z) of the first surface along the ray through continuous pixel (u, v).
pub fn cast_depth(scene: &Scene, cam: &CameraModel, u: f64, v: f64) -> Option<f64> {
    let tracer = Tracer::new(scene);
    let cam_world = cam.world_pose(&scene.ee_pose);
    let rot = cam_world.rotation_matrix();
    let (o, d) = pixel_ray(&cam_world, &rot, cam, u, v);
    tracer.trace(&o, &d, 1e-9, f64::INFINITY).map(|h| h.t)
}

pub fn render(scene: &Scene, cam: &CameraModel) -> Result<SensorFrame, RenderError> {
    render_with(scene, cam, &RenderOptions::default())
}

pub fn render_with(scene: &Scene, cam: &CameraModel, opts: &RenderOptions) -> Result<SensorFrame, RenderError> {
    cam.validate()?;
    scene.validate()?;
    let region = opts.region.unwrap_or_else(|| PixelRegion::full(cam));
    let (h, w) = (region.height, region.width);
    let tracer = Tracer::new(scene);
    let cam_world = cam.world_pose(&scene.ee_pose);
    let rot = cam_world.rotation_matrix();

    let rig = &scene.stereo;
    let ir = IrContext {
        emitter: cam_world.transform_point(&Vector3::new(rig.baseline / 2.0, 0.0, 0.0)),
        cam_inv_rot: rot.transpose(),
        rig,
    };

    let mut rgb = Image::new(h, w, 3);
    let mut gray = Image::new(h, w, 1);
    let mut depth = Image::new(h, w, 1);
    let mut ir_left = opts.stereo.then(|| Image::new(h, w, 1));
    let mut mask_left = opts.stereo.then(|| Image::new(h, w, 1));

    for y in 0..h {
        let v = region.v0 + y as i64;
        for x in 0..w {
            let u = region.u0 + x as i64;
            if u < 0 || v < 0 || u >= cam.width as i64 || v >= cam.height as i64 {
                continue;
            }
            let (o, d) = pixel_ray(&cam_world, &rot, cam, u as f64, v as f64);
            let i = y * w + x;
            match tracer.trace(&o, &d, 1e-9, f64::INFINITY) {
                Some(hit) => {
                    let c = shade(&hit, &d, scene);
                    rgb.data[3 * i..3 * i + 3].copy_from_slice(&c);
                    gray.data[i] = luminance(c);
                    depth.data[i] = hit.t as f32;
                    if let (Some(irl), Some(ml)) = (ir_left.as_mut(), mask_left.as_mut()) {
                        let (val, vis) = ir.illuminate(&tracer, &hit, &d);
                        irl.data[i] = val;
                        ml.data[i] = if vis { 1.0 } else { 0.0 };
                    }
                }
                None => {
                    rgb.data[3 * i..3 * i + 3].copy_from_slice(&scene.background);
                    gray.data[i] = luminance(scene.background);
                }
            }
        }
    }

    let disparity_scale = cam.fx * rig.baseline;
    let mut frame = SensorFrame {
        region,
        rgb,
        gray,
        depth_perfect: depth,
        ir_left,
        ir_right: None,
        emitter_mask_left: mask_left,
        emitter_mask_right: None,
        right_mask_margin: 0,
        disparity_scale,
    };

    if opts.stereo {
        let right_cam_world = cam_world.compose(&Pose::from_translation(rig.baseline, 0.0, 0.0));
        let margin = (disparity_scale / rig.min_depth).ceil() as usize;
        let mw = w + margin;
        let mut ir_right = Image::new(h, w, 1);
        let mut mask_right = Image::new(h, mw, 1);
        for y in 0..h {
            let v = region.v0 + y as i64;
            for xm in 0..mw {
                let u = region.u0 - margin as i64 + xm as i64;
                if u < 0 || v < 0 || u >= cam.width as i64 || v >= cam.height as i64 {
                    continue;
                }
                let (o, d) = pixel_ray(&right_cam_world, &rot, cam, u as f64, v as f64);
                if let Some(hit) = tracer.trace(&o, &d, 1e-9, f64::INFINITY) {
                    let (val, vis) = ir.illuminate(&tracer, &hit, &d);
                    mask_right.data[y * mw + xm] = if vis { 1.0 } else { 0.0 };
                    if xm >= margin {
                        ir_right.data[y * w + xm - margin] = val;
                    }
                }
            }
        }
        frame.ir_right = Some(ir_right);
        frame.emitter_mask_right = Some(mask_right);
        frame.right_mask_margin = margin;
    }
    Ok(frame)
}

/// Pixel of the end-effector origin in the wrist camera.
pub fn end_effector_pixel(cam: &CameraModel) -> Result<(f64, f64), GeometryError> {
    tool_pixel(cam, &Vector3::zeros())
}

/// Pixel of a point fixed in the end-effector frame.
pub fn tool_pixel(cam: &CameraModel, point: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    let (u, v, _) = cam.project(&cam.extrinsic.inverse().transform_point(point))?;
    Ok((u, v))
}
