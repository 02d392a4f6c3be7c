//! Insertion tasks: peg and ring geometry, scene assembly, clearance and success
//! predicates, sampling ranges, scripted experts and demonstration datasets.

pub mod dataset;
pub mod demos;
pub mod expert;
pub mod sensing;

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain_rand::RandError;
use crate::geometry::{look_rotation, wrap_angle, CameraModel, GeometryError, Pose};
use crate::renderer::{cast_depth, stereo_measurable, RenderError, Light, LightKind, Material, PegShape, Primitive, Scene, StereoRig, Table};
use crate::renderer::Shape;

pub use dataset::{DatasetError, DatasetReader, DatasetWriter, EpisodeMeta, Manifest, StreamInfo};
pub use demos::{generate_demos, generate_init_net_data, DemoConfig, DemoKind, EpisodeRecord, GenerationSummary, InitDataConfig};
pub use expert::{expert_action, ExpertConfig, ExpertState};
pub use sensing::{crop_center, fine_observation, full_frame_observation, FineView, Observation};

/// Numerical slack on contact boundaries (m), so poses resting exactly on a
/// surface survive a frame round trip.
const SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Rand(#[from] RandError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Round,
    Square,
    Screw,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Round => "round",
            TaskKind::Square => "square",
            TaskKind::Screw => "screw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TaskKind::Round, TaskKind::Square, TaskKind::Screw].into_iter().find(|k| k.name() == s)
    }
}

/// Radial key on the screw peg, in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeySpec {
    pub inner: f64,
    pub outer: f64,
    pub half_width: f64,
    /// Extends from the peg top down by this much.
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Per-side gap between peg and ring hole.
    pub tolerance: f64,
    /// Diameter (round, screw) or side (square).
    pub peg_width: f64,
    pub peg_height: f64,
    pub ring_wall: f64,
    pub ring_height: f64,
    /// Depth below the peg top the ring must reach.
    pub insertion_depth: f64,
    pub key: KeySpec,
    pub notch_half_angle: f64,
    pub secured_angle: f64,
    pub twist_target: f64,
}

impl TaskSpec {
    fn base(kind: TaskKind, tolerance: f64) -> Self {
        Self {
            kind,
            tolerance,
            peg_width: 0.03,
            peg_height: 0.04,
            ring_wall: 0.005,
            ring_height: if kind == TaskKind::Screw { 0.008 } else { 0.01 },
            insertion_depth: 0.01,
            key: KeySpec {
                inner: 0.015,
                outer: 0.019,
                half_width: 0.002,
                height: 0.01,
            },
            notch_half_angle: 30f64.to_radians(),
            secured_angle: 30f64.to_radians(),
            twist_target: 40f64.to_radians(),
        }
    }

    pub fn round() -> Self {
        Self::base(TaskKind::Round, 0.005)
    }

    pub fn screw() -> Self {
        Self::base(TaskKind::Screw, 0.0025)
    }

    pub fn square(tolerance: f64) -> Self {
        Self::base(TaskKind::Square, tolerance)
    }

    /// Default tolerance per kind unless one is given.
    pub fn new(kind: TaskKind, tolerance: Option<f64>) -> Self {
        let mut t = match kind {
            TaskKind::Round => Self::round(),
            TaskKind::Square => Self::square(0.0005),
            TaskKind::Screw => Self::screw(),
        };
        if let Some(tol) = tolerance {
            t.tolerance = tol;
        }
        t
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.tolerance > 0.0) {
            return Err(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if !(self.peg_width > 0.0 && self.peg_height > 0.0 && self.ring_wall > 0.0 && self.ring_height > 0.0) {
            return Err("peg and ring dimensions must be positive".into());
        }
        if self.insertion_depth <= 0.0 || self.insertion_depth > self.peg_height - self.ring_height {
            return Err(format!("insertion depth {} out of range", self.insertion_depth));
        }
        Ok(())
    }

    /// Short label such as `square_0.5mm`.
    pub fn label(&self) -> String {
        format!("{}_{}mm", self.kind.name(), trim_float(self.tolerance * 1000.0))
    }

    pub fn peg_radius(&self) -> f64 {
        self.peg_width / 2.0
    }

    /// Half-width (square) or radius (round, screw) of the ring hole.
    pub fn hole_half(&self) -> f64 {
        self.peg_radius() + self.tolerance
    }

    pub fn ring_outer_half(&self) -> f64 {
        self.hole_half() + self.ring_wall
    }

    fn peg_bound_radius(&self) -> f64 {
        match self.kind {
            TaskKind::Round => self.peg_radius(),
            TaskKind::Square => self.peg_radius() * 2f64.sqrt(),
            TaskKind::Screw => self.key.outer.hypot(self.key.half_width),
        }
    }

    fn ring_bound_radius(&self) -> f64 {
        match self.kind {
            TaskKind::Square => self.ring_outer_half() * 2f64.sqrt(),
            _ => self.ring_outer_half(),
        }
    }

    /// Largest ring twist at which the key still fits through the notch.
    pub fn key_pass_angle(&self) -> f64 {
        self.notch_half_angle - (self.key.half_width / self.hole_half()).atan()
    }

    pub fn peg_shape(&self) -> PegShape {
        match self.kind {
            TaskKind::Round => PegShape::Round,
            TaskKind::Square => PegShape::Square,
            TaskKind::Screw => PegShape::Irregular,
        }
    }

    /// Lateral gap left between ring and peg; negative means overlap.
    pub fn clearance(&self, offset: &Vector2<f64>, yaw: f64) -> f64 {
        match self.kind {
            TaskKind::Round | TaskKind::Screw => self.tolerance - offset.norm(),
            TaskKind::Square => {
                let (s, c) = (-yaw).sin_cos();
                let r = self.peg_radius();
                let mut worst = 0.0f64;
                for (cx, cy) in [(r, r), (r, -r), (-r, r), (-r, -r)] {
                    let (dx, dy) = (cx - offset.x, cy - offset.y);
                    let (x, y) = (c * dx - s * dy, s * dx + c * dy);
                    worst = worst.max(x.abs().max(y.abs()));
                }
                self.hole_half() - worst
            }
        }
    }

    fn in_key_zone(&self, z: f64) -> bool {
        self.kind == TaskKind::Screw && z < -SLACK && z + self.ring_height > -self.key.height + SLACK
    }

    /// Ring heights where the set of active constraints changes, top first.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0];
        if self.kind == TaskKind::Screw {
            b.push(-(self.key.height + self.ring_height));
        }
        b.push(-self.peg_height);
        b
    }

    /// Whether the ring can occupy `s` without overlapping peg, key or table.
    pub fn feasible(&self, s: &RingState) -> bool {
        if s.z < -self.peg_height - SLACK {
            return false;
        }
        if s.z >= -SLACK {
            return true;
        }
        let e = s.offset();
        let inside = self.clearance(&e, s.yaw) >= -1e-12;
        let outside = e.norm() >= self.peg_bound_radius() + self.ring_bound_radius();
        if !(inside || outside) {
            return false;
        }
        !(inside && self.in_key_zone(s.z) && wrap_angle(s.yaw).abs() > self.key_pass_angle())
    }

    /// Whether a ring at `s`, lifted straight up, would come off the peg.
    fn lift_clears(&self, s: &RingState) -> bool {
        let mut stops: Vec<f64> = self.breakpoints().into_iter().filter(|&b| b > s.z).collect();
        stops.sort_by(f64::total_cmp);
        let mut lo = s.z;
        for hi in stops {
            if !self.feasible(&RingState { z: 0.5 * (lo + hi), ..*s }) {
                return false;
            }
            lo = hi;
        }
        true
    }

    pub fn success(&self, s: &RingState) -> bool {
        let e = s.offset();
        if self.clearance(&e, s.yaw) < 0.0 || !self.feasible(s) {
            return false;
        }
        match self.kind {
            TaskKind::Round | TaskKind::Square => s.z <= -self.insertion_depth,
            TaskKind::Screw => {
                let below_key = s.z + self.ring_height <= -self.key.height;
                let down_blocked = !self.feasible(&RingState { z: s.z - 0.001, ..*s });
                let up_blocked = !self.lift_clears(s);
                below_key && wrap_angle(s.yaw).abs() >= self.secured_angle && up_blocked && down_blocked
            }
        }
    }

    /// Peg primitives in the object frame (origin at the top centre).
    pub fn peg_primitives(&self, material: Material) -> Vec<Primitive> {
        let hh = self.peg_height / 2.0;
        let body = match self.kind {
            TaskKind::Square => Shape::Box {
                half: [self.peg_radius(), self.peg_radius(), hh],
            },
            _ => Shape::Cylinder {
                radius: self.peg_radius(),
                half_height: hh,
            },
        };
        let mut v = vec![Primitive::new(body, Pose::from_translation(0.0, 0.0, -hh), material)];
        if self.kind == TaskKind::Screw {
            let k = &self.key;
            v.push(Primitive::new(
                Shape::Box {
                    half: [(k.outer - k.inner) / 2.0, k.half_width, k.height / 2.0],
                },
                Pose::from_translation((k.outer + k.inner) / 2.0, 0.0, -k.height / 2.0),
                material,
            ));
        }
        v
    }

    /// Ring primitives in the end-effector frame (origin at the ring bottom centre).
    pub fn ring_primitives(&self, material: Material) -> Vec<Primitive> {
        let hh = self.ring_height / 2.0;
        let a = self.hole_half();
        let w = self.ring_wall;
        match self.kind {
            TaskKind::Square => {
                let side = |x: f64, y: f64, hx: f64, hy: f64| Primitive::new(Shape::Box { half: [hx, hy, hh] }, Pose::from_translation(x, y, hh), material);
                vec![
                    side(a + w / 2.0, 0.0, w / 2.0, a + w),
                    side(-(a + w / 2.0), 0.0, w / 2.0, a + w),
                    side(0.0, a + w / 2.0, a, w / 2.0),
                    side(0.0, -(a + w / 2.0), a, w / 2.0),
                ]
            }
            _ => vec![Primitive::new(
                Shape::Tube {
                    inner: a,
                    outer: a + w,
                    half_height: hh,
                    gap_center: 0.0,
                    gap_half_width: if self.kind == TaskKind::Screw { self.notch_half_angle } else { 0.0 },
                },
                Pose::from_translation(0.0, 0.0, hh),
                material,
            )],
        }
    }

    /// Two fingers holding the ring from the sides plus a palm above it.
    pub fn gripper_primitives(&self, material: Material) -> Vec<Primitive> {
        let r = self.ring_outer_half();
        let finger = |sign: f64| {
            Primitive::new(
                Shape::Box {
                    half: [0.004, 0.009, 0.025],
                },
                Pose::from_translation(sign * (r + 0.004), 0.0, 0.025),
                material,
            )
        };
        vec![
            finger(1.0),
            finger(-1.0),
            Primitive::new(
                Shape::Box {
                    half: [r + 0.008, 0.012, 0.006],
                },
                Pose::from_translation(0.0, 0.0, 0.056),
                material,
            ),
        ]
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Ring pose relative to the peg: lateral offset and height of the ring bottom
/// below the peg top, and ring yaw relative to the peg, all in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl RingState {
    pub fn of(object: &Pose, ee: &Pose) -> Self {
        let rel = object.inverse().compose(ee);
        Self {
            x: rel.translation.x,
            y: rel.translation.y,
            z: rel.translation.z,
            yaw: wrap_angle(rel.yaw()),
        }
    }

    pub fn to_ee(&self, object: &Pose) -> Pose {
        object.compose(&Pose::from_xyz_yaw(self.x, self.y, self.z, self.yaw))
    }

    pub fn offset(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Pose offset ranges around the bottleneck for demonstrations and fine-phase trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Full extents of the demonstration start volume (x, y, z).
    pub volume: [f64; 3],
    pub angle: f64,
    /// Per-axis half-range of fine-phase evaluation errors.
    pub eval_offset: f64,
    pub eval_angle: f64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            volume: [0.025, 0.025, 0.015],
            angle: 0.45,
            eval_offset: 0.015,
            eval_angle: 15f64.to_radians(),
        }
    }
}

impl SamplingSpec {
    /// Demonstration start offset relative to the bottleneck, in the object frame.
    pub fn demo_offset(&self, rng: &mut impl Rng) -> Pose {
        let mut u = |half: f64| rng.gen_range(-half..=half);
        let (x, y, z) = (u(self.volume[0] / 2.0), u(self.volume[1] / 2.0), u(self.volume[2] / 2.0));
        Pose::from_xyz_yaw(x, y, z, u(self.angle))
    }

    pub fn eval_offset(&self, rng: &mut impl Rng) -> Pose {
        let mut u = |half: f64| rng.gen_range(-half..=half);
        let (x, y, z) = (u(self.eval_offset), u(self.eval_offset), u(self.eval_offset));
        Pose::from_xyz_yaw(x, y, z, u(self.eval_angle))
    }
}

/// Where objects may appear on the table relative to the neutral end-effector pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpace {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub yaw: f64,
    pub neutral: Pose,
    /// Minimum distance of the anchor pixel from the image border.
    pub margin_px: f64,
}

impl Default for TaskSpace {
    fn default() -> Self {
        Self {
            x: [-0.15, 0.15],
            y: [-0.25, 0.10],
            yaw: 0.45,
            neutral: Pose::from_xyz_yaw(0.0, 0.0, 0.28, 0.0),
            margin_px: 24.0,
        }
    }
}

impl TaskSpace {
    /// Rejection-samples an object pose whose anchor is in view, unoccluded and
    /// measurable by the stereo head from the neutral pose.
    pub fn sample_object(&self, task: &TaskSpec, cam: &CameraModel, rng: &mut impl Rng) -> Pose {
        for _ in 0..10_000 {
            let p = Pose::from_xyz_yaw(
                rng.gen_range(self.x[0]..=self.x[1]),
                rng.gen_range(self.y[0]..=self.y[1]),
                task.peg_height,
                rng.gen_range(-self.yaw..=self.yaw),
            );
            if self.anchor_visible(task, &p, cam) {
                return p;
            }
        }
        panic!("task space has no visible object poses");
    }

    pub fn anchor_visible(&self, task: &TaskSpec, object: &Pose, cam: &CameraModel) -> bool {
        let Ok((u, v, d)) = cam.project_world(&self.neutral, &object.translation) else {
            return false;
        };
        let scene = build_scene(task, object, &self.neutral);
        let m = self.margin_px;
        if u < m || v < m || u > cam.width as f64 - 1.0 - m || v > cam.height as f64 - 1.0 - m {
            return false;
        }
        // the whole top face, not just its centre
        let r = 0.7 * task.peg_radius();
        let top = [(0.0, 0.0), (r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)];
        if !top.iter().all(|&(x, y)| stereo_measurable(&scene, cam, &object.transform_point(&Vector3::new(x, y, 0.0)), m)) {
            return false;
        }
        matches!(cast_depth(&scene, cam, u, v), Some(t) if (t - d).abs() < 1e-6)
    }
}

/// Wrist camera mount in the end-effector frame: behind the ring and above it,
/// looking down with a slight forward tilt. Image columns run along the
/// end-effector −y axis, which puts the right imager and the emitter behind
/// the main imager, away from the ring.
pub fn camera_mount() -> Pose {
    let tilt = 5f64.to_radians();
    let forward = Vector3::new(0.0, tilt.sin(), -tilt.cos());
    Pose::new(look_rotation(&forward, &-Vector3::y()), Vector3::new(0.0, -0.06, 0.10))
}

pub fn nominal_camera() -> CameraModel {
    CameraModel::default_sensor(camera_mount())
}

pub const TABLE_COLOR: [f32; 3] = [0.55, 0.45, 0.33];
pub const PEG_COLOR: [f32; 3] = [0.2, 0.35, 0.75];
pub const RING_COLOR: [f32; 3] = [0.85, 0.72, 0.2];
pub const GRIPPER_COLOR: [f32; 3] = [0.3, 0.3, 0.32];

/// Nominal, unrandomised scene.
pub fn build_scene(task: &TaskSpec, object: &Pose, ee: &Pose) -> Scene {
    Scene {
        table: Table {
            half_x: 0.6,
            half_y: 0.6,
            material: Material::plain(TABLE_COLOR),
        },
        object_pose: *object,
        peg_shape: task.peg_shape(),
        peg: task.peg_primitives(Material::plain(PEG_COLOR)),
        hole_clearance: task.tolerance,
        ee_pose: *ee,
        ring: task.ring_primitives(Material::plain(RING_COLOR)),
        gripper: task.gripper_primitives(Material::plain(GRIPPER_COLOR)),
        lights: vec![Light {
            kind: LightKind::Point {
                position: [0.3, -0.4, 1.0],
            },
            color: [1.0, 1.0, 1.0],
            intensity: 0.7,
        }],
        ambient: [0.3, 0.3, 0.3],
        background: [0.1, 0.1, 0.12],
        distractors: Vec::new(),
        stereo: StereoRig::default(),
    }
}

/// Bottleneck: a few centimetres straight above the peg top, ring aligned.
pub fn bottleneck_offset() -> Pose {
    Pose::from_translation(0.0, 0.0, 0.03)
}

/// Yaw misalignment folded to the task's rotational symmetry.
pub fn symmetric_yaw_error(task: &TaskSpec, yaw: f64) -> f64 {
    match task.kind {
        TaskKind::Round => 0.0,
        TaskKind::Square => {
            let q = PI / 2.0;
            yaw - q * (yaw / q).round()
        }
        TaskKind::Screw => wrap_angle(yaw),
    }
}

/// Translation error (m) and symmetric yaw error (rad) between the ring and the
/// fully inserted pose.
pub fn final_error(task: &TaskSpec, s: &RingState) -> (f64, f64) {
    let depth = match task.kind {
        TaskKind::Screw => -task.peg_height,
        _ => s.z.clamp(-task.peg_height, -task.insertion_depth),
    };
    let lateral = s.offset().norm();
    let yaw = match task.kind {
        TaskKind::Screw => (wrap_angle(s.yaw).abs() - task.twist_target).abs(),
        _ => symmetric_yaw_error(task, s.yaw).abs(),
    };
    ((lateral * lateral + (s.z - depth).powi(2)).sqrt(), yaw)
}
