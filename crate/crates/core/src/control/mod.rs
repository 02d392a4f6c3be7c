//! The coarse-to-fine executive and its two baselines.
//!
//! Coarse: estimate the object pose from the neutral view, then servo in a
//! straight line to the bottleneck. Fine: run the closed-loop policy on wrist
//! crops until the task succeeds or the step budget runs out.

pub mod contact;

pub use contact::contact_model;

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain_rand::{randomize_visuals, DepthArtifactConfig, RandConfig, RandError, RngStream};
use crate::geometry::{wrap_angle, CameraModel, Frame, Pose, SpeedCap, Twist};
use crate::icp::{above_support_plane, depth_to_cloud, icp_register_with, init_pose_from_prediction, sample_surface, CloudFilter, IcpConfig, IcpError};
use crate::policy::{init_pose_net_forward, Policy, PolicyError, PolicyNet};
use crate::renderer::{render_with, Light, LightKind, Material, Primitive, RenderError, RenderOptions, Scene, Shape};
use crate::tasks::{
    bottleneck_offset, build_scene, crop_center, expert_action, final_error, fine_observation, full_frame_observation, nominal_camera, ExpertConfig, ExpertState, FineView, RingState,
    TaskError, TaskSpace, TaskSpec,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("{0} checkpoint required for this controller")]
    MissingCheckpoint(&'static str),
    #[error("sensor failure: {0}")]
    Sensor(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("phase cannot go from {from:?} to {to:?}")]
    PhaseOrder { from: Phase, to: Phase },
}

impl From<TaskError> for ControlError {
    fn from(e: TaskError) -> Self {
        ControlError::Sensor(e.to_string())
    }
}

impl From<RenderError> for ControlError {
    fn from(e: RenderError) -> Self {
        ControlError::Sensor(e.to_string())
    }
}

impl From<RandError> for ControlError {
    fn from(e: RandError) -> Self {
        ControlError::Sensor(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Coarse,
    Fine,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    CoarseToFine,
    IcpOnly,
    EndToEnd,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::CoarseToFine, ControllerKind::IcpOnly, ControllerKind::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::CoarseToFine => "coarse_to_fine",
            ControllerKind::IcpOnly => "icp_only",
            ControllerKind::EndToEnd => "end_to_end",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    /// Bottleneck pose in the object frame.
    pub offset: Pose,
}

impl Default for BottleneckSpec {
    fn default() -> Self {
        Self { offset: bottleneck_offset() }
    }
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.offset.translation.z > 0.0 {
            Ok(())
        } else {
            Err(ControlError::Config("bottleneck must lie above the object".into()))
        }
    }
}

pub fn compute_bottleneck_target(estimated_object: &Pose, spec: &BottleneckSpec) -> Pose {
    estimated_object.compose(&spec.offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub coarse_gain: f64,
    pub coarse_cap: SpeedCap,
    pub dt: f64,
    /// Multiplies learned-policy twists.
    pub speed_scale: f64,
    pub coarse_budget: usize,
    pub fine_budget: usize,
    /// Bottleneck arrival tolerance (m, rad).
    pub arrival_tolerance: [f64; 2],
    /// Descent speed of the open-loop insertion after ICP-only positioning.
    pub open_loop_speed: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            coarse_gain: 2.0,
            coarse_cap: SpeedCap {
                linear: 0.10,
                angular: 0.5,
            },
            dt: 0.05,
            speed_scale: 1.0,
            coarse_budget: 400,
            fine_budget: 400,
            arrival_tolerance: [0.002, 1f64.to_radians()],
            open_loop_speed: 0.03,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let c = &self.coarse_cap;
        if !(self.dt > 0.0 && c.linear > 0.0 && c.angular > 0.0 && self.coarse_gain > 0.0 && self.open_loop_speed > 0.0) {
            return Err(ControlError::Config("dt, gains and caps must be positive".into()));
        }
        if !(self.speed_scale >= 0.0) || !(self.arrival_tolerance.iter().all(|t| *t > 0.0)) {
            return Err(ControlError::Config("speed scale must be >= 0 and tolerances > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub ee_pose: Pose,
    /// Ground truth, used only by the simulator, the success check and oracles.
    pub object_pose: Pose,
    /// Episode visuals; poses are refreshed from the fields above before rendering.
    pub scene: Scene,
    pub time: f64,
    pub phase: Phase,
}

impl WorldState {
    pub fn new(task: &TaskSpec, object: Pose, ee: Pose) -> Self {
        Self {
            ee_pose: ee,
            object_pose: object,
            scene: build_scene(task, &object, &ee),
            time: 0.0,
            phase: Phase::Coarse,
        }
    }

    pub fn set_phase(&mut self, next: Phase) -> Result<(), ControlError> {
        if next < self.phase {
            return Err(ControlError::PhaseOrder { from: self.phase, to: next });
        }
        self.phase = next;
        Ok(())
    }

    pub fn current_scene(&self) -> Scene {
        let mut s = self.scene.clone();
        s.ee_pose = self.ee_pose;
        s.object_pose = self.object_pose;
        s
    }

    pub fn ring(&self) -> RingState {
        RingState::of(&self.object_pose, &self.ee_pose)
    }

    /// Integrates `twist` for `dt` through the contact model.
    pub fn apply(&mut self, task: &TaskSpec, twist: &Twist, dt: f64) {
        let proposed = twist.integrate(&self.ee_pose, dt);
        self.ee_pose = contact_model(task, &self.object_pose, &self.ee_pose, &proposed);
        self.time += dt;
    }
}

/// Proportional servo toward `target`; switches to the fine phase on arrival.
pub fn coarse_step(state: &mut WorldState, target: &Pose, cfg: &ControllerConfig) -> Twist {
    let err_world = target.translation - state.ee_pose.translation;
    let err_yaw = wrap_angle(target.yaw() - state.ee_pose.yaw());
    if err_world.norm() < cfg.arrival_tolerance[0] && err_yaw.abs() < cfg.arrival_tolerance[1] {
        if state.phase == Phase::Coarse {
            state.phase = Phase::Fine;
        }
        return Twist::zero();
    }
    let e = state.ee_pose.rotation.inverse() * err_world;
    Twist::new(e.x, e.y, e.z, err_yaw).scaled(cfg.coarse_gain).clipped(&cfg.coarse_cap)
}

/// What the robot believes about its camera versus where it really is.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensors {
    pub nominal: CameraModel,
    /// Renders use this one; it differs from `nominal` by the calibration bias.
    pub actual: CameraModel,
    pub view: FineView,
    pub full_frame: usize,
    pub depth: DepthArtifactConfig,
    /// Scale of the camera used for ICP depth images.
    pub icp_scale: f64,
}

impl Sensors {
    pub fn ideal() -> Self {
        Self::with_bias(&Pose::identity(), DepthArtifactConfig::bypass())
    }

    pub fn with_bias(bias: &Pose, depth: DepthArtifactConfig) -> Self {
        let nominal = nominal_camera();
        let mut actual = nominal;
        actual.extrinsic = nominal.extrinsic.compose(bias);
        Self {
            nominal,
            actual,
            view: FineView::default(),
            full_frame: 128,
            depth,
            icp_scale: 0.5,
        }
    }
}

/// Extrinsic error of fixed size in a random direction: `translation` metres
/// and `rotation` radians about a random axis.
pub fn calibration_bias(translation: f64, rotation: f64, rng: &mut impl Rng) -> Pose {
    let mut unit = || -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    };
    let t = unit() * translation;
    let w = unit() * rotation;
    Pose::new(UnitQuaternion::from_scaled_axis(w), t)
}

#[derive(Debug, Clone)]
pub enum PoseSource {
    /// Privileged object pose; oracle upper bound.
    GroundTruth,
    /// Learned anchor prediction refined by ICP.
    Learned(PolicyNet<f32>),
    /// Centroid of the above-table depth points, yaw zero, refined by ICP.
    CloudCentroid,
}

#[derive(Debug, Clone)]
pub enum FineController {
    Learned(Policy),
    /// Privileged expert; oracle upper bound.
    Expert(ExpertConfig),
}

#[derive(Debug, Clone)]
pub struct Controllers {
    pub pose: PoseSource,
    pub fine: Option<FineController>,
    pub end_to_end: Option<Policy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpSettings {
    pub points: usize,
    /// Keep scene points within this lateral distance of the initial guess.
    pub crop_radius: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub icp: IcpConfig,
}

impl Default for IcpSettings {
    fn default() -> Self {
        Self {
            points: 1500,
            crop_radius: 0.05,
            min_height: 0.004,
            max_height: 0.08,
            icp: IcpConfig {
                max_iter: 60,
                tol: 1e-7,
                ..IcpConfig::default()
            },
        }
    }
}

/// A miscalibrated camera sees the table tilted by up to about this much.
const TABLE_SEED_BAND: f64 = 0.02;

/// Depth points of the object region as the robot believes them to be, in the world frame.
fn observed_cloud(state: &WorldState, sensors: &Sensors, settings: &IcpSettings, rng: &mut RngStream) -> Result<Vec<Vector3<f64>>, ControlError> {
    let actual = sensors.actual.scaled(sensors.icp_scale);
    let believed = sensors.nominal.scaled(sensors.icp_scale);
    let frame = render_with(&state.current_scene(), &actual, &RenderOptions::default())?;
    let depth = crate::domain_rand::simulate_depth_artifacts(&frame, &sensors.depth, rng)?;
    // the ring and gripper sit above the end-effector origin
    let filter = CloudFilter::HeightBand {
        min_z: -TABLE_SEED_BAND,
        max_z: state.ee_pose.translation.z - 0.003,
    };
    match depth_to_cloud(&depth, &believed, &state.ee_pose, filter) {
        Ok(c) => Ok(above_support_plane(&c.points, TABLE_SEED_BAND, settings.min_height, settings.max_height)),
        Err(IcpError::NoValidPixels) => Ok(Vec::new()),
        Err(e) => Err(ControlError::Sensor(e.to_string())),
    }
}

/// ICP of the peg model against the observed cloud, starting from `init`.
/// Falls back to `init` when too few points survive the crop.
pub fn refine_with_icp(task: &TaskSpec, init: &Pose, state: &WorldState, sensors: &Sensors, settings: &IcpSettings, rng: &mut RngStream) -> Result<Pose, ControlError> {
    let pts = observed_cloud(state, sensors, settings, rng)?;
    let near: Vec<Vector3<f64>> = pts.into_iter().filter(|p| (p.xy() - init.translation.xy()).norm() < settings.crop_radius).collect();
    if near.len() < 30 {
        return Ok(*init);
    }
    let scene = crate::geometry::PointCloud::new(near, Frame::world())
        .map_err(|e| ControlError::Sensor(e.to_string()))?
        .subsample(settings.points);
    let model = sample_surface(&task.peg_primitives(Material::plain([1.0; 3])), settings.points, Frame::object(), rng);
    match icp_register_with(&model, &scene, init, &settings.icp) {
        Ok(r) => {
            let p = r.pose;
            Ok(Pose::from_xyz_yaw(p.translation.x, p.translation.y, p.translation.z, p.yaw()))
        }
        Err(IcpError::TooFewPoints { .. }) | Err(IcpError::Degenerate) => Ok(*init),
        Err(e) => Err(ControlError::Sensor(e.to_string())),
    }
}

/// Object pose estimate from the current view.
pub fn estimate_object_pose(task: &TaskSpec, state: &WorldState, source: &mut PoseSource, sensors: &Sensors, settings: &IcpSettings, rng: &mut RngStream) -> Result<Pose, ControlError> {
    let init = match source {
        PoseSource::GroundTruth => return Ok(state.object_pose),
        PoseSource::Learned(net) => {
            let obs = full_frame_observation(&state.current_scene(), &sensors.actual, sensors.full_frame, &[net.modality], &sensors.depth, rng)?;
            let img = &obs.images[0].1;
            let pred = init_pose_net_forward(net, img, &sensors.nominal)?;
            init_pose_from_prediction(&pred, &sensors.nominal, &state.ee_pose).map_err(|e| ControlError::Sensor(e.to_string()))?
        }
        PoseSource::CloudCentroid => {
            let pts = observed_cloud(state, sensors, settings, rng)?;
            if pts.is_empty() {
                return Err(ControlError::Sensor("no object points in view".into()));
            }
            let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
            Pose::from_xyz_yaw(c.x, c.y, task.peg_height, 0.0)
        }
    };
    refine_with_icp(task, &init, state, sensors, settings, rng)
}

/// Renders the wrist crop, queries the fine controller, scales and applies the twist.
pub fn fine_step(task: &TaskSpec, state: &mut WorldState, fine: &mut FineController, expert: &mut ExpertState, sensors: &Sensors, cfg: &ControllerConfig, speed_scale: f64, rng: &mut RngStream) -> Result<Twist, ControlError> {
    let twist = match fine {
        FineController::Expert(ecfg) => expert_action(task, &state.object_pose, &state.ee_pose, ecfg, expert),
        FineController::Learned(policy) => {
            let center = crop_center(&sensors.nominal, &sensors.view)?;
            let obs = fine_observation(&state.current_scene(), &sensors.actual, center, &sensors.view, &[policy.net.modality], false, &sensors.depth, rng)?;
            policy.act(&obs.images[0].1)?.action
        }
    }
    .scaled(speed_scale);
    state.apply(task, &twist, cfg.dt);
    Ok(twist)
}

/// Per-episode world randomisation and robustness perturbations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub controller: ControllerConfig,
    pub bottleneck: BottleneckSpec,
    pub icp: IcpSettings,
    pub randomize_visuals: bool,
    pub rand: RandConfig,
    pub distractors: usize,
    /// One light circling the scene half a revolution over the fine budget.
    pub moving_light: bool,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            bottleneck: BottleneckSpec::default(),
            icp: IcpSettings::default(),
            randomize_visuals: true,
            rand: RandConfig::default(),
            distractors: 0,
            moving_light: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task: String,
    pub controller: String,
    pub seed: u64,
    pub pose_index: usize,
    pub success: bool,
    pub steps: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub final_error_mm: f64,
    pub final_error_deg: f64,
    /// Phases in the order they were entered.
    pub phases: Vec<Phase>,
    pub failure: Option<String>,
}

/// Random table clutter away from the peg.
pub fn distractor_primitives(object: &Pose, count: usize, space: &TaskSpace, rng: &mut impl Rng) -> Vec<Primitive> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = rng.gen_range(space.x[0] - 0.05..space.x[1] + 0.05);
        let y = rng.gen_range(space.y[0] - 0.05..space.y[1] + 0.05);
        if (x - object.translation.x).hypot(y - object.translation.y) < 0.08 {
            continue;
        }
        let s = rng.gen_range(0.008..0.02);
        let (shape, h) = match rng.gen_range(0..3) {
            0 => (Shape::Box { half: [s, rng.gen_range(0.008..0.02), s] }, s),
            1 => (Shape::Cylinder { radius: s, half_height: s }, s),
            _ => (Shape::Sphere { radius: s }, s),
        };
        let color = [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)];
        out.push(Primitive::new(shape, Pose::from_xyz_yaw(x, y, h, rng.gen_range(-PI..PI)), Material::plain(color)));
    }
    out
}

fn circling_light(fraction: f64) -> Light {
    let a = PI * fraction;
    Light {
        kind: LightKind::Point {
            position: [0.6 * a.cos(), 0.6 * a.sin(), 0.8],
        },
        color: [1.0; 3],
        intensity: 0.8,
    }
}

/// Runs one full episode of `kind` from the neutral pose against `object`.
pub fn run_episode(
    task: &TaskSpec,
    object: &Pose,
    kind: ControllerKind,
    ctl: &mut Controllers,
    sensors: &Sensors,
    settings: &EpisodeSettings,
    space: &TaskSpace,
    seed: u64,
    pose_index: usize,
) -> Result<EpisodeOutcome, ControlError> {
    let cfg = &settings.controller;
    cfg.validate()?;
    settings.bottleneck.validate()?;
    let mut rng = RngStream::derive(seed, "eval_episode", pose_index as u64);
    let mut state = WorldState::new(task, *object, space.neutral);
    if settings.randomize_visuals {
        state.scene = randomize_visuals(&state.scene, &settings.rand, &mut rng);
    }
    state.scene.distractors = distractor_primitives(object, settings.distractors, space, &mut rng);
    let mut phases = vec![Phase::Coarse];
    let (mut coarse_steps, mut fine_steps) = (0, 0);
    let mut failure = None;

    match kind {
        ControllerKind::CoarseToFine | ControllerKind::IcpOnly => 'run: {
            let est = match estimate_object_pose(task, &state, &mut ctl.pose, sensors, &settings.icp, &mut rng) {
                Ok(p) => p,
                Err(ControlError::Sensor(m)) => {
                    failure = Some(format!("pose estimate failed: {m}"));
                    break 'run;
                }
                Err(e) => return Err(e),
            };
            let mut target = compute_bottleneck_target(&est, &settings.bottleneck);
            let servo = |state: &mut WorldState, target: &Pose, steps: &mut usize| {
                while state.phase == Phase::Coarse && *steps < cfg.coarse_budget {
                    let t = coarse_step(state, target, cfg);
                    if state.phase != Phase::Coarse {
                        break;
                    }
                    state.apply(task, &t, cfg.dt);
                    *steps += 1;
                }
                // a final check without spending a step
                coarse_step(state, target, cfg);
            };
            servo(&mut state, &target, &mut coarse_steps);
            if state.phase == Phase::Coarse {
                failure = Some("bottleneck not reached".to_string());
            } else if kind == ControllerKind::IcpOnly {
                // second estimate from the bottleneck, then open loop
                let est2 = match ctl.pose {
                    PoseSource::GroundTruth => est,
                    _ => refine_with_icp(task, &est, &state, sensors, &settings.icp, &mut rng)?,
                };
                target = compute_bottleneck_target(&est2, &settings.bottleneck);
                state.phase = Phase::Coarse;
                servo(&mut state, &target, &mut coarse_steps);
                state.set_phase(Phase::Fine)?;
                phases.push(Phase::Fine);
                let depth = settings.bottleneck.offset.translation.z + task.peg_height;
                let down = (depth / (cfg.open_loop_speed * cfg.dt)).ceil() as usize;
                let twist_steps = if task.kind == crate::tasks::TaskKind::Screw {
                    (task.twist_target / (0.5 * cfg.dt)).ceil() as usize
                } else {
                    0
                };
                for i in 0..(down + twist_steps).min(cfg.fine_budget) {
                    if task.success(&state.ring()) {
                        break;
                    }
                    let t = if i < down {
                        Twist::new(0.0, 0.0, -cfg.open_loop_speed, 0.0)
                    } else {
                        Twist::new(0.0, 0.0, 0.0, 0.5)
                    };
                    state.apply(task, &t, cfg.dt);
                    fine_steps += 1;
                }
            } else {
                phases.push(Phase::Fine);
                let mut fine = ctl.fine.take().ok_or(ControlError::MissingCheckpoint("fine"))?;
                let mut expert = ExpertState::default();
                let base_lights = state.scene.lights.clone();
                let result = (|| {
                    while fine_steps < cfg.fine_budget {
                        if task.success(&state.ring()) {
                            break;
                        }
                        if settings.moving_light {
                            let mut l = base_lights.clone();
                            l.truncate(1);
                            l[..].fill(circling_light(fine_steps as f64 / cfg.fine_budget as f64));
                            if l.is_empty() {
                                l.push(circling_light(fine_steps as f64 / cfg.fine_budget as f64));
                            }
                            state.scene.lights = l;
                        }
                        fine_step(task, &mut state, &mut fine, &mut expert, sensors, cfg, cfg.speed_scale, &mut rng)?;
                        fine_steps += 1;
                    }
                    Ok::<(), ControlError>(())
                })();
                ctl.fine = Some(fine);
                result?;
            }
        }
        ControllerKind::EndToEnd => {
            let policy = ctl.end_to_end.as_mut().ok_or(ControlError::MissingCheckpoint("end_to_end"))?;
            while coarse_steps < cfg.coarse_budget + cfg.fine_budget {
                if task.success(&state.ring()) {
                    break;
                }
                let obs = full_frame_observation(&state.current_scene(), &sensors.actual, sensors.full_frame, &[policy.net.modality], &sensors.depth, &mut rng)?;
                let t = policy.act(&obs.images[0].1)?.action.scaled(cfg.speed_scale);
                state.apply(task, &t, cfg.dt);
                coarse_steps += 1;
            }
        }
    }

    let ring = state.ring();
    let success = task.success(&ring);
    if !task.feasible(&ring) {
        failure = Some("ring penetrates peg".into());
    } else if !success && failure.is_none() {
        failure = Some("step budget exhausted".into());
    }
    state.phase = Phase::Done;
    phases.push(Phase::Done);
    let (e_m, e_rad) = final_error(task, &ring);
    Ok(EpisodeOutcome {
        task: task.label(),
        controller: kind.name().into(),
        seed,
        pose_index,
        success: success && task.feasible(&ring),
        steps: coarse_steps + fine_steps,
        coarse_steps,
        fine_steps,
        final_error_mm: e_m * 1000.0,
        final_error_deg: e_rad.to_degrees(),
        phases,
        failure: if success { None } else { failure },
    })
}

/// Object poses and calibration bias shared by every controller compared on a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub seed: u64,
    pub poses: Vec<Pose>,
    pub bias: Pose,
}

impl EvalSuite {
    pub fn new(task: &TaskSpec, n: usize, seed: u64, space: &TaskSpace, bias: [f64; 2]) -> Self {
        let mut rng = RngStream::new(seed, "eval_suite");
        let b = calibration_bias(bias[0], bias[1], &mut rng);
        let cam = nominal_camera();
        let poses = (0..n).map(|_| space.sample_object(task, &cam, &mut rng)).collect();
        Self { seed, poses, bias: b }
    }
}

/// Runs every pose of `suite`, spreading episodes over `threads` workers.
pub fn run_suite(
    task: &TaskSpec,
    suite: &EvalSuite,
    kind: ControllerKind,
    ctl: &Controllers,
    sensors: &Sensors,
    settings: &EpisodeSettings,
    space: &TaskSpace,
    threads: usize,
) -> Result<Vec<EpisodeOutcome>, ControlError> {
    let n = suite.poses.len();
    let threads = threads.clamp(1, n.max(1));
    let per = n.div_ceil(threads).max(1);
    let mut results: Vec<Option<Result<EpisodeOutcome, ControlError>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|sc| {
        for (t, chunk) in results.chunks_mut(per).enumerate() {
            let mut local = ctl.clone();
            sc.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = t * per + k;
                    *slot = Some(run_episode(task, &suite.poses[i], kind, &mut local, sensors, settings, space, suite.seed, i));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every episode ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    fn oracle() -> Controllers {
        Controllers {
            pose: PoseSource::GroundTruth,
            fine: Some(FineController::Expert(ExpertConfig {
                waypoint_radius: 0.0,
                ..ExpertConfig::default()
            })),
            end_to_end: None,
        }
    }

    fn quiet() -> EpisodeSettings {
        EpisodeSettings {
            randomize_visuals: false,
            ..EpisodeSettings::default()
        }
    }

    #[test]
    fn bottleneck_target_composes() {
        let spec = BottleneckSpec::default();
        let t = compute_bottleneck_target(&Pose::identity(), &spec);
        assert!((t.translation - Vector3::new(0.0, 0.0, 0.03)).norm() < 1e-15);
        let obj = Pose::from_xyz_yaw(0.1, -0.2, 0.04, 0.7);
        let t = compute_bottleneck_target(&obj, &spec);
        assert!(t.distance_to(&obj.compose(&spec.offset)) < 1e-15);
        assert!((t.yaw() - 0.7).abs() < 1e-12);
        assert!(BottleneckSpec { offset: Pose::identity() }.validate().is_err());
    }

    #[test]
    fn coarse_step_is_proportional_and_arrives() {
        let task = TaskSpec::round();
        let cfg = ControllerConfig {
            coarse_gain: 1.0,
            ..ControllerConfig::default()
        };
        let mut s = WorldState::new(&task, Pose::from_xyz_yaw(0.0, 0.0, 0.04, 0.0), Pose::from_translation(0.0, 0.0, 0.2));
        let target = Pose::from_translation(0.1, 0.0, 0.2);
        let t = coarse_step(&mut s, &target, &cfg);
        assert!((t.vx - 0.1).abs() < 1e-12 && t.vy.abs() < 1e-12 && t.vz.abs() < 1e-12 && t.alpha.abs() < 1e-12);
        assert_eq!(s.phase, Phase::Coarse);
        s.ee_pose = target;
        assert_eq!(coarse_step(&mut s, &target, &cfg), Twist::zero());
        assert_eq!(s.phase, Phase::Fine);
        assert!(s.set_phase(Phase::Coarse).is_err());
    }

    #[test]
    fn coarse_path_is_straight() {
        let task = TaskSpec::round();
        let cfg = ControllerConfig::default();
        let start = Pose::from_xyz_yaw(-0.1, 0.05, 0.28, 0.0);
        let target = Pose::from_xyz_yaw(0.12, -0.15, 0.07, 0.4);
        let mut s = WorldState::new(&task, Pose::from_xyz_yaw(0.12, -0.15, 0.04, 0.4), start);
        let dir = (target.translation - start.translation).normalize();
        let mut worst = 0.0f64;
        for _ in 0..400 {
            let t = coarse_step(&mut s, &target, &cfg);
            if s.phase != Phase::Coarse {
                break;
            }
            s.apply(&task, &t, cfg.dt);
            let d = s.ee_pose.translation - start.translation;
            worst = worst.max((d - dir * d.dot(&dir)).norm());
        }
        assert_eq!(s.phase, Phase::Fine);
        assert!(worst < 1e-3, "cross-track {worst}");
    }

    #[test]
    fn speed_scale_zero_is_stationary_and_two_halves_descent() {
        let task = TaskSpec::round();
        let obj = Pose::from_xyz_yaw(0.0, 0.0, 0.04, 0.0);
        let sensors = Sensors::ideal();
        let cfg = ControllerConfig::default();
        let fine = FineController::Expert(ExpertConfig::default());
        let steps_to_contact = |scale: f64| {
            let mut s = WorldState::new(&task, obj, obj.compose(&bottleneck_offset()));
            let mut ex = ExpertState::default();
            let mut rng = RngStream::new(0, "t");
            let mut fine = fine.clone();
            let mut n = 0;
            while s.ring().z > 0.0 && n < 1000 {
                fine_step(&task, &mut s, &mut fine, &mut ex, &sensors, &cfg, scale, &mut rng).unwrap();
                n += 1;
            }
            n
        };
        let mut s = WorldState::new(&task, obj, obj.compose(&bottleneck_offset()));
        let before = s.ee_pose;
        fine_step(&task, &mut s, &mut fine.clone(), &mut ExpertState::default(), &sensors, &cfg, 0.0, &mut RngStream::new(0, "t")).unwrap();
        assert_eq!(s.ee_pose, before);
        assert_eq!(steps_to_contact(1.0), 20);
        assert_eq!(steps_to_contact(2.0), 10);
    }

    #[test]
    fn oracle_coarse_to_fine_succeeds_on_every_task() {
        let space = TaskSpace::default();
        for task in [TaskSpec::round(), TaskSpec::square(0.0005), TaskSpec::screw()] {
            let suite = EvalSuite::new(&task, 20, 5, &space, [0.0, 0.0]);
            let out = run_suite(&task, &suite, ControllerKind::CoarseToFine, &oracle(), &Sensors::ideal(), &quiet(), &space, 1).unwrap();
            let ok = out.iter().filter(|o| o.success).count();
            assert_eq!(ok, 20, "{:?}: {:?}", task.kind, out.iter().find(|o| !o.success));
            for o in &out {
                assert_eq!(o.phases, vec![Phase::Coarse, Phase::Fine, Phase::Done]);
            }
        }
    }

    #[test]
    fn speed_scaling_keeps_phases() {
        let task = TaskSpec::round();
        let space = TaskSpace::default();
        let suite = EvalSuite::new(&task, 3, 8, &space, [0.0, 0.0]);
        for scale in [0.5, 2.0] {
            let mut st = quiet();
            st.controller.speed_scale = scale;
            let out = run_suite(&task, &suite, ControllerKind::CoarseToFine, &oracle(), &Sensors::ideal(), &st, &space, 1).unwrap();
            assert!(out.iter().all(|o| o.phases == vec![Phase::Coarse, Phase::Fine, Phase::Done]));
        }
    }

    #[test]
    fn icp_only_fails_under_bias_on_tight_square() {
        let task = TaskSpec::square(0.0005);
        let space = TaskSpace::default();
        let suite = EvalSuite::new(&task, 4, 11, &space, [0.002, 0.0]);
        let sensors = Sensors::with_bias(&suite.bias, DepthArtifactConfig::default());
        let mut ctl = oracle();
        ctl.pose = PoseSource::CloudCentroid;
        let out = run_suite(&task, &suite, ControllerKind::IcpOnly, &ctl, &sensors, &quiet(), &space, 1).unwrap();
        assert!(out.iter().all(|o| !o.success), "{out:?}");
        assert!(out.iter().all(|o| o.final_error_mm > 0.5));
    }

    #[test]
    fn icp_only_succeeds_without_bias_on_round() {
        let task = TaskSpec::round();
        let space = TaskSpace::default();
        let suite = EvalSuite::new(&task, 3, 12, &space, [0.0, 0.0]);
        let mut ctl = oracle();
        ctl.pose = PoseSource::CloudCentroid;
        let out = run_suite(&task, &suite, ControllerKind::IcpOnly, &ctl, &Sensors::ideal(), &quiet(), &space, 1).unwrap();
        assert!(out.iter().all(|o| o.success), "{out:?}");
    }

    #[test]
    fn zero_budget_fails_with_zero_steps_and_missing_checkpoint_errors() {
        let task = TaskSpec::round();
        let space = TaskSpace::default();
        let mut st = quiet();
        st.controller.coarse_budget = 0;
        st.controller.fine_budget = 0;
        let obj = space.sample_object(&task, &nominal_camera(), &mut RngStream::new(1, "t"));
        let mut ctl = oracle();
        let o = run_episode(&task, &obj, ControllerKind::CoarseToFine, &mut ctl, &Sensors::ideal(), &st, &space, 1, 0).unwrap();
        assert!(!o.success && o.steps == 0);
        let mut ctl = oracle();
        ctl.fine = None;
        assert!(matches!(
            run_episode(&task, &obj, ControllerKind::CoarseToFine, &mut ctl, &Sensors::ideal(), &quiet(), &space, 1, 0),
            Err(ControlError::MissingCheckpoint(_))
        ));
        assert!(matches!(
            run_episode(&task, &obj, ControllerKind::EndToEnd, &mut oracle(), &Sensors::ideal(), &quiet(), &space, 1, 0),
            Err(ControlError::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn episodes_are_deterministic() {
        let task = TaskSpec::screw();
        let space = TaskSpace::default();
        let suite = EvalSuite::new(&task, 2, 3, &space, [0.003, 1f64.to_radians()]);
        let sensors = Sensors::with_bias(&suite.bias, DepthArtifactConfig::default());
        let mut ctl = oracle();
        ctl.pose = PoseSource::CloudCentroid;
        let mut st = EpisodeSettings::default();
        st.distractors = 3;
        st.moving_light = true;
        let a = run_suite(&task, &suite, ControllerKind::CoarseToFine, &ctl, &sensors, &st, &space, 1).unwrap();
        let b = run_suite(&task, &suite, ControllerKind::CoarseToFine, &ctl, &sensors, &st, &space, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|o| o.task == TaskSpec::screw().label() && task.kind == TaskKind::Screw));
    }

    #[test]
    fn bias_has_requested_size() {
        let mut rng = RngStream::new(4, "t");
        let b = calibration_bias(0.003, 1f64.to_radians(), &mut rng);
        assert!((b.translation.norm() - 0.003).abs() < 1e-12);
        assert!((b.rotation.angle() - 1f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn object_cloud_survives_bias_and_artifacts() {
        let task = TaskSpec::square(0.0005);
        let space = TaskSpace::default();
        let suite = EvalSuite::new(&task, 12, 25, &space, [0.003, 1f64.to_radians()]);
        let sensors = Sensors::with_bias(&suite.bias, DepthArtifactConfig::default());
        for (i, obj) in suite.poses.iter().enumerate() {
            let state = WorldState::new(&task, *obj, space.neutral);
            let pts = observed_cloud(&state, &sensors, &IcpSettings::default(), &mut RngStream::new(i as u64, "t")).unwrap();
            let near = pts.iter().filter(|p| (p.xy() - obj.translation.xy()).norm() < 0.03).count();
            assert!(near >= 30, "pose {i} at {:?}: {near} object points", obj.translation);
        }
    }
}
