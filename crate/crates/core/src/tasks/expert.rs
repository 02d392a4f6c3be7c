//! Privileged scripted experts: align over the peg axis, descend, and for the
//! screw task twist once seated.

use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{symmetric_yaw_error, RingState, TaskKind, TaskSpec};
use crate::geometry::{Pose, SpeedCap, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Proportional gain on lateral, height and yaw errors (1/s).
    pub gain: f64,
    pub descend_speed: f64,
    pub align_tolerance: f64,
    pub align_angle: f64,
    /// Ring height above the peg top held while aligning.
    pub approach_height: f64,
    pub cap: SpeedCap,
    /// Radius of the random detour around the midpoint of the lateral path.
    pub waypoint_radius: f64,
    pub waypoint_tolerance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            gain: 2.0,
            descend_speed: 0.03,
            align_tolerance: 0.003,
            align_angle: 3f64.to_radians(),
            approach_height: 0.03,
            cap: SpeedCap {
                linear: 0.05,
                angular: 0.5,
            },
            waypoint_radius: 0.01,
            waypoint_tolerance: 0.002,
        }
    }
}

impl ExpertConfig {
    /// Variant for runs that start from the neutral pose far above the table.
    pub fn end_to_end() -> Self {
        Self {
            cap: SpeedCap {
                linear: 0.10,
                angular: 0.5,
            },
            ..Self::default()
        }
    }
}

/// Per-run expert memory: the pending detour waypoint in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExpertState {
    pub waypoint: Option<Vector2<f64>>,
}

impl ExpertState {
    /// Picks a detour within `waypoint_radius` of the midpoint between the start
    /// offset and the peg axis.
    pub fn new(object: &Pose, ee: &Pose, cfg: &ExpertConfig, rng: &mut impl Rng) -> Self {
        let s = RingState::of(object, ee);
        if cfg.waypoint_radius <= 0.0 {
            return Self { waypoint: None };
        }
        let r = cfg.waypoint_radius * rng.gen_range(0.0f64..1.0).sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            waypoint: Some(s.offset() * 0.5 + Vector2::new(r * a.cos(), r * a.sin())),
        }
    }
}

/// Expert twist in the end-effector frame.
pub fn expert_action(task: &TaskSpec, object: &Pose, ee: &Pose, cfg: &ExpertConfig, state: &mut ExpertState) -> Twist {
    let s = RingState::of(object, ee);
    let g = cfg.gain;
    let seated = s.z <= -task.peg_height + 1e-3 && task.clearance(&s.offset(), s.yaw) >= 0.0;
    let yaw_err = match task.kind {
        TaskKind::Screw if seated => task.twist_target - s.yaw,
        _ => -symmetric_yaw_error(task, s.yaw),
    };

    let mut target = Vector2::zeros();
    if let Some(w) = state.waypoint {
        if s.z < 0.0 || (s.offset() - w).norm() < cfg.waypoint_tolerance {
            state.waypoint = None;
        } else {
            target = w;
        }
    }
    let lateral = target - s.offset();
    let aligned = lateral.norm() < cfg.align_tolerance && yaw_err.abs() < cfg.align_angle;
    let vz = if state.waypoint.is_some() {
        g * (cfg.approach_height - s.z)
    } else if s.z < 0.0 || aligned || seated {
        -cfg.descend_speed
    } else {
        g * (cfg.approach_height - s.z)
    };
    let v_obj = lateral * g;
    // object-frame velocity into the end-effector frame: rotate by −relative yaw
    let (sn, cs) = (-s.yaw).sin_cos();
    let vx = cs * v_obj.x - sn * v_obj.y;
    let vy = sn * v_obj.x + cs * v_obj.y;
    Twist::new(vx, vy, vz, g * yaw_err).clipped(&cfg.cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::contact_model;
    use crate::tasks::SamplingSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_detour() -> ExpertConfig {
        ExpertConfig {
            waypoint_radius: 0.0,
            ..ExpertConfig::default()
        }
    }

    #[test]
    fn aligned_descends_and_offset_pulls_back() {
        let task = TaskSpec::round();
        let obj = Pose::from_xyz_yaw(0.1, 0.0, 0.04, 0.4);
        let ee = obj.compose(&Pose::from_translation(0.0, 0.0, 0.03));
        let mut st = ExpertState::default();
        let a = expert_action(&task, &obj, &ee, &no_detour(), &mut st);
        assert!(a.vx.abs() < 1e-12 && a.vy.abs() < 1e-12 && a.alpha.abs() < 1e-12);
        assert!((a.vz + 0.03).abs() < 1e-12);
        let ee = obj.compose(&Pose::from_translation(0.01, 0.0, 0.03));
        let a = expert_action(&task, &obj, &ee, &no_detour(), &mut st);
        assert!(a.vx < 0.0 && a.vx.abs() > 10.0 * a.vy.abs().max(a.vz.abs()));
    }

    #[test]
    fn labels_respect_cap() {
        let task = TaskSpec::square(0.0005);
        let obj = Pose::from_xyz_yaw(0.0, 0.0, 0.04, 0.0);
        let cfg = ExpertConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let ee = obj.compose(&Pose::from_xyz_yaw(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.2), rng.gen_range(-1.0..1.0)));
            let mut st = ExpertState::new(&obj, &ee, &cfg, &mut rng);
            assert!(expert_action(&task, &obj, &ee, &cfg, &mut st).within(&cfg.cap));
        }
    }

    /// Noiseless closed-loop rollouts from the demonstration start volume.
    pub(crate) fn rollout_success(task: &TaskSpec, seeds: std::ops::Range<u64>) -> usize {
        let cfg = ExpertConfig::default();
        let sampling = SamplingSpec::default();
        let mut ok = 0;
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = Pose::from_xyz_yaw(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), task.peg_height, rng.gen_range(-0.45..0.45));
            let mut ee = obj.compose(&crate::tasks::bottleneck_offset()).compose(&sampling.demo_offset(&mut rng));
            let mut st = ExpertState::new(&obj, &ee, &cfg, &mut rng);
            for _ in 0..400 {
                if task.success(&RingState::of(&obj, &ee)) {
                    break;
                }
                let a = expert_action(task, &obj, &ee, &cfg, &mut st);
                ee = contact_model(task, &obj, &ee, &a.integrate(&ee, 0.05));
            }
            ok += task.success(&RingState::of(&obj, &ee)) as usize;
        }
        ok
    }

    #[test]
    fn experts_complete_every_task() {
        for task in [TaskSpec::round(), TaskSpec::screw(), TaskSpec::square(0.0005)] {
            assert_eq!(rollout_success(&task, 0..20), 20, "{:?}", task.kind);
        }
    }
}
