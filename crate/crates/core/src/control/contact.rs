//! Quasi-static insertion kinematics: the ring moves as commanded until it would
//! overlap the peg, its key or the table, then stops at the contact and slides
//! along the blocking surface.

use nalgebra::Vector2;

use crate::geometry::{wrap_angle, Pose};
use crate::tasks::{RingState, TaskSpec};

const LATERAL_STEP: f64 = 2e-4;
const YAW_STEP: f64 = 2e-3;

/// Highest (when descending) or lowest (when lifting) reachable ring height on
/// the way from `s.z` to `z_to` at fixed lateral offset and yaw.
fn vertical_limit(task: &TaskSpec, s: &RingState, z_to: f64) -> f64 {
    let at = |z: f64| task.feasible(&RingState { z, ..*s });
    let mut stops: Vec<f64> = task.breakpoints().into_iter().filter(|&b| b > s.z.min(z_to) && b < s.z.max(z_to)).collect();
    if z_to >= s.z {
        stops.sort_by(f64::total_cmp);
    } else {
        stops.sort_by(|a, b| b.total_cmp(a));
    }
    stops.push(z_to);
    let mut from = s.z;
    for b in stops {
        if !at(0.5 * (from + b)) {
            return from;
        }
        from = b;
    }
    z_to
}

fn offset(s: &RingState, d: [f64; 3], f: f64) -> RingState {
    RingState {
        x: s.x + d[0] * f,
        y: s.y + d[1] * f,
        yaw: s.yaw + d[2] * f,
        ..*s
    }
}

/// Moves along `d` (x, y, yaw) and stops just before the first infeasible point.
fn advance(task: &TaskSpec, s: &RingState, d: [f64; 3]) -> (RingState, bool) {
    let n = ((d[0].hypot(d[1]) / LATERAL_STEP).max(d[2].abs() / YAW_STEP).ceil() as usize).max(1);
    for i in 1..=n {
        let f = i as f64 / n as f64;
        if !task.feasible(&offset(s, d, f)) {
            let (mut lo, mut hi) = ((i - 1) as f64 / n as f64, f);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if task.feasible(&offset(s, d, mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return (offset(s, d, lo), false);
        }
    }
    (offset(s, d, 1.0), true)
}

/// Unit direction in the lateral plane pointing away from the surface the ring touches.
fn free_normal(task: &TaskSpec, s: &RingState) -> Vector2<f64> {
    let e = s.offset();
    if task.clearance(&e, s.yaw) >= -1e-12 {
        let h = 1e-7;
        let c = |d: Vector2<f64>| task.clearance(&(e + d), s.yaw);
        let g = Vector2::new(c(Vector2::x() * h) - c(-Vector2::x() * h), c(Vector2::y() * h) - c(-Vector2::y() * h));
        g.try_normalize(1e-15).unwrap_or_else(Vector2::zeros)
    } else {
        e.try_normalize(1e-15).unwrap_or_else(Vector2::zeros)
    }
}

/// Spends the lateral residual `r` moving tangentially along whatever blocks it,
/// with a slight bias away from the surface so curved walls do not pin the ring.
fn slide(task: &TaskSpec, mut s: RingState, mut r: Vector2<f64>) -> RingState {
    for _ in 0..256 {
        let n = free_normal(task, &s);
        let rn = r.dot(&n);
        if rn < 0.0 {
            r -= n * rn;
        }
        let len = r.norm();
        if len < 1e-9 {
            break;
        }
        let mut step = r * (LATERAL_STEP.min(len) / len);
        if rn < 0.0 {
            step += n * (0.05 * step.norm());
        }
        let (next, _) = advance(task, &s, [step.x, step.y, 0.0]);
        let moved = next.offset() - s.offset();
        if moved.norm() < 1e-10 {
            break;
        }
        r -= moved;
        s = next;
    }
    s
}

/// Corrects a commanded end-effector pose for contact with the peg and table.
/// `current` must be contact-free; the result always is.
pub fn contact_model(task: &TaskSpec, object: &Pose, current: &Pose, proposed: &Pose) -> Pose {
    let s0 = RingState::of(object, current);
    if !task.feasible(&s0) {
        return *current;
    }
    let s1 = RingState::of(object, proposed);
    let z = vertical_limit(task, &s0, s1.z);
    let s = RingState { z, ..s0 };
    let want = [s1.x - s0.x, s1.y - s0.y, wrap_angle(s1.yaw - s0.yaw)];
    let (mut s, done) = advance(task, &s, want);
    if !done {
        s = slide(task, s, Vector2::new(s0.x + want[0] - s.x, s0.y + want[1] - s.y));
        s = advance(task, &s, [0.0, 0.0, s0.yaw + want[2] - s.yaw]).0;
    }
    s.yaw = wrap_angle(s.yaw);
    s.to_ee(object)
}
