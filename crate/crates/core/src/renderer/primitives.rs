//! Analytic ray/primitive intersection in the primitive's local frame.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Solid primitive shapes, centred on their local origin.
///
/// Cylinders and tubes are aligned with the local z axis. A tube may have an
/// angular gap (a notch cut through its wall) centred on `gap_center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box {
        half: [f64; 3],
    },
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    Tube {
        inner: f64,
        outer: f64,
        half_height: f64,
        gap_center: f64,
        gap_half_width: f64,
    },
    Sphere {
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct LocalHit {
    pub t: f64,
    pub normal: Vector3<f64>,
}

impl Shape {
    pub fn is_valid(&self) -> bool {
        match *self {
            Shape::Box { half } => half.iter().all(|&h| h > 0.0),
            Shape::Cylinder { radius, half_height } => radius > 0.0 && half_height > 0.0,
            Shape::Tube {
                inner,
                outer,
                half_height,
                gap_half_width,
                ..
            } => inner > 0.0 && outer > inner && half_height > 0.0 && gap_half_width >= 0.0,
            Shape::Sphere { radius } => radius > 0.0,
        }
    }

    /// Radius of a bounding sphere about the local origin.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { half } => Vector3::from(half).norm(),
            Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
            Shape::Tube { outer, half_height, .. } => (outer * outer + half_height * half_height).sqrt(),
            Shape::Sphere { radius } => radius,
        }
    }

    /// Nearest intersection with `t` in (t_min, t_max).
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<LocalHit> {
        match *self {
            Shape::Box { half } => intersect_box(o, d, &half, t_min, t_max),
            Shape::Cylinder { radius, half_height } => {
                let mut best: Option<LocalHit> = None;
                side_hits(o, d, radius, half_height, false, t_min, t_max, &mut |h| keep(&mut best, h));
                cap_hits(o, d, 0.0, radius, half_height, t_min, t_max, &mut |h| keep(&mut best, h));
                best
            }
            Shape::Tube {
                inner,
                outer,
                half_height,
                gap_center,
                gap_half_width,
            } => {
                let mut best: Option<LocalHit> = None;
                let in_gap = |p: &Vector3<f64>| {
                    gap_half_width > 0.0 && {
                        let a = p.y.atan2(p.x) - gap_center;
                        let a = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
                        a.abs() < gap_half_width
                    }
                };
                let mut consider = |h: LocalHit| {
                    let p = o + d * h.t;
                    if !in_gap(&p) {
                        keep(&mut best, h);
                    }
                };
                side_hits(o, d, outer, half_height, false, t_min, t_max, &mut consider);
                side_hits(o, d, inner, half_height, true, t_min, t_max, &mut consider);
                cap_hits(o, d, inner, outer, half_height, t_min, t_max, &mut consider);
                best
            }
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                for t in [(-b - s) / a, (-b + s) / a] {
                    if t > t_min && t < t_max {
                        let p = o + d * t;
                        return Some(LocalHit { t, normal: p / radius });
                    }
                }
                None
            }
        }
    }
}

fn keep(best: &mut Option<LocalHit>, h: LocalHit) {
    if best.map_or(true, |b| h.t < b.t) {
        *best = Some(h);
    }
}

fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, half: &[f64; 3], t_min: f64, t_max: f64) -> Option<LocalHit> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis0 = 0usize;
    let mut axis1 = 0usize;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut ta = (-half[a] - o[a]) * inv;
        let mut tb = (half[a] - o[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis0 = a;
        }
        if tb < t1 {
            t1 = tb;
            axis1 = a;
        }
        if t0 > t1 {
            return None;
        }
    }
    let (t, axis) = if t0 > t_min { (t0, axis0) } else { (t1, axis1) };
    if t <= t_min || t >= t_max {
        return None;
    }
    let p = o + d * t;
    let mut n = Vector3::zeros();
    n[axis] = p[axis].signum();
    Some(LocalHit { t, normal: n })
}

#[allow(clippy::too_many_arguments)]
fn side_hits(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    r: f64,
    hh: f64,
    inward: bool,
    t_min: f64,
    t_max: f64,
    f: &mut dyn FnMut(LocalHit),
) {
    let a = d.x * d.x + d.y * d.y;
    if a < 1e-300 {
        return;
    }
    let b = o.x * d.x + o.y * d.y;
    let c = o.x * o.x + o.y * o.y - r * r;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return;
    }
    let s = disc.sqrt();
    for t in [(-b - s) / a, (-b + s) / a] {
        if t > t_min && t < t_max {
            let p = o + d * t;
            if p.z.abs() <= hh {
                let mut n = Vector3::new(p.x / r, p.y / r, 0.0);
                if inward {
                    n = -n;
                }
                f(LocalHit { t, normal: n });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cap_hits(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    r_in: f64,
    r_out: f64,
    hh: f64,
    t_min: f64,
    t_max: f64,
    f: &mut dyn FnMut(LocalHit),
) {
    if d.z.abs() < 1e-300 {
        return;
    }
    for (z, nz) in [(hh, 1.0), (-hh, -1.0)] {
        let t = (z - o.z) / d.z;
        if t > t_min && t < t_max {
            let p = o + d * t;
            let rr = p.x * p.x + p.y * p.y;
            if rr <= r_out * r_out && rr >= r_in * r_in {
                f(LocalHit {
                    t,
                    normal: Vector3::new(0.0, 0.0, nz),
                });
            }
        }
    }
}
