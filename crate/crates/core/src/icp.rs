//! Point-to-point ICP with SVD alignment, a k-d tree for correspondences, and
//! helpers to turn depth images and predicted anchors into clouds and poses.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, CameraModel, Frame, GeometryError, PointCloud, Pose};
use crate::imaging::Image;
use crate::renderer::{Primitive, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("reference cloud is empty")]
    EmptyReference,
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("depth image has no valid pixels")]
    NoValidPixels,
    #[error("invalid init prediction: {0}")]
    InvalidPrediction(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

const LEAF: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over a point set. Nearest-neighbour queries return the lowest
/// index among equidistant points, matching a brute-force scan.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self, IcpError> {
        if points.is_empty() {
            return Err(IcpError::EmptyReference);
        }
        let mut t = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        t.build(0, points.len());
        Ok(t)
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vector3<f64>, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // the split point itself sits in the right subtree, so equality must still descend
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Index of the nearest reference point for each query point.
pub fn nearest_neighbors(query: &PointCloud, reference: &PointCloud) -> Result<Vec<usize>, IcpError> {
    let tree = KdTree::new(&reference.points)?;
    Ok(query.points.iter().map(|q| tree.nearest(q).0).collect())
}

fn kabsch_points(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose, IcpError> {
    if src.len() != dst.len() {
        return Err(IcpError::CountMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(IcpError::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(IcpError::Degenerate)?, svd.v_t.ok_or(IcpError::Degenerate)?);
    let sv = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(sv[idx[0]] > 0.0) || sv[idx[1]] <= 1e-12 * sv[idx[0]] {
        return Err(IcpError::Degenerate);
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(idx[2], idx[2])] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = cd - r * cs;
    Ok(Pose::from_rotation_matrix(&r, t))
}

/// Least-squares rigid transform taking `src` onto `dst` (point i to point i).
pub fn kabsch(src: &PointCloud, dst: &PointCloud) -> Result<Pose, IcpError> {
    kabsch_points(&src.points, &dst.points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop once the RMSE improves by less than this (meters).
    pub tol: f64,
    /// Correspondences farther than this multiple of the median distance are dropped.
    pub reject_factor: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
            reject_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps model-frame points into the scene frame.
    pub pose: Pose,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMSE after initialisation followed by one entry per iteration.
    pub rmse_history: Vec<f64>,
}

fn residuals(tree: &KdTree, scene: &[Vector3<f64>], pose: &Pose) -> (Vec<usize>, Vec<f64>) {
    let inv = pose.inverse();
    let mut idx = Vec::with_capacity(scene.len());
    let mut d2 = Vec::with_capacity(scene.len());
    for s in scene {
        let (i, d) = tree.nearest(&inv.transform_point(s));
        idx.push(i);
        d2.push(d);
    }
    (idx, d2)
}

fn rmse_of(d2: &[f64]) -> f64 {
    (d2.iter().sum::<f64>() / d2.len() as f64).sqrt()
}

pub fn icp_register(model: &PointCloud, scene: &PointCloud, init: &Pose, max_iter: usize, tol: f64) -> Result<IcpResult, IcpError> {
    icp_register_with(
        model,
        scene,
        init,
        &IcpConfig {
            max_iter,
            tol,
            ..IcpConfig::default()
        },
    )
}

/// Scene points are matched to their nearest model point; the k-d tree is built once
/// over the model. Only steps that lower the RMSE are taken.
pub fn icp_register_with(model: &PointCloud, scene: &PointCloud, init: &Pose, cfg: &IcpConfig) -> Result<IcpResult, IcpError> {
    for c in [model, scene] {
        if c.len() < 10 {
            return Err(IcpError::TooFewPoints { needed: 10, got: c.len() });
        }
    }
    let tree = KdTree::new(&model.points)?;
    let mut pose = *init;
    let (mut idx, mut d2) = residuals(&tree, &scene.points, &pose);
    let mut rmse = rmse_of(&d2);
    let mut history = vec![rmse];
    let mut converged = false;
    let mut iterations = 0;
    let mut sorted = Vec::with_capacity(d2.len());
    while iterations < cfg.max_iter {
        iterations += 1;
        sorted.clear();
        sorted.extend_from_slice(&d2);
        let mid = sorted.len() / 2;
        let median2 = *sorted.select_nth_unstable_by(mid, f64::total_cmp).1;
        let limit2 = cfg.reject_factor * cfg.reject_factor * median2;
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for (k, s) in scene.points.iter().enumerate() {
            if d2[k] <= limit2 {
                src.push(model.points[idx[k]]);
                dst.push(*s);
            }
        }
        let candidate = match kabsch_points(&src, &dst) {
            Ok(p) => p,
            Err(IcpError::Degenerate) | Err(IcpError::TooFewPoints { .. }) => {
                history.push(rmse);
                break;
            }
            Err(e) => return Err(e),
        };
        let (cidx, cd2) = residuals(&tree, &scene.points, &candidate);
        let c_rmse = rmse_of(&cd2);
        if c_rmse >= rmse {
            history.push(rmse);
            converged = true;
            break;
        }
        let improvement = rmse - c_rmse;
        pose = candidate;
        idx = cidx;
        d2 = cd2;
        rmse = c_rmse;
        history.push(rmse);
        if improvement < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        pose,
        rmse,
        iterations,
        converged,
        rmse_history: history,
    })
}

/// Learned guess of the object anchor in the image plus its yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPrediction {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub theta: f64,
}

/// Object pose in the world from an anchor prediction: the anchor is backprojected
/// through the camera mount and end-effector pose, and the yaw is about world z.
pub fn init_pose_from_prediction(pred: &InitPrediction, cam: &CameraModel, ee_pose: &Pose) -> Result<Pose, IcpError> {
    if !(pred.depth > 0.0) || !pred.depth.is_finite() {
        return Err(IcpError::InvalidPrediction(format!("depth {}", pred.depth)));
    }
    if !(pred.u.is_finite() && pred.v.is_finite() && pred.theta.is_finite()) {
        return Err(IcpError::InvalidPrediction("non-finite value".into()));
    }
    let p_cam = cam.backproject(pred.u, pred.v, pred.depth)?;
    let p = cam.world_pose(ee_pose).transform_point(&p_cam);
    Ok(Pose::from_xyz_yaw(p.x, p.y, p.z, wrap_angle(pred.theta)))
}

/// Which backprojected points to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudFilter {
    All,
    /// World-frame height band, used to drop the table plane.
    HeightBand { min_z: f64, max_z: f64 },
}

/// Least-squares plane `z = a·x + b·y + c` through `pts`.
pub fn fit_height_plane(pts: &[Vector3<f64>]) -> Option<[f64; 3]> {
    if pts.len() < 3 {
        return None;
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in pts {
        let r = Vector3::new(p.x, p.y, 1.0);
        ata += r * r.transpose();
        atb += r * p.z;
    }
    let s = ata.lu().solve(&atb)?;
    Some([s.x, s.y, s.z])
}

/// Points whose height above the dominant near-horizontal plane lies in `[min_h, max_h]`.
/// The plane is fitted to points with |z| < `seed_band` and refined by trimming outliers;
/// when too few seed points exist the world z is used directly.
pub fn above_support_plane(pts: &[Vector3<f64>], seed_band: f64, min_h: f64, max_h: f64) -> Vec<Vector3<f64>> {
    let mut support: Vec<Vector3<f64>> = pts.iter().filter(|p| p.z.abs() < seed_band).copied().collect();
    let mut plane = [0.0, 0.0, 0.0];
    if support.len() >= 50 {
        for keep in [0.004, 0.002, 0.0015] {
            let Some(fit) = fit_height_plane(&support) else { break };
            plane = fit;
            support.retain(|p| (p.z - plane[0] * p.x - plane[1] * p.y - plane[2]).abs() < keep);
            if support.len() < 50 {
                break;
            }
        }
    }
    pts.iter()
        .filter(|p| {
            let h = p.z - plane[0] * p.x - plane[1] * p.y - plane[2];
            h >= min_h && h <= max_h
        })
        .copied()
        .collect()
}

/// World-frame cloud from every nonzero depth pixel.
pub fn depth_to_cloud(depth: &Image, cam: &CameraModel, ee_pose: &Pose, filter: CloudFilter) -> Result<PointCloud, IcpError> {
    let to_world = cam.world_pose(ee_pose);
    let mut pts = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = depth.get(y, x, 0) as f64;
            if d <= 0.0 {
                continue;
            }
            let p = to_world.transform_point(&cam.backproject(x as f64, y as f64, d)?);
            let keep = match filter {
                CloudFilter::All => true,
                CloudFilter::HeightBand { min_z, max_z } => p.z >= min_z && p.z <= max_z,
            };
            if keep {
                pts.push(p);
            }
        }
    }
    if pts.is_empty() {
        return Err(IcpError::NoValidPixels);
    }
    Ok(PointCloud::new(pts, Frame::world())?)
}

fn shape_faces(shape: &Shape) -> Vec<f64> {
    use std::f64::consts::PI;
    match *shape {
        Shape::Box { half: [a, b, c] } => vec![4.0 * b * c, 4.0 * b * c, 4.0 * a * c, 4.0 * a * c, 4.0 * a * b, 4.0 * a * b],
        Shape::Cylinder { radius, half_height } => vec![2.0 * PI * radius * 2.0 * half_height, PI * radius * radius, PI * radius * radius],
        Shape::Tube {
            inner,
            outer,
            half_height,
            gap_half_width,
            ..
        } => {
            let keep = 1.0 - gap_half_width / PI;
            let cap = PI * (outer * outer - inner * inner) * keep;
            vec![2.0 * PI * outer * 2.0 * half_height * keep, 2.0 * PI * inner * 2.0 * half_height * keep, cap, cap]
        }
        Shape::Sphere { radius } => vec![4.0 * PI * radius * radius],
    }
}

fn sample_face(shape: &Shape, face: usize, rng: &mut impl Rng) -> Option<Vector3<f64>> {
    use std::f64::consts::{PI, TAU};
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let p = match *shape {
        Shape::Box { half } => {
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = Vector3::new(u(-half[0], half[0]), u(-half[1], half[1]), u(-half[2], half[2]));
            p[axis] = sign * half[axis];
            p
        }
        Shape::Cylinder { radius, half_height } => {
            let a = u(0.0, TAU);
            match face {
                0 => Vector3::new(radius * a.cos(), radius * a.sin(), u(-half_height, half_height)),
                _ => {
                    let r = radius * u(0.0, 1.0).sqrt();
                    Vector3::new(r * a.cos(), r * a.sin(), if face == 1 { half_height } else { -half_height })
                }
            }
        }
        Shape::Tube {
            inner,
            outer,
            half_height,
            gap_center,
            gap_half_width,
        } => {
            let a = u(0.0, TAU);
            if gap_half_width > 0.0 && wrap_angle(a - gap_center).abs() < gap_half_width {
                return None;
            }
            match face {
                0 => Vector3::new(outer * a.cos(), outer * a.sin(), u(-half_height, half_height)),
                1 => Vector3::new(inner * a.cos(), inner * a.sin(), u(-half_height, half_height)),
                _ => {
                    let r = (u(inner * inner, outer * outer)).sqrt();
                    Vector3::new(r * a.cos(), r * a.sin(), if face == 2 { half_height } else { -half_height })
                }
            }
        }
        Shape::Sphere { radius } => {
            let z = u(-1.0, 1.0);
            let a = u(0.0, 2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            Vector3::new(radius * r * a.cos(), radius * r * a.sin(), radius * z)
        }
    };
    Some(p)
}

/// Area-uniform samples over the surfaces of `prims`, expressed in their parent frame.
pub fn sample_surface(prims: &[Primitive], n: usize, frame: Frame, rng: &mut impl Rng) -> PointCloud {
    let mut faces = Vec::new();
    for (pi, p) in prims.iter().enumerate() {
        for (fi, a) in shape_faces(&p.shape).into_iter().enumerate() {
            faces.push((pi, fi, a));
        }
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let mut r = rng.gen_range(0.0..total);
        let mut pick = faces[faces.len() - 1];
        for f in &faces {
            if r < f.2 {
                pick = *f;
                break;
            }
            r -= f.2;
        }
        let prim = &prims[pick.0];
        if let Some(p) = sample_face(&prim.shape, pick.1, rng) {
            pts.push(prim.pose.transform_point(&p));
        }
    }
    PointCloud { points: pts, frame }
}
