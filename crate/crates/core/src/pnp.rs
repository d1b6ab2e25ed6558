//! Confidence-weighted PnP.
//!
//! The cost is `½ Σ ‖w ⊙ E(y)‖²` with `E(y) = π(y · p3d) − p2d`, minimized with
//! Levenberg-Marquardt in a pose chart. [`multi_start_solve`] runs several
//! starts because four coplanar points leave the cost with competing minima.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3x6, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::Rng;
use std::f64::consts::PI;

use crate::chart::{PivotChart, PoseChart};
use crate::error::{Error, Result};
use crate::geometry::{project, skew, CameraIntrinsics, Pose, MIN_DEPTH};
use crate::rng::stream_rng;

/// Residual substituted for each coordinate of a point behind the camera, pixels.
pub const BEHIND_CAMERA_PENALTY: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Observed keypoint, pixels.
    pub p2d: Vector2<f64>,
    /// Model point, meters, in the object (gripper) frame.
    pub p3d: Vector3<f64>,
    /// Per-coordinate confidence, 1/pixels.
    pub w2d: Vector2<f64>,
}

impl Correspondence {
    pub fn new(p2d: Vector2<f64>, p3d: Vector3<f64>, w2d: Vector2<f64>) -> Self {
        Self { p2d, p3d, w2d }
    }

    pub fn is_valid(&self) -> bool {
        self.w2d.iter().all(|w| *w >= 0.0 && w.is_finite())
            && self.p2d.iter().all(|v| v.is_finite())
            && self.p3d.iter().all(|v| v.is_finite())
    }

    fn usable(&self) -> bool {
        self.w2d.x > 0.0 && self.w2d.y > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub items: Vec<Correspondence>,
    pub intrinsics: CameraIntrinsics,
}

impl CorrespondenceSet {
    pub fn new(items: Vec<Correspondence>, intrinsics: CameraIntrinsics) -> Self {
        Self { items, intrinsics }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Correspondences with strictly positive weight on both coordinates.
    pub fn usable_count(&self) -> usize {
        self.items.iter().filter(|c| c.usable()).count()
    }

    /// Same correspondences with every weight multiplied by `s`.
    pub fn scaled_weights(&self, s: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.items {
            c.w2d *= s;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_tol: f64,
    pub grad_tol: f64,
    pub n_starts: usize,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Depth used for the first start when it cannot be inferred from the keypoints, meters.
    pub default_depth: f64,
    /// Half-range of the random start rotations, degrees.
    pub start_rotation_deg: f64,
    /// Half-range of the random start translations per axis, meters.
    pub start_translation: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            step_tol: 1e-10,
            grad_tol: 1e-9,
            n_starts: 8,
            lambda_init: 1e-3,
            lambda_min: 1e-12,
            lambda_max: 1e6,
            default_depth: 0.5,
            start_rotation_deg: 40.0,
            start_translation: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub pose: Pose,
    /// `½ Σ ‖w ⊙ E‖²` at `pose`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
}

/// Reprojection residual `π(y · p3d) − p2d`, pixels. Points at or behind the
/// camera plane get [`BEHIND_CAMERA_PENALTY`] on both coordinates.
pub fn reproj_error(c: &Correspondence, k: &CameraIntrinsics, y: &Pose) -> Vector2<f64> {
    let p = y.transform_point(&c.p3d);
    match project(k, &p) {
        Ok(px) => px - c.p2d,
        Err(_) => Vector2::repeat(BEHIND_CAMERA_PENALTY),
    }
}

/// `½ Σ ‖w ⊙ E(y)‖²`.
pub fn weighted_cost(x: &CorrespondenceSet, y: &Pose) -> f64 {
    0.5 * x
        .items
        .iter()
        .map(|c| c.w2d.component_mul(&reproj_error(c, &x.intrinsics, y)).norm_squared())
        .sum::<f64>()
}

/// Weighted residuals and their derivatives with respect to a left twist at `y`.
#[derive(Clone, Debug)]
pub struct CostJacobian {
    /// `w ⊙ E`, stacked `[x0, y0, x1, y1, …]`.
    pub residuals: DVector<f64>,
    /// 2N × 6.
    pub jacobian: DMatrix<f64>,
    /// `Jᵀ r`, the gradient of the cost.
    pub gradient: Vector6<f64>,
    pub cost: f64,
}

/// Derivative of the camera-frame point with respect to a left twist `(ω, v)`.
pub(crate) fn point_twist_jacobian(p_cam: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(p_cam)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
    j
}

pub(crate) fn projection_jacobian(k: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    )
}

pub fn cost_jacobian(x: &CorrespondenceSet, y: &Pose) -> CostJacobian {
    let n = x.items.len();
    let mut residuals = DVector::zeros(2 * n);
    let mut jacobian = DMatrix::zeros(2 * n, 6);
    let k = &x.intrinsics;
    for (i, c) in x.items.iter().enumerate() {
        let p = y.transform_point(&c.p3d);
        if p.z <= MIN_DEPTH {
            let r = c.w2d * BEHIND_CAMERA_PENALTY;
            residuals[2 * i] = r.x;
            residuals[2 * i + 1] = r.y;
            continue;
        }
        let e = project(k, &p).expect("depth checked") - c.p2d;
        let j = projection_jacobian(k, &p) * point_twist_jacobian(&p);
        for d in 0..2 {
            residuals[2 * i + d] = c.w2d[d] * e[d];
            for col in 0..6 {
                jacobian[(2 * i + d, col)] = c.w2d[d] * j[(d, col)];
            }
        }
    }
    let g = jacobian.tr_mul(&residuals);
    CostJacobian {
        cost: 0.5 * residuals.norm_squared(),
        gradient: Vector6::from_iterator(g.iter().copied()),
        residuals,
        jacobian,
    }
}

fn check_solvable(x: &CorrespondenceSet) -> Result<()> {
    if let Some(bad) = x.items.iter().position(|c| !c.is_valid()) {
        return Err(Error::InvalidArgument(format!(
            "correspondence {bad} has negative or non-finite entries"
        )));
    }
    let usable = x.usable_count();
    if usable < 4 {
        return Err(Error::Underdetermined { usable });
    }
    Ok(())
}

/// Gauss-Newton normal equations `(JᵀJ, Jᵀr)` in chart coordinates at `pose`.
pub(crate) fn normal_equations<C: PoseChart>(
    x: &CorrespondenceSet,
    pose: &Pose,
    chart: &C,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let cj = cost_jacobian(x, pose);
    let j = &cj.jacobian * chart.twist_basis(pose);
    (j.tr_mul(&j), j.tr_mul(&cj.residuals), cj.cost)
}

/// Levenberg-Marquardt on the weighted cost in an arbitrary chart.
pub fn solve_in_chart<C: PoseChart>(
    x: &CorrespondenceSet,
    init: &Pose,
    cfg: &SolverConfig,
    chart: &C,
) -> Result<SolveReport> {
    check_solvable(x)?;
    let dim = chart.dim();
    let mut pose = *init;
    let (mut h, mut g, mut cost) = normal_equations(x, &pose, chart);
    if !cost.is_finite() {
        return Err(Error::NumericalFailure("non-finite initial cost".into()));
    }
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        if g.norm() < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dmax = h.diagonal().max();
        let mut a = h.clone();
        for i in 0..dim {
            a[(i, i)] += lambda * h[(i, i)].max(1e-12 * dmax.max(1e-300));
        }
        let Some(chol) = a.cholesky() else {
            lambda = (lambda * 10.0).min(cfg.lambda_max);
            continue;
        };
        let delta = -chol.solve(&g);
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite step".into()));
        }
        let step = delta.norm();
        let candidate = chart.retract(&pose, &delta);
        let new_cost = weighted_cost(x, &candidate);
        if !new_cost.is_finite() {
            return Err(Error::NumericalFailure("non-finite cost".into()));
        }
        if new_cost <= cost {
            pose = candidate;
            lambda = (lambda / 10.0).max(cfg.lambda_min);
            (h, g, cost) = normal_equations(x, &pose, chart);
            if step < cfg.step_tol {
                converged = true;
                break;
            }
        } else {
            lambda = (lambda * 10.0).min(cfg.lambda_max);
            if step < cfg.step_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(SolveReport {
        pose,
        cost,
        iterations,
        converged,
        restart_index: 0,
    })
}

/// Levenberg-Marquardt over the full pose from `init`, stepping in a chart
/// that rotates about the centroid of the model points.
pub fn solve_pnp(x: &CorrespondenceSet, init: &Pose, cfg: &SolverConfig) -> Result<SolveReport> {
    let n = x.items.len().max(1) as f64;
    let centroid = x.items.iter().map(|c| c.p3d).sum::<Vector3<f64>>() / n;
    solve_in_chart(x, init, cfg, &PivotChart::new(*init, centroid))
}

/// First start of [`multi_start_solve`]: the model plane turned to face the
/// camera, then rotated in the image plane and pushed to the depth that best
/// match the observed keypoints under a weak-perspective approximation.
pub fn facing_start(x: &CorrespondenceSet, cfg: &SolverConfig) -> Pose {
    let items: Vec<&Correspondence> = x.items.iter().filter(|c| c.usable()).collect();
    let items = if items.is_empty() {
        x.items.iter().collect()
    } else {
        items
    };
    let n = items.len().max(1) as f64;
    let k = &x.intrinsics;
    let c3 = items.iter().map(|c| c.p3d).sum::<Vector3<f64>>() / n;
    let c2 = items.iter().map(|c| c.p2d).sum::<Vector2<f64>>() / n;

    let centered = DMatrix::from_fn(3, items.len(), |r, col| items[col].p3d[r] - c3[r]);
    let normal = centered
        .clone()
        .svd(true, false)
        .u
        .and_then(|u| {
            let v = Vector3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]);
            (v.norm() > 0.5).then_some(v)
        })
        .filter(|_| items.len() >= 3)
        .unwrap_or_else(Vector3::z);

    let mut best: Option<(f64, Pose)> = None;
    for sign in [1.0, -1.0] {
        let facing = UnitQuaternion::rotation_between(&(normal * sign), &(-Vector3::z()))
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI));
        let a: Vec<Vector2<f64>> = items
            .iter()
            .map(|c| (facing * (c.p3d - c3)).xy())
            .collect();
        let b: Vec<Vector2<f64>> = items
            .iter()
            .map(|c| {
                let d = c.p2d - c2;
                Vector2::new(d.x / k.fx, d.y / k.fy)
            })
            .collect();
        let (mut dot, mut cross, mut aa) = (0.0, 0.0, 0.0);
        for (ai, bi) in a.iter().zip(b.iter()) {
            dot += ai.dot(bi);
            cross += ai.x * bi.y - ai.y * bi.x;
            aa += ai.norm_squared();
        }
        let phi = cross.atan2(dot);
        let scale = (dot * dot + cross * cross).sqrt() / aa;
        let depth = if scale.is_finite() && scale > 1e-9 {
            (1.0 / scale).clamp(0.05, 20.0)
        } else {
            cfg.default_depth
        };
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), phi) * facing;
        let (s, c) = phi.sin_cos();
        let resid: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(ai, bi)| {
                let r = Vector2::new(c * ai.x - s * ai.y, s * ai.x + c * ai.y) * scale;
                (r - bi).norm_squared()
            })
            .sum();
        let t = k.back_project(&c2, depth) - rot * c3;
        let pose = Pose::new(rot, t);
        if best.as_ref().is_none_or(|(r, _)| resid < *r) {
            best = Some((resid, pose));
        }
    }
    best.map(|(_, p)| p).unwrap_or_else(|| {
        Pose::from_translation(Vector3::new(0.0, 0.0, cfg.default_depth))
    })
}

/// Start `index` of the multi-start scheme. Index 0 is [`facing_start`]; the
/// rest rotate it about the model centroid by a random angle up to
/// `start_rotation_deg` and shift it by up to `start_translation` per axis.
pub fn start_pose(x: &CorrespondenceSet, cfg: &SolverConfig, base: &Pose, seed: u64, index: usize) -> Pose {
    if index == 0 {
        return *base;
    }
    let mut rng = stream_rng(seed, index as u64);
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let max = cfg.start_rotation_deg.to_radians();
    let angle = rng.random_range(-max..=max);
    let dt = Vector3::from_fn(|_, _| rng.random_range(-cfg.start_translation..=cfg.start_translation));
    let n = x.items.len().max(1) as f64;
    let c3 = x.items.iter().map(|c| c.p3d).sum::<Vector3<f64>>() / n;
    let r = UnitQuaternion::from_scaled_axis(axis * angle);
    let center = base.transform_point(&c3);
    let rot = r * base.rotation;
    let mut t = center - rot * c3 + dt;
    // keep the start in front of the camera
    let front = t + rot * c3;
    if front.z < 0.05 {
        t.z += 0.05 - front.z;
    }
    Pose::new(rot, t)
}

/// The planar twin of `pose`: the model configuration reflected through the
/// plane perpendicular to the line of sight, composed with the reflection in
/// the model plane so the result is a proper rotation. Under weak perspective
/// both poses give the same image, so LM started from one tends to stay on its
/// side of the ambiguity.
pub fn mirror_pose(x: &CorrespondenceSet, pose: &Pose) -> Option<Pose> {
    let items: Vec<&Correspondence> = x.items.iter().filter(|c| c.usable()).collect();
    if items.len() < 3 {
        return None;
    }
    let n = items.len() as f64;
    let c3 = items.iter().map(|c| c.p3d).sum::<Vector3<f64>>() / n;
    let centered = DMatrix::from_fn(3, items.len(), |r, col| items[col].p3d[r] - c3[r]);
    let u = centered.svd(true, false).u?;
    let m = Vector3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]).normalize();
    let q = pose.transform_point(&c3);
    if q.z <= MIN_DEPTH {
        return None;
    }
    let v = q.normalize();
    let hv = nalgebra::Matrix3::identity() - 2.0 * v * v.transpose();
    let hm = nalgebra::Matrix3::identity() - 2.0 * m * m.transpose();
    let r = hv * pose.rotation_matrix() * hm;
    let rot = UnitQuaternion::from_matrix(&r);
    Some(Pose::new(rot, q - rot * c3))
}

/// Runs [`solve_pnp`] from `cfg.n_starts` starts and keeps the lowest-cost
/// converged result (earliest start on ties). One more solve from the
/// [`mirror_pose`] of the winner follows; its `restart_index` is `n_starts`.
pub fn multi_start_solve(x: &CorrespondenceSet, cfg: &SolverConfig, seed: u64) -> Result<SolveReport> {
    check_solvable(x)?;
    let base = facing_start(x, cfg);
    let n_starts = cfg.n_starts.max(1);
    let mut best: Option<SolveReport> = None;
    let mut last_err = None;
    let mut consider = |init: Pose, i: usize, best: &mut Option<SolveReport>| match solve_pnp(x, &init, cfg) {
        Ok(mut r) if r.converged => {
            r.restart_index = i;
            if best.as_ref().is_none_or(|b| r.cost < b.cost) {
                *best = Some(r);
            }
        }
        Ok(_) => {}
        Err(e) => last_err = Some(e),
    };
    for i in 0..n_starts {
        consider(start_pose(x, cfg, &base, seed, i), i, &mut best);
    }
    if let Some(twin) = best.as_ref().and_then(|b| mirror_pose(x, &b.pose)) {
        consider(twin, n_starts, &mut best);
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e @ Error::Underdetermined { .. })) => Err(e),
        _ => Err(Error::NoConvergentSolution),
    }
}
