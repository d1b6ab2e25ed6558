//! Coordinate charts over poses.
//!
//! The least-squares solver and the importance sampler both work on a flat
//! coordinate vector. [`TangentChart`] is the full 6-D left-perturbation chart
//! around an anchor pose; [`PlanarChart`] restricts poses to `(x, y, θ)` with a
//! fixed depth and a rotation about the optical axis, which keeps the pose
//! integral small enough to check against dense quadrature.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3, Vector6};

use crate::geometry::{Pose, Twist};

/// Whether a chart axis measures rotation or translation. Used to pick scale floors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisKind {
    Rotation,
    Translation,
}

pub trait PoseChart: Sync {
    fn dim(&self) -> usize;

    fn axis_kinds(&self) -> Vec<AxisKind>;

    /// Pose at chart coordinates.
    fn pose(&self, coords: &DVector<f64>) -> Pose;

    /// Chart coordinates of a pose. Only defined for poses reachable by the chart.
    fn coords(&self, pose: &Pose) -> DVector<f64>;

    /// Moves `pose` by `delta` in chart directions.
    fn retract(&self, pose: &Pose, delta: &DVector<f64>) -> Pose;

    /// 6×dim matrix mapping a chart step at `pose` to the equivalent left twist.
    fn twist_basis(&self, pose: &Pose) -> DMatrix<f64>;
}

/// `ξ ↦ exp(ξ) ∘ anchor`.
#[derive(Clone, Copy, Debug)]
pub struct TangentChart {
    pub anchor: Pose,
}

impl TangentChart {
    pub fn new(anchor: Pose) -> Self {
        Self { anchor }
    }
}

impl PoseChart for TangentChart {
    fn dim(&self) -> usize {
        6
    }

    fn axis_kinds(&self) -> Vec<AxisKind> {
        use AxisKind::*;
        vec![Rotation, Rotation, Rotation, Translation, Translation, Translation]
    }

    fn pose(&self, coords: &DVector<f64>) -> Pose {
        let v = Vector6::from_iterator(coords.iter().copied());
        Pose::exp(&Twist::from_vector(&v)).compose(&self.anchor)
    }

    fn coords(&self, pose: &Pose) -> DVector<f64> {
        let rel = pose.compose(&self.anchor.inverse());
        let v = rel
            .log()
            .map(|t| t.to_vector())
            .unwrap_or_else(|_| Vector6::repeat(f64::NAN));
        DVector::from_iterator(6, v.iter().copied())
    }

    fn retract(&self, pose: &Pose, delta: &DVector<f64>) -> Pose {
        pose.perturb_left(&Vector6::from_iterator(delta.iter().copied()))
    }

    fn twist_basis(&self, _pose: &Pose) -> DMatrix<f64> {
        DMatrix::identity(6, 6)
    }
}

/// Rotation about a point fixed to the model plus a translation of that point,
/// both in camera axes. Rotating about the model instead of the camera origin
/// keeps the valley of a distant, nearly planar target close to straight.
#[derive(Clone, Copy, Debug)]
pub struct PivotChart {
    pub anchor: Pose,
    /// Pivot in model coordinates.
    pub pivot: Vector3<f64>,
}

impl PivotChart {
    pub fn new(anchor: Pose, pivot: Vector3<f64>) -> Self {
        Self { anchor, pivot }
    }
}

impl PoseChart for PivotChart {
    fn dim(&self) -> usize {
        6
    }

    fn axis_kinds(&self) -> Vec<AxisKind> {
        use AxisKind::*;
        vec![Rotation, Rotation, Rotation, Translation, Translation, Translation]
    }

    fn pose(&self, coords: &DVector<f64>) -> Pose {
        self.retract(&self.anchor, coords)
    }

    fn coords(&self, pose: &Pose) -> DVector<f64> {
        let w = (pose.rotation * self.anchor.rotation.inverse()).scaled_axis();
        let v = pose.transform_point(&self.pivot) - self.anchor.transform_point(&self.pivot);
        DVector::from_iterator(6, w.iter().chain(v.iter()).copied())
    }

    fn retract(&self, pose: &Pose, delta: &DVector<f64>) -> Pose {
        let r = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
        let c = pose.transform_point(&self.pivot);
        let rotation = UnitQuaternion::new_normalize((r * pose.rotation).into_inner());
        let translation = c + r * (pose.translation - c) + Vector3::new(delta[3], delta[4], delta[5]);
        Pose::new(rotation, translation)
    }

    fn twist_basis(&self, pose: &Pose) -> DMatrix<f64> {
        // ω = ω', v = v' + c × ω'
        let c = pose.transform_point(&self.pivot);
        let mut b = DMatrix::identity(6, 6);
        b.view_mut((3, 0), (3, 3)).copy_from(&c.cross_matrix());
        b
    }
}

/// `(x, y, θ) ↦ (R_z(θ)·base_rotation, (x, y, depth))`.
#[derive(Clone, Copy, Debug)]
pub struct PlanarChart {
    pub base_rotation: UnitQuaternion<f64>,
    pub depth: f64,
}

impl PlanarChart {
    pub fn new(base_rotation: UnitQuaternion<f64>, depth: f64) -> Self {
        Self {
            base_rotation,
            depth,
        }
    }
}

impl PoseChart for PlanarChart {
    fn dim(&self) -> usize {
        3
    }

    fn axis_kinds(&self) -> Vec<AxisKind> {
        vec![AxisKind::Translation, AxisKind::Translation, AxisKind::Rotation]
    }

    fn pose(&self, c: &DVector<f64>) -> Pose {
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), c[2]) * self.base_rotation;
        Pose::new(r, Vector3::new(c[0], c[1], self.depth))
    }

    fn coords(&self, pose: &Pose) -> DVector<f64> {
        let rel = (pose.rotation * self.base_rotation.inverse()).into_inner();
        let theta = 2.0 * rel.k.atan2(rel.w);
        let theta = (theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        DVector::from_vec(vec![pose.translation.x, pose.translation.y, theta])
    }

    fn retract(&self, pose: &Pose, delta: &DVector<f64>) -> Pose {
        let c = self.coords(pose);
        // keep θ continuous instead of wrapping through coords()
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), delta[2]) * pose.rotation;
        let r = UnitQuaternion::new_normalize(r.into_inner());
        Pose::new(
            r,
            Vector3::new(c[0] + delta[0], c[1] + delta[1], self.depth),
        )
    }

    fn twist_basis(&self, pose: &Pose) -> DMatrix<f64> {
        // ω = θ̇ e_z, v = (ẋ, ẏ, 0) − ω × t
        let t = pose.translation;
        let mut b = DMatrix::zeros(6, 3);
        b[(2, 2)] = 1.0;
        b[(3, 0)] = 1.0;
        b[(4, 1)] = 1.0;
        b[(3, 2)] = t.y;
        b[(4, 2)] = -t.x;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn planar_round_trip() {
        let chart = PlanarChart::new(UnitQuaternion::from_euler_angles(0.3, -0.2, 0.1), 0.5);
        let c = DVector::from_vec(vec![0.01, -0.02, 0.4]);
        let back = chart.coords(&chart.pose(&c));
        assert_relative_eq!(back, c, epsilon = 1e-12);
    }

    #[test]
    fn planar_basis_matches_finite_difference() {
        let chart = PlanarChart::new(UnitQuaternion::from_euler_angles(0.3, -0.2, 0.1), 0.5);
        let pose = chart.pose(&DVector::from_vec(vec![0.03, -0.01, 0.2]));
        let b = chart.twist_basis(&pose);
        let p = Vector3::new(0.02, 0.01, -0.03);
        let h = 1e-6;
        for k in 0..3 {
            let mut d = DVector::zeros(3);
            d[k] = h;
            let plus = chart.retract(&pose, &d).transform_point(&p);
            d[k] = -h;
            let minus = chart.retract(&pose, &d).transform_point(&p);
            let fd = (plus - minus) / (2.0 * h);
            let tw = b.column(k);
            let pc = pose.transform_point(&p);
            let analytic = Vector3::new(tw[0], tw[1], tw[2]).cross(&pc) + Vector3::new(tw[3], tw[4], tw[5]);
            assert_relative_eq!(fd, analytic, epsilon = 1e-8);
        }
    }

    #[test]
    fn pivot_chart_round_trip_and_basis() {
        let anchor = Pose::from_wxyz(0.9, 0.1, -0.3, 0.2, Vector3::new(0.1, 0.0, 0.5));
        let chart = PivotChart::new(anchor, Vector3::new(0.0, 0.0, 0.02));
        let c = DVector::from_vec(vec![0.01, -0.02, 0.03, 0.001, 0.002, -0.003]);
        assert_relative_eq!(chart.coords(&chart.pose(&c)), c, epsilon = 1e-12);
        let pose = chart.pose(&c);
        let b = chart.twist_basis(&pose);
        let p = Vector3::new(0.04, 0.0, 0.01);
        let h = 1e-6;
        for k in 0..6 {
            let mut d = DVector::zeros(6);
            d[k] = h;
            let plus = chart.retract(&pose, &d).transform_point(&p);
            d[k] = -h;
            let minus = chart.retract(&pose, &d).transform_point(&p);
            let fd = (plus - minus) / (2.0 * h);
            let tw = b.column(k);
            let pc = pose.transform_point(&p);
            let analytic = Vector3::new(tw[0], tw[1], tw[2]).cross(&pc) + Vector3::new(tw[3], tw[4], tw[5]);
            assert_relative_eq!(fd, analytic, epsilon = 1e-8);
        }
    }

    #[test]
    fn tangent_round_trip() {
        let anchor = Pose::from_wxyz(0.9, 0.1, -0.3, 0.2, Vector3::new(0.1, 0.0, 0.5));
        let chart = TangentChart::new(anchor);
        let c = DVector::from_vec(vec![0.01, -0.02, 0.03, 0.001, 0.002, -0.003]);
        assert_relative_eq!(chart.coords(&chart.pose(&c)), c, epsilon = 1e-12);
    }
}
