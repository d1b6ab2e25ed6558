//! Rigid-body algebra, the pinhole camera and the gripper keypoint model.
//!
//! Poses store rotation as a unit quaternion. Optimization and sampling work in
//! the 6-D tangent space through [`Pose::exp`] / [`Pose::log`], with twists
//! ordered rotation first: `(ω, v)`. Perturbations are applied on the left,
//! `exp(δ) ∘ y`, so they act in the camera frame.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Minimum depth accepted by [`project`], meters.
pub const MIN_DEPTH: f64 = 1e-6;

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Tangent vector of SE(3): rotational part in radians, translational part in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Angle of a unit quaternion's rotation, in `[0, π]`.
pub fn quaternion_angle(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion coefficients, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, t: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
            t,
        )
    }

    /// Quaternion coefficients in `(w, x, y, z)` order.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner());
        let translation = self.rotation * other.translation + self.translation;
        Pose::new(rotation, translation)
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose::new(rinv, -(rinv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle of this pose, radians in `[0, π]`.
    pub fn angle(&self) -> f64 {
        quaternion_angle(&self.rotation)
    }

    /// Geodesic distance between the rotations of two poses, radians.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        quaternion_angle(&(self.rotation.inverse() * other.rotation))
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Exponential map of SE(3).
    pub fn exp(twist: &Twist) -> Pose {
        let w = twist.omega;
        let theta = w.norm();
        let rotation = UnitQuaternion::from_scaled_axis(w);
        let k = skew(&w);
        let (a, b) = if theta < 1e-4 {
            let t2 = theta * theta;
            (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
        };
        let v = Matrix3::identity() + k * a + k * k * b;
        Pose::new(rotation, v * twist.v)
    }

    /// Logarithm map of SE(3); fails at a rotation angle of π where the axis is ambiguous.
    pub fn log(&self) -> Result<Twist> {
        let theta = self.angle();
        if PI - theta < 1e-12 {
            return Err(Error::LogMapSingular);
        }
        // scaled_axis picks the short way round, consistent with `theta` above
        let q = self.rotation.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        let imag = q.imag() * sign;
        let s = imag.norm();
        let omega = if s < 1e-300 {
            Vector3::zeros()
        } else {
            imag * (theta / s)
        };
        let k = skew(&omega);
        let c = if theta < 1e-4 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
        };
        let vinv = Matrix3::identity() - k * 0.5 + k * k * c;
        Ok(Twist::new(omega, vinv * self.translation))
    }

    /// Left perturbation `exp(δ) ∘ self`.
    pub fn perturb_left(&self, delta: &Vector6<f64>) -> Pose {
        Pose::exp(&Twist::from_vector(delta)).compose(self)
    }
}

/// Pinhole intrinsics, pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 616.0,
            fy: 616.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "intrinsics need positive focal lengths and image size, got fx={fx} fy={fy} {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Pixel → camera-frame point at the given depth.
    pub fn back_project(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Projects a camera-frame point to pixels.
pub fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>> {
    if p.z <= MIN_DEPTH {
        return Err(Error::BehindCamera);
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Parallel-jaw gripper reduced to the four corner points of its fingers.
///
/// Gripper frame: approach along +z, closing along +x. Corner order is fixed and
/// semantic: `[left base, left tip, right tip, right base]`, with the bases at
/// z = 0 and the tips at z = depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GripperModel {
    pub corners: [Vector3<f64>; 4],
    pub open_width: f64,
    pub depth: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        Self::new(0.08, 0.04).expect("default gripper is valid")
    }
}

impl GripperModel {
    pub fn new(open_width: f64, depth: f64) -> Result<Self> {
        if !(open_width > 0.0 && depth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gripper needs positive width and depth, got {open_width} / {depth}"
            )));
        }
        let h = open_width / 2.0;
        Ok(Self {
            corners: [
                Vector3::new(-h, 0.0, 0.0),
                Vector3::new(-h, 0.0, depth),
                Vector3::new(h, 0.0, depth),
                Vector3::new(h, 0.0, 0.0),
            ],
            open_width,
            depth,
        })
    }

    /// Centroid of the corners; the point splatted into the center heatmap.
    pub fn center(&self) -> Vector3<f64> {
        self.corners.iter().sum::<Vector3<f64>>() / 4.0
    }

    /// Midpoint between the fingertips. The closing axis of a grasp runs through it.
    pub fn contact_point(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.depth)
    }

    /// Corner permutation induced by a half turn about the approach axis.
    pub const SYMMETRY_MAP: [usize; 4] = [3, 2, 1, 0];

    /// The half turn about the approach axis that swaps the two fingers.
    pub fn symmetry_rotation() -> Pose {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI),
            Vector3::zeros(),
        )
    }

    /// Rank of the centered corner matrix; at least 2 for a usable model.
    pub fn corner_rank(&self) -> usize {
        let c = self.center();
        let m = nalgebra::Matrix3x4::from_columns(&self.corners.map(|p| p - c));
        m.rank(1e-12)
    }
}

/// The gripper corners posed by `grasp_pose`, in the same order as the model.
pub fn gripper_keypoints_3d(g: &GripperModel, grasp_pose: &Pose) -> [Vector3<f64>; 4] {
    g.corners.map(|c| grasp_pose.transform_point(&c))
}

/// Camera pose looking from `eye` at `target`. The camera frame has +z forward
/// and +y down in the image; `right_hint` picks the image x axis when the view
/// direction is vertical.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, right_hint: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let mut x = right_hint - z * z.dot(right_hint);
    if x.norm() < 1e-9 {
        x = z.cross(&Vector3::z()).cross(&z);
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    let rotation = UnitQuaternion::from_matrix(&m);
    Pose::new(rotation, *eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_pose(rng: &mut impl Rng, max_angle: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        Pose::new(
            UnitQuaternion::from_scaled_axis(axis * angle),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
    }

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        a.rotation_distance(b) < tol && a.translation_distance(b) < tol
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = crate::rng::rng_from_seed(1);
        let p = random_pose(&mut rng, PI);
        assert!(pose_close(&Pose::identity().compose(&p), &p, 1e-12));
        assert!(pose_close(&p.compose(&p.inverse()), &Pose::identity(), 1e-9));
        assert!(pose_close(&p.inverse().compose(&p), &Pose::identity(), 1e-9));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = crate::rng::rng_from_seed(2);
        for _ in 0..100 {
            let a = random_pose(&mut rng, PI);
            let b = random_pose(&mut rng, PI);
            let x = Vector3::new(0.3, -0.2, 0.7);
            // oracle: plain matrices, no quaternions
            let seq = a.rotation_matrix() * (b.rotation_matrix() * x + b.translation) + a.translation;
            assert_relative_eq!(a.compose(&b).transform_point(&x), seq, epsilon = 1e-12);
            assert_relative_eq!(a.compose(&b).rotation.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_cases() {
        let inv = Pose::identity().inverse();
        assert!(pose_close(&inv, &Pose::identity(), 0.0 + 1e-15));
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 0.5)).inverse();
        assert_relative_eq!(t.translation, Vector3::new(0.0, 0.0, -0.5));
        let mut rng = crate::rng::rng_from_seed(3);
        for _ in 0..100 {
            let p = random_pose(&mut rng, PI);
            assert!(pose_close(&p.inverse().inverse(), &p, 1e-9));
        }
    }

    #[test]
    fn exp_cases() {
        assert!(pose_close(&Pose::exp(&Twist::zero()), &Pose::identity(), 1e-15));
        let p = Pose::exp(&Twist::new(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros()));
        assert_relative_eq!(p.transform_point(&Vector3::x()), Vector3::y(), epsilon = 1e-12);
        assert_relative_eq!(p.translation.norm(), 0.0);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = crate::rng::rng_from_seed(4);
        for _ in 0..1000 {
            let p = random_pose(&mut rng, PI - 1e-6);
            let back = Pose::exp(&p.log().unwrap());
            assert!(pose_close(&back, &p, 1e-9), "{p:?} vs {back:?}");
        }
        // near-identity branch
        let small = Pose::exp(&Twist::new(Vector3::new(1e-6, -2e-6, 3e-7), Vector3::new(0.1, 0.2, 0.3)));
        let back = Pose::exp(&small.log().unwrap());
        assert!(pose_close(&back, &small, 1e-12));
    }

    #[test]
    fn log_singular_at_pi() {
        let p = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI),
            Vector3::zeros(),
        );
        assert_eq!(p.log(), Err(Error::LogMapSingular));
    }

    #[test]
    fn projection_cases() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 640, 480).unwrap();
        assert_relative_eq!(
            project(&k, &Vector3::new(0.1, 0.0, 1.0)).unwrap(),
            Vector2::new(10.0, 0.0)
        );
        let k = CameraIntrinsics::default();
        for z in [0.1, 1.0, 7.0] {
            assert_relative_eq!(
                project(&k, &Vector3::new(0.0, 0.0, z)).unwrap(),
                Vector2::new(k.cx, k.cy)
            );
        }
        assert_eq!(project(&k, &Vector3::new(0.1, 0.1, 0.0)), Err(Error::BehindCamera));
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn gripper_keypoint_cases() {
        let g = GripperModel::default();
        assert_eq!(g.corner_rank(), 2);
        assert_eq!(gripper_keypoints_3d(&g, &Pose::identity()), g.corners);
        let t = Vector3::new(0.1, -0.2, 0.3);
        let moved = gripper_keypoints_3d(&g, &Pose::from_translation(t));
        for (m, c) in moved.iter().zip(g.corners.iter()) {
            assert_relative_eq!(*m, c + t);
        }
        let flipped = gripper_keypoints_3d(&g, &GripperModel::symmetry_rotation());
        for (i, j) in GripperModel::SYMMETRY_MAP.iter().enumerate() {
            assert_relative_eq!(flipped[i], g.corners[*j], epsilon = 1e-12);
        }
    }

    #[test]
    fn look_at_points_forward() {
        let eye = Vector3::new(0.3, 0.1, 0.5);
        let cam = look_at(&eye, &Vector3::zeros(), &Vector3::x());
        let dir = cam.rotation * Vector3::z();
        assert_relative_eq!(dir, (-eye).normalize(), epsilon = 1e-12);
        // straight down still yields a valid frame
        let down = look_at(&Vector3::new(0.0, 0.0, 1.0), &Vector3::zeros(), &Vector3::x());
        assert_relative_eq!(down.rotation * Vector3::z(), -Vector3::z(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn projection_is_depth_homogeneous(
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..5.0, s in 0.01f64..100.0
        ) {
            let k = CameraIntrinsics::default();
            let p = Vector3::new(x, y, z);
            let a = project(&k, &p).unwrap();
            let b = project(&k, &(p * s)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn log_is_locally_additive(seed in 0u64..10_000, scale in 1e-6f64..1e-3) {
            let mut rng = crate::rng::rng_from_seed(seed);
            let p = random_pose(&mut rng, 3.0);
            let d = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize() * scale;
            let q = p.perturb_left(&d).compose(&p.inverse());
            let back = q.log().unwrap().to_vector();
            prop_assert!((back - d).norm() < 1e-6);
        }

        #[test]
        fn keypoints_are_equivariant(seed in 0u64..10_000) {
            let mut rng = crate::rng::rng_from_seed(seed);
            let a = random_pose(&mut rng, PI);
            let b = random_pose(&mut rng, PI);
            let g = GripperModel::default();
            let lhs = gripper_keypoints_3d(&g, &a.compose(&b));
            let rhs = gripper_keypoints_3d(&g, &b).map(|p| a.transform_point(&p));
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).norm() < 1e-12);
            }
        }
    }
}
