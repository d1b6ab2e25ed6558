//! Greedy nearest-neighbor assignment of predicted grasps to ground-truth grasps.

use crate::geometry::{GripperModel, Pose};

pub const DEFAULT_RHO: f64 = 0.05;
pub const DEFAULT_MAX_DIST: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDistanceParams {
    /// Meters per radian.
    pub rho: f64,
    /// Treat a grasp and its half turn about the approach axis as the same grasp.
    pub symmetric: bool,
}

impl Default for PoseDistanceParams {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            symmetric: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth, distance)`, in acceptance order.
    pub assignments: Vec<(usize, usize, f64)>,
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    /// Ground-truth index assigned to each prediction.
    pub fn target_of(&self, n_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_preds];
        for &(p, g, _) in &self.assignments {
            out[p] = Some(g);
        }
        out
    }

    pub fn total_distance(&self) -> f64 {
        self.assignments.iter().map(|a| a.2).sum()
    }
}

/// Rotation angle between two poses, optionally minimized over the gripper symmetry.
pub fn pose_angle(a: &Pose, b: &Pose, symmetric: bool) -> f64 {
    let direct = a.rotation_distance(b);
    if !symmetric {
        return direct;
    }
    let flipped = b.rotation * GripperModel::symmetry_rotation().rotation;
    direct.min(a.rotation.angle_to(&flipped))
}

/// `‖t_a − t_b‖ + rho · angle(R_a, R_b)`.
pub fn pose_distance(a: &Pose, b: &Pose, p: &PoseDistanceParams) -> f64 {
    if a == b {
        return 0.0;
    }
    a.translation_distance(b) + p.rho * pose_angle(a, b, p.symmetric)
}

/// All pairs within `max_dist`, sorted by distance then `(pred, gt)`; a pair is
/// accepted when both sides are still free.
pub fn nn_match(preds: &[Pose], gts: &[Pose], p: &PoseDistanceParams, max_dist: f64) -> MatchResult {
    let mut pairs = Vec::new();
    for (i, a) in preds.iter().enumerate() {
        for (j, b) in gts.iter().enumerate() {
            let d = pose_distance(a, b, p);
            if d <= max_dist {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut assignments = Vec::new();
    for (d, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            assignments.push((i, j, d));
        }
    }
    let unmatched = (0..preds.len()).filter(|&i| !pred_used[i]).collect();
    MatchResult {
        assignments,
        unmatched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    fn at(x: f64, y: f64) -> Pose {
        Pose::from_translation(Vector3::new(x, y, 0.0))
    }

    #[test]
    fn distance_cases() {
        let p = PoseDistanceParams::default();
        let a = Pose::from_wxyz(0.8, 0.2, 0.5, -0.1, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(pose_distance(&a, &a, &p), 0.0);
        let b = Pose::new(a.rotation, a.translation + Vector3::new(0.0, 0.02, 0.0));
        assert!((pose_distance(&a, &b, &p) - 0.02).abs() < 1e-12);
        let r = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.1),
            Vector3::zeros(),
        );
        assert!((pose_distance(&Pose::identity(), &r, &p) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn symmetric_flip_is_free() {
        let a = Pose::from_wxyz(0.8, 0.2, 0.5, -0.1, Vector3::new(0.1, 0.2, 0.3));
        let flipped = Pose::new(a.rotation * GripperModel::symmetry_rotation().rotation, a.translation);
        assert!(pose_distance(&a, &flipped, &PoseDistanceParams::default()) < 1e-7);
        let plain = PoseDistanceParams {
            symmetric: false,
            ..Default::default()
        };
        assert!((pose_distance(&a, &flipped, &plain) - DEFAULT_RHO * std::f64::consts::PI).abs() < 1e-7);
        let b = Pose::from_wxyz(0.3, -0.6, 0.1, 0.7, Vector3::new(0.0, 0.1, 0.2));
        let p = PoseDistanceParams::default();
        assert!((pose_distance(&a, &b, &p) - pose_distance(&b, &a, &p)).abs() < 1e-12);
    }

    #[test]
    fn exact_match_and_empty_lists() {
        let p = PoseDistanceParams::default();
        let m = nn_match(&[at(0.0, 0.0)], &[at(0.0, 0.0)], &p, 0.1);
        assert_eq!(m.assignments, vec![(0, 0, 0.0)]);
        assert!(nn_match(&[], &[at(0.0, 0.0)], &p, 0.1).assignments.is_empty());
        let m = nn_match(&[at(0.0, 0.0)], &[], &p, 0.1);
        assert_eq!(m.unmatched, vec![0]);
        let m = nn_match(&[at(0.0, 0.0)], &[at(0.5, 0.0)], &p, 0.1);
        assert_eq!(m.unmatched, vec![0]);
    }

    #[test]
    fn greedy_resolves_shared_nearest_neighbor() {
        // both predictions are nearest to gt 0; independent NN would reuse it
        let preds = [at(0.0, 0.0), at(0.01, 0.0)];
        let gts = [at(0.004, 0.0), at(0.03, 0.0)];
        let m = nn_match(&preds, &gts, &PoseDistanceParams::default(), 0.1);
        let t = m.target_of(2);
        assert_eq!(t, vec![Some(0), Some(1)]);
        assert!((m.total_distance() - 0.024).abs() < 1e-12);
    }

    #[test]
    fn gt_permutation_keeps_pairs() {
        let preds = [at(0.0, 0.0), at(0.05, 0.0), at(0.1, 0.02)];
        let gts = [at(0.01, 0.0), at(0.06, 0.01), at(0.09, 0.0)];
        let p = PoseDistanceParams::default();
        let pairs = |gts: &[Pose]| {
            let mut v: Vec<_> = nn_match(&preds, gts, &p, 0.1)
                .assignments
                .iter()
                .map(|&(i, j, _)| (i, gts[j].translation.x.to_bits()))
                .collect();
            v.sort();
            v
        };
        let perm = [gts[2], gts[0], gts[1]];
        assert_eq!(pairs(&gts), pairs(&perm));
    }

    #[test]
    fn ties_break_by_index() {
        let preds = [at(0.0, 0.0), at(0.0, 0.0)];
        let gts = [at(0.01, 0.0)];
        let m = nn_match(&preds, &gts, &PoseDistanceParams::default(), 0.1);
        assert_eq!(m.assignments[0].0, 0);
        assert_eq!(m.unmatched, vec![1]);
    }
}
