//! Quick fixture checks run by `ppgrasp selftest`.

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use ppgrasp::codec::{decode_keypoints, KeypointMap, DEFAULT_THRESHOLD, DEFAULT_TOP_K};
use ppgrasp::eval::{evaluate, SuccessThresholds};
use ppgrasp::geometry::{project, CameraIntrinsics, GripperModel, Pose};
use ppgrasp::matching::{nn_match, PoseDistanceParams};
use ppgrasp::pnp::{solve_pnp, weighted_cost, Correspondence, CorrespondenceSet, SolverConfig};
use ppgrasp::scene::{grasp_labels_for_primitive, sample_scene, scene_from_str, scene_to_string, PrimitiveObject, SceneConfig, Shape};
use ppgrasp::train::{lr_schedule, LossWeights};
use ppgrasp::Error;

use crate::{CliResult, Failure};

type Check = (&'static str, fn() -> bool);

fn gripper_set(pose: &Pose, w: f64) -> CorrespondenceSet {
    let k = CameraIntrinsics::default();
    let g = GripperModel::default();
    let items = g
        .corners
        .iter()
        .map(|p| Correspondence::new(project(&k, &pose.transform_point(p)).unwrap(), *p, Vector2::repeat(w)))
        .collect();
    CorrespondenceSet::new(items, k)
}

fn test_pose() -> Pose {
    Pose::new(UnitQuaternion::from_euler_angles(-1.2, 0.3, 0.5), Vector3::new(0.03, -0.02, 0.5))
}

const CHECKS: &[Check] = &[
    ("cost of one unit residual is 1", || {
        let k = CameraIntrinsics::default();
        let y = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let px = project(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap() - Vector2::new(1.0, 1.0);
        let x = CorrespondenceSet::new(vec![Correspondence::new(px, Vector3::zeros(), Vector2::repeat(1.0))], k);
        (weighted_cost(&x, &y) - 1.0).abs() < 1e-12
    }),
    ("zero weights give zero cost", || {
        let x = gripper_set(&test_pose(), 0.0);
        weighted_cost(&x, &Pose::from_translation(Vector3::new(0.1, 0.0, 2.0))) == 0.0
    }),
    ("solve from the true pose stops at once", || {
        let y = test_pose();
        let r = solve_pnp(&gripper_set(&y, 1.0), &y, &SolverConfig::default()).unwrap();
        r.converged && r.iterations <= 2 && r.cost < 1e-16
    }),
    ("all-zero weights are underdetermined", || {
        let y = test_pose();
        matches!(
            solve_pnp(&gripper_set(&y, 0.0), &y, &SolverConfig::default()),
            Err(Error::Underdetermined { .. })
        )
    }),
    ("decode applies sub-pixel and corner offsets", || {
        let mut m = KeypointMap::zeros(20, 20, 4);
        *m.heat.get_mut(12, 10) = 0.9;
        *m.sub.get_mut(12, 10) = Vector2::new(0.3, 0.4);
        m.offsets.get_mut(12, 10)[0] = Vector2::new(5.0, -2.0);
        let d = decode_keypoints(&m, DEFAULT_THRESHOLD, DEFAULT_TOP_K);
        d.len() == 1 && (d[0].keypoints[0] - Vector2::new(45.3, 46.4)).norm() < 1e-12
    }),
    ("sphere wider than the gripper has no grasps", || {
        let obj = PrimitiveObject {
            shape: Shape::Sphere { radius: 0.05 },
            pose: Pose::from_translation(Vector3::new(0.0, 0.0, 0.05)),
        };
        grasp_labels_for_primitive(&obj, 0, &GripperModel::default(), 0.02, std::f64::consts::FRAC_PI_6).is_empty()
    }),
    ("scene file round trip", || {
        let cfg = SceneConfig {
            n_objects: 3,
            ..Default::default()
        };
        let s = sample_scene(&cfg, 4).unwrap();
        scene_from_str(&scene_to_string(&s)).unwrap() == s
    }),
    ("learning rate milestones", || {
        lr_schedule(10, 1e-4, &[200, 250]) == 1e-4
            && (lr_schedule(300, 1e-4, &[200, 250]) - 1e-6).abs() < 1e-20
            && lr_schedule(1000, 0.5, &[]) == 0.5
    }),
    ("all-zero loss weights are rejected", || {
        LossWeights::new(0.0, 0.0, 0.0, 0.0).is_err() && LossWeights::new(1.0, 1.0, 1.0, 0.1).is_ok()
    }),
    ("empty matching inputs", || {
        let p = PoseDistanceParams::default();
        let a = nn_match(&[], &[test_pose()], &p, 0.1);
        let b = nn_match(&[test_pose()], &[], &p, 0.1);
        a.assignments.is_empty() && b.assignments.is_empty() && b.unmatched == vec![0]
    }),
    ("three of four predictions succeed", || {
        let gts: Vec<Pose> = (0..4).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 1.0))).collect();
        let mut preds = gts.clone();
        preds[3].translation.x += 0.5;
        let th = SuccessThresholds::cm_deg(1.0, 10.0).unwrap();
        let r = evaluate(&[preds], &[gts], &[th], &PoseDistanceParams::default()).unwrap();
        r.rows[0].total.success_rate() == 0.75
    }),
];

pub fn run() -> CliResult<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        let ok = std::panic::catch_unwind(check).unwrap_or(false);
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("{} of {} checks passed", CHECKS.len() - failed, CHECKS.len());
    if failed > 0 {
        return Err(Failure::Domain(format!("{failed} selftest check(s) failed")));
    }
    Ok(())
}
