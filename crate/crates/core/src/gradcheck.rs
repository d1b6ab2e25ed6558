//! Finite-difference check of the KL loss gradient.
//!
//! Each trial draws a random correspondence set, evaluates the loss and its
//! analytic gradient once, then differentiates the loss numerically with the
//! sample set frozen so both sides see the same random numbers.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::pnp::{Correspondence, CorrespondenceSet};
use crate::prob::{kl_loss, kl_loss_on_samples, KlConfig, SupervisedGrasp};
use crate::rng::{derive_seed, stream_rng};

/// Absolute scale below which errors count as absolute rather than relative.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub min_points: usize,
    pub max_points: usize,
    /// Central-difference step for keypoint coordinates, pixels.
    pub step_px: f64,
    /// Central-difference step for weights.
    pub step_w: f64,
    pub kl: KlConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            min_points: 4,
            max_points: 12,
            step_px: 1e-5,
            step_w: 1e-6,
            kl: KlConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub trial: usize,
    /// `p2d[i].x`, `w2d[i].y`, ...
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub const GRADCHECK_HEADER: &str = "trial,param,analytic,numeric,rel_error";

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// A random problem: 3D points in a 10 cm box seen from 0.4–1.0 m, keypoints
/// with one of several noise levels (sometimes an outlier), random weights,
/// and the generating pose as target.
pub fn random_problem(seed: u64, min_points: usize, max_points: usize) -> SupervisedGrasp {
    let mut rng = stream_rng(seed, 0);
    let k = CameraIntrinsics::default();
    let n = rng.random_range(min_points.max(4)..=max_points.max(min_points.max(4)));
    let pose = Pose::new(
        UnitQuaternion::from_euler_angles(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-3.1..3.1),
        ),
        Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.4..1.0)),
    );
    let sigma: f64 = [0.0, 0.5, 2.0][rng.random_range(0..3)];
    let noise = Normal::new(0.0, sigma.max(1e-300)).expect("finite sigma");
    let outlier = rng.random_bool(0.3).then(|| rng.random_range(0..n));
    let items = (0..n)
        .map(|i| {
            let p3 = Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            let mut px = project(&k, &pose.transform_point(&p3)).expect("in front of camera");
            if sigma > 0.0 {
                px += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            if outlier == Some(i) {
                px += Vector2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
            }
            let w = Vector2::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            Correspondence::new(px, p3, w)
        })
        .collect();
    SupervisedGrasp {
        observation: CorrespondenceSet::new(items, k),
        target: Some(pose),
    }
}

fn check_trial(trial: usize, cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    let tseed = derive_seed(seed, trial as u64);
    let problem = vec![random_problem(derive_seed(tseed, 0), cfg.min_points, cfg.max_points)];
    let eval = kl_loss(&problem, &cfg.kl, derive_seed(tseed, 1))?;
    let grad = eval.gradient(&problem)?;
    let n = problem[0].observation.items.len();
    let mut rows = Vec::with_capacity(4 * n);
    for i in 0..n {
        for (kind, step) in [("p2d", cfg.step_px), ("w2d", cfg.step_w)] {
            for axis in 0..2 {
                let f = |h: f64| {
                    let mut p = problem.clone();
                    let c = &mut p[0].observation.items[i];
                    match kind {
                        "p2d" => c.p2d[axis] += h,
                        _ => c.w2d[axis] += h,
                    }
                    kl_loss_on_samples(&p, &eval.samples)
                };
                let numeric = (f(step)? - f(-step)?) / (2.0 * step);
                let analytic = match kind {
                    "p2d" => grad.d_p2d[0][i][axis],
                    _ => grad.d_w2d[0][i][axis],
                };
                rows.push(GradcheckRow {
                    trial,
                    param: format!("{kind}[{i}].{}", ["x", "y"][axis]),
                    analytic,
                    numeric,
                    rel_error: relative_error(analytic, numeric),
                });
            }
        }
    }
    Ok(rows)
}

/// Runs `cfg.trials` independent trials in parallel; rows come back in trial order.
pub fn gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    let per_trial: Vec<Result<Vec<GradcheckRow>>> =
        (0..cfg.trials).into_par_iter().map(|t| check_trial(t, cfg, seed)).collect();
    let mut rows = Vec::new();
    for r in per_trial {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn gradcheck_csv(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{GRADCHECK_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e}\n",
            r.trial, r.param, r.analytic, r.numeric, r.rel_error
        ));
    }
    s
}
