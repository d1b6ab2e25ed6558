//! Toy end-to-end training.
//!
//! The network is replaced by free parameters: per scene, four keypoints and
//! four confidence logits for each predicted grasp, plus an optional keypoint
//! map trained by the 2D losses. Keypoints and weights receive gradients only
//! through the probabilistic PnP layer, which is what makes this a test of 3D
//! supervision reaching 2D quantities.

use nalgebra::Vector2;
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;

use crate::codec::{
    encode_scene, focal_loss, focal_loss_grad, l1_offset_loss, l1_offset_loss_grad, EncodedMap, KeypointMap,
    FOCAL_EPS,
};
use crate::error::{Error, Result};
use crate::geometry::{project, GripperModel, Pose};
use crate::matching::{nn_match, pose_angle, PoseDistanceParams};
use crate::pnp::{multi_start_solve, Correspondence, CorrespondenceSet, SolveReport};
use crate::prob::{kl_loss_with_modes, KlConfig, SupervisedGrasp};
use crate::rng::{derive_seed, stream_rng};
use crate::scene::{Observation, Scene};

/// `ln(e − 1)`: the logit whose softplus is exactly 1.
pub const UNIT_WEIGHT_LOGIT: f64 = 0.541_324_854_612_918_1;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_s: f64,
    pub lambda_o: f64,
    pub lambda_kl: f64,
}

impl LossWeights {
    pub fn new(lambda_h: f64, lambda_s: f64, lambda_o: f64, lambda_kl: f64) -> Result<Self> {
        let w = Self {
            lambda_h,
            lambda_s,
            lambda_o,
            lambda_kl,
        };
        w.validate()?;
        Ok(w)
    }

    /// Only the KL term.
    pub fn kl_only() -> Self {
        Self {
            lambda_h: 0.0,
            lambda_s: 0.0,
            lambda_o: 0.0,
            lambda_kl: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_h, self.lambda_s, self.lambda_o, self.lambda_kl];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("loss weights must be finite and ≥ 0".into()));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidArgument("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// 1, 1, 1, 0.1.
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_s: 1.0,
            lambda_o: 1.0,
            lambda_kl: 0.1,
        }
    }
}

/// Learnable outputs for one predicted grasp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspParams {
    pub keypoints: [Vector2<f64>; 4],
    pub logits: [Vector2<f64>; 4],
}

impl GraspParams {
    pub fn weights(&self) -> [Vector2<f64>; 4] {
        self.logits.map(|l| l.map(softplus))
    }

    pub fn observation(&self, s: &Scene, g: &GripperModel) -> CorrespondenceSet {
        let w = self.weights();
        let items = (0..4)
            .map(|k| Correspondence::new(self.keypoints[k], g.corners[k], w[k]))
            .collect();
        CorrespondenceSet::new(items, s.intrinsics)
    }
}

/// Learnable outputs for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricPredictor {
    pub grasps: Vec<GraspParams>,
    pub map: Option<KeypointMap>,
}

impl ParametricPredictor {
    /// Keypoints at the exact projections of the scene's grasps, unit weights, no map.
    pub fn at_ground_truth(s: &Scene, g: &GripperModel) -> Result<Self> {
        let grasps = (0..s.grasps.len())
            .map(|i| {
                let pose = s.grasp_in_camera(i);
                let mut kps = [Vector2::zeros(); 4];
                for (k, c) in g.corners.iter().enumerate() {
                    kps[k] = project(&s.intrinsics, &pose.transform_point(c))?;
                }
                Ok(GraspParams {
                    keypoints: kps,
                    logits: [Vector2::repeat(UNIT_WEIGHT_LOGIT); 4],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grasps, map: None })
    }

    /// Ground-truth keypoints each moved by `px` pixels in a random direction.
    pub fn perturbed(s: &Scene, g: &GripperModel, px: f64, seed: u64) -> Result<Self> {
        let mut p = Self::at_ground_truth(s, g)?;
        let mut rng = stream_rng(seed, 0);
        for gp in &mut p.grasps {
            for kp in &mut gp.keypoints {
                let a = rng.random_range(0.0..TAU);
                *kp += px * Vector2::new(a.cos(), a.sin());
            }
        }
        Ok(p)
    }

    /// Keypoints taken from observations (one per grasp, in order), unit weights.
    pub fn from_observations(obs: &[Observation]) -> Self {
        let grasps = obs
            .iter()
            .map(|o| {
                let mut kps = [Vector2::zeros(); 4];
                for (k, c) in o.correspondences.items.iter().take(4).enumerate() {
                    kps[k] = c.p2d;
                }
                GraspParams {
                    keypoints: kps,
                    logits: [Vector2::repeat(UNIT_WEIGHT_LOGIT); 4],
                }
            })
            .collect();
        Self { grasps, map: None }
    }

    /// Adds a learnable map initialized to a flat low heatmap and zero offsets.
    pub fn with_map(mut self, s: &Scene, stride: usize) -> Self {
        let mut m = KeypointMap::for_image(&s.intrinsics, stride);
        m.heat.data.iter_mut().for_each(|h| *h = 0.01);
        self.map = Some(m);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub iters: usize,
    pub lr_px: f64,
    pub lr_logit: f64,
    /// Learning rate for the map pathway.
    pub lr_map: f64,
    pub momentum: f64,
    /// Iterations after which every learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    /// Reuse one Monte Carlo seed for every iteration.
    pub fixed_mc_seed: bool,
    pub kl: KlConfig,
    pub matching: PoseDistanceParams,
    pub max_match_dist: f64,
    pub stride: usize,
    pub gripper: GripperModel,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr_px: 0.1,
            lr_logit: 1e-3,
            lr_map: 1e-4,
            momentum: 0.9,
            milestones: vec![200, 250],
            fixed_mc_seed: false,
            kl: KlConfig::default(),
            matching: PoseDistanceParams::default(),
            max_match_dist: crate::matching::DEFAULT_MAX_DIST,
            stride: 4,
            gripper: GripperModel::default(),
        }
    }
}

/// `base · 0.1^(number of milestones ≤ step)`.
pub fn lr_schedule(step: usize, base: f64, milestones: &[usize]) -> f64 {
    let passed = milestones.iter().filter(|m| step >= **m).count() as i32;
    base * 0.1f64.powi(passed)
}

/// Loss components of one scene. Absent terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_h: Option<f64>,
    pub l_s: Option<f64>,
    pub l_o: Option<f64>,
    /// Negative log density of the matched ground truth; `None` when no grasp matched.
    pub l_kl: Option<f64>,
    pub total: f64,
    pub matched: usize,
    /// Mode pose of each predicted grasp.
    pub modes: Vec<Option<SolveReport>>,
    /// Ground-truth index matched to each predicted grasp.
    pub targets: Vec<Option<usize>>,
}

/// Gradient with the same layout as [`ParametricPredictor`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorGrad {
    pub keypoints: Vec<[Vector2<f64>; 4]>,
    pub logits: Vec<[Vector2<f64>; 4]>,
    pub map: Option<KeypointMap>,
}

impl PredictorGrad {
    fn zeros(p: &ParametricPredictor) -> Self {
        Self {
            keypoints: vec![[Vector2::zeros(); 4]; p.grasps.len()],
            logits: vec![[Vector2::zeros(); 4]; p.grasps.len()],
            map: p.map.as_ref().map(|m| KeypointMap::zeros(m.rows(), m.cols(), m.stride)),
        }
    }
}

fn map_losses(
    map: &KeypointMap,
    gt: &EncodedMap,
    w: &LossWeights,
    grad: Option<&mut KeypointMap>,
) -> Result<(f64, f64, f64)> {
    let l_h = focal_loss(&map.heat, &gt.map.heat)?;
    let l_s = l1_offset_loss(&map.sub, &gt.map.sub, &gt.peaks)?;
    let l_o = l1_offset_loss(&map.offsets, &gt.map.offsets, &gt.peaks)?;
    if let Some(g) = grad {
        let mut gh = focal_loss_grad(&map.heat, &gt.map.heat)?;
        gh.data.iter_mut().for_each(|v| *v *= w.lambda_h);
        g.heat = gh;
        let mut gs = l1_offset_loss_grad(&map.sub, &gt.map.sub, &gt.peaks, Vector2::zeros())?;
        gs.data.iter_mut().for_each(|v| *v *= w.lambda_s);
        g.sub = gs;
        let mut go = l1_offset_loss_grad(&map.offsets, &gt.map.offsets, &gt.peaks, [Vector2::zeros(); 4])?;
        go.data.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v *= w.lambda_o));
        g.offsets = go;
    }
    Ok((l_h, l_s, l_o))
}

fn evaluate_scene(
    pred: &ParametricPredictor,
    scene: &Scene,
    gt_map: Option<&EncodedMap>,
    w: &LossWeights,
    cfg: &OptimConfig,
    seed: u64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<PredictorGrad>)> {
    if scene.grasps.is_empty() {
        return Err(Error::InvalidArgument(format!("scene {} has no grasps", scene.seed)));
    }
    let g = &cfg.gripper;
    let mut grad = want_grad.then(|| PredictorGrad::zeros(pred));
    let mut total = 0.0;

    let (mut l_h, mut l_s, mut l_o) = (None, None, None);
    if let Some(map) = &pred.map {
        let encoded;
        let gt = match gt_map {
            Some(m) => m,
            None => {
                encoded = encode_scene(scene, g, map.stride);
                &encoded
            }
        };
        let (h, s, o) = map_losses(map, gt, w, grad.as_mut().and_then(|gr| gr.map.as_mut()))?;
        total += w.lambda_h * h + w.lambda_s * s + w.lambda_o * o;
        (l_h, l_s, l_o) = (Some(h), Some(s), Some(o));
    }

    let observations: Vec<CorrespondenceSet> = pred.grasps.iter().map(|gp| gp.observation(scene, g)).collect();
    let modes: Vec<Option<SolveReport>> = observations
        .iter()
        .enumerate()
        .map(|(j, x)| multi_start_solve(x, &cfg.kl.solver, derive_seed(derive_seed(seed, j as u64), 0)).ok())
        .collect();
    let gts = scene.grasps_in_camera();
    let solved: Vec<usize> = (0..modes.len()).filter(|j| modes[*j].is_some()).collect();
    let solved_poses: Vec<Pose> = solved.iter().map(|j| modes[*j].expect("solved").pose).collect();
    let m = nn_match(&solved_poses, &gts, &cfg.matching, cfg.max_match_dist);
    let mut targets = vec![None; pred.grasps.len()];
    for &(p, t, _) in &m.assignments {
        targets[solved[p]] = Some(t);
    }

    let matched: Vec<usize> = (0..targets.len()).filter(|j| targets[*j].is_some()).collect();
    let mut l_kl = None;
    if !matched.is_empty() {
        let sup: Vec<SupervisedGrasp> = matched
            .iter()
            .map(|&j| SupervisedGrasp {
                observation: observations[j].clone(),
                target: targets[j].map(|t| gts[t]),
            })
            .collect();
        let sub_modes: Vec<SolveReport> = matched.iter().map(|&j| modes[j].expect("matched")).collect();
        let kl = kl_loss_with_modes(&sup, &sub_modes, &cfg.kl, seed)?;
        total += w.lambda_kl * kl.total;
        l_kl = Some(kl.total);
        if let Some(gr) = grad.as_mut() {
            if w.lambda_kl > 0.0 {
                let b = kl.gradient(&sup)?;
                for (n, &j) in matched.iter().enumerate() {
                    let logits = &pred.grasps[j].logits;
                    for k in 0..4 {
                        gr.keypoints[j][k] += b.d_p2d[n][k] * w.lambda_kl;
                        let dw = b.d_w2d[n][k] * w.lambda_kl;
                        gr.logits[j][k] += dw.component_mul(&logits[k].map(sigmoid));
                    }
                }
            }
        }
    }

    Ok((
        LossBreakdown {
            l_h,
            l_s,
            l_o,
            l_kl,
            total,
            matched: matched.len(),
            modes,
            targets,
        },
        grad,
    ))
}

/// Weighted sum of the 2D losses (map pathway, when present) and the KL loss
/// over grasps whose mode pose matched a ground-truth grasp.
pub fn total_loss(
    pred: &ParametricPredictor,
    scene: &Scene,
    w: &LossWeights,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    w.validate()?;
    evaluate_scene(pred, scene, None, w, cfg, seed, false).map(|r| r.0)
}

/// [`total_loss`] together with its gradient.
pub fn total_loss_grad(
    pred: &ParametricPredictor,
    scene: &Scene,
    w: &LossWeights,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(LossBreakdown, PredictorGrad)> {
    w.validate()?;
    let (b, g) = evaluate_scene(pred, scene, None, w, cfg, seed, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Translation (m) and rotation (rad) error of each matched mode, falling back
/// to the nearest ground truth for unmatched grasps.
pub fn pose_errors(b: &LossBreakdown, scene: &Scene, symmetric: bool) -> Vec<(f64, f64)> {
    let gts = scene.grasps_in_camera();
    b.modes
        .iter()
        .zip(&b.targets)
        .map(|(mode, target)| {
            let Some(mode) = mode else {
                return (f64::INFINITY, std::f64::consts::PI);
            };
            let err = |g: &Pose| (mode.pose.translation_distance(g), pose_angle(&mode.pose, g, symmetric));
            match target {
                Some(t) => err(&gts[*t]),
                None => gts
                    .iter()
                    .map(err)
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap_or((f64::INFINITY, std::f64::consts::PI)),
            }
        })
        .collect()
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of the training log. Loss terms are summed over scenes; an absent
/// term is `None` when no scene contributed it.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub l_h: Option<f64>,
    pub l_s: Option<f64>,
    pub l_o: Option<f64>,
    pub l_kl: Option<f64>,
    pub total: f64,
    pub median_pose_err_cm: f64,
    pub median_pose_err_deg: f64,
}

pub const LOG_HEADER: &str = "iter,L_H,L_S,L_O,L_KL,total,median_pose_err_cm,median_pose_err_deg";

impl LogRow {
    pub fn csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            o(self.l_h),
            o(self.l_s),
            o(self.l_o),
            o(self.l_kl),
            self.total,
            self.median_pose_err_cm,
            self.median_pose_err_deg
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    /// One row per completed iteration, plus a final row evaluated after the last update.
    pub log: Vec<LogRow>,
    /// Last parameters with a finite loss.
    pub predictors: Vec<ParametricPredictor>,
    /// Per scene, per predicted grasp: final translation (m) and rotation (rad) errors.
    pub final_errors: Vec<Vec<(f64, f64)>>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

impl TrainingReport {
    pub fn log_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.log {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

fn sum_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.fold(None, |acc, v| match (acc, v) {
        (None, v) => v,
        (a, None) => a,
        (Some(a), Some(b)) => Some(a + b),
    })
}

struct Evaluated {
    row: LogRow,
    errors: Vec<Vec<(f64, f64)>>,
    grads: Vec<PredictorGrad>,
}

fn evaluate_all(
    preds: &[ParametricPredictor],
    scenes: &[Scene],
    gt_maps: &[Option<EncodedMap>],
    w: &LossWeights,
    cfg: &OptimConfig,
    seed: u64,
    iter: usize,
    want_grad: bool,
) -> Result<Evaluated> {
    let iter_seed = if cfg.fixed_mc_seed { seed } else { derive_seed(seed, iter as u64 + 1) };
    let results: Vec<Result<(LossBreakdown, Option<PredictorGrad>)>> = preds
        .par_iter()
        .zip(scenes.par_iter())
        .zip(gt_maps.par_iter())
        .enumerate()
        .map(|(i, ((p, s), m))| evaluate_scene(p, s, m.as_ref(), w, cfg, derive_seed(iter_seed, i as u64), want_grad))
        .collect();
    let mut breakdowns = Vec::with_capacity(results.len());
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        let (b, g) = r?;
        breakdowns.push(b);
        if let Some(g) = g {
            grads.push(g);
        }
    }
    let errors: Vec<Vec<(f64, f64)>> = breakdowns
        .iter()
        .zip(scenes)
        .map(|(b, s)| pose_errors(b, s, cfg.matching.symmetric))
        .collect();
    let mut cm: Vec<f64> = errors.iter().flatten().map(|e| e.0 * 100.0).collect();
    let mut deg: Vec<f64> = errors.iter().flatten().map(|e| e.1.to_degrees()).collect();
    let row = LogRow {
        iter,
        l_h: sum_opt(breakdowns.iter().map(|b| b.l_h)),
        l_s: sum_opt(breakdowns.iter().map(|b| b.l_s)),
        l_o: sum_opt(breakdowns.iter().map(|b| b.l_o)),
        l_kl: sum_opt(breakdowns.iter().map(|b| b.l_kl)),
        total: breakdowns.iter().map(|b| b.total).sum(),
        median_pose_err_cm: median(&mut cm),
        median_pose_err_deg: median(&mut deg),
    };
    Ok(Evaluated { row, errors, grads })
}

struct Velocity {
    keypoints: Vec<Vec<[Vector2<f64>; 4]>>,
    logits: Vec<Vec<[Vector2<f64>; 4]>>,
    map: Vec<Option<KeypointMap>>,
}

fn step(
    preds: &mut [ParametricPredictor],
    vel: &mut Velocity,
    grads: &[PredictorGrad],
    cfg: &OptimConfig,
    iter: usize,
) {
    let lr_px = lr_schedule(iter, cfg.lr_px, &cfg.milestones);
    let lr_logit = lr_schedule(iter, cfg.lr_logit, &cfg.milestones);
    let lr_map = lr_schedule(iter, cfg.lr_map, &cfg.milestones);
    let mu = cfg.momentum;
    for (s, (p, g)) in preds.iter_mut().zip(grads).enumerate() {
        for (j, gp) in p.grasps.iter_mut().enumerate() {
            for k in 0..4 {
                let v = &mut vel.keypoints[s][j][k];
                *v = *v * mu - g.keypoints[j][k] * lr_px;
                gp.keypoints[k] += *v;
                let v = &mut vel.logits[s][j][k];
                *v = *v * mu - g.logits[j][k] * lr_logit;
                gp.logits[k] += *v;
            }
        }
        if let (Some(m), Some(gm), Some(vm)) = (p.map.as_mut(), g.map.as_ref(), vel.map[s].as_mut()) {
            for ((h, gh), vh) in m.heat.data.iter_mut().zip(&gm.heat.data).zip(vm.heat.data.iter_mut()) {
                *vh = *vh * mu - gh * lr_map;
                *h = (*h + *vh).clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            }
            for ((x, gx), vx) in m.sub.data.iter_mut().zip(&gm.sub.data).zip(vm.sub.data.iter_mut()) {
                *vx = *vx * mu - gx * lr_map;
                *x += *vx;
            }
            for ((x, gx), vx) in m.offsets.data.iter_mut().zip(&gm.offsets.data).zip(vm.offsets.data.iter_mut()) {
                for k in 0..4 {
                    vx[k] = vx[k] * mu - gx[k] * lr_map;
                    x[k] += vx[k];
                }
            }
        }
    }
}

/// Gradient descent with momentum on every scene's predictor. Deterministic
/// given `seed`. A non-finite loss stops training and keeps the last finite
/// parameters.
pub fn train_toy(
    scenes: &[Scene],
    init: Vec<ParametricPredictor>,
    w: &LossWeights,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<TrainingReport> {
    w.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to train on".into()));
    }
    if init.len() != scenes.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictors for {} scenes",
            init.len(),
            scenes.len()
        )));
    }
    let gt_maps: Vec<Option<EncodedMap>> = init
        .iter()
        .zip(scenes)
        .map(|(p, s)| p.map.as_ref().map(|m| encode_scene(s, &cfg.gripper, m.stride)))
        .collect();
    let mut preds = init;
    let mut vel = Velocity {
        keypoints: preds.iter().map(|p| vec![[Vector2::zeros(); 4]; p.grasps.len()]).collect(),
        logits: preds.iter().map(|p| vec![[Vector2::zeros(); 4]; p.grasps.len()]).collect(),
        map: preds
            .iter()
            .map(|p| p.map.as_ref().map(|m| KeypointMap::zeros(m.rows(), m.cols(), m.stride)))
            .collect(),
    };
    let mut log = Vec::with_capacity(cfg.iters + 1);
    let mut last_good = preds.clone();
    let mut final_errors = Vec::new();
    let mut diverged = None;
    for iter in 0..=cfg.iters {
        let want_grad = iter < cfg.iters;
        let ev = match evaluate_all(&preds, scenes, &gt_maps, w, cfg, seed, iter, want_grad) {
            Ok(ev) => ev,
            Err(e) => {
                diverged = Some(format!("iteration {iter}: {e}"));
                break;
            }
        };
        if !ev.row.total.is_finite() {
            diverged = Some(format!("iteration {iter}: loss is {}", ev.row.total));
            break;
        }
        last_good = preds.clone();
        final_errors = ev.errors;
        log.push(ev.row);
        if want_grad {
            step(&mut preds, &mut vel, &ev.grads, cfg, iter);
        }
    }
    Ok(TrainingReport {
        log,
        predictors: last_good,
        final_errors,
        diverged,
    })
}
