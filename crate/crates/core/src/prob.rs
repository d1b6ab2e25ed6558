//! Probabilistic PnP layer.
//!
//! The weighted PnP cost defines an unnormalized pose density
//! `p(X | y) ∝ exp(−½ Σ ‖w ⊙ E(y)‖²)`. Against a Dirac target at the matched
//! ground truth `ŷ`, the KL loss per grasp reduces to
//!
//! ```text
//! L = log ∫ exp(−cost(y)) dy  +  cost(ŷ)
//! ```
//!
//! The log-normalizer is estimated with adaptive multiple importance sampling
//! (AMIS) over a pose chart centered at the PnP mode. Its gradient is the
//! self-normalized importance-weighted expectation of `−∂cost/∂θ`, taken over
//! the same frozen sample set that produced the loss value.

use nalgebra::{DMatrix, DVector, Vector2};
use rand_distr::{Distribution, StudentT};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::chart::{AxisKind, PoseChart, TangentChart};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::pnp::{
    cost_jacobian, multi_start_solve, reproj_error, weighted_cost, CorrespondenceSet, SolveReport,
    SolverConfig,
};
use crate::rng::{derive_seed, stream_rng, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
    pub rounds: usize,
    pub k_per_round: usize,
    /// Degrees of freedom of the Student-t proposal factors.
    pub dof: f64,
    /// Multiplier applied to the fitted proposal scale.
    pub scale_factor: f64,
    /// Minimum proposal std on translation axes, meters.
    pub translation_floor: f64,
    /// Minimum proposal std on rotation axes, radians.
    pub rotation_floor: f64,
    /// Proposal std used when the Hessian at the mode is degenerate.
    pub fallback_translation: f64,
    pub fallback_rotation: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            rounds: 4,
            k_per_round: 128,
            dof: 3.0,
            scale_factor: 0.8,
            translation_floor: 1e-4,
            rotation_floor: 1e-3,
            fallback_translation: 0.01,
            fallback_rotation: 0.1,
        }
    }
}

impl McConfig {
    pub fn total_samples(&self) -> usize {
        self.rounds * self.k_per_round
    }

    fn floors(&self, kinds: &[AxisKind]) -> Vec<f64> {
        kinds
            .iter()
            .map(|k| match k {
                AxisKind::Translation => self.translation_floor,
                AxisKind::Rotation => self.rotation_floor,
            })
            .collect()
    }
}

/// Solver and sampler settings for the KL loss.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct KlConfig {
    pub solver: SolverConfig,
    pub mc: McConfig,
}

/// Student-t proposal in chart coordinates: `x = center + L z`, with `z` made
/// of independent t(ν) factors and `L` lower triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalDistribution {
    pub center: DVector<f64>,
    pub scale_tril: DMatrix<f64>,
    pub dof: f64,
    log_det: f64,
    log_norm: f64,
}

impl ProposalDistribution {
    pub fn new(center: DVector<f64>, scale_tril: DMatrix<f64>, dof: f64) -> Result<Self> {
        if dof <= 2.0 {
            return Err(Error::InvalidArgument(format!("proposal dof must exceed 2, got {dof}")));
        }
        let diag = scale_tril.diagonal();
        if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument("proposal scales must be positive".into()));
        }
        let log_det = diag.iter().map(|d| d.ln()).sum();
        let log_norm = ln_gamma((dof + 1.0) / 2.0)
            - ln_gamma(dof / 2.0)
            - 0.5 * (dof * std::f64::consts::PI).ln();
        Ok(Self {
            center,
            scale_tril,
            dof,
            log_det,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> DVector<f64> {
        let t = StudentT::new(self.dof).expect("dof validated");
        let z = DVector::from_fn(self.dim(), |_, _| t.sample(rng));
        &self.center + &self.scale_tril * z
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        let z = self
            .scale_tril
            .solve_lower_triangular(&d)
            .expect("positive diagonal");
        let nu = self.dof;
        z.iter()
            .map(|zi| self.log_norm - 0.5 * (nu + 1.0) * (zi * zi / nu).ln_1p())
            .sum::<f64>()
            - self.log_det
    }

    /// Per-axis scale `sqrt(diag(L Lᵀ))`.
    pub fn marginal_scales(&self) -> DVector<f64> {
        let cov = &self.scale_tril * self.scale_tril.transpose();
        cov.diagonal().map(f64::sqrt)
    }

    /// Marginal scales on the translation axes of `chart`.
    pub fn translation_scale<C: PoseChart>(&self, chart: &C) -> Vec<f64> {
        self.scales_of(chart, AxisKind::Translation)
    }

    /// Marginal scales on the rotation axes of `chart`.
    pub fn rotation_scale<C: PoseChart>(&self, chart: &C) -> Vec<f64> {
        self.scales_of(chart, AxisKind::Rotation)
    }

    fn scales_of<C: PoseChart>(&self, chart: &C, kind: AxisKind) -> Vec<f64> {
        let s = self.marginal_scales();
        chart
            .axis_kinds()
            .iter()
            .zip(s.iter())
            .filter(|(k, _)| **k == kind)
            .map(|(_, v)| *v)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSample {
    pub coords: DVector<f64>,
    pub pose: Pose,
    /// Log density of the AMIS mixture proposal at this sample.
    pub log_proposal: f64,
    /// `−½ Σ ‖w ⊙ E(y)‖²`.
    pub log_likelihood: f64,
    pub log_weight: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MCSampleSet {
    pub samples: Vec<McSample>,
    pub proposals: Vec<ProposalDistribution>,
}

impl MCSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Self-normalized weights `v_j / Σ v`, computed in log space.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(self.samples.iter().map(|s| s.log_weight));
        self.samples
            .iter()
            .map(|s| (s.log_weight - lse).exp())
            .collect()
    }

    /// `(Σv)² / Σv²`.
    pub fn effective_sample_size(&self) -> f64 {
        let w = self.normalized_weights();
        1.0 / w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Log mixture density of all proposals at `coords` (equal round sizes).
    pub fn log_mixture(&self, coords: &DVector<f64>) -> f64 {
        log_mixture(&self.proposals, coords)
    }
}

fn log_mixture(proposals: &[ProposalDistribution], coords: &DVector<f64>) -> f64 {
    log_sum_exp(proposals.iter().map(|q| q.log_density(coords))) - (proposals.len() as f64).ln()
}

pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log of the unnormalized pose density.
pub fn log_likelihood(x: &CorrespondenceSet, y: &Pose) -> f64 {
    -weighted_cost(x, y)
}

/// Scales a covariance so every axis std is at least its floor, then returns its
/// Cholesky factor.
fn floored_cholesky(cov: &DMatrix<f64>, floors: &[f64], factor: f64) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    let mut c = cov.clone();
    for i in 0..n {
        let sd = c[(i, i)].max(0.0).sqrt();
        if !sd.is_finite() {
            return None;
        }
        if sd < floors[i] {
            let s = if sd > 0.0 { floors[i] / sd } else { 0.0 };
            if s == 0.0 {
                c[(i, i)] = floors[i] * floors[i];
            } else {
                for j in 0..n {
                    c[(i, j)] *= s;
                    c[(j, i)] *= s;
                }
            }
        }
    }
    let l = c.cholesky()?.l() * factor;
    l.iter().all(|v| v.is_finite()).then_some(l)
}

fn initial_proposal<C: PoseChart>(
    x: &CorrespondenceSet,
    mode: &Pose,
    chart: &C,
    cfg: &McConfig,
) -> Result<ProposalDistribution> {
    let kinds = chart.axis_kinds();
    let floors = cfg.floors(&kinds);
    let cj = cost_jacobian(x, mode);
    let j = &cj.jacobian * chart.twist_basis(mode);
    let h = j.tr_mul(&j);
    let center = chart.coords(mode);
    let l = h
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .and_then(|cov| floored_cholesky(&cov, &floors, cfg.scale_factor));
    let l = match l {
        Some(l) => l,
        None => DMatrix::from_diagonal(&DVector::from_iterator(
            kinds.len(),
            kinds.iter().map(|k| match k {
                AxisKind::Translation => cfg.fallback_translation,
                AxisKind::Rotation => cfg.fallback_rotation,
            }),
        )),
    };
    ProposalDistribution::new(center, l, cfg.dof)
}

fn refit_proposal(
    samples: &[McSample],
    previous: &ProposalDistribution,
    floors: &[f64],
    cfg: &McConfig,
) -> ProposalDistribution {
    let lse = log_sum_exp(samples.iter().map(|s| s.log_weight));
    let w: Vec<f64> = samples.iter().map(|s| (s.log_weight - lse).exp()).collect();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let dim = previous.dim();
    if !ess.is_finite() || ess < (dim + 1) as f64 {
        return previous.clone();
    }
    let mut mean = DVector::zeros(dim);
    for (s, wi) in samples.iter().zip(w.iter()) {
        mean += &s.coords * *wi;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (s, wi) in samples.iter().zip(w.iter()) {
        let d = &s.coords - &mean;
        cov += &d * d.transpose() * *wi;
    }
    match floored_cholesky(&cov, floors, cfg.scale_factor)
        .and_then(|l| ProposalDistribution::new(mean, l, cfg.dof).ok())
    {
        Some(q) => q,
        None => previous.clone(),
    }
}

/// AMIS over the full pose, in the tangent chart anchored at the PnP mode.
pub fn amis_sample(
    x: &CorrespondenceSet,
    mode: &SolveReport,
    cfg: &McConfig,
    seed: u64,
) -> Result<MCSampleSet> {
    if !mode.converged {
        return Err(Error::InvalidArgument("AMIS needs a converged mode".into()));
    }
    amis_sample_in_chart(x, &mode.pose, &TangentChart::new(mode.pose), cfg, seed)
}

/// AMIS in an arbitrary chart. Round one is centered at `mode` with the inverse
/// Gauss-Newton Hessian as scale; later rounds refit mean and covariance from
/// all weighted samples so far, and every weight is recomputed against the
/// equal-weight mixture of all proposals used.
pub fn amis_sample_in_chart<C: PoseChart>(
    x: &CorrespondenceSet,
    mode: &Pose,
    chart: &C,
    cfg: &McConfig,
    seed: u64,
) -> Result<MCSampleSet> {
    if cfg.rounds == 0 || cfg.k_per_round == 0 {
        return Err(Error::InvalidArgument("AMIS needs at least one sample".into()));
    }
    let floors = cfg.floors(&chart.axis_kinds());
    let mut proposals = vec![initial_proposal(x, mode, chart, cfg)?];
    let mut samples: Vec<McSample> = Vec::with_capacity(cfg.total_samples());
    let mut rng = stream_rng(seed, 0);
    for round in 0..cfg.rounds {
        let q = proposals[round].clone();
        for _ in 0..cfg.k_per_round {
            let coords = q.sample(&mut rng);
            let pose = chart.pose(&coords);
            let log_likelihood = log_likelihood(x, &pose);
            samples.push(McSample {
                coords,
                pose,
                log_proposal: 0.0,
                log_likelihood,
                log_weight: 0.0,
                weight: 0.0,
            });
        }
        for s in samples.iter_mut() {
            s.log_proposal = log_mixture(&proposals, &s.coords);
            s.log_weight = s.log_likelihood - s.log_proposal;
            s.weight = s.log_weight.exp();
        }
        if round + 1 < cfg.rounds {
            let next = refit_proposal(&samples, &q, &floors, cfg);
            proposals.push(next);
        }
    }
    Ok(MCSampleSet { samples, proposals })
}

/// `log (1/K) Σ v_j`, via log-sum-exp.
pub fn l_pred(s: &MCSampleSet) -> Result<f64> {
    let finite: Vec<f64> = s
        .samples
        .iter()
        .map(|x| x.log_weight)
        .filter(|v| !v.is_nan() && *v != f64::INFINITY)
        .collect();
    let lse = log_sum_exp(finite.iter().copied());
    if finite.is_empty() || !lse.is_finite() {
        return Err(Error::DegenerateSampleSet);
    }
    Ok(lse - (s.samples.len() as f64).ln())
}

/// Estimator of [`l_pred`] with the sample poses and mixture densities held
/// fixed and the likelihood re-evaluated under `x`.
pub fn l_pred_frozen(x: &CorrespondenceSet, s: &MCSampleSet) -> Result<f64> {
    let lw: Vec<f64> = s
        .samples
        .iter()
        .map(|smp| log_likelihood(x, &smp.pose) - smp.log_proposal)
        .collect();
    let lse = log_sum_exp(lw.iter().copied());
    if lw.is_empty() || !lse.is_finite() {
        return Err(Error::DegenerateSampleSet);
    }
    Ok(lse - (lw.len() as f64).ln())
}

/// One predicted grasp with its matched ground truth, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedGrasp {
    pub observation: CorrespondenceSet,
    pub target: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraspKl {
    pub l_pred: f64,
    /// `½ Σ ‖w ⊙ E(ŷ)‖²` at the matched target.
    pub target_cost: f64,
    pub mode: SolveReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlEvaluation {
    pub total: f64,
    pub per_grasp: Vec<GraspKl>,
    pub samples: Vec<MCSampleSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    /// Per grasp, per correspondence.
    pub d_p2d: Vec<Vec<Vector2<f64>>>,
    pub d_w2d: Vec<Vec<Vector2<f64>>>,
}

fn targets(grasps: &[SupervisedGrasp]) -> Result<Vec<Pose>> {
    grasps
        .iter()
        .enumerate()
        .map(|(i, g)| g.target.ok_or(Error::MissingSupervision(i)))
        .collect()
}

/// Multi-objective KL loss `Σ_j [ l_pred_j + cost_j(ŷ_j) ]`, constants dropped.
/// Grasp `j` uses seeds derived from `(seed, j)`, so the result does not depend
/// on how the grasps are scheduled.
pub fn kl_loss(grasps: &[SupervisedGrasp], cfg: &KlConfig, seed: u64) -> Result<KlEvaluation> {
    targets(grasps)?;
    let modes = grasps
        .par_iter()
        .enumerate()
        .map(|(j, g)| multi_start_solve(&g.observation, &cfg.solver, derive_seed(derive_seed(seed, j as u64), 0)))
        .collect::<Result<Vec<_>>>()?;
    kl_loss_with_modes(grasps, &modes, cfg, seed)
}

/// [`kl_loss`] with the mode of every grasp already known. Sampling for grasp
/// `j` uses the same seed stream as [`kl_loss`].
pub fn kl_loss_with_modes(
    grasps: &[SupervisedGrasp],
    modes: &[SolveReport],
    cfg: &KlConfig,
    seed: u64,
) -> Result<KlEvaluation> {
    if grasps.len() != modes.len() {
        return Err(Error::LengthMismatch(format!(
            "{} grasps vs {} modes",
            grasps.len(),
            modes.len()
        )));
    }
    let targets = targets(grasps)?;
    let parts: Vec<Result<(GraspKl, MCSampleSet)>> = grasps
        .par_iter()
        .zip(targets.par_iter())
        .zip(modes.par_iter())
        .enumerate()
        .map(|(j, ((g, target), mode))| {
            let gseed = derive_seed(seed, j as u64);
            let set = amis_sample(&g.observation, mode, &cfg.mc, derive_seed(gseed, 1))?;
            let lp = l_pred(&set)?;
            let target_cost = weighted_cost(&g.observation, target);
            Ok((
                GraspKl {
                    l_pred: lp,
                    target_cost,
                    mode: *mode,
                },
                set,
            ))
        })
        .collect();
    let mut per_grasp = Vec::with_capacity(grasps.len());
    let mut samples = Vec::with_capacity(grasps.len());
    for p in parts {
        let (g, s) = p?;
        per_grasp.push(g);
        samples.push(s);
    }
    let total = per_grasp.iter().map(|g| g.l_pred + g.target_cost).sum();
    Ok(KlEvaluation {
        total,
        per_grasp,
        samples,
    })
}

/// KL loss re-evaluated on frozen sample sets (one per grasp).
pub fn kl_loss_on_samples(grasps: &[SupervisedGrasp], samples: &[MCSampleSet]) -> Result<f64> {
    if grasps.len() != samples.len() {
        return Err(Error::LengthMismatch(format!(
            "{} grasps vs {} sample sets",
            grasps.len(),
            samples.len()
        )));
    }
    let targets = targets(grasps)?;
    let mut total = 0.0;
    for ((g, s), t) in grasps.iter().zip(samples).zip(targets.iter()) {
        total += l_pred_frozen(&g.observation, s)? + weighted_cost(&g.observation, t);
    }
    Ok(total)
}

impl KlEvaluation {
    /// Gradient of the loss with respect to every `p2d` and `w2d`, from the
    /// stored samples.
    pub fn gradient(&self, grasps: &[SupervisedGrasp]) -> Result<GradientBundle> {
        let targets = targets(grasps)?;
        let mut d_p2d = Vec::with_capacity(grasps.len());
        let mut d_w2d = Vec::with_capacity(grasps.len());
        for ((g, set), target) in grasps.iter().zip(&self.samples).zip(targets.iter()) {
            let x = &g.observation;
            let k = &x.intrinsics;
            let n = x.items.len();
            let mut gp = vec![Vector2::zeros(); n];
            let mut gw = vec![Vector2::zeros(); n];
            let lw: Vec<f64> = set
                .samples
                .iter()
                .map(|s| log_likelihood(x, &s.pose) - s.log_proposal)
                .collect();
            let lse = log_sum_exp(lw.iter().copied());
            if !lse.is_finite() {
                return Err(Error::DegenerateSampleSet);
            }
            // log-normalizer: −E_q̃[∂cost]
            for (s, l) in set.samples.iter().zip(lw.iter()) {
                let v = (l - lse).exp();
                if v == 0.0 {
                    continue;
                }
                for (i, c) in x.items.iter().enumerate() {
                    let e = reproj_error(c, k, &s.pose);
                    let w2 = c.w2d.component_mul(&c.w2d);
                    gp[i] += w2.component_mul(&e) * v;
                    gw[i] -= c.w2d.component_mul(&e.component_mul(&e)) * v;
                }
            }
            // target term: +∂cost(ŷ)
            for (i, c) in x.items.iter().enumerate() {
                let e = reproj_error(c, k, target);
                let w2 = c.w2d.component_mul(&c.w2d);
                gp[i] -= w2.component_mul(&e);
                gw[i] += c.w2d.component_mul(&e.component_mul(&e));
            }
            d_p2d.push(gp);
            d_w2d.push(gw);
        }
        Ok(GradientBundle {
            loss: self.total,
            d_p2d,
            d_w2d,
        })
    }
}

/// Loss and gradient from a single sample draw.
pub fn kl_loss_grad(grasps: &[SupervisedGrasp], cfg: &KlConfig, seed: u64) -> Result<GradientBundle> {
    kl_loss(grasps, cfg, seed)?.gradient(grasps)
}

/// Midpoint-rule integral of `exp(−cost)` over a box in planar chart
/// coordinates `(x, y, θ)`. A verification oracle for [`l_pred`]; it costs
/// `resolution³` cost evaluations.
pub fn planar_grid_oracle<C: PoseChart>(
    x: &CorrespondenceSet,
    chart: &C,
    bounds: [(f64, f64); 3],
    resolution: usize,
) -> f64 {
    planar_grid_integral(chart, bounds, resolution, |pose| (-weighted_cost(x, pose)).exp())
}

/// Midpoint-rule integral of an arbitrary pose density over a planar box.
pub fn planar_grid_integral<C, F>(chart: &C, bounds: [(f64, f64); 3], resolution: usize, density: F) -> f64
where
    C: PoseChart,
    F: Fn(&Pose) -> f64 + Sync,
{
    let n = resolution.max(1);
    let h: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo) / n as f64).collect();
    let cell = h.iter().product::<f64>();
    let slabs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            let mut c = DVector::zeros(3);
            c[0] = bounds[0].0 + (i as f64 + 0.5) * h[0];
            for j in 0..n {
                c[1] = bounds[1].0 + (j as f64 + 0.5) * h[1];
                for l in 0..n {
                    c[2] = bounds[2].0 + (l as f64 + 0.5) * h[2];
                    acc += density(&chart.pose(&c));
                }
            }
            acc
        })
        .collect();
    slabs.iter().sum::<f64>() * cell
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::PlanarChart;
    use crate::geometry::{project, CameraIntrinsics, GripperModel};
    use crate::pnp::Correspondence;
    use nalgebra::{UnitQuaternion, Vector3, Vector6};
    use rand::Rng;

    fn gripper_set(pose: &Pose, w: f64) -> CorrespondenceSet {
        let k = CameraIntrinsics::default();
        let g = GripperModel::default();
        let items = g
            .corners
            .iter()
            .map(|p| {
                let px = project(&k, &pose.transform_point(p)).unwrap();
                Correspondence::new(px, *p, Vector2::repeat(w))
            })
            .collect();
        CorrespondenceSet::new(items, k)
    }

    fn test_pose() -> Pose {
        Pose::new(
            UnitQuaternion::from_euler_angles(-1.2, 0.3, 0.5),
            Vector3::new(0.03, -0.02, 0.5),
        )
    }

    #[test]
    fn log_likelihood_is_negated_cost() {
        let y = test_pose();
        let x = gripper_set(&y, 1.0);
        assert_eq!(log_likelihood(&x, &y), 0.0);
        let mut x2 = x.clone();
        // cost = ½ (1² + 1² + 1² + 1²) = 2
        x2.items[0].p2d += Vector2::new(1.0, 1.0);
        x2.items[1].p2d += Vector2::new(1.0, -1.0);
        assert!((log_likelihood(&x2, &y) + 2.0).abs() < 1e-9);
    }

    #[test]
    fn mode_maximizes_density_over_probes() {
        let y = test_pose();
        let mut x = gripper_set(&y, 1.0);
        x.items[2].p2d += Vector2::new(1.5, -0.5);
        let mode = multi_start_solve(&x, &SolverConfig::default(), 1).unwrap();
        let best = log_likelihood(&x, &mode.pose);
        let mut rng = crate::rng::rng_from_seed(2);
        for _ in 0..1000 {
            let d = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 0.01;
            assert!(log_likelihood(&x, &mode.pose.perturb_left(&d)) <= best);
        }
    }

    #[test]
    fn l_pred_small_cases() {
        let mk = |lw: &[f64]| MCSampleSet {
            samples: lw
                .iter()
                .map(|l| McSample {
                    coords: DVector::zeros(1),
                    pose: Pose::identity(),
                    log_proposal: 0.0,
                    log_likelihood: *l,
                    log_weight: *l,
                    weight: l.exp(),
                })
                .collect(),
            proposals: vec![],
        };
        assert_eq!(l_pred(&mk(&[0.0])).unwrap(), 0.0);
        let v = l_pred(&mk(&[0.0, 3f64.ln()])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l_pred(&mk(&[f64::NEG_INFINITY])), Err(Error::DegenerateSampleSet));
        assert_eq!(l_pred(&mk(&[])), Err(Error::DegenerateSampleSet));
    }

    #[test]
    fn sample_set_is_consistent_and_deterministic() {
        let y = test_pose();
        let x = gripper_set(&y, 1.0);
        let mode = multi_start_solve(&x, &SolverConfig::default(), 3).unwrap();
        let cfg = McConfig::default();
        let a = amis_sample(&x, &mode, &cfg, 9).unwrap();
        let b = amis_sample(&x, &mode, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.total_samples());
        assert_eq!(a.proposals.len(), cfg.rounds);
        for s in &a.samples {
            assert!(s.weight >= 0.0 && s.weight.is_finite());
            let lm = a.log_mixture(&s.coords);
            assert!((s.log_weight - (s.log_likelihood - lm)).abs() < 1e-9);
        }
        let total: f64 = a.normalized_weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_at_mode_beats_far_tail() {
        let y = test_pose();
        let x = gripper_set(&y, 1.0);
        let mode = multi_start_solve(&x, &SolverConfig::default(), 3).unwrap();
        let set = amis_sample(&x, &mode, &McConfig::default(), 4).unwrap();
        let chart = TangentChart::new(mode.pose);
        let q = &set.proposals[0];
        let at = |c: &DVector<f64>| log_likelihood(&x, &chart.pose(c)) - set.log_mixture(c);
        let center = q.center.clone();
        let scales = q.marginal_scales();
        for axis in 0..6 {
            let mut far = center.clone();
            far[axis] += 10.0 * scales[axis];
            assert!(at(&center) > at(&far), "axis {axis}");
        }
    }

    #[test]
    fn proposal_density_integrates_to_one_in_1d() {
        let q = ProposalDistribution::new(
            DVector::from_vec(vec![0.3]),
            DMatrix::from_vec(1, 1, vec![0.5]),
            3.0,
        )
        .unwrap();
        let n = 400_000;
        let (lo, hi) = (-400.0, 400.0);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| q.log_density(&DVector::from_vec(vec![lo + (i as f64 + 0.5) * h])).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        assert!(ProposalDistribution::new(DVector::zeros(1), DMatrix::identity(1, 1), 2.0).is_err());
    }

    #[test]
    fn grid_oracle_constant_density_is_box_volume() {
        let chart = PlanarChart::new(UnitQuaternion::identity(), 0.5);
        let v = planar_grid_integral(&chart, [(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)], 10, |_| 1.0);
        assert!((v - 1.0).abs() < 1e-12);
        let v = planar_grid_integral(&chart, [(0.0, 2.0), (-1.0, 1.0), (0.0, 0.5)], 7, |_| 1.0);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_loss_noiseless_target_term_vanishes() {
        let y = test_pose();
        let x = gripper_set(&y, 1.0);
        let grasps = vec![SupervisedGrasp {
            observation: x,
            target: Some(y),
        }];
        let ev = kl_loss(&grasps, &KlConfig::default(), 5).unwrap();
        assert!(ev.per_grasp[0].target_cost.abs() < 1e-20);
        assert!((ev.total - ev.per_grasp[0].l_pred).abs() < 1e-12);
        let g = ev.gradient(&grasps).unwrap();
        // target term alone is stationary; zero residual at ŷ
        for c in &grasps[0].observation.items {
            assert_eq!(reproj_error(c, &grasps[0].observation.intrinsics, &y), Vector2::zeros());
        }
        assert!(g.d_p2d[0].iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn target_term_scales_quadratically_with_weights() {
        let y = test_pose();
        let mut x = gripper_set(&y, 1.0);
        x.items[1].p2d += Vector2::new(2.0, 1.0);
        let one = weighted_cost(&x, &y);
        let two = weighted_cost(&x.scaled_weights(2.0), &y);
        assert!((two - 4.0 * one).abs() < 1e-9 && one > 0.0);
    }

    #[test]
    fn missing_target_is_reported() {
        let y = test_pose();
        let grasps = vec![
            SupervisedGrasp { observation: gripper_set(&y, 1.0), target: Some(y) },
            SupervisedGrasp { observation: gripper_set(&y, 1.0), target: None },
        ];
        assert_eq!(kl_loss(&grasps, &KlConfig::default(), 1), Err(Error::MissingSupervision(1)));
    }

    #[test]
    fn zero_weight_point_gets_no_target_gradient() {
        let y = test_pose();
        let mut x = gripper_set(&y, 1.0);
        x.items.push(Correspondence::new(
            Vector2::new(100.0, 100.0),
            Vector3::new(0.01, 0.0, 0.02),
            Vector2::zeros(),
        ));
        let grasps = vec![SupervisedGrasp { observation: x, target: Some(y) }];
        let g = kl_loss_grad(&grasps, &KlConfig::default(), 2).unwrap();
        assert_eq!(g.d_p2d[0][4], Vector2::zeros());
    }
}
