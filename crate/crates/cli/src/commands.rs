use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rayon::prelude::*;

use ppgrasp::codec::{decode_keypoints, encode_scene};
use ppgrasp::config::RunConfig;
use ppgrasp::eval::{emit_report, evaluate, report_table};
use ppgrasp::gradcheck::{gradcheck as run_gradcheck, gradcheck_csv, GradcheckConfig};
use ppgrasp::matching::pose_angle;
use ppgrasp::pnp::{multi_start_solve, Correspondence, CorrespondenceSet};
use ppgrasp::posefile::{read_poses, write_poses, PoseRecord};
use ppgrasp::rng::{derive_seed, stream_rng};
use ppgrasp::scene::{load_scene, observe_scene, sample_scene, save_scene, Scene};
use ppgrasp::train::{median, train_toy as run_train, ParametricPredictor};

use crate::{CliResult, DirLock, EvalArgs, Failure, GenArgs, GradcheckArgs, SolveArgs, TrainArgs};

const SCENE_EXT: &str = "scene";
const POSE_EXT: &str = "poses";

/// Scene files of a directory as `(stem, path)`, sorted by file name.
fn list_scenes(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Domain(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(SCENE_EXT) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Failure::Domain(format!("no .{SCENE_EXT} files in {}", dir.display())));
    }
    Ok(out)
}

fn load_all(files: &[(String, PathBuf)]) -> CliResult<Vec<Scene>> {
    files
        .iter()
        .map(|(_, p)| load_scene(p).map_err(|e| Failure::Domain(format!("{}: {e}", p.display()))))
        .collect()
}

fn require_out(out: Option<&Path>, cmd: &str) -> CliResult<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| Failure::Usage(format!("{cmd} needs --out")))
}

pub fn gen(a: &GenArgs, cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let _lock = DirLock::acquire(dir)?;
    let scenes: Vec<_> = (0..a.num)
        .into_par_iter()
        .map(|i| sample_scene(&cfg.scene, derive_seed(cfg.seed, i as u64)))
        .collect::<Result<_, _>>()?;
    let mut grasps = 0;
    for (i, s) in scenes.iter().enumerate() {
        save_scene(s, &dir.join(format!("scene_{i:04}.{SCENE_EXT}")))?;
        grasps += s.grasps.len();
    }
    println!("wrote {} scenes with {grasps} grasps to {}", scenes.len(), dir.display());
    Ok(())
}

/// Keypoints to solve for one scene: `(grasp index, correspondences, 2D confidence)`.
fn detections(s: &Scene, cfg: &RunConfig, seed: u64, via_map: bool) -> Vec<(usize, CorrespondenceSet, f64)> {
    let g = &cfg.optim.gripper;
    let obs = observe_scene(s, g, &cfg.noise, &mut stream_rng(seed, 0));
    if !via_map {
        return obs.into_iter().map(|o| (o.grasp, o.correspondences, 1.0)).collect();
    }
    let mut enc = encode_scene(s, g, cfg.optim.stride);
    let stride = enc.map.stride as f64;
    let encoded: Vec<usize> = (0..s.grasps.len()).filter(|i| !enc.skipped.contains(i)).collect();
    let mut owner = HashMap::new();
    for (&idx, &(r, c)) in encoded.iter().zip(&enc.peaks) {
        let center = Vector2::new(c as f64 * stride, r as f64 * stride) + enc.map.sub.get(r, c);
        let kps: Vec<Vector2<f64>> = obs[idx].correspondences.items.iter().map(|x| x.p2d).collect();
        *enc.map.offsets.get_mut(r, c) = [kps[0] - center, kps[1] - center, kps[2] - center, kps[3] - center];
        owner.insert((r, c), idx);
    }
    decode_keypoints(&enc.map, cfg.decode_threshold, cfg.top_k)
        .into_iter()
        .filter_map(|d| {
            let idx = *owner.get(&d.cell)?;
            let items = (0..4)
                .map(|k| Correspondence::new(d.keypoints[k], g.corners[k], d.weights[k]))
                .collect();
            let conf = d.weights.iter().map(|w| w.mean()).sum::<f64>() / 4.0 * d.score;
            Some((idx, CorrespondenceSet::new(items, s.intrinsics), conf))
        })
        .collect()
}

struct SceneSolve {
    records: Vec<PoseRecord>,
    errors: Vec<(f64, f64)>,
    failures: Vec<String>,
}

fn solve_scene(stem: &str, path: &Path, index: usize, cfg: &RunConfig, via_map: bool) -> SceneSolve {
    let s = match load_scene(path) {
        Ok(s) => s,
        Err(e) => {
            return SceneSolve {
                records: vec![],
                errors: vec![],
                failures: vec![format!("{}: {e}", path.display())],
            }
        }
    };
    let seed = derive_seed(cfg.seed, index as u64);
    let mut out = SceneSolve {
        records: vec![],
        errors: vec![],
        failures: vec![],
    };
    for (n, (grasp, x, score)) in detections(&s, cfg, seed, via_map).into_iter().enumerate() {
        match multi_start_solve(&x, &cfg.optim.kl.solver, derive_seed(seed, n as u64 + 1)) {
            Ok(r) => {
                let gt = s.grasp_in_camera(grasp);
                out.errors.push((
                    r.pose.translation_distance(&gt),
                    pose_angle(&r.pose, &gt, cfg.optim.matching.symmetric),
                ));
                out.records.push(PoseRecord {
                    scene: stem.to_string(),
                    grasp,
                    pose: r.pose,
                    score,
                    cost: r.cost,
                });
            }
            Err(e) => out.failures.push(format!("{stem} grasp {grasp}: {e}")),
        }
    }
    out.records.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.cost.total_cmp(&b.cost))
            .then(a.grasp.cmp(&b.grasp))
    });
    out
}

pub fn solve(a: &SolveArgs, cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    let files = list_scenes(&a.scenes_dir)?;
    let dir = require_out(out, "solve")?;
    let _lock = DirLock::acquire(&dir)?;
    let results: Vec<SceneSolve> = files
        .par_iter()
        .enumerate()
        .map(|(i, (stem, path))| solve_scene(stem, path, i, cfg, a.via_map))
        .collect();
    let mut failed_scenes = 0;
    let (mut cm, mut deg) = (Vec::new(), Vec::new());
    let mut solved = 0;
    for ((stem, _), r) in files.iter().zip(&results) {
        for f in &r.failures {
            eprintln!("warning: {f}");
        }
        if !r.failures.is_empty() {
            failed_scenes += 1;
        }
        fs::write(dir.join(format!("{stem}.{POSE_EXT}")), write_poses(&r.records))?;
        solved += r.records.len();
        cm.extend(r.errors.iter().map(|e| e.0 * 100.0));
        deg.extend(r.errors.iter().map(|e| e.1.to_degrees()));
    }
    println!(
        "scenes {}  solved grasps {solved}  median error {:.4} cm / {:.4} deg  failed scenes {failed_scenes}",
        files.len(),
        median(&mut cm),
        median(&mut deg)
    );
    if failed_scenes > 0 {
        return Err(Failure::Domain(format!("{failed_scenes} scene(s) had failures")));
    }
    Ok(())
}

pub fn train_toy(a: &TrainArgs, cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    let files = list_scenes(&a.scenes_dir)?;
    let mut scenes = Vec::new();
    for ((stem, _), s) in files.iter().zip(load_all(&files)?) {
        if s.grasps.is_empty() {
            eprintln!("note: {stem} has no grasps; skipped");
        } else {
            scenes.push(s);
        }
    }
    if scenes.is_empty() {
        return Err(Failure::Domain("no scene with grasps to train on".into()));
    }
    let g = &cfg.optim.gripper;
    let init = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = ParametricPredictor::perturbed(s, g, cfg.init_perturbation_px, derive_seed(cfg.seed, i as u64))?;
            Ok(if cfg.map_pathway { p.with_map(s, cfg.optim.stride) } else { p })
        })
        .collect::<Result<Vec<_>, ppgrasp::Error>>()?;
    let _lock = out.map(DirLock::acquire).transpose()?;
    let report = run_train(&scenes, init, &cfg.weights, &cfg.optim, cfg.seed)?;
    let csv = report.log_csv();
    match (&a.log_csv, out) {
        (Some(p), _) => fs::write(p, &csv)?,
        (None, Some(d)) => fs::write(d.join("train_log.csv"), &csv)?,
        (None, None) => print!("{csv}"),
    }
    if let Some(last) = report.log.last() {
        eprintln!(
            "iterations {}  total {:.6}  median error {:.4} cm / {:.4} deg",
            last.iter, last.total, last.median_pose_err_cm, last.median_pose_err_deg
        );
    }
    match report.diverged {
        Some(m) => Err(Failure::Domain(format!("training diverged: {m}"))),
        None => Ok(()),
    }
}

pub fn gradcheck(a: &GradcheckArgs, cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    if a.min_points < 4 || a.max_points < a.min_points {
        return Err(Failure::Usage("need 4 ≤ --min-points ≤ --max-points".into()));
    }
    let gc = GradcheckConfig {
        trials: a.trials,
        min_points: a.min_points,
        max_points: a.max_points,
        kl: cfg.optim.kl.clone(),
        ..Default::default()
    };
    let rows = run_gradcheck(&gc, cfg.seed)?;
    let csv = gradcheck_csv(&rows);
    match out {
        Some(d) => {
            let _lock = DirLock::acquire(d)?;
            fs::write(d.join("gradcheck.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    let bad = rows.iter().filter(|r| !(r.rel_error < 1e-3)).count();
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    eprintln!(
        "{} coordinates over {} trials, {bad} with relative error ≥ 1e-3, max {worst:.3e}",
        rows.len(),
        a.trials
    );
    if bad > 0 {
        return Err(Failure::Domain(format!("{bad} coordinate(s) failed the gradient check")));
    }
    Ok(())
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    let files = list_scenes(&a.scenes_dir)?;
    let scenes = load_all(&files)?;
    let mut preds = Vec::with_capacity(files.len());
    for (stem, _) in &files {
        let p = a.pred_dir.join(format!("{stem}.{POSE_EXT}"));
        let poses = if p.exists() {
            let text = fs::read_to_string(&p)?;
            read_poses(&text)
                .map_err(|e| Failure::Domain(format!("{}: {e}", p.display())))?
                .into_iter()
                .map(|r| r.pose)
                .collect()
        } else {
            eprintln!("note: no predictions for {stem}");
            Vec::new()
        };
        preds.push(poses);
    }
    let gts: Vec<_> = scenes.iter().map(Scene::grasps_in_camera).collect();
    let report = evaluate(&preds, &gts, &cfg.thresholds, &cfg.optim.matching)?;
    print!("{}", report_table(&report));
    if let Some(d) = out {
        let _lock = DirLock::acquire(d)?;
        emit_report(&report, d)?;
    }
    Ok(())
}
