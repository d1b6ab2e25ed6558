//! Success and coverage rates under joint translation/rotation thresholds.
//!
//! A prediction succeeds when it is within both thresholds of a ground-truth
//! grasp that no earlier success has claimed. Claims are made greedily in
//! ascending [`pose_distance`] order. A ground-truth grasp counts as covered
//! when at least one prediction is within both thresholds of it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::matching::{pose_angle, pose_distance, PoseDistanceParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuccessThresholds {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

impl SuccessThresholds {
    pub fn new(translation_m: f64, rotation_deg: f64) -> Result<Self> {
        if !(translation_m > 0.0 && rotation_deg > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be positive, got {translation_m} m / {rotation_deg} deg"
            )));
        }
        Ok(Self {
            translation_m,
            rotation_deg,
        })
    }

    pub fn cm_deg(cm: f64, deg: f64) -> Result<Self> {
        Self::new(cm / 100.0, deg)
    }

    pub fn accepts(&self, pred: &Pose, gt: &Pose, symmetric: bool) -> bool {
        pred.translation_distance(gt) <= self.translation_m
            && pose_angle(pred, gt, symmetric).to_degrees() <= self.rotation_deg
    }

    /// Parses `"1.0:10,1.5:10"` (centimeters:degrees).
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let (cm, deg) = p
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidArgument(format!("threshold `{p}` is not cm:deg")))?;
                let num = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad threshold value `{v}`")))
                };
                Self::cm_deg(num(cm)?, num(deg)?)
            })
            .collect()
    }
}

/// 1.0 / 1.5 / 2.0 / 5.0 cm × 10 / 20 / 45 degrees.
pub fn default_grid() -> Vec<SuccessThresholds> {
    let mut out = Vec::new();
    for deg in [10.0, 20.0, 45.0] {
        for cm in [1.0, 1.5, 2.0, 5.0] {
            out.push(SuccessThresholds::cm_deg(cm, deg).expect("positive"));
        }
    }
    out
}

/// Whether `pred` is within `th` of some ground truth, and the closest such one.
pub fn grasp_success(
    pred: &Pose,
    gts: &[Pose],
    th: &SuccessThresholds,
    params: &PoseDistanceParams,
) -> Option<usize> {
    gts.iter()
        .enumerate()
        .filter(|(_, g)| th.accepts(pred, g, params.symmetric))
        .map(|(j, g)| (pose_distance(pred, g, params), j))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, j)| j)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub predictions: usize,
    pub ground_truth: usize,
    pub successes: usize,
    pub covered: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.predictions += o.predictions;
        self.ground_truth += o.ground_truth;
        self.successes += o.successes;
        self.covered += o.covered;
    }

    /// Successes over predictions; 0 when there are none.
    pub fn success_rate(&self) -> f64 {
        ratio(self.successes, self.predictions)
    }

    /// Covered ground truth over ground truth; 0 when there is none.
    pub fn coverage_rate(&self) -> f64 {
        ratio(self.covered, self.ground_truth)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts for one scene at one threshold.
pub fn scene_counts(preds: &[Pose], gts: &[Pose], th: &SuccessThresholds, params: &PoseDistanceParams) -> Counts {
    let mut pairs = Vec::new();
    let mut covered = vec![false; gts.len()];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            if th.accepts(p, g, params.symmetric) {
                covered[j] = true;
                pairs.push((pose_distance(p, g, params), i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut successes = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            successes += 1;
        }
    }
    Counts {
        predictions: preds.len(),
        ground_truth: gts.len(),
        successes,
        covered: covered.iter().filter(|c| **c).count(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdResult {
    pub thresholds: SuccessThresholds,
    pub per_scene: Vec<Counts>,
    pub total: Counts,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ThresholdResult>,
}

impl EvalReport {
    pub fn row(&self, th: &SuccessThresholds) -> Option<&ThresholdResult> {
        self.rows.iter().find(|r| r.thresholds == *th)
    }
}

/// Rates for every threshold in `grid`. `preds[s]` and `gts[s]` belong to scene `s`.
pub fn evaluate(
    preds: &[Vec<Pose>],
    gts: &[Vec<Pose>],
    grid: &[SuccessThresholds],
    params: &PoseDistanceParams,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prediction sets for {} scenes",
            preds.len(),
            gts.len()
        )));
    }
    let rows = grid
        .iter()
        .map(|th| {
            let per_scene: Vec<Counts> = preds
                .iter()
                .zip(gts)
                .map(|(p, g)| scene_counts(p, g, th, params))
                .collect();
            let mut total = Counts::default();
            per_scene.iter().for_each(|c| total.add(c));
            ThresholdResult {
                thresholds: *th,
                per_scene,
                total,
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

pub const CSV_HEADER: &str =
    "translation_cm,rotation_deg,predictions,ground_truth,successes,covered,success_rate,coverage_rate";

pub fn report_csv(r: &EvalReport) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for row in &r.rows {
        let t = &row.total;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            row.thresholds.translation_m * 100.0,
            row.thresholds.rotation_deg,
            t.predictions,
            t.ground_truth,
            t.successes,
            t.covered,
            t.success_rate(),
            t.coverage_rate()
        );
    }
    s
}

/// One parsed CSV row: thresholds (cm, deg), counts, and the two rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsvRow {
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub counts: Counts,
    pub success_rate: f64,
    pub coverage_rate: f64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "unexpected report header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            if f.len() != 8 {
                return Err(err("expected 8 fields"));
            }
            let fl = |k: usize| f[k].parse::<f64>().map_err(|_| err("bad number"));
            let us = |k: usize| f[k].parse::<usize>().map_err(|_| err("bad count"));
            Ok(CsvRow {
                translation_cm: fl(0)?,
                rotation_deg: fl(1)?,
                counts: Counts {
                    predictions: us(2)?,
                    ground_truth: us(3)?,
                    successes: us(4)?,
                    covered: us(5)?,
                },
                success_rate: fl(6)?,
                coverage_rate: fl(7)?,
            })
        })
        .collect()
}

/// Published results of the full CNN-based method (success %, 1.0 / 1.5 / 2.0 cm),
/// shipped for context only.
const REFERENCE: [(&str, &str, [f64; 3]); 4] = [
    ("10°", "single-object", [93.4, 96.5, 98.5]),
    ("10°", "multi-object", [90.9, 93.9, 96.9]),
    ("20°", "single-object", [99.1, 99.5, 100.0]),
    ("20°", "multi-object", [95.2, 97.5, 98.1]),
];

/// Success-rate table: one row per rotation threshold, one column per translation threshold.
pub fn report_table(r: &EvalReport) -> String {
    let mut cms: Vec<f64> = Vec::new();
    let mut degs: Vec<f64> = Vec::new();
    for row in &r.rows {
        let cm = row.thresholds.translation_m * 100.0;
        if !cms.contains(&cm) {
            cms.push(cm);
        }
        if !degs.contains(&row.thresholds.rotation_deg) {
            degs.push(row.thresholds.rotation_deg);
        }
    }
    cms.sort_by(f64::total_cmp);
    degs.sort_by(f64::total_cmp);

    let mut s = String::from("Success rate (%) / coverage rate (%)\n");
    let _ = write!(s, "{:>8}", "angle");
    for cm in &cms {
        let _ = write!(s, " {:>15}", format!("{cm} cm"));
    }
    s.push('\n');
    for deg in &degs {
        let _ = write!(s, "{:>8}", format!("{deg}°"));
        for cm in &cms {
            let cell = r
                .rows
                .iter()
                .find(|row| row.thresholds.rotation_deg == *deg && row.thresholds.translation_m * 100.0 == *cm)
                .map(|row| {
                    format!(
                        "{:.1} / {:.1}",
                        100.0 * row.total.success_rate(),
                        100.0 * row.total.coverage_rate()
                    )
                })
                .unwrap_or_else(|| "-".into());
            let _ = write!(s, " {cell:>15}");
        }
        s.push('\n');
    }
    if let Some(row) = r.rows.first() {
        let t = &row.total;
        let _ = writeln!(s, "{} predictions, {} ground-truth grasps", t.predictions, t.ground_truth);
    }

    s.push_str("\nReference: published results of the full CNN-based method\n");
    s.push_str("(published figures, CNN-dependent, not reproduced here)\n");
    let _ = writeln!(s, "{:>8} {:>14}  1.0 / 1.5 / 2.0 cm", "angle", "scenes");
    for (deg, kind, v) in REFERENCE {
        let _ = writeln!(s, "{deg:>8} {kind:>14}  {} / {} / {}", v[0], v[1], v[2]);
    }
    s
}

/// Writes `<dir>/eval.csv` and `<dir>/eval.txt`; returns both paths.
pub fn emit_report(r: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("eval.csv");
    let txt = dir.join("eval.txt");
    std::fs::write(&csv, report_csv(r))?;
    std::fs::write(&txt, report_table(r))?;
    Ok((csv, txt))
}
