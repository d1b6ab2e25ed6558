//! Keypoint maps.
//!
//! A map holds, per output cell, the center heatmap `H`, the sub-pixel center
//! offset `S`, the four center-to-keypoint offsets `O` and the four keypoint
//! confidence weights `W`. Offsets are in input pixels. A detection at cell
//! `(u, v)` decodes to
//!
//! ```text
//! keypoint_k = ((u, v) · stride + S(u, v)) + O_k(u, v)
//! ```

use nalgebra::Vector2;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{gripper_keypoints_3d, project, CameraIntrinsics, GripperModel, Pose};
use crate::scene::Scene;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 100;
/// Probability clamp used by [`focal_loss`].
pub const FOCAL_EPS: f64 = 1e-6;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid<T> {
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        let i = row * self.cols + col;
        &mut self.data[i]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Flat numeric view of a grid cell, used by the L1 losses.
pub trait CellValues {
    const LEN: usize;
    fn value(&self, i: usize) -> f64;
    fn value_mut(&mut self, i: usize) -> &mut f64;
}

impl CellValues for f64 {
    const LEN: usize = 1;
    fn value(&self, _: usize) -> f64 {
        *self
    }
    fn value_mut(&mut self, _: usize) -> &mut f64 {
        self
    }
}

impl CellValues for Vector2<f64> {
    const LEN: usize = 2;
    fn value(&self, i: usize) -> f64 {
        self[i]
    }
    fn value_mut(&mut self, i: usize) -> &mut f64 {
        &mut self[i]
    }
}

impl CellValues for [Vector2<f64>; 4] {
    const LEN: usize = 8;
    fn value(&self, i: usize) -> f64 {
        self[i / 2][i % 2]
    }
    fn value_mut(&mut self, i: usize) -> &mut f64 {
        &mut self[i / 2][i % 2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointMap {
    pub heat: Grid<f64>,
    pub sub: Grid<Vector2<f64>>,
    pub offsets: Grid<[Vector2<f64>; 4]>,
    pub weights: Grid<[Vector2<f64>; 4]>,
    pub stride: usize,
}

impl KeypointMap {
    pub fn zeros(rows: usize, cols: usize, stride: usize) -> Self {
        Self {
            heat: Grid::filled(rows, cols, 0.0),
            sub: Grid::filled(rows, cols, Vector2::zeros()),
            offsets: Grid::filled(rows, cols, [Vector2::zeros(); 4]),
            weights: Grid::filled(rows, cols, [Vector2::zeros(); 4]),
            stride: stride.max(1),
        }
    }

    /// Empty map covering an image of the given intrinsics.
    pub fn for_image(k: &CameraIntrinsics, stride: usize) -> Self {
        let s = stride.max(1);
        let rows = (k.height as usize).div_ceil(s);
        let cols = (k.width as usize).div_ceil(s);
        Self::zeros(rows, cols, s)
    }

    pub fn rows(&self) -> usize {
        self.heat.rows
    }

    pub fn cols(&self) -> usize {
        self.heat.cols
    }

    /// Shape and range checks.
    pub fn validate(&self) -> Result<()> {
        let ok = self.heat.same_shape(&self.sub)
            && self.heat.same_shape(&self.offsets)
            && self.heat.same_shape(&self.weights)
            && self.stride >= 1
            && self.heat.data.iter().all(|h| (0.0..=1.0).contains(h));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("malformed keypoint map".into()))
        }
    }

    /// Flat text form: a `KPMAP` header with the shape, then one line per grid.
    pub fn to_text(&self) -> String {
        let mut s = format!("KPMAP 1 {} {} {}\n", self.rows(), self.cols(), self.stride);
        write_flat(&mut s, "H", &self.heat);
        write_flat(&mut s, "S", &self.sub);
        write_flat(&mut s, "O", &self.offsets);
        write_flat(&mut s, "W", &self.weights);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty map file".into(),
        })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 5 || h[0] != "KPMAP" {
            return Err(Error::Parse {
                line: 1,
                message: "expected `KPMAP <version> <rows> <cols> <stride>`".into(),
            });
        }
        if h[1] != "1" {
            return Err(Error::UnsupportedSchemaVersion(h[1].to_string()));
        }
        let num = |i: usize| {
            h[i].parse::<usize>().map_err(|_| Error::Parse {
                line: 1,
                message: format!("bad integer `{}`", h[i]),
            })
        };
        let mut map = KeypointMap::zeros(num(2)?, num(3)?, num(4)?);
        let mut next = |tag: &str| -> Result<(usize, Vec<f64>)> {
            let (i, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                message: format!("missing `{tag}` grid"),
            })?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `{tag}` grid"),
                });
            }
            let vals = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("bad number `{p}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((i + 1, vals))
        };
        read_flat(&mut map.heat, next("H")?)?;
        read_flat(&mut map.sub, next("S")?)?;
        read_flat(&mut map.offsets, next("O")?)?;
        read_flat(&mut map.weights, next("W")?)?;
        map.validate()?;
        Ok(map)
    }
}

fn write_flat<T: CellValues>(s: &mut String, tag: &str, g: &Grid<T>) {
    s.push_str(tag);
    for cell in &g.data {
        for i in 0..T::LEN {
            let _ = write!(s, " {}", cell.value(i));
        }
    }
    s.push('\n');
}

fn read_flat<T: CellValues>(g: &mut Grid<T>, (line, vals): (usize, Vec<f64>)) -> Result<()> {
    if vals.len() != g.data.len() * T::LEN {
        return Err(Error::Parse {
            line,
            message: format!("expected {} values, found {}", g.data.len() * T::LEN, vals.len()),
        });
    }
    for (n, cell) in g.data.iter_mut().enumerate() {
        for i in 0..T::LEN {
            *cell.value_mut(i) = vals[n * T::LEN + i];
        }
    }
    Ok(())
}

/// A decoded grasp: center, its four keypoints and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspDetection2D {
    pub center: Vector2<f64>,
    pub keypoints: [Vector2<f64>; 4],
    pub weights: [Vector2<f64>; 4],
    pub score: f64,
    /// `(row, col)` of the heatmap peak.
    pub cell: (usize, usize),
}

/// Result of [`encode_grasps`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMap {
    pub map: KeypointMap,
    /// `(row, col)` of each encoded center, in input order.
    pub peaks: Vec<(usize, usize)>,
    /// Indices of grasps that could not be encoded (center or a corner outside the image).
    pub skipped: Vec<usize>,
}

/// Splat radius in cells: `max(2, keypoint bbox diagonal / (3 · stride))`.
pub fn splat_sigma(keypoints: &[Vector2<f64>; 4], stride: usize) -> f64 {
    let (mut lo, mut hi) = (keypoints[0], keypoints[0]);
    for k in keypoints {
        lo = lo.inf(k);
        hi = hi.sup(k);
    }
    ((hi - lo).norm() / (3.0 * stride as f64)).max(2.0)
}

/// Ground-truth map for grasps given as gripper poses in the camera frame.
pub fn encode_grasps(
    grasps: &[Pose],
    k: &CameraIntrinsics,
    g: &GripperModel,
    stride: usize,
) -> EncodedMap {
    let mut map = KeypointMap::for_image(k, stride);
    let s = map.stride as f64;
    let mut peaks = Vec::new();
    let mut skipped = Vec::new();
    for (idx, pose) in grasps.iter().enumerate() {
        let center = project(k, &pose.transform_point(&g.center()));
        let corners = gripper_keypoints_3d(g, pose).map(|p| project(k, &p));
        let (Ok(center), true) = (center, corners.iter().all(|c| c.is_ok())) else {
            skipped.push(idx);
            continue;
        };
        if !k.contains(&center) {
            skipped.push(idx);
            continue;
        }
        let kps = corners.map(|c| c.expect("checked"));
        let col = (center.x / s).floor() as usize;
        let row = (center.y / s).floor() as usize;
        if row >= map.rows() || col >= map.cols() {
            skipped.push(idx);
            continue;
        }
        let sub = center - Vector2::new(col as f64 * s, row as f64 * s);
        let sigma = splat_sigma(&kps, map.stride);
        let radius = (3.0 * sigma).ceil() as isize;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (r, c) = (row as isize + dr, col as isize + dc);
                if r < 0 || c < 0 || r >= map.rows() as isize || c >= map.cols() as isize {
                    continue;
                }
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                let h = map.heat.get_mut(r as usize, c as usize);
                *h = h.max(v);
            }
        }
        *map.sub.get_mut(row, col) = sub;
        *map.offsets.get_mut(row, col) = kps.map(|kp| kp - center);
        *map.weights.get_mut(row, col) = [Vector2::repeat(1.0); 4];
        peaks.push((row, col));
    }
    EncodedMap {
        map,
        peaks,
        skipped,
    }
}

/// Ground-truth map for every grasp of a scene.
pub fn encode_scene(s: &Scene, g: &GripperModel, stride: usize) -> EncodedMap {
    encode_grasps(&s.grasps_in_camera(), &s.intrinsics, g, stride)
}

/// Peaks of `H` above `threshold` that are maximal in their 3×3 neighborhood,
/// best first (row-major order among equal scores), at most `top_k`.
pub fn decode_keypoints(m: &KeypointMap, threshold: f64, top_k: usize) -> Vec<GraspDetection2D> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let h = *m.heat.get(r, c);
            if h <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                        continue;
                    }
                    if *m.heat.get(rr as usize, cc as usize) > h {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((h, r, c));
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| (a.1 * cols + a.2).cmp(&(b.1 * cols + b.2)))
    });
    peaks.truncate(top_k);
    let s = m.stride as f64;
    peaks
        .into_iter()
        .map(|(score, r, c)| {
            let center = Vector2::new(c as f64 * s, r as f64 * s) + m.sub.get(r, c);
            let o = m.offsets.get(r, c);
            GraspDetection2D {
                center,
                keypoints: [center + o[0], center + o[1], center + o[2], center + o[3]],
                weights: *m.weights.get(r, c),
                score,
                cell: (r, c),
            }
        })
        .collect()
}

fn is_peak(gt: f64) -> bool {
    gt >= 1.0
}

/// Penalty-reduced focal loss (exponent 2 on the probability term, 4 on the
/// `1 − gt` down-weighting), normalized by the number of peak cells (≥ 1).
/// Peak cells are those with `gt == 1`.
pub fn focal_loss(pred: &Grid<f64>, gt: &Grid<f64>) -> Result<f64> {
    shape_check(pred, gt)?;
    let mut total = 0.0;
    let mut npos = 0usize;
    for (p, g) in pred.data.iter().zip(gt.data.iter()) {
        let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        if is_peak(*g) {
            npos += 1;
            total -= (1.0 - p).powi(2) * p.ln();
        } else {
            total -= (1.0 - g).powi(4) * p * p * (1.0 - p).ln();
        }
    }
    Ok(total / npos.max(1) as f64)
}

/// Derivative of [`focal_loss`] with respect to each (clamped) prediction.
pub fn focal_loss_grad(pred: &Grid<f64>, gt: &Grid<f64>) -> Result<Grid<f64>> {
    shape_check(pred, gt)?;
    let npos = gt.data.iter().filter(|g| is_peak(**g)).count().max(1) as f64;
    let data = pred
        .data
        .iter()
        .zip(gt.data.iter())
        .map(|(p, g)| {
            let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let d = if is_peak(*g) {
                2.0 * (1.0 - p) * p.ln() - (1.0 - p).powi(2) / p
            } else {
                -(1.0 - g).powi(4) * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
            };
            d / npos
        })
        .collect();
    Ok(Grid {
        rows: pred.rows,
        cols: pred.cols,
        data,
    })
}

/// Mean absolute error over the components of the masked cells; 0 for an empty mask.
pub fn l1_offset_loss<T: CellValues>(pred: &Grid<T>, gt: &Grid<T>, mask: &[(usize, usize)]) -> Result<f64> {
    shape_check(pred, gt)?;
    if mask.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(r, c) in mask {
        let (p, g) = (pred.get(r, c), gt.get(r, c));
        for i in 0..T::LEN {
            total += (p.value(i) - g.value(i)).abs();
        }
    }
    Ok(total / (mask.len() * T::LEN) as f64)
}

/// Subgradient of [`l1_offset_loss`] (sign, 0 at ties) as a dense grid.
pub fn l1_offset_loss_grad<T: CellValues + Clone>(
    pred: &Grid<T>,
    gt: &Grid<T>,
    mask: &[(usize, usize)],
    zero: T,
) -> Result<Grid<T>> {
    shape_check(pred, gt)?;
    let mut out = Grid::filled(pred.rows, pred.cols, zero);
    if mask.is_empty() {
        return Ok(out);
    }
    let norm = (mask.len() * T::LEN) as f64;
    for &(r, c) in mask {
        let (p, g) = (pred.get(r, c), gt.get(r, c));
        let cell = out.get_mut(r, c);
        for i in 0..T::LEN {
            let d = p.value(i) - g.value(i);
            *cell.value_mut(i) = if d > 0.0 {
                1.0 / norm
            } else if d < 0.0 {
                -1.0 / norm
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

fn shape_check<T, U>(a: &Grid<T>, b: &Grid<U>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::LengthMismatch(format!(
            "grid {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    fn facing_pose(x: f64, y: f64, z: f64, spin: f64) -> Pose {
        let face = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -std::f64::consts::FRAC_PI_2);
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), spin) * face,
            Vector3::new(x, y, z),
        )
    }

    #[test]
    fn decode_applies_offsets() {
        let mut m = KeypointMap::zeros(20, 20, 4);
        *m.heat.get_mut(12, 10) = 0.9;
        *m.sub.get_mut(12, 10) = Vector2::new(0.3, 0.4);
        m.offsets.get_mut(12, 10)[0] = Vector2::new(5.0, -2.0);
        let d = decode_keypoints(&m, DEFAULT_THRESHOLD, DEFAULT_TOP_K);
        assert_eq!(d.len(), 1);
        assert!((d[0].keypoints[0] - Vector2::new(45.3, 46.4)).norm() < 1e-12);
        assert_eq!(d[0].score, 0.9);
    }

    #[test]
    fn decode_empty_cases() {
        let m = KeypointMap::zeros(10, 10, 4);
        assert!(decode_keypoints(&m, DEFAULT_THRESHOLD, 10).is_empty());
        let mut m = KeypointMap::zeros(10, 10, 4);
        *m.heat.get_mut(3, 3) = 0.5;
        assert!(decode_keypoints(&m, 0.6, 10).is_empty());
        assert_eq!(decode_keypoints(&m, 0.4, 10).len(), 1);
    }

    #[test]
    fn decode_orders_by_score_then_row_major() {
        let mut m = KeypointMap::zeros(10, 10, 1);
        *m.heat.get_mut(7, 1) = 0.8;
        *m.heat.get_mut(2, 8) = 0.8;
        *m.heat.get_mut(5, 5) = 0.9;
        let d = decode_keypoints(&m, 0.3, 10);
        let cells: Vec<_> = d.iter().map(|x| x.cell).collect();
        assert_eq!(cells, vec![(5, 5), (2, 8), (7, 1)]);
        assert_eq!(decode_keypoints(&m, 0.3, 2).len(), 2);
    }

    #[test]
    fn center_on_cell_corner_has_zero_subpixel_offset() {
        let k = CameraIntrinsics::default();
        let g = GripperModel::default();
        // gripper center on the optical axis projects to (cx, cy) = (320, 240)
        let mut pose = facing_pose(0.0, 0.0, 0.5, 0.0);
        pose.translation -= pose.rotation * g.center();
        let enc = encode_grasps(&[pose], &k, &g, 4);
        assert_eq!(enc.peaks, vec![(60, 80)]);
        assert!(enc.map.sub.get(60, 80).norm() < 1e-9);
        assert_eq!(*enc.map.heat.get(60, 80), 1.0);
    }

    #[test]
    fn single_grasp_round_trip() {
        let k = CameraIntrinsics::default();
        let g = GripperModel::default();
        let pose = facing_pose(0.013, -0.021, 0.47, 0.7);
        let enc = encode_grasps(&[pose], &k, &g, 4);
        let d = decode_keypoints(&enc.map, DEFAULT_THRESHOLD, DEFAULT_TOP_K);
        assert_eq!(d.len(), 1);
        for (kp, c) in d[0].keypoints.iter().zip(g.corners.iter()) {
            let truth = project(&k, &pose.transform_point(c)).unwrap();
            assert!((kp - truth).norm() < 1e-4);
        }
        assert_eq!(d[0].weights, [Vector2::repeat(1.0); 4]);
    }

    #[test]
    fn two_separated_grasps_give_two_unit_peaks() {
        let k = CameraIntrinsics::default();
        let g = GripperModel::default();
        let a = facing_pose(-0.12, -0.05, 0.6, 0.2);
        let b = facing_pose(0.12, 0.08, 0.6, -1.0);
        let enc = encode_grasps(&[a, b], &k, &g, 4);
        let d = decode_keypoints(&enc.map, DEFAULT_THRESHOLD, DEFAULT_TOP_K);
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|x| x.score == 1.0));
    }

    #[test]
    fn off_image_grasp_is_skipped() {
        let k = CameraIntrinsics::default();
        let g = GripperModel::default();
        let enc = encode_grasps(&[facing_pose(2.0, 0.0, 0.5, 0.0)], &k, &g, 4);
        assert_eq!(enc.skipped, vec![0]);
        assert!(enc.peaks.is_empty());
    }

    #[test]
    fn focal_loss_cases() {
        let mut gt = Grid::filled(4, 4, 0.0);
        *gt.get_mut(1, 2) = 1.0;
        *gt.get_mut(1, 1) = 0.5;
        // near-perfect one-hot prediction
        let mut one_hot = Grid::filled(4, 4, 0.0);
        *one_hot.get_mut(1, 2) = 1.0;
        let mut gt_one_hot = Grid::filled(4, 4, 0.0);
        *gt_one_hot.get_mut(1, 2) = 1.0;
        assert!(focal_loss(&one_hot, &gt_one_hot).unwrap() < 1e-4);
        // p = 0.5 everywhere, by hand:
        //   peak: −0.25·ln 0.5
        //   gt=0.5 cell: −(0.5)^4 · 0.25 · ln 0.5
        //   14 zero cells: −0.25 · ln 0.5 each
        let half = Grid::filled(4, 4, 0.5);
        let ln_half = 0.5f64.ln();
        let by_hand = -0.25 * ln_half - 0.0625 * 0.25 * ln_half - 14.0 * 0.25 * ln_half;
        assert!((focal_loss(&half, &gt).unwrap() - by_hand).abs() < 1e-12);
        assert!(focal_loss(&Grid::filled(3, 3, 0.0), &Grid::filled(4, 4, 0.0)).is_err());
    }

    #[test]
    fn focal_grad_matches_finite_difference() {
        let mut gt = Grid::filled(3, 3, 0.2);
        *gt.get_mut(1, 1) = 1.0;
        let pred = Grid {
            rows: 3,
            cols: 3,
            data: vec![0.1, 0.3, 0.5, 0.7, 0.6, 0.2, 0.05, 0.9, 0.4],
        };
        let g = focal_loss_grad(&pred, &gt).unwrap();
        let h = 1e-7;
        for i in 0..9 {
            let mut p = pred.clone();
            p.data[i] += h;
            let up = focal_loss(&p, &gt).unwrap();
            p.data[i] -= 2.0 * h;
            let dn = focal_loss(&p, &gt).unwrap();
            assert!(((up - dn) / (2.0 * h) - g.data[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn l1_cases() {
        let gt = Grid::filled(3, 3, Vector2::new(1.0, 1.0));
        assert_eq!(l1_offset_loss(&gt, &gt, &[(0, 0), (2, 2)]).unwrap(), 0.0);
        let mut pred = gt.clone();
        *pred.get_mut(1, 1) = Vector2::new(4.0, 0.0);
        assert_eq!(l1_offset_loss(&pred, &gt, &[(1, 1)]).unwrap(), 2.0);
        *pred.get_mut(0, 2) = Vector2::new(100.0, -50.0);
        assert_eq!(l1_offset_loss(&pred, &gt, &[(1, 1)]).unwrap(), 2.0);
        assert_eq!(l1_offset_loss(&pred, &gt, &[]).unwrap(), 0.0);
    }

    #[test]
    fn map_text_round_trip() {
        let k = CameraIntrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap();
        let g = GripperModel::default();
        let enc = encode_grasps(&[facing_pose(0.0, 0.0, 1.0, 0.3)], &k, &g, 4);
        let text = enc.map.to_text();
        assert_eq!(KeypointMap::from_text(&text).unwrap(), enc.map);
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(KeypointMap::from_text(&truncated).is_err());
        assert!(matches!(
            KeypointMap::from_text(&text.replacen("KPMAP 1", "KPMAP 2", 1)),
            Err(Error::UnsupportedSchemaVersion(_))
        ));
    }
}
