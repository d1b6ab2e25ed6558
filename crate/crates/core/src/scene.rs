//! Synthetic tabletop scenes of primitive objects with analytic grasp labels.
//!
//! Every object rests on the `z = 0` plane with its frame origin at the center
//! of its footprint. Grasps are antipodal parallel-jaw grasps written in
//! closed form per primitive, so the labels are exact.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{gripper_keypoints_3d, look_at, project, CameraIntrinsics, GripperModel, Pose};
use crate::pnp::{Correspondence, CorrespondenceSet};
use crate::rng::{rng_from_seed, SeededRng};

pub const SCHEMA_VERSION: &str = "1";
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Cylinder,
    Ring,
    Stick,
    Sphere,
    SemiSphere,
    Cuboid,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Cylinder,
        Category::Ring,
        Category::Stick,
        Category::Sphere,
        Category::SemiSphere,
        Category::Cuboid,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Category::Cylinder => "Cylinder",
            Category::Ring => "Ring",
            Category::Stick => "Stick",
            Category::Sphere => "Sphere",
            Category::SemiSphere => "SemiSphere",
            Category::Cuboid => "Cuboid",
        }
    }

    pub fn parse(token: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.token().eq_ignore_ascii_case(token))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category `{token}`")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Shape and size of a primitive, meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Upright, axis along object z.
    Cylinder { radius: f64, height: f64 },
    /// Torus lying flat.
    Ring { major: f64, minor: f64 },
    /// Cylinder lying down, axis along object x.
    Stick { radius: f64, length: f64 },
    Sphere { radius: f64 },
    /// Dome up, flat face on the plane.
    SemiSphere { radius: f64 },
    Cuboid { extents: Vector3<f64> },
}

impl Shape {
    pub fn category(&self) -> Category {
        match self {
            Shape::Cylinder { .. } => Category::Cylinder,
            Shape::Ring { .. } => Category::Ring,
            Shape::Stick { .. } => Category::Stick,
            Shape::Sphere { .. } => Category::Sphere,
            Shape::SemiSphere { .. } => Category::SemiSphere,
            Shape::Cuboid { .. } => Category::Cuboid,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Shape::Cylinder { radius, height } => vec![radius, height],
            Shape::Ring { major, minor } => vec![major, minor],
            Shape::Stick { radius, length } => vec![radius, length],
            Shape::Sphere { radius } | Shape::SemiSphere { radius } => vec![radius],
            Shape::Cuboid { extents } => vec![extents.x, extents.y, extents.z],
        }
    }

    pub fn from_params(category: Category, p: &[f64]) -> Result<Shape> {
        let need = match category {
            Category::Sphere | Category::SemiSphere => 1,
            Category::Cuboid => 3,
            _ => 2,
        };
        if p.len() != need {
            return Err(Error::InvalidArgument(format!(
                "{category} takes {need} size parameters, got {}",
                p.len()
            )));
        }
        if !p.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{category} sizes must be positive")));
        }
        Ok(match category {
            Category::Cylinder => Shape::Cylinder {
                radius: p[0],
                height: p[1],
            },
            Category::Ring => Shape::Ring {
                major: p[0],
                minor: p[1],
            },
            Category::Stick => Shape::Stick {
                radius: p[0],
                length: p[1],
            },
            Category::Sphere => Shape::Sphere { radius: p[0] },
            Category::SemiSphere => Shape::SemiSphere { radius: p[0] },
            Category::Cuboid => Shape::Cuboid {
                extents: Vector3::new(p[0], p[1], p[2]),
            },
        })
    }

    /// Default size distribution per category.
    pub fn sample(category: Category, rng: &mut impl Rng) -> Shape {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match category {
            Category::Cylinder => Shape::Cylinder {
                radius: u(0.01, 0.035),
                height: u(0.05, 0.15),
            },
            Category::Ring => Shape::Ring {
                major: u(0.03, 0.06),
                minor: u(0.006, 0.015),
            },
            Category::Stick => Shape::Stick {
                radius: u(0.006, 0.015),
                length: u(0.1, 0.2),
            },
            Category::Sphere => Shape::Sphere {
                radius: u(0.015, 0.035),
            },
            Category::SemiSphere => Shape::SemiSphere {
                radius: u(0.015, 0.035),
            },
            Category::Cuboid => Shape::Cuboid {
                extents: Vector3::new(u(0.02, 0.07), u(0.02, 0.07), u(0.03, 0.1)),
            },
        }
    }

    /// Radius of the bounding circle of the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Cylinder { radius, .. } | Shape::Sphere { radius } | Shape::SemiSphere { radius } => radius,
            Shape::Ring { major, minor } => major + minor,
            Shape::Stick { radius, length } => (length / 2.0).hypot(radius),
            Shape::Cuboid { extents } => extents.x.hypot(extents.y) / 2.0,
        }
    }

    pub fn height(&self) -> f64 {
        match *self {
            Shape::Cylinder { height, .. } => height,
            Shape::Ring { minor, .. } => 2.0 * minor,
            Shape::Stick { radius, .. } => 2.0 * radius,
            Shape::Sphere { radius } => 2.0 * radius,
            Shape::SemiSphere { radius } => radius,
            Shape::Cuboid { extents } => extents.z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimitiveObject {
    pub shape: Shape,
    /// Object in world.
    pub pose: Pose,
}

impl PrimitiveObject {
    pub fn category(&self) -> Category {
        self.shape.category()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspLabel {
    /// Gripper in world.
    pub pose: Pose,
    pub object: usize,
    /// Jaw opening at contact, meters.
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<PrimitiveObject>,
    pub grasps: Vec<GraspLabel>,
    /// Camera in world.
    pub camera: Pose,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Scene {
    /// Grasp `i` as a gripper pose in the camera frame.
    pub fn grasp_in_camera(&self, i: usize) -> Pose {
        self.camera.inverse().compose(&self.grasps[i].pose)
    }

    pub fn grasps_in_camera(&self) -> Vec<Pose> {
        (0..self.grasps.len()).map(|i| self.grasp_in_camera(i)).collect()
    }

    /// Copy keeping only the listed grasps, in the given order.
    pub fn with_grasps(&self, keep: &[usize]) -> Scene {
        Scene {
            grasps: keep.iter().map(|&i| self.grasps[i]).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub categories: Vec<Category>,
    /// Side of the square placement area, meters.
    pub workspace: f64,
    /// Camera elevation range, degrees above the plane.
    pub elevation_deg: (f64, f64),
    /// Camera distance to the look-at point, meters.
    pub distance: (f64, f64),
    pub intrinsics: CameraIntrinsics,
    pub gripper: GripperModel,
    /// Grasp spacing along an object, meters.
    pub spacing: f64,
    /// Grasp spacing around an object, radians.
    pub angle_step: f64,
    /// Minimum angle between the view ray and the gripper plane, degrees.
    pub min_view_angle_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 1,
            categories: Category::ALL.to_vec(),
            workspace: 0.6,
            elevation_deg: (30.0, 90.0),
            distance: (0.4, 0.6),
            intrinsics: CameraIntrinsics::default(),
            gripper: GripperModel::default(),
            spacing: 0.02,
            angle_step: PI / 6.0,
            min_view_angle_deg: 15.0,
        }
    }
}

/// Gripper frame with closing axis `x`, approach `z`, and the fingertip
/// midpoint at `contact`.
fn grasp_pose(g: &GripperModel, contact: Vector3<f64>, closing: Vector3<f64>, approach: Vector3<f64>) -> Pose {
    let x = closing.normalize();
    let z = approach.normalize();
    let y = z.cross(&x);
    let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let rotation = UnitQuaternion::from_rotation_matrix(&r);
    Pose::new(rotation, contact - z * g.depth)
}

fn steps(lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    if hi < lo {
        return vec![];
    }
    let n = ((hi - lo) / spacing).floor() as usize;
    let offset = (hi - lo - n as f64 * spacing) / 2.0;
    (0..=n).map(|i| lo + offset + i as f64 * spacing).collect()
}

fn angles(range: f64, step: f64) -> Vec<f64> {
    let n = (range / step).round().max(1.0) as usize;
    (0..n).map(|i| i as f64 * range / n as f64).collect()
}

fn dir(phi: f64) -> Vector3<f64> {
    Vector3::new(phi.cos(), phi.sin(), 0.0)
}

const DOWN: Vector3<f64> = Vector3::new(0.0, 0.0, -1.0);

/// Grasps of one object, in the object frame.
fn object_frame_grasps(shape: &Shape, g: &GripperModel, spacing: f64, angle_step: f64) -> Vec<(Pose, f64)> {
    let max_width = g.open_width;
    let mut out = Vec::new();
    match *shape {
        Shape::Cylinder { radius, height } => {
            let width = 2.0 * radius;
            if width > max_width {
                return out;
            }
            for z in steps(radius.min(height / 2.0), height - radius.min(height / 2.0), spacing) {
                for phi in angles(TAU, angle_step) {
                    let approach = dir(phi + FRAC_PI_2);
                    out.push((grasp_pose(g, Vector3::new(0.0, 0.0, z), dir(phi), approach), width));
                }
            }
            let top = Vector3::new(0.0, 0.0, height - (g.depth / 2.0).min(height / 2.0));
            for phi in angles(PI, angle_step) {
                out.push((grasp_pose(g, top, dir(phi), DOWN), width));
            }
        }
        Shape::Ring { major, minor } => {
            let width = 2.0 * minor;
            if width > max_width {
                return out;
            }
            for phi in angles(TAU, angle_step.min(spacing / major)) {
                let c = dir(phi) * major + Vector3::new(0.0, 0.0, minor);
                out.push((grasp_pose(g, c, dir(phi), DOWN), width));
            }
        }
        Shape::Stick { radius, length } => {
            let width = 2.0 * radius;
            if width > max_width {
                return out;
            }
            let half = length / 2.0 - spacing / 2.0;
            for x in steps(-half, half, spacing) {
                out.push((
                    grasp_pose(g, Vector3::new(x, 0.0, radius), Vector3::y(), DOWN),
                    width,
                ));
            }
        }
        Shape::Sphere { radius } => {
            let width = 2.0 * radius;
            if width > max_width {
                return out;
            }
            let c = Vector3::new(0.0, 0.0, radius);
            for phi in angles(PI, angle_step) {
                out.push((grasp_pose(g, c, dir(phi), DOWN), width));
            }
            for phi in angles(TAU, angle_step) {
                out.push((grasp_pose(g, c, dir(phi), dir(phi + FRAC_PI_2)), width));
            }
        }
        Shape::SemiSphere { radius } => {
            // Near the rim the surface normal is almost horizontal, so the
            // two contacts oppose each other within a couple of degrees.
            let h = 0.04 * radius;
            let width = 2.0 * (radius * radius - h * h).sqrt();
            if width > max_width {
                return out;
            }
            for phi in angles(PI, angle_step) {
                out.push((grasp_pose(g, Vector3::new(0.0, 0.0, h), dir(phi), DOWN), width));
            }
        }
        Shape::Cuboid { extents } => {
            let z = extents.z - (g.depth / 2.0).min(extents.z / 2.0);
            for (axis, width, along, span) in [
                (Vector3::x(), extents.x, Vector3::y(), extents.y),
                (Vector3::y(), extents.y, Vector3::x(), extents.x),
            ] {
                if width > max_width {
                    continue;
                }
                let half = span / 2.0 - spacing / 2.0;
                for s in steps(-half, half, spacing) {
                    let c = along * s + Vector3::new(0.0, 0.0, z);
                    out.push((grasp_pose(g, c, axis, DOWN), width));
                }
            }
        }
    }
    out
}

/// Antipodal grasps of `obj`, posed in world. Grasps with a corner at or below
/// the support plane are dropped.
pub fn grasp_labels_for_primitive(
    obj: &PrimitiveObject,
    index: usize,
    g: &GripperModel,
    spacing: f64,
    angle_step: f64,
) -> Vec<GraspLabel> {
    object_frame_grasps(&obj.shape, g, spacing, angle_step)
        .into_iter()
        .map(|(p, width)| GraspLabel {
            pose: obj.pose.compose(&p),
            object: index,
            width,
        })
        .filter(|l| gripper_keypoints_3d(g, &l.pose).iter().all(|c| c.z > 0.0))
        .collect()
}

/// All four keypoints project inside the image and the gripper plane is not
/// seen close to edge-on.
pub fn grasp_visible(cam_from_grasp: &Pose, k: &CameraIntrinsics, g: &GripperModel, min_view_angle_deg: f64) -> bool {
    let in_image = gripper_keypoints_3d(g, cam_from_grasp)
        .iter()
        .all(|p| project(k, p).map(|px| k.contains(&px)).unwrap_or(false));
    if !in_image {
        return false;
    }
    let ray = cam_from_grasp.transform_point(&g.center()).normalize();
    let normal = cam_from_grasp.rotation * Vector3::y();
    ray.dot(&normal).abs() >= min_view_angle_deg.to_radians().sin()
}

fn check_config(cfg: &SceneConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
    if cfg.n_objects == 0 {
        return bad("a scene needs at least one object");
    }
    if cfg.categories.is_empty() {
        return bad("no object categories selected");
    }
    let (e0, e1) = cfg.elevation_deg;
    if !(0.0 < e0 && e0 <= e1 && e1 <= 90.0) {
        return bad("camera elevation must lie in (0, 90] degrees");
    }
    if !(cfg.distance.0 > 0.0 && cfg.distance.0 <= cfg.distance.1) {
        return bad("camera distance range must be positive");
    }
    if !(cfg.workspace > 0.0 && cfg.spacing > 0.0 && cfg.angle_step > 0.0) {
        return bad("workspace and grasp spacing must be positive");
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random scene. Pure function of `(cfg, seed)`.
pub fn sample_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    check_config(cfg)?;
    let mut rng = rng_from_seed(seed);
    let half = cfg.workspace / 2.0;
    let mut objects: Vec<PrimitiveObject> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let category = cfg.categories[rng.random_range(0..cfg.categories.len())];
        let shape = Shape::sample(category, &mut rng);
        let r = shape.footprint_radius();
        if r >= half {
            return Err(Error::SceneTooCrowded);
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let xy = Vector2::new(rng.random_range(-half + r..half - r), rng.random_range(-half + r..half - r));
            let free = objects.iter().all(|o| {
                (o.pose.translation.xy() - xy).norm() >= o.shape.footprint_radius() + r
            });
            if free {
                placed = Some(xy);
                break;
            }
        }
        let xy = placed.ok_or(Error::SceneTooCrowded)?;
        let yaw = rng.random_range(-PI..PI);
        objects.push(PrimitiveObject {
            shape,
            pose: Pose::new(
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
                Vector3::new(xy.x, xy.y, 0.0),
            ),
        });
    }

    let mut target = objects.iter().map(|o| o.pose.translation).sum::<Vector3<f64>>() / objects.len() as f64;
    target.z = objects.iter().map(|o| o.shape.height()).sum::<f64>() / (2.0 * objects.len() as f64);
    let elevation = uniform(&mut rng, cfg.elevation_deg).to_radians();
    let azimuth = rng.random_range(-PI..PI);
    let distance = uniform(&mut rng, cfg.distance);
    let eye = target
        + distance
            * Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
    let right = Vector3::new(-azimuth.sin(), azimuth.cos(), 0.0);
    let camera = look_at(&eye, &target, &right);

    let cam_inv = camera.inverse();
    let grasps = objects
        .iter()
        .enumerate()
        .flat_map(|(i, o)| grasp_labels_for_primitive(o, i, &cfg.gripper, cfg.spacing, cfg.angle_step))
        .filter(|l| {
            grasp_visible(
                &cam_inv.compose(&l.pose),
                &cfg.intrinsics,
                &cfg.gripper,
                cfg.min_view_angle_deg,
            )
        })
        .collect();

    Ok(Scene {
        objects,
        grasps,
        camera,
        intrinsics: cfg.intrinsics,
        seed,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseConfig {
    pub sigma_px: f64,
    pub outlier_fraction: f64,
    pub outlier_magnitude_px: f64,
}

impl NoiseConfig {
    /// Corrupted keypoints per grasp: `round(fraction · 4)`.
    pub fn outlier_count(&self) -> usize {
        ((self.outlier_fraction.clamp(0.0, 1.0) * 4.0).round()) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub grasp: usize,
    /// Keypoints with unit weights against the gripper corners.
    pub correspondences: CorrespondenceSet,
    /// Ground-truth gripper pose in the camera frame.
    pub gt_pose: Pose,
    /// Keypoints replaced by outliers.
    pub corrupted: [bool; 4],
}

/// One observation per grasp of the scene.
pub fn observe_scene(s: &Scene, g: &GripperModel, noise: &NoiseConfig, rng: &mut SeededRng) -> Vec<Observation> {
    let normal = Normal::new(0.0, noise.sigma_px.max(0.0)).expect("finite sigma");
    let n_out = noise.outlier_count();
    (0..s.grasps.len())
        .map(|i| {
            let gt_pose = s.grasp_in_camera(i);
            let mut corrupted = [false; 4];
            let mut order = [0usize, 1, 2, 3];
            for k in 0..n_out {
                let j = rng.random_range(k..4);
                order.swap(k, j);
                corrupted[order[k]] = true;
            }
            let items = g
                .corners
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let mut px = project(&s.intrinsics, &gt_pose.transform_point(c))
                        .unwrap_or_else(|_| Vector2::repeat(f64::NAN));
                    if noise.sigma_px > 0.0 {
                        px += Vector2::new(normal.sample(rng), normal.sample(rng));
                    }
                    if corrupted[k] {
                        let a = rng.random_range(0.0..TAU);
                        px += noise.outlier_magnitude_px * Vector2::new(a.cos(), a.sin());
                    }
                    Correspondence::new(px, *c, Vector2::repeat(1.0))
                })
                .collect();
            Observation {
                grasp: i,
                correspondences: CorrespondenceSet::new(items, s.intrinsics),
                gt_pose,
                corrupted,
            }
        })
        .collect()
}

fn push_pose(out: &mut String, p: &Pose) {
    let q = p.rotation.quaternion();
    let t = p.translation;
    let _ = write!(out, " {} {} {} {} {} {} {}", q.w, q.i, q.j, q.k, t.x, t.y, t.z);
}

/// Text form of a scene. Floats use the shortest representation that parses
/// back to the same bits.
pub fn scene_to_string(s: &Scene) -> String {
    let mut out = format!(
        "PPSCENE {SCHEMA_VERSION} {} {} {}\n",
        s.seed,
        s.objects.len(),
        s.grasps.len()
    );
    let k = &s.intrinsics;
    let _ = write!(out, "CAMERA {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    push_pose(&mut out, &s.camera);
    out.push('\n');
    for o in &s.objects {
        let p = o.shape.params();
        let _ = write!(out, "OBJECT {} {}", o.category(), p.len());
        for v in p {
            let _ = write!(out, " {v}");
        }
        push_pose(&mut out, &o.pose);
        out.push('\n');
    }
    for gl in &s.grasps {
        let _ = write!(out, "GRASP {} {}", gl.object, gl.width);
        push_pose(&mut out, &gl.pose);
        out.push('\n');
    }
    out.push_str("END\n");
    out
}

struct Fields<'a> {
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            line: self.line,
            message,
        }
    }

    fn word(&mut self, field: &str) -> Result<&'a str> {
        let line = self.line;
        self.it.next().ok_or_else(|| Error::Parse {
            line,
            message: format!("missing field `{field}`"),
        })
    }

    fn num<T: std::str::FromStr>(&mut self, field: &str) -> Result<T> {
        let w = self.word(field)?;
        w.parse().map_err(|_| self.err(format!("bad value `{w}` for field `{field}`")))
    }

    fn pose(&mut self) -> Result<Pose> {
        let mut v = [0.0f64; 7];
        for (slot, name) in v.iter_mut().zip(["qw", "qx", "qy", "qz", "tx", "ty", "tz"]) {
            *slot = self.num(name)?;
        }
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(self.err("rotation quaternion is not unit length".into()));
        }
        Ok(Pose {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::new(v[4], v[5], v[6]),
        })
    }

    fn finish(&mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(w) => Err(self.err(format!("unexpected trailing field `{w}`"))),
        }
    }
}

pub fn scene_from_str(text: &str) -> Result<Scene> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| Fields {
            line: i + 1,
            it: l.split_whitespace(),
        });
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("file ends before {what}"),
        })
    };

    let mut h = next("header")?;
    if h.word("magic")? != "PPSCENE" {
        return Err(h.err("expected `PPSCENE` header".into()));
    }
    let version = h.word("version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::UnsupportedSchemaVersion(version.to_string()));
    }
    let seed: u64 = h.num("seed")?;
    let n_objects: usize = h.num("n_objects")?;
    let n_grasps: usize = h.num("n_grasps")?;
    h.finish()?;

    let mut c = next("CAMERA record")?;
    if c.word("record")? != "CAMERA" {
        return Err(c.err("expected CAMERA record".into()));
    }
    let (fx, fy, cx, cy) = (c.num("fx")?, c.num("fy")?, c.num("cx")?, c.num("cy")?);
    let (w, hgt) = (c.num("width")?, c.num("height")?);
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, w, hgt).map_err(|e| c.err(e.to_string()))?;
    let camera = c.pose()?;
    c.finish()?;

    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut o = next("OBJECT record")?;
        if o.word("record")? != "OBJECT" {
            return Err(o.err("expected OBJECT record".into()));
        }
        let token = o.word("category")?;
        let category = Category::parse(token).map_err(|_| o.err(format!("unknown category `{token}`")))?;
        let n: usize = o.num("n_params")?;
        let params = (0..n).map(|_| o.num("size")).collect::<Result<Vec<f64>>>()?;
        let shape = Shape::from_params(category, &params).map_err(|e| o.err(e.to_string()))?;
        let pose = o.pose()?;
        o.finish()?;
        objects.push(PrimitiveObject { shape, pose });
    }
    if objects.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "scene has no objects".into(),
        });
    }

    let mut grasps = Vec::with_capacity(n_grasps);
    for _ in 0..n_grasps {
        let mut r = next("GRASP record")?;
        if r.word("record")? != "GRASP" {
            return Err(r.err("expected GRASP record".into()));
        }
        let object: usize = r.num("object")?;
        if object >= objects.len() {
            return Err(r.err(format!("grasp references missing object {object}")));
        }
        let width = r.num("width")?;
        let pose = r.pose()?;
        r.finish()?;
        grasps.push(GraspLabel { pose, object, width });
    }
    let mut e = next("END")?;
    if e.word("record")? != "END" {
        return Err(e.err("expected END".into()));
    }
    Ok(Scene {
        objects,
        grasps,
        camera,
        intrinsics,
        seed,
    })
}

pub fn save_scene(s: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_string(s))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    scene_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnp::{multi_start_solve, reproj_error, SolverConfig};
    use crate::rng::rng_from_seed;

    /// Signed distance in the object frame, written independently of the grasp code.
    fn sdf(shape: &Shape, p: &Vector3<f64>) -> f64 {
        fn capped_cylinder(radial: f64, axial: f64, r: f64, half: f64) -> f64 {
            let d = Vector2::new(radial - r, axial.abs() - half);
            d.x.max(d.y).min(0.0) + d.sup(&Vector2::zeros()).norm()
        }
        match *shape {
            Shape::Cylinder { radius, height } => {
                capped_cylinder(p.xy().norm(), p.z - height / 2.0, radius, height / 2.0)
            }
            Shape::Stick { radius, length } => {
                capped_cylinder(Vector2::new(p.y, p.z - radius).norm(), p.x, radius, length / 2.0)
            }
            Shape::Ring { major, minor } => {
                Vector2::new(p.xy().norm() - major, p.z - minor).norm() - minor
            }
            Shape::Sphere { radius } => (p - Vector3::new(0.0, 0.0, radius)).norm() - radius,
            Shape::SemiSphere { radius } => (p.norm() - radius).max(-p.z),
            Shape::Cuboid { extents } => {
                let q = (p - Vector3::new(0.0, 0.0, extents.z / 2.0)).abs() - extents / 2.0;
                q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
            }
        }
    }

    fn sdf_normal(shape: &Shape, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-7;
        let mut n = Vector3::zeros();
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = h;
            n[i] = (sdf(shape, &(p + e)) - sdf(shape, &(p - e))) / (2.0 * h);
        }
        n.normalize()
    }

    /// Surface crossings bounding the inside segment of `c + s·d` that contains `c`.
    fn contacts(shape: &Shape, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
        if sdf(shape, c) >= 0.0 {
            return None;
        }
        let inside = |s: f64| sdf(shape, &(c + d * s)) < 0.0;
        let step = 1e-4;
        let exit = |sign: f64| {
            let mut s = 0.0;
            while inside(s + sign * step) {
                s += sign * step;
                if s.abs() > 0.3 {
                    return None;
                }
            }
            let (mut a, mut b) = (s, s + sign * step);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if inside(m) {
                    a = m;
                } else {
                    b = m;
                }
            }
            Some(c + d * (0.5 * (a + b)))
        };
        Some((exit(-1.0)?, exit(1.0)?))
    }

    fn shapes() -> Vec<Shape> {
        let mut rng = rng_from_seed(3);
        (0..60)
            .map(|i| Shape::sample(Category::ALL[i % 6], &mut rng))
            .collect()
    }

    #[test]
    fn labels_are_antipodal_and_above_plane() {
        let g = GripperModel::default();
        for shape in shapes() {
            let obj = PrimitiveObject {
                shape,
                pose: Pose::identity(),
            };
            let labels = grasp_labels_for_primitive(&obj, 0, &g, 0.02, PI / 6.0);
            assert!(!labels.is_empty(), "{shape:?}");
            for l in labels {
                assert!(l.width <= g.open_width);
                assert!(gripper_keypoints_3d(&g, &l.pose).iter().all(|c| c.z > 0.0));
                let c = l.pose.transform_point(&g.contact_point());
                let d = l.pose.rotation * Vector3::x();
                let (a, b) = contacts(&shape, &c, &d).expect("closing axis misses the object");
                let (na, nb) = (sdf_normal(&shape, &a), sdf_normal(&shape, &b));
                let opposing = (-na).dot(&nb).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(opposing <= 5.0, "{shape:?}: normals {opposing}° apart");
                assert!(((a - b).norm() - l.width).abs() < 1e-6, "{shape:?}");
            }
        }
    }

    #[test]
    fn cylinder_grasps_cross_the_axis() {
        let g = GripperModel::default();
        let obj = PrimitiveObject {
            shape: Shape::Cylinder {
                radius: 0.02,
                height: 0.1,
            },
            pose: Pose::identity(),
        };
        let labels = grasp_labels_for_primitive(&obj, 0, &g, 0.02, PI / 6.0);
        let side: Vec<_> = labels
            .iter()
            .filter(|l| (l.pose.rotation * Vector3::z()).z.abs() < 1e-9)
            .collect();
        assert!(!side.is_empty());
        for l in &labels {
            assert!((l.width - 0.04).abs() < 1e-15);
            let c = l.pose.transform_point(&g.contact_point());
            let d = l.pose.rotation * Vector3::x();
            // distance between the closing line and the z axis
            let n = d.cross(&Vector3::z());
            let dist = if n.norm() < 1e-12 { c.xy().norm() } else { c.dot(&n).abs() / n.norm() };
            assert!(dist < 1e-12);
        }
    }

    #[test]
    fn oversized_sphere_has_no_grasps() {
        let obj = PrimitiveObject {
            shape: Shape::Sphere { radius: 0.05 },
            pose: Pose::identity(),
        };
        assert!(grasp_labels_for_primitive(&obj, 0, &GripperModel::default(), 0.02, 0.5).is_empty());
    }

    #[test]
    fn scenes_are_deterministic_and_filtered() {
        let cfg = SceneConfig {
            n_objects: 3,
            ..Default::default()
        };
        let a = sample_scene(&cfg, 11).unwrap();
        assert_eq!(a, sample_scene(&cfg, 11).unwrap());
        assert_ne!(a, sample_scene(&cfg, 12).unwrap());
        for (i, _) in a.grasps.iter().enumerate() {
            let p = a.grasp_in_camera(i);
            for c in gripper_keypoints_3d(&cfg.gripper, &p) {
                assert!(a.intrinsics.contains(&project(&a.intrinsics, &c).unwrap()));
            }
        }
        let view = (a.camera.rotation * Vector3::z()).normalize();
        let centroid = a.objects.iter().map(|o| o.pose.translation).sum::<Vector3<f64>>() / 3.0;
        let to_centroid = (centroid - a.camera.translation).normalize();
        assert!(view.dot(&to_centroid).acos().to_degrees() < 30.0);
        for o in &a.objects {
            assert_eq!(o.pose.translation.z, 0.0);
        }
    }

    #[test]
    fn five_objects_fit() {
        let cfg = SceneConfig {
            n_objects: 5,
            ..Default::default()
        };
        let ok = (0..500).filter(|s| sample_scene(&cfg, *s).is_ok()).count();
        assert!(ok >= 495, "{ok}/500");
    }

    #[test]
    fn crowded_scene_errors() {
        let cfg = SceneConfig {
            n_objects: 40,
            workspace: 0.3,
            ..Default::default()
        };
        assert!(matches!(sample_scene(&cfg, 1), Err(Error::SceneTooCrowded)));
        let zero = SceneConfig {
            n_objects: 0,
            ..Default::default()
        };
        assert!(sample_scene(&zero, 1).is_err());
    }

    fn scene_with_grasps(seed: u64) -> Scene {
        let cfg = SceneConfig {
            n_objects: 3,
            ..Default::default()
        };
        (seed..)
            .map(|s| sample_scene(&cfg, s).unwrap())
            .find(|s| !s.grasps.is_empty())
            .unwrap()
    }

    #[test]
    fn noiseless_observation_is_exact_and_solvable() {
        let s = scene_with_grasps(20);
        let g = GripperModel::default();
        let obs = observe_scene(&s, &g, &NoiseConfig::default(), &mut rng_from_seed(0));
        assert_eq!(obs.len(), s.grasps.len());
        for o in obs.iter().take(10) {
            for c in &o.correspondences.items {
                assert!(reproj_error(c, &s.intrinsics, &o.gt_pose).norm() < 1e-9);
            }
            let r = multi_start_solve(&o.correspondences, &SolverConfig::default(), 5).unwrap();
            assert!(r.pose.translation_distance(&o.gt_pose) < 1e-6);
            assert!(r.pose.rotation_distance(&o.gt_pose) < 1e-6);
        }
    }

    #[test]
    fn pixel_noise_statistics() {
        let g = GripperModel::default();
        let noise = NoiseConfig {
            sigma_px: 2.0,
            ..Default::default()
        };
        let mut rng = rng_from_seed(9);
        let mut abs = Vec::new();
        let mut seed = 100;
        while abs.len() < 1000 {
            let s = scene_with_grasps(seed);
            seed = s.seed + 1;
            for o in observe_scene(&s, &g, &noise, &mut rng) {
                for c in &o.correspondences.items {
                    let e = reproj_error(c, &s.intrinsics, &o.gt_pose);
                    abs.extend([e.x.abs(), e.y.abs()]);
                }
            }
        }
        abs.truncate(1000);
        let mean = abs.iter().sum::<f64>() / abs.len() as f64;
        assert!((1.4..=1.8).contains(&mean), "{mean}");
    }

    #[test]
    fn outlier_count_rounds() {
        let s = scene_with_grasps(30);
        let g = GripperModel::default();
        let noise = NoiseConfig {
            outlier_fraction: 0.25,
            outlier_magnitude_px: 40.0,
            ..Default::default()
        };
        for o in observe_scene(&s, &g, &noise, &mut rng_from_seed(1)) {
            assert_eq!(o.corrupted.iter().filter(|c| **c).count(), 1);
            for (c, bad) in o.correspondences.items.iter().zip(o.corrupted) {
                let e = reproj_error(c, &s.intrinsics, &o.gt_pose).norm();
                assert!((e - if bad { 40.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let cfg = SceneConfig {
            n_objects: 5,
            ..Default::default()
        };
        let s = sample_scene(&cfg, 4).unwrap();
        let text = scene_to_string(&s);
        let back = scene_from_str(&text).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.grasps.iter().zip(&s.grasps) {
            assert_eq!(a.pose.translation.x.to_bits(), b.pose.translation.x.to_bits());
            assert_eq!(a.pose.rotation.w.to_bits(), b.pose.rotation.w.to_bits());
        }

        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(scene_from_str(&truncated), Err(Error::Parse { .. })));

        let bad = text.replacen("OBJECT ", "OBJECT Teapot_", 1);
        let err = scene_from_str(&bad).unwrap_err().to_string();
        assert!(err.contains("Teapot_"), "{err}");

        let v2 = text.replacen("PPSCENE 1", "PPSCENE 2", 1);
        assert!(matches!(scene_from_str(&v2), Err(Error::UnsupportedSchemaVersion(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        save_scene(&s, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), s);
    }
}
