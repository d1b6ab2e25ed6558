//! Solved grasp poses, one per line:
//!
//! ```text
//! scene grasp qw qx qy qz tx ty tz score cost
//! ```
//!
//! Lines starting with `#` are comments. Poses are gripper-in-camera.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub const HEADER: &str = "# scene grasp qw qx qy qz tx ty tz score cost";

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub scene: String,
    pub grasp: usize,
    pub pose: Pose,
    /// Detection confidence in [0, 1].
    pub score: f64,
    /// Weighted reprojection cost at `pose`.
    pub cost: f64,
}

pub fn write_poses(records: &[PoseRecord]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in records {
        let q = r.pose.rotation.quaternion();
        let t = r.pose.translation;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {}",
            r.scene, r.grasp, q.w, q.i, q.j, q.k, t.x, t.y, t.z, r.score, r.cost
        );
    }
    s
}

pub fn read_poses(text: &str) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Parse { line: i + 1, message: m };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 11 {
            return Err(err(format!("expected 11 fields, found {}", f.len())));
        }
        let num = |k: usize| {
            f[k].parse::<f64>()
                .map_err(|_| err(format!("bad number `{}`", f[k])))
        };
        let grasp = f[1]
            .parse::<usize>()
            .map_err(|_| err(format!("bad grasp index `{}`", f[1])))?;
        let q = Quaternion::new(num(2)?, num(3)?, num(4)?, num(5)?);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(err("rotation quaternion is not unit length".into()));
        }
        out.push(PoseRecord {
            scene: f[0].to_string(),
            grasp,
            pose: Pose {
                rotation: UnitQuaternion::new_unchecked(q),
                translation: Vector3::new(num(6)?, num(7)?, num(8)?),
            },
            score: num(9)?,
            cost: num(10)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let recs = vec![
            PoseRecord {
                scene: "scene_0003".into(),
                grasp: 2,
                pose: Pose::from_wxyz(0.7, 0.1, -0.5, 0.3, Vector3::new(0.01, -0.2, 0.73)),
                score: 0.875,
                cost: 1.25e-13,
            },
            PoseRecord {
                scene: "scene_0004".into(),
                grasp: 0,
                pose: Pose::identity(),
                score: 1.0,
                cost: 0.0,
            },
        ];
        let text = write_poses(&recs);
        assert_eq!(read_poses(&text).unwrap(), recs);
        assert!(read_poses("a 1 2 3").is_err());
        assert!(read_poses("a 0 2 0 0 0 0 0 0 1 0").is_err());
    }
}
