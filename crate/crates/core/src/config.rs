//! Run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then a config file,
//! then command-line flags. The file format is flat `key = value` text. Keys
//! carry a section prefix (`solver.max_iters = 100`); a `[solver]` line sets
//! the prefix for the keys that follow it. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{default_grid, SuccessThresholds};
use crate::geometry::GripperModel;
use crate::scene::{Category, NoiseConfig, SceneConfig};
use crate::train::{LossWeights, OptimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub weights: LossWeights,
    /// Training settings, including the solver, sampler and matching parameters.
    pub optim: OptimConfig,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub thresholds: Vec<SuccessThresholds>,
    pub decode_threshold: f64,
    pub top_k: usize,
    pub init_perturbation_px: f64,
    pub map_pathway: bool,
    pub gripper_width: f64,
    pub gripper_depth: f64,
    provenance: BTreeMap<&'static str, Source>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GripperModel::default();
        Self {
            seed: 0,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            scene: SceneConfig::default(),
            noise: NoiseConfig::default(),
            thresholds: default_grid(),
            decode_threshold: crate::codec::DEFAULT_THRESHOLD,
            top_k: crate::codec::DEFAULT_TOP_K,
            init_perturbation_px: 8.0,
            map_pathway: false,
            gripper_width: g.open_width,
            gripper_depth: g.depth,
            provenance: BTreeMap::new(),
        }
    }
}

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean `{v}` for `{key}`"))),
    }
}

macro_rules! field {
    ($key:literal, bool, |$c:ident| $place:expr) => {
        Field {
            key: $key,
            get: |$c| $place.to_string(),
            set: |$c, v| {
                $place = parse_bool($key, v)?;
                Ok(())
            },
        }
    };
    ($key:literal, $ty:ty, |$c:ident| $place:expr) => {
        Field {
            key: $key,
            get: |$c| $place.to_string(),
            set: |$c, v| {
                $place = parse::<$ty>($key, v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("seed", u64, |c| c.seed),
        field!("solver.max_iters", usize, |c| c.optim.kl.solver.max_iters),
        field!("solver.step_tol", f64, |c| c.optim.kl.solver.step_tol),
        field!("solver.grad_tol", f64, |c| c.optim.kl.solver.grad_tol),
        field!("solver.n_starts", usize, |c| c.optim.kl.solver.n_starts),
        field!("solver.lambda_init", f64, |c| c.optim.kl.solver.lambda_init),
        field!("solver.lambda_min", f64, |c| c.optim.kl.solver.lambda_min),
        field!("solver.lambda_max", f64, |c| c.optim.kl.solver.lambda_max),
        field!("solver.default_depth", f64, |c| c.optim.kl.solver.default_depth),
        field!("solver.start_rotation_deg", f64, |c| c.optim.kl.solver.start_rotation_deg),
        field!("solver.start_translation", f64, |c| c.optim.kl.solver.start_translation),
        field!("mc.rounds", usize, |c| c.optim.kl.mc.rounds),
        field!("mc.k_per_round", usize, |c| c.optim.kl.mc.k_per_round),
        field!("mc.dof", f64, |c| c.optim.kl.mc.dof),
        field!("mc.scale_factor", f64, |c| c.optim.kl.mc.scale_factor),
        field!("mc.translation_floor", f64, |c| c.optim.kl.mc.translation_floor),
        field!("mc.rotation_floor", f64, |c| c.optim.kl.mc.rotation_floor),
        field!("mc.fallback_translation", f64, |c| c.optim.kl.mc.fallback_translation),
        field!("mc.fallback_rotation", f64, |c| c.optim.kl.mc.fallback_rotation),
        field!("loss.lambda_h", f64, |c| c.weights.lambda_h),
        field!("loss.lambda_s", f64, |c| c.weights.lambda_s),
        field!("loss.lambda_o", f64, |c| c.weights.lambda_o),
        field!("loss.lambda_kl", f64, |c| c.weights.lambda_kl),
        field!("train.iters", usize, |c| c.optim.iters),
        field!("train.lr_px", f64, |c| c.optim.lr_px),
        field!("train.lr_logit", f64, |c| c.optim.lr_logit),
        field!("train.lr_map", f64, |c| c.optim.lr_map),
        field!("train.momentum", f64, |c| c.optim.momentum),
        Field {
            key: "train.milestones",
            get: |c| {
                c.optim
                    .milestones
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            },
            set: |c, v| {
                c.optim.milestones = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse::<usize>("train.milestones", s))
                    .collect::<Result<_>>()?;
                Ok(())
            },
        },
        field!("train.fixed_mc_seed", bool, |c| c.optim.fixed_mc_seed),
        field!("train.init_perturbation_px", f64, |c| c.init_perturbation_px),
        field!("train.map_pathway", bool, |c| c.map_pathway),
        field!("match.rho", f64, |c| c.optim.matching.rho),
        field!("match.symmetric", bool, |c| c.optim.matching.symmetric),
        field!("match.max_dist", f64, |c| c.optim.max_match_dist),
        field!("scene.n_objects", usize, |c| c.scene.n_objects),
        Field {
            key: "scene.categories",
            get: |c| {
                c.scene
                    .categories
                    .iter()
                    .map(|k| k.token())
                    .collect::<Vec<_>>()
                    .join(",")
            },
            set: |c, v| {
                c.scene.categories = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| Category::parse(s.trim()))
                    .collect::<Result<_>>()?;
                Ok(())
            },
        },
        field!("scene.workspace", f64, |c| c.scene.workspace),
        field!("scene.elevation_min_deg", f64, |c| c.scene.elevation_deg.0),
        field!("scene.elevation_max_deg", f64, |c| c.scene.elevation_deg.1),
        field!("scene.distance_min", f64, |c| c.scene.distance.0),
        field!("scene.distance_max", f64, |c| c.scene.distance.1),
        field!("scene.spacing", f64, |c| c.scene.spacing),
        Field {
            key: "scene.angle_step_deg",
            get: |c| c.scene.angle_step.to_degrees().to_string(),
            set: |c, v| {
                c.scene.angle_step = parse::<f64>("scene.angle_step_deg", v)?.to_radians();
                Ok(())
            },
        },
        field!("scene.min_view_angle_deg", f64, |c| c.scene.min_view_angle_deg),
        field!("gripper.open_width", f64, |c| c.gripper_width),
        field!("gripper.depth", f64, |c| c.gripper_depth),
        field!("noise.sigma_px", f64, |c| c.noise.sigma_px),
        field!("noise.outlier_fraction", f64, |c| c.noise.outlier_fraction),
        field!("noise.outlier_magnitude_px", f64, |c| c.noise.outlier_magnitude_px),
        field!("codec.stride", usize, |c| c.optim.stride),
        field!("codec.threshold", f64, |c| c.decode_threshold),
        field!("codec.top_k", usize, |c| c.top_k),
        Field {
            key: "eval.thresholds",
            get: |c| {
                c.thresholds
                    .iter()
                    .map(|t| format!("{}:{}", t.translation_m * 100.0, t.rotation_deg))
                    .collect::<Vec<_>>()
                    .join(",")
            },
            set: |c, v| {
                c.thresholds = SuccessThresholds::parse_list(v)?;
                Ok(())
            },
        },
    ]
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }

    /// Sets one key, recording where the value came from.
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let all = fields();
        let Some(f) = all.iter().find(|f| f.key == key) else {
            let suggestion = all
                .iter()
                .map(|f| (strsim::levenshtein(f.key, key), f.key))
                .min()
                .filter(|(d, _)| *d <= 3)
                .map(|(_, k)| format!("; did you mean `{k}`?"))
                .unwrap_or_default();
            return Err(Error::InvalidArgument(format!("unknown config key `{key}`{suggestion}")));
        };
        (f.set)(self, value)?;
        self.provenance.insert(f.key, source);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fields().iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    pub fn source(&self, key: &str) -> Source {
        self.provenance.get(key).copied().unwrap_or(Source::Default)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') || k == "seed" {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v, Source::File).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_str(&std::fs::read_to_string(path)?)
    }

    /// Checks invariants and propagates shared settings into the module configs.
    pub fn finalize(&mut self) -> Result<()> {
        self.weights.validate()?;
        let g = GripperModel::new(self.gripper_width, self.gripper_depth)?;
        self.scene.gripper = g;
        self.optim.gripper = g;
        if self.optim.kl.mc.dof <= 2.0 {
            return Err(Error::InvalidArgument("mc.dof must exceed 2".into()));
        }
        if self.optim.kl.mc.rounds == 0 || self.optim.kl.mc.k_per_round == 0 {
            return Err(Error::InvalidArgument("mc.rounds and mc.k_per_round must be positive".into()));
        }
        if self.optim.matching.rho <= 0.0 {
            return Err(Error::InvalidArgument("match.rho must be positive".into()));
        }
        if self.optim.stride == 0 {
            return Err(Error::InvalidArgument("codec.stride must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.outlier_fraction) || self.noise.sigma_px < 0.0 {
            return Err(Error::InvalidArgument("noise settings out of range".into()));
        }
        Ok(())
    }

    /// `key = value  (source)` for every key.
    pub fn describe(&self) -> String {
        fields()
            .iter()
            .map(|f| format!("{} = {}  ({})\n", f.key, (f.get)(self), self.source(f.key)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_and_provenance() {
        let mut c = RunConfig::default();
        c.apply_str("# comment\nsolver.max_iters = 50\n[mc]\nk_per_round = 256\nseed = 4\n")
            .unwrap();
        c.set("solver.max_iters", "70", Source::Flag).unwrap();
        c.finalize().unwrap();
        assert_eq!(c.optim.kl.solver.max_iters, 70);
        assert_eq!(c.optim.kl.mc.k_per_round, 256);
        assert_eq!(c.seed, 4);
        assert_eq!(c.source("solver.max_iters"), Source::Flag);
        assert_eq!(c.source("mc.k_per_round"), Source::File);
        assert_eq!(c.source("mc.rounds"), Source::Default);
        assert!(c.describe().contains("mc.k_per_round = 256  (file)"));
    }

    #[test]
    fn every_key_round_trips_its_default() {
        let mut c = RunConfig::default();
        for key in RunConfig::keys() {
            let v = c.get(key).unwrap();
            c.set(key, &v, Source::File).unwrap();
        }
        c.provenance.clear();
        let mut d = RunConfig::default();
        d.finalize().unwrap();
        c.finalize().unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_name_the_problem() {
        let mut c = RunConfig::default();
        let e = c.set("solver.max_iter", "3", Source::Flag).unwrap_err().to_string();
        assert!(e.contains("solver.max_iters"), "{e}");
        assert!(c.apply_str("solver.n_starts = many").is_err());
        assert!(matches!(c.apply_str("\n\nnonsense"), Err(Error::Parse { line: 3, .. })));
        c.set("loss.lambda_kl", "0", Source::Flag).unwrap();
        for k in ["loss.lambda_h", "loss.lambda_s", "loss.lambda_o"] {
            c.set(k, "0", Source::Flag).unwrap();
        }
        assert!(c.finalize().is_err());
    }
}
