//! `ppgrasp`: generate scenes, solve grasp poses, train the toy predictor,
//! check gradients and evaluate predictions.

mod commands;
mod selftest;

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppgrasp::config::{RunConfig, Source};

#[derive(Parser, Debug)]
#[command(name = "ppgrasp", version, about = "Probabilistic-PnP grasp pose toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration with the source of each value.
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes.
    Gen(GenArgs),
    /// Solve grasp poses from observed keypoints.
    Solve(SolveArgs),
    /// Train free keypoints and confidences through the KL loss.
    TrainToy(TrainArgs),
    /// Compare the analytic KL gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Score predicted poses against scene labels.
    Eval(EvalArgs),
    /// Run the built-in example checks.
    Selftest,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    /// Objects per scene.
    #[arg(long)]
    pub objects: Option<usize>,
    /// Same as --out.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated category tokens.
    #[arg(long)]
    pub categories: Option<String>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub scenes_dir: PathBuf,
    /// Gaussian keypoint noise, pixels.
    #[arg(long)]
    pub noise_px: Option<f64>,
    /// Fraction of keypoints per grasp replaced by outliers.
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// Outlier displacement, pixels.
    #[arg(long)]
    pub outlier_px: Option<f64>,
    /// Pass observations through a keypoint map encode/decode before solving.
    #[arg(long)]
    pub via_map: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub scenes_dir: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr_px: Option<f64>,
    #[arg(long)]
    pub lr_logit: Option<f64>,
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    /// Initial keypoint perturbation, pixels.
    #[arg(long)]
    pub perturb_px: Option<f64>,
    /// Also train a keypoint map with the 2D losses.
    #[arg(long)]
    pub map: bool,
    /// Where to write the per-iteration log; defaults to `<out>/train_log.csv`.
    #[arg(long)]
    pub log_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub min_points: usize,
    #[arg(long, default_value_t = 12)]
    pub max_points: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub scenes_dir: PathBuf,
    /// `cm:deg` pairs, e.g. `1.0:10,1.5:10,2.0:10`.
    #[arg(long)]
    pub thresholds: Option<String>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// The pipeline ran and something failed: exit 1.
    Domain(String),
}

impl From<ppgrasp::Error> for Failure {
    fn from(e: ppgrasp::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Held for the lifetime of a command that writes into a directory.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".ppgrasp.lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Failure::Domain(format!(
                    "{} is in use by another ppgrasp process (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Failure::Domain(format!("cannot lock {}: {e}", dir.display()))
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn set_flag<T: ToString>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> CliResult<()> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string(), Source::Flag)
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.global.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_str(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    set_flag(&mut cfg, "seed", cli.global.seed)?;
    match &cli.command {
        Command::Gen(a) => {
            set_flag(&mut cfg, "scene.n_objects", a.objects)?;
            set_flag(&mut cfg, "scene.categories", a.categories.clone())?;
        }
        Command::Solve(a) => {
            set_flag(&mut cfg, "noise.sigma_px", a.noise_px)?;
            set_flag(&mut cfg, "noise.outlier_fraction", a.outlier_fraction)?;
            set_flag(&mut cfg, "noise.outlier_magnitude_px", a.outlier_px)?;
        }
        Command::TrainToy(a) => {
            set_flag(&mut cfg, "train.iters", a.iters)?;
            set_flag(&mut cfg, "train.lr_px", a.lr_px)?;
            set_flag(&mut cfg, "train.lr_logit", a.lr_logit)?;
            set_flag(&mut cfg, "loss.lambda_kl", a.lambda_kl)?;
            set_flag(&mut cfg, "train.init_perturbation_px", a.perturb_px)?;
            if a.map {
                set_flag(&mut cfg, "train.map_pathway", Some(true))?;
            }
        }
        Command::Eval(a) => set_flag(&mut cfg, "eval.thresholds", a.thresholds.clone())?,
        Command::Gradcheck(_) | Command::Selftest => {}
    }
    cfg.finalize().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli)?;
    if cli.global.verbose {
        eprint!("{}", cfg.describe());
    }
    let out = cli.global.out.clone();
    match cli.command {
        Command::Gen(a) => {
            let dir = match (a.out_dir.clone(), out) {
                (Some(d), _) | (None, Some(d)) => d,
                (None, None) => return Err(Failure::Usage("gen needs --out-dir or --out".into())),
            };
            commands::gen(&a, &cfg, &dir)
        }
        Command::Solve(a) => commands::solve(&a, &cfg, out.as_deref()),
        Command::TrainToy(a) => commands::train_toy(&a, &cfg, out.as_deref()),
        Command::Gradcheck(a) => commands::gradcheck(&a, &cfg, out.as_deref()),
        Command::Eval(a) => commands::eval(&a, &cfg, out.as_deref()),
        Command::Selftest => selftest::run(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
