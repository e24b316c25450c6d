use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvtri_cli::{cmd_eval, cmd_gradcheck, cmd_run, dump_scene, threads_from_env, CliError, RunConfig, Source};

#[derive(Parser)]
#[command(name = "mvtri", version, about = "Epipolar matching and differentiable triangulation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect, match, triangulate and impute sparse depth for the anchor view.
    Run(RunArgs),
    /// Finite-difference check of the matching and triangulation Jacobians.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "instances", default_value_t = 1000)]
        n_instances: usize,
    },
    /// Depth metrics of a predicted PFM against a ground-truth PFM.
    Eval { pred: PathBuf, gt: PathBuf },
    /// Write a synthetic scene directory readable by `run --scene`.
    Synth {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long = "depth-min", default_value_t = 0.5)]
    depth_min: f64,
    #[arg(long = "depth-max", default_value_t = 10.0)]
    depth_max: f64,
    #[arg(long = "views", default_value_t = 2)]
    n_views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 240)]
    height: usize,
    /// Number of synthetic scene points.
    #[arg(long = "scene-points", default_value_t = RunConfig::default().scene_points)]
    scene_points: usize,
    /// Minimum pixel distance between synthetic points in every view.
    #[arg(long = "min-separation", default_value_t = RunConfig::default().min_separation)]
    min_separation: f64,
    /// Synthetic camera baseline in meters.
    #[arg(long, default_value_t = RunConfig::default().baseline)]
    baseline: f64,
    /// Std-dev in pixels of planted descriptor splats.
    #[arg(long = "peak-sharpness", default_value_t = RunConfig::default().peak_sharpness)]
    peak_sharpness: f64,
    /// Std-dev in pixels of the displacement of planted matches.
    #[arg(long = "pixel-noise", default_value_t = 0.0)]
    pixel_noise: f64,
    /// Per-axis bound in radians of auxiliary camera rotations.
    #[arg(long = "rotation-jitter", default_value_t = 0.0)]
    rotation_jitter: f64,
    /// Nearest depth of synthetic points.
    #[arg(long = "scene-depth-min", default_value_t = RunConfig::default().scene_depth.0)]
    scene_depth_min: f64,
    /// Farthest depth of synthetic points.
    #[arg(long = "scene-depth-max", default_value_t = RunConfig::default().scene_depth.1)]
    scene_depth_max: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Scene directory with cameras.json and per-view DESC/SMAP/PFM files.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    scene: Option<PathBuf>,
    /// Generate the input scene in memory.
    #[arg(long)]
    synth: bool,
    #[command(flatten)]
    scene_args: SceneArgs,
    #[arg(long = "points", default_value_t = 512)]
    n_points: usize,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long = "nms", default_value_t = 9)]
    nms_radius: usize,
    #[arg(long, default_value_t = 0.0005)]
    threshold: f64,
    #[arg(long = "samples", default_value_t = 100)]
    epipolar_samples: usize,
    #[arg(long = "offset", default_value_t = 1)]
    offset_px: usize,
    /// Softmax gain applied to correlations.
    #[arg(long, default_value_t = RunConfig::default().gain)]
    gain: f64,
    #[arg(long)]
    densify: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        let s = &self.scene_args;
        RunConfig {
            n_points: self.n_points,
            ratio: self.ratio,
            nms_radius: self.nms_radius,
            threshold: self.threshold,
            epipolar_samples: self.epipolar_samples,
            offset_px: self.offset_px,
            depth_min: s.depth_min,
            depth_max: s.depth_max,
            width: s.width,
            height: s.height,
            n_views: s.n_views,
            seed: s.seed,
            densify: self.densify,
            gain: self.gain,
            scene_points: s.scene_points,
            min_separation: s.min_separation,
            baseline: s.baseline,
            peak_sharpness: s.peak_sharpness,
            pixel_noise: s.pixel_noise,
            rotation_jitter: s.rotation_jitter,
            scene_depth: (s.scene_depth_min, s.scene_depth_max),
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config();
            let source = match &args.scene {
                Some(dir) => Source::Scene(dir.clone()),
                None => Source::Synth,
            };
            let output = cmd_run(&source, &cfg, args.out.as_deref(), threads_from_env()?)?;
            let valid = output.points.iter().filter(|p| p.is_valid()).count();
            eprintln!("triangulated {valid}/{} points", output.points.len());
            if let Some(m) = &output.metrics {
                print!("{}", m.to_csv());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, n_instances } => {
            let report = cmd_gradcheck(seed, n_instances);
            print!("{}", report.render());
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Eval { pred, gt } => {
            print!("{}", cmd_eval(&pred, &gt)?.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { scene, out } => {
            let cfg = RunConfig {
                scene_points: scene.scene_points,
                min_separation: scene.min_separation,
                depth_min: scene.depth_min,
                depth_max: scene.depth_max,
                n_views: scene.n_views,
                seed: scene.seed,
                width: scene.width,
                height: scene.height,
                baseline: scene.baseline,
                peak_sharpness: scene.peak_sharpness,
                pixel_noise: scene.pixel_noise,
                rotation_jitter: scene.rotation_jitter,
                scene_depth: (scene.scene_depth_min, scene.scene_depth_max),
                ..RunConfig::default()
            };
            let generated = mvtri::generate_scene(&cfg.scene_config()).map_err(mvtri::Error::from)?;
            dump_scene(&generated, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
