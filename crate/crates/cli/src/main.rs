use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mbslam::config::{format_config, load_config};
use mbslam::dataset::{
    load_groundtruth, load_tum_dataset, read_color_png, write_color_png, write_trajectory, write_tum_dataset,
    PoseSelect, DEFAULT_ASSOC_TOLERANCE,
};
use mbslam::eval::{ate_rmse, psnr, ssim};
use mbslam::pipeline::{export_trajectory, run_slam, PipelineConfig, SequenceResult};
use mbslam::splat::checkpoint::{write_checkpoint, write_point_cloud};
use mbslam::splat::rasterize;
use mbslam::synth::{generate_sequence, SequenceSpec, SyntheticScene, TrajectorySpec};
use mbslam::Error;

#[derive(Parser)]
#[command(name = "mbslam", version, about = "Motion-blur-aware RGB-D tracking and Gaussian mapping")]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a TUM-layout RGB-D sequence.
    Run(RunArgs),
    /// Render a synthetic blurred sequence in TUM layout.
    Synth(SynthArgs),
    /// Compare trajectories (ATE) or image directories (PSNR/SSIM).
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Dataset directory with rgb.txt, depth.txt and camera.txt.
    dataset: PathBuf,
    /// `section.key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "mbslam_out")]
    output: PathBuf,
    /// Seed of keyframe window sampling and Gaussian splitting.
    #[arg(long)]
    seed: Option<u64>,
    /// Virtual images per exposure in tracker and mapper.
    #[arg(long)]
    n_virtual: Option<usize>,
    /// Model every frame as sharp (one virtual image).
    #[arg(long)]
    no_blur_model: bool,
    /// Exposure time in seconds, overriding the dataset's.
    #[arg(long)]
    exposure: Option<f64>,
    /// Largest color/depth timestamp difference when pairing frames.
    #[arg(long, default_value_t = DEFAULT_ASSOC_TOLERANCE)]
    assoc_tolerance: f64,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathKind {
    Standard,
    HighBlur,
    Shaken,
    Static,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth_out")]
    output: PathBuf,
    /// Scene layout and texture seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value = "standard")]
    path: PathKind,
    #[arg(long)]
    frames: Option<usize>,
    /// Sub-frames averaged into each blurry image.
    #[arg(long)]
    n_oracle: Option<usize>,
    /// Exposure time in seconds; 0 renders sharp frames.
    #[arg(long)]
    exposure: Option<f64>,
    /// Standard deviation of additive color noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Estimated trajectory, or a directory of renders with --images.
    estimated: PathBuf,
    /// Ground-truth trajectory, or a directory of reference images with --images.
    groundtruth: PathBuf,
    /// Largest timestamp difference when pairing poses.
    #[arg(long, default_value_t = DEFAULT_ASSOC_TOLERANCE)]
    tolerance: f64,
    /// Align with a similarity transform instead of a rigid one.
    #[arg(long)]
    scale: bool,
    /// Compare same-named PNGs of two directories.
    #[arg(long)]
    images: bool,
}

/// A failure with its exit code and the subject it concerns.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(subject: &str, err: Error) -> Self {
        let code = match err {
            Error::MissingFile { .. } | Error::Io { .. } | Error::Image { .. } => 2,
            Error::TrackingDiverged(_) => 4,
            _ => 3,
        };
        Self {
            code,
            message: format!("{subject}: {err}"),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

trait Subject<T> {
    fn subject(self, subject: &str) -> CliResult<T>;
}

impl<T> Subject<T> for mbslam::Result<T> {
    fn subject(self, subject: &str) -> CliResult<T> {
        self.map_err(|e| Failure::new(subject, e))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })
        .subject("output")
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
        .subject("output")
}

/// Flags override the configuration file, which overrides the defaults.
fn resolve_config(args: &RunArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path).subject("config")?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.mapper.seed = seed;
    }
    if let Some(n) = args.n_virtual {
        cfg.tracker.n_virtual = n;
        cfg.mapper.n_virtual = n;
    }
    if args.no_blur_model {
        cfg = cfg.without_blur_model();
    }
    cfg.validate().subject("config")?;
    Ok(cfg)
}

fn run_report(cfg: &PipelineConfig, result: &SequenceResult, dataset: &Path, elapsed: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# mbslam run\ndataset = {}", dataset.display());
    let _ = writeln!(out, "frames = {}", result.trajectories.len());
    let _ = writeln!(out, "keyframes = {:?}", result.keyframes);
    let _ = writeln!(out, "gaussians = {}", result.map.len());
    let _ = writeln!(out, "scene_extent = {}", result.scene_extent);
    let _ = writeln!(out, "elapsed_s = {elapsed:.3}");
    let _ = writeln!(out, "\n# configuration\n{}", format_config(cfg));
    let _ = writeln!(out, "# frame timestamp keyframe cost iterations inliers diverged track_s map_s");
    for d in &result.diagnostics {
        let _ = writeln!(
            out,
            "{} {:.6} {} {:.6} {} {:.4} {} {:.3} {:.3}",
            d.index,
            d.timestamp,
            d.is_keyframe as u8,
            d.final_cost,
            d.iterations,
            d.inlier_fraction,
            d.diverged as u8,
            d.track_time.as_secs_f64(),
            d.map_time.as_secs_f64()
        );
    }
    out
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(args)?;
    if args.print_config {
        print!("{}", format_config(&cfg));
        return Ok(());
    }
    let mut source = load_tum_dataset(&args.dataset, args.assoc_tolerance).subject("dataset")?;
    if let Some(exposure) = args.exposure {
        if !(exposure >= 0.0 && exposure.is_finite()) {
            return Err(Failure::new(
                "exposure",
                Error::InvalidArgument(format!("{exposure} is not a valid exposure time")),
            ));
        }
        source.exposure = exposure;
    }
    info!("{} frames from {}", source.entries.len(), args.dataset.display());
    let start = Instant::now();
    let result = run_slam(&source, &cfg).subject("run")?;
    let elapsed = start.elapsed().as_secs_f64();

    let out = &args.output;
    create_dir(out)?;
    for (which, name) in [
        (PoseSelect::Mid, "trajectory_mid.txt"),
        (PoseSelect::Start, "trajectory_start.txt"),
        (PoseSelect::End, "trajectory_end.txt"),
    ] {
        write_text(&out.join(name), &export_trajectory(&result, which))?;
    }
    write_checkpoint(&out.join("map.ckpt"), &result.map).subject("output")?;
    write_point_cloud(&out.join("map_points.txt"), &result.map).subject("output")?;
    let renders = out.join("renders");
    create_dir(&renders)?;
    for kf in &result.keyframe_states {
        let img = rasterize(&result.map, &kf.trajectory.mid(), &kf.frame.intrinsics).color;
        let name = format!("{:.6}.png", kf.frame.timestamp);
        write_color_png(&renders.join(name), &img).subject("output")?;
    }
    let mut report = run_report(&cfg, &result, &args.dataset, elapsed);
    let gt_path = args.dataset.join("groundtruth.txt");
    if gt_path.is_file() {
        let gt = load_groundtruth(&gt_path).subject("groundtruth")?;
        match ate_rmse(&result.poses(PoseSelect::Mid), &gt, args.assoc_tolerance, false) {
            Ok(ate) => {
                println!("ate.rmse={}", ate.rmse);
                let _ = write!(report, "\n# against {}\n{}", gt_path.display(), ate.to_key_values());
            }
            Err(e) => log::warn!("groundtruth: {e}"),
        }
    }
    write_text(&out.join("report.txt"), &report)?;
    let diverged = result.diagnostics.iter().filter(|d| d.diverged).count();
    println!(
        "tracked {} frames, {} keyframes, {} gaussians in {elapsed:.1} s; outputs in {}",
        result.trajectories.len(),
        result.keyframes.len(),
        result.map.len(),
        out.display()
    );
    if diverged > 0 {
        return Err(Failure::new(
            "run",
            Error::TrackingDiverged(format!("{diverged} frames kept their constant-velocity guess")),
        ));
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = match args.path {
        PathKind::Standard | PathKind::Static => SequenceSpec::standard(),
        PathKind::HighBlur => SequenceSpec::high_blur(),
        PathKind::Shaken => SequenceSpec::shaken(),
    };
    if let PathKind::Static = args.path {
        spec.path = TrajectorySpec::Static {
            pose: spec.path.pose_at(0.0),
        };
    }
    spec.frames = args.frames.unwrap_or(spec.frames);
    spec.n_oracle = args.n_oracle.unwrap_or(spec.n_oracle);
    spec.exposure = args.exposure.unwrap_or(spec.exposure);
    spec.noise_sigma = args.noise.unwrap_or(spec.noise_sigma);
    spec.noise_seed = args.seed;
    let scene = SyntheticScene::standard(args.seed);
    let seq = generate_sequence(&scene, &spec).subject("synth")?;
    let out = &args.output;
    write_tum_dataset(out, &seq.frames, Some(&seq.groundtruth(PoseSelect::Mid))).subject("output")?;
    for (which, name) in [
        (PoseSelect::Start, "groundtruth_start.txt"),
        (PoseSelect::Mid, "groundtruth_mid.txt"),
        (PoseSelect::End, "groundtruth_end.txt"),
    ] {
        write_trajectory(&out.join(name), &seq.groundtruth(which)).subject("output")?;
    }
    let sharp = out.join("sharp");
    create_dir(&sharp)?;
    for (f, img) in seq.frames.iter().zip(&seq.sharp) {
        write_color_png(&sharp.join(format!("{:.6}.png", f.timestamp)), img).subject("output")?;
    }
    println!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

fn png_names(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: dir.into() },
            _ => Error::Io {
                path: dir.into(),
                source: e,
            },
        })
        .subject("eval")?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    if args.images {
        let (est, gt) = (png_names(&args.estimated)?, png_names(&args.groundtruth)?);
        let pairs: Vec<&String> = est.iter().filter(|n| gt.contains(n)).collect();
        if pairs.is_empty() {
            return Err(Failure::new(
                "eval",
                Error::InvalidArgument("no same-named images in the two directories".into()),
            ));
        }
        let (mut p_sum, mut s_sum) = (0.0, 0.0);
        for name in &pairs {
            let a = read_color_png(&args.estimated.join(name)).subject("eval")?;
            let b = read_color_png(&args.groundtruth.join(name)).subject("eval")?;
            let (p, s) = (psnr(&a, &b).subject("eval")?, ssim(&a, &b).subject("eval")?);
            println!("{name} psnr={p} ssim={s}");
            p_sum += p;
            s_sum += s;
        }
        let n = pairs.len() as f64;
        println!("psnr.mean={}\nssim.mean={}\nimages={}", p_sum / n, s_sum / n, pairs.len());
        return Ok(());
    }
    let est = load_groundtruth(&args.estimated).subject("estimated")?;
    let gt = load_groundtruth(&args.groundtruth).subject("groundtruth")?;
    let report = ate_rmse(&est, &gt, args.tolerance, args.scale).subject("eval")?;
    print!("{}", report.to_key_values());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("threads: {e}");
            return ExitCode::from(3);
        }
    }
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
