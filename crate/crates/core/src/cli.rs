//! Command-line front end: simulation sweeps, solving recorded tracks,
//! minimality classification and timing.
//!
//! Exit codes: 0 success, 2 usage, configuration or I/O problems, 3 failed
//! experiment, 4 no solution.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{AngularRate, CameraIntrinsics, ReadoutSign, TimestampModel, Track, TrackObservation};
use crate::io::{self, fmt_f64, ImuSample};
use crate::linsys::{accumulate_schur, track_blocks, DEFAULT_EPS_RANK, MAX_ORDER};
use crate::robust::{ransac_tracks, RansacConfig};
use crate::sim::{
    add_noise, csv_row, generate_scene, run_trials, solve_scene, trial_rng, Acceleration, Estimator, Motion,
    Preset, Sampling, SimConfig, SolverKind, CSV_HEADER,
};
use crate::solver::{
    classify_minimality, prepare_bearings, solve, solve_order_s, solve_with_known_accel, MotionEstimate,
    Normalization, OrderSInputs, SolveConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EXPERIMENT: i32 = 3;
pub const EXIT_NO_SOLUTION: i32 = 4;

/// Header of the CSV report written by `solve --format csv`.
pub const SOLVE_CSV_HEADER: [&str; 12] = [
    "window_start",
    "window_end",
    "reference_time",
    "vx",
    "vy",
    "vz",
    "metric",
    "tracks_used",
    "inlier_ratio",
    "degenerate",
    "sign_flipped",
    "smallest_singular_value",
];

#[derive(Debug, Parser)]
#[command(name = "trackvel", version, about = "Camera velocity from asynchronous point tracks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run simulation trials and print one CSV row per noise cell.
    Sim(SimArgs),
    /// Estimate velocity from track and IMU files over sliding windows.
    Solve(SolveArgs),
    /// Classify a track configuration as under-, over- or minimally constrained.
    Minimality(MinimalityArgs),
    /// Time the minimal solvers and the Schur accumulation.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    #[value(alias = "asynchronous")]
    Async,
    #[value(alias = "global-shutter")]
    Global,
    #[value(alias = "rs")]
    RollingShutter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SignArg {
    Positive,
    Negative,
}

impl From<SignArg> for ReadoutSign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Positive => ReadoutSign::Positive,
            SignArg::Negative => ReadoutSign::Negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Velocity,
    Joint,
    KnownAccel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// TOML file with a base configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Track/observation presets, comma separated (sparse, moderate, dense).
    #[arg(long, value_delimiter = ',')]
    pub preset: Vec<Preset>,
    /// Pixel noise sigmas in px, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pixel_noise: Vec<f64>,
    /// Timestamp jitter sigmas in s, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub jitter: Vec<f64>,
    /// Angular-rate noise magnitudes in deg/s, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub omega_noise: Vec<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of tracks (overrides the preset).
    #[arg(long)]
    pub tracks: Option<usize>,
    /// Observations per track (overrides the preset).
    #[arg(long)]
    pub obs: Option<usize>,
    /// Window length in s.
    #[arg(long)]
    pub window: Option<f64>,
    /// Camera speed in m/s.
    #[arg(long)]
    pub speed: Option<f64>,
    /// True rotation rate in deg/s.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Constant acceleration magnitude in m/s^2, random direction.
    #[arg(long)]
    pub accel: Option<f64>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Rolling-shutter scan time in s.
    #[arg(long, default_value_t = 0.02)]
    pub trs: f64,
    #[arg(long, value_enum, default_value_t = SignArg::Positive)]
    pub readout_sign: SignArg,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    /// Expansion order of the joint solver.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Null-vector normalization (joint, velocity).
    #[arg(long)]
    pub normalization: Option<Normalization>,
    /// Wrap the solver in RANSAC.
    #[arg(long)]
    pub ransac: bool,
    #[arg(long)]
    pub ransac_threshold_deg: Option<f64>,
    #[arg(long)]
    pub ransac_iterations: Option<usize>,
    /// Fraction of tracks turned into outliers.
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// Rotation of outlier image motion in degrees.
    #[arg(long)]
    pub outlier_angle_deg: Option<f64>,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Write the first trial of every cell as solver input files under DIR/cell-<k>.
    #[arg(long, value_name = "DIR")]
    pub dump_tracks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// CSV with columns track_id,t,u,v.
    #[arg(long)]
    pub tracks: PathBuf,
    /// CSV with columns t,wx,wy,wz[,ax,ay,az].
    #[arg(long)]
    pub imu: PathBuf,
    /// key=value intrinsics file; alternatively pass --fx .. --height.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long)]
    pub fx: Option<f64>,
    #[arg(long)]
    pub fy: Option<f64>,
    #[arg(long)]
    pub cx: Option<f64>,
    #[arg(long)]
    pub cy: Option<f64>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Window length in s.
    #[arg(long, default_value_t = 0.2)]
    pub window: f64,
    /// Window stride in s.
    #[arg(long, default_value_t = 0.1)]
    pub stride: f64,
    #[arg(long, value_enum, default_value_t = SamplingArg::Async)]
    pub timestamp_model: SamplingArg,
    /// Rolling-shutter scan time in s.
    #[arg(long, default_value_t = 0.02)]
    pub trs: f64,
    #[arg(long, value_enum, default_value_t = SignArg::Positive)]
    pub readout_sign: SignArg,
    /// Offset added to global-shutter frame times in s.
    #[arg(long, default_value_t = 0.0)]
    pub exposure_offset: f64,
    /// Use the IMU acceleration for a metric solve.
    #[arg(long)]
    pub accel: bool,
    /// Expansion order of the homogeneous solve.
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    #[arg(long, default_value_t = Normalization::Joint)]
    pub normalization: Normalization,
    #[arg(long)]
    pub ransac: bool,
    #[arg(long, default_value_t = 200)]
    pub ransac_iterations: usize,
    #[arg(long, default_value_t = 5.0)]
    pub ransac_threshold_deg: f64,
    #[arg(long, default_value_t = 4)]
    pub ransac_sample_tracks: usize,
    #[arg(long, default_value_t = 5)]
    pub ransac_sample_obs: usize,
    #[arg(long, default_value_t = 0.9)]
    pub ransac_early_stop: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop tracks whose endpoints are closer than this in px.
    #[arg(long, default_value_t = 10.0)]
    pub min_track_length_px: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MinimalityArgs {
    /// Number of tracks.
    #[arg(short = 'M')]
    pub tracks: usize,
    /// Observations per track, comma separated; a single value applies to all.
    #[arg(short = 'n', value_delimiter = ',', required = true)]
    pub observations: Vec<usize>,
    /// Expansion order.
    #[arg(short = 'S', default_value_t = 1)]
    pub order: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 10_000)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Sim(a) => cmd_sim(&a),
        Command::Solve(a) => cmd_solve(&a),
        Command::Minimality(a) => cmd_minimality(&a),
        Command::Bench(a) => cmd_bench(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Io { .. } => EXIT_USAGE,
        Error::Experiment { .. } | Error::Generation(_) => EXIT_EXPERIMENT,
        _ => EXIT_NO_SOLUTION,
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

// ---------------------------------------------------------------- sim

fn base_sim_config(args: &SimArgs) -> Result<SimConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.speed {
        cfg.speed = v;
    }
    if let Some(v) = args.omega {
        cfg.omega_deg_s = v;
    }
    if let Some(m) = args.accel {
        cfg.motion = Motion::ConstantAcceleration {
            accel: Acceleration::Random { magnitude: m },
        };
    }
    if let Some(s) = args.sampling {
        cfg.sampling = match s {
            SamplingArg::Async => Sampling::Asynchronous,
            SamplingArg::Global => Sampling::GlobalShutter,
            SamplingArg::RollingShutter => Sampling::RollingShutter {
                t_rs: args.trs,
                sign: args.readout_sign.into(),
            },
        };
    }
    if let Some(s) = args.solver {
        cfg.solver = match s {
            SolverArg::Velocity => SolverKind::Velocity,
            SolverArg::Joint => SolverKind::Joint { order: args.order },
            SolverArg::KnownAccel => SolverKind::KnownAccel,
        };
    }
    if let Some(n) = args.normalization {
        cfg.normalization = n;
    }
    let wants_ransac = args.ransac || args.ransac_threshold_deg.is_some() || args.ransac_iterations.is_some();
    if wants_ransac {
        let mut rc = match cfg.estimator {
            Estimator::Ransac { config } => config,
            Estimator::Direct => RansacConfig::default(),
        };
        if let Some(t) = args.ransac_threshold_deg {
            rc.inlier_threshold_deg = t;
        }
        if let Some(i) = args.ransac_iterations {
            rc.max_iterations = i;
        }
        cfg.estimator = Estimator::Ransac { config: rc };
    }
    if let Some(f) = args.outlier_fraction {
        cfg.outliers.fraction = f;
    }
    if let Some(a) = args.outlier_angle_deg {
        cfg.outliers.angle_deg = a;
    }
    Ok(cfg)
}

/// Expands the flag lists into the grid of configurations, presets outermost.
pub fn sim_cells(args: &SimArgs) -> Result<Vec<SimConfig>> {
    let base = base_sim_config(args)?;
    let presets: Vec<Option<Preset>> = if args.preset.is_empty() {
        vec![None]
    } else {
        args.preset.iter().copied().map(Some).collect()
    };
    let or_base = |list: &[f64], base: f64| if list.is_empty() { vec![base] } else { list.to_vec() };
    let pixels = or_base(&args.pixel_noise, base.noise.pixel_sigma);
    let jitters = or_base(&args.jitter, base.noise.timestamp_jitter);
    let omegas = or_base(&args.omega_noise, base.noise.omega_noise_deg_s);
    let mut cells = Vec::new();
    for preset in &presets {
        for &px in &pixels {
            for &jit in &jitters {
                for &om in &omegas {
                    let mut cfg = base;
                    if let Some(p) = preset {
                        (cfg.num_tracks, cfg.obs_per_track) = p.tracks_and_observations();
                    }
                    if let Some(m) = args.tracks {
                        cfg.num_tracks = m;
                    }
                    if let Some(n) = args.obs {
                        cfg.obs_per_track = n;
                    }
                    cfg.noise.pixel_sigma = px;
                    cfg.noise.timestamp_jitter = jit;
                    cfg.noise.omega_noise_deg_s = om;
                    cfg.validate()?;
                    cells.push(cfg);
                }
            }
        }
    }
    Ok(cells)
}

fn cmd_sim(args: &SimArgs) -> Result<()> {
    let cells = sim_cells(args)?;
    let out_path = args.output.as_deref();
    let wr = |e: std::io::Error| io_err(out_path.unwrap_or(Path::new("<stdout>")), e);
    let mut out = open_output(out_path)?;
    writeln!(out, "{CSV_HEADER}").map_err(wr)?;
    for (k, cfg) in cells.iter().enumerate() {
        if let Some(dir) = &args.dump_tracks {
            dump_trial(cfg, &dir.join(format!("cell-{k}")))?;
        }
        let stats = run_trials(cfg)?;
        writeln!(out, "{}", csv_row(cfg, &stats)).map_err(wr)?;
        out.flush().map_err(wr)?;
    }
    Ok(())
}

fn timestamp_model_name(model: &TimestampModel) -> &'static str {
    match model {
        TimestampModel::Asynchronous => "async",
        TimestampModel::GlobalShutter { .. } => "global",
        TimestampModel::RollingShutter { .. } => "rolling-shutter",
    }
}

/// Writes trial 0 of `cfg` as `tracks.csv`, `imu.csv`, `intrinsics.txt`
/// and `truth.json`. The IMU file holds the perturbed angular rate as
/// constant samples so that `solve` sees exactly what the trial solver saw.
pub fn dump_trial(cfg: &SimConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut rng = trial_rng(cfg.seed, 0);
    let scene = generate_scene(cfg, &mut rng)?;
    let (tracks, omega) = add_noise(&scene.tracks, &scene.truth.omega, &cfg.noise, &mut rng);
    let ransac_seed: u64 = rng.random();
    let estimate = solve_scene(cfg, &scene, &tracks, &omega, ransac_seed).map(|(est, _)| est);

    let t_s = match &estimate {
        Ok(est) => est.reference_time,
        Err(_) => crate::geometry::reference_time(&tracks).unwrap_or(scene.truth.reference_time),
    };
    let accel = matches!(cfg.motion, Motion::ConstantAcceleration { .. }).then(|| scene.truth.accel_in_frame(t_s));
    let (t0, t1) = tracks
        .iter()
        .filter_map(Track::time_span)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (s, e)| (a.min(s), b.max(e)));
    let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (0.0, cfg.window) };
    let imu: Vec<ImuSample> = (0..=100)
        .map(|i| ImuSample {
            t: t0 + (t1 - t0) * i as f64 / 100.0,
            omega,
            accel,
        })
        .collect();
    let mut imu = imu;
    imu.dedup_by(|b, a| b.t <= a.t);

    io::write_tracks(&dir.join("tracks.csv"), &tracks)?;
    io::write_imu(&dir.join("imu.csv"), &imu)?;
    io::write_intrinsics(&dir.join("intrinsics.txt"), &scene.intrinsics)?;

    let (trs, sign) = match scene.model {
        TimestampModel::RollingShutter { t_rs, sign } => (Some(t_rs), Some(sign)),
        _ => (None, None),
    };
    let truth = json!({
        "config_hash": cfg.hash(),
        "config": cfg,
        "timestamp_model": timestamp_model_name(&scene.model),
        "trs": trs,
        "readout_sign": sign,
        "window": cfg.window,
        "reference_time": t_s,
        "velocity": scene.truth.velocity_in_frame(t_s),
        "acceleration": scene.truth.accel_in_frame(t_s),
        "omega": scene.truth.omega,
        "omega_measured": omega,
        "outlier_ids": scene.outlier_ids,
        "estimate": estimate.as_ref().ok().map(|est| json!({
            "reference_time": est.reference_time,
            "velocity": est.velocity(),
            "rates": est.rates,
        })),
        "estimate_error": estimate.as_ref().err().map(|e| e.to_string()),
    });
    let path = dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth).map_err(|e| io_err(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone, Serialize)]
pub struct WindowReport {
    pub window_start: f64,
    pub window_end: f64,
    pub reference_time: f64,
    pub velocity: Vector3<f64>,
    pub rates: Vec<Vector3<f64>>,
    pub metric: bool,
    pub tracks_used: usize,
    pub inlier_ratio: Option<f64>,
    pub inlier_ids: Option<Vec<crate::geometry::TrackId>>,
    pub degenerate: Option<String>,
    pub sign_flipped: bool,
    pub singular_values: Vec<f64>,
    pub points: Vec<crate::solver::TrackPoint>,
}

impl WindowReport {
    fn new(start: f64, end: f64, est: MotionEstimate, inliers: Option<(f64, Vec<crate::geometry::TrackId>)>) -> Self {
        let (inlier_ratio, inlier_ids) = match inliers {
            Some((r, ids)) => (Some(r), Some(ids)),
            None => (None, None),
        };
        Self {
            window_start: start,
            window_end: end,
            reference_time: est.reference_time,
            velocity: est.velocity(),
            tracks_used: est.points.len(),
            degenerate: est.degenerate.as_ref().map(ToString::to_string),
            inlier_ratio,
            inlier_ids,
            sign_flipped: est.sign_flipped,
            metric: est.metric,
            singular_values: est.singular_values,
            points: est.points,
            rates: est.rates,
        }
    }
}

/// Window start times covering `[t_min, t_max]`: one window when the span
/// fits, otherwise starts every `stride` until a window reaches `t_max`.
pub fn window_starts(t_min: f64, t_max: f64, window: f64, stride: f64) -> Vec<f64> {
    let span = t_max - t_min;
    if span <= window {
        return vec![t_min];
    }
    let n = ((span - window) / stride).ceil() as usize + 1;
    (0..n).map(|k| t_min + k as f64 * stride).collect()
}

fn intrinsics_from_args(args: &SolveArgs) -> Result<CameraIntrinsics> {
    let flags = (args.fx, args.fy, args.cx, args.cy, args.width, args.height);
    match (&args.intrinsics, flags) {
        (Some(path), (None, None, None, None, None, None)) => io::read_intrinsics(path),
        (None, (Some(fx), Some(fy), Some(cx), Some(cy), Some(w), Some(h))) => CameraIntrinsics::new(fx, fy, cx, cy, w, h),
        (Some(_), _) => Err(Error::InvalidInput("pass either --intrinsics or the --fx .. --height flags, not both".into())),
        (None, _) => Err(Error::InvalidInput(
            "intrinsics required: --intrinsics FILE or all of --fx --fy --cx --cy --width --height".into(),
        )),
    }
}

fn timestamp_model_from_args(args: &SolveArgs) -> TimestampModel {
    match args.timestamp_model {
        SamplingArg::Async => TimestampModel::Asynchronous,
        SamplingArg::Global => TimestampModel::GlobalShutter {
            exposure_offset: args.exposure_offset,
        },
        SamplingArg::RollingShutter => TimestampModel::RollingShutter {
            t_rs: args.trs,
            sign: args.readout_sign.into(),
        },
    }
}

fn window_tracks(tracks: &[Track], t0: f64, t1: f64, min_len_px: f64) -> Vec<Track> {
    tracks
        .iter()
        .filter_map(|tr| {
            let obs: Vec<TrackObservation> = tr.observations.iter().filter(|o| o.t >= t0 && o.t <= t1).copied().collect();
            let tr = Track::new(tr.id, obs);
            (tr.len() >= 2 && tr.endpoint_displacement() >= min_len_px).then_some(tr)
        })
        .collect()
}

/// Solves every window of a track file. Windows that fail are reported on
/// stderr; the call fails only when none succeeds.
pub fn solve_windows(args: &SolveArgs) -> Result<Vec<WindowReport>> {
    if !(args.window > 0.0 && args.window.is_finite() && args.stride > 0.0 && args.stride.is_finite()) {
        return Err(Error::InvalidInput("--window and --stride must be positive".into()));
    }
    if !(args.min_track_length_px >= 0.0) {
        return Err(Error::InvalidInput("--min-track-length-px must be >= 0".into()));
    }
    if args.accel && (args.order != 1 || args.ransac) {
        return Err(Error::InvalidInput("--accel supports neither --order > 1 nor --ransac".into()));
    }
    let k = intrinsics_from_args(args)?;
    let model = timestamp_model_from_args(args);
    model.validate()?;
    let solve_cfg = SolveConfig {
        normalization: args.normalization,
        ..SolveConfig::default()
    };
    let ransac_cfg = RansacConfig {
        max_iterations: args.ransac_iterations,
        sample_tracks: args.ransac_sample_tracks,
        sample_obs_per_track: args.ransac_sample_obs,
        inlier_threshold_deg: args.ransac_threshold_deg,
        early_stop_inlier_ratio: args.ransac_early_stop,
        seed: args.seed,
    };
    if args.ransac {
        ransac_cfg.validate()?;
    }
    if !(1..=MAX_ORDER).contains(&args.order) {
        return Err(Error::InvalidInput(format!("--order must be in 1..={MAX_ORDER}")));
    }

    let tracks = io::read_tracks(&args.tracks)?;
    let imu = io::read_imu(&args.imu)?;
    if args.accel && imu.iter().any(|s| s.accel.is_none()) {
        return Err(Error::InvalidInput("--accel needs ax,ay,az columns in the IMU file".into()));
    }
    let (t_min, t_max) = tracks
        .iter()
        .filter_map(Track::time_span)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (s, e)| (a.min(s), b.max(e)));
    if t_min > t_max {
        return Err(Error::NoSolution("the track file has no observations".into()));
    }

    let mut reports = Vec::new();
    let mut last_err = None;
    for start in window_starts(t_min, t_max, args.window, args.stride) {
        let end = start + args.window;
        match solve_window(args, &tracks, &imu, &k, &model, &solve_cfg, &ransac_cfg, start, end) {
            Ok(r) => reports.push(r),
            Err(e @ Error::InvalidInput(_)) => return Err(e),
            Err(e) => {
                eprintln!("window [{start}, {end}]: {e}");
                last_err = Some(e);
            }
        }
    }
    if reports.is_empty() {
        return Err(match last_err {
            Some(Error::NoSolution(msg)) => Error::NoSolution(format!("no solvable window ({msg})")),
            Some(e) => Error::NoSolution(format!("no solvable window ({e})")),
            None => Error::NoSolution("no solvable window".into()),
        });
    }
    Ok(reports)
}

#[allow(clippy::too_many_arguments)]
fn solve_window(
    args: &SolveArgs,
    tracks: &[Track],
    imu: &[ImuSample],
    k: &CameraIntrinsics,
    model: &TimestampModel,
    solve_cfg: &SolveConfig,
    ransac_cfg: &RansacConfig,
    start: f64,
    end: f64,
) -> Result<WindowReport> {
    let windowed = window_tracks(tracks, start, end, args.min_track_length_px);
    if windowed.is_empty() {
        return Err(Error::NoSolution("every track has fewer than two observations".into()));
    }
    let (omega, accel) =
        io::average_imu(imu, start, end).ok_or_else(|| Error::NoSolution("no IMU samples in window".into()))?;
    if args.accel {
        let accel = accel.ok_or_else(|| Error::InvalidInput("missing IMU acceleration".into()))?;
        let est = solve_with_known_accel(&windowed, &AngularRate(omega), &accel, k, model, solve_cfg)?;
        return Ok(WindowReport::new(start, end, est, None));
    }
    let mut omegas = vec![Vector3::zeros(); args.order];
    omegas[0] = omega;
    if args.ransac {
        let res = ransac_tracks(&windowed, &omegas, k, model, solve_cfg, ransac_cfg)?;
        return Ok(WindowReport::new(
            start,
            end,
            res.estimate,
            Some((res.inlier_ratio, res.inlier_ids)),
        ));
    }
    let est = if args.order == 1 {
        solve(&windowed, &AngularRate(omega), k, model, solve_cfg)?
    } else {
        solve_order_s(&windowed, &OrderSInputs::new(omegas), k, model, solve_cfg)?
    };
    Ok(WindowReport::new(start, end, est, None))
}

pub fn write_reports_csv(w: impl Write, reports: &[WindowReport]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SOLVE_CSV_HEADER)?;
    for r in reports {
        wr.write_record([
            fmt_f64(r.window_start),
            fmt_f64(r.window_end),
            fmt_f64(r.reference_time),
            fmt_f64(r.velocity.x),
            fmt_f64(r.velocity.y),
            fmt_f64(r.velocity.z),
            r.metric.to_string(),
            r.tracks_used.to_string(),
            r.inlier_ratio.map(fmt_f64).unwrap_or_default(),
            r.degenerate.clone().unwrap_or_default(),
            r.sign_flipped.to_string(),
            r.singular_values.last().copied().map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> Result<()> {
    let reports = solve_windows(args)?;
    let out_path = args.output.as_deref();
    let label = out_path.unwrap_or(Path::new("<stdout>"));
    let mut out = open_output(out_path)?;
    match args.format {
        FormatArg::Json => {
            serde_json::to_writer_pretty(&mut out, &reports).map_err(|e| io_err(label, e))?;
            writeln!(out).map_err(|e| io_err(label, e))?;
        }
        FormatArg::Csv => write_reports_csv(&mut out, &reports).map_err(|e| io_err(label, e))?,
    }
    out.flush().map_err(|e| io_err(label, e))
}

// ---------------------------------------------------------------- minimality

fn cmd_minimality(args: &MinimalityArgs) -> Result<()> {
    let observations = match args.observations.as_slice() {
        [n] => vec![*n; args.tracks],
        list if list.len() == args.tracks => list.to_vec(),
        list => {
            return Err(Error::InvalidInput(format!(
                "-n lists {} tracks but -M is {}",
                list.len(),
                args.tracks
            )))
        }
    };
    let class = classify_minimality(args.tracks, &observations, args.order);
    println!("{}", class.classification);
    println!(
        "tracks={} observations={} order={} equations={} unknowns={} excess={}",
        class.tracks,
        class.total_observations(),
        class.order,
        class.equations,
        class.unknowns,
        class.excess_equations()
    );
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub reps: usize,
    /// Median full solve time with 4 tracks of 5 observations, microseconds.
    pub sampled_minimal_us: f64,
    /// Median full solve time with 2 tracks of 2 observations, microseconds.
    pub minimal_us: f64,
    /// Median Schur accumulation time over 100 tracks, microseconds.
    pub schur_100_us: f64,
    /// Median Schur accumulation time over 1000 tracks, microseconds.
    pub schur_1000_us: f64,
}

impl BenchReport {
    pub fn schur_ratio(&self) -> f64 {
        self.schur_1000_us / self.schur_100_us
    }
}

fn median_us(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    crate::sim::percentile(&samples, 50.0)
}

fn bench_scene(tracks: usize, obs: usize, seed: u64) -> Result<(Vec<Track>, Vector3<f64>, CameraIntrinsics, TimestampModel)> {
    let cfg = SimConfig {
        num_tracks: tracks,
        obs_per_track: obs,
        seed,
        ..SimConfig::default()
    };
    let scene = generate_scene(&cfg, &mut trial_rng(seed, 0))?;
    Ok((scene.tracks, scene.truth.omega, scene.intrinsics, scene.model))
}

fn time_solve(tracks: usize, obs: usize, reps: usize, seed: u64) -> Result<f64> {
    let (tr, omega, k, model) = bench_scene(tracks, obs, seed)?;
    let cfg = SolveConfig::default();
    let omega = AngularRate(omega);
    solve(&tr, &omega, &k, &model, &cfg)?;
    let samples = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(solve(std::hint::black_box(&tr), &omega, &k, &model, &cfg)).ok();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    Ok(median_us(samples))
}

/// Times the solvers on noiseless scenes. Schur accumulation is timed with
/// `reps / 100` repetitions (at least 20).
pub fn run_bench(reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::InvalidInput("--reps must be >= 1".into()));
    }
    let sampled_minimal_us = time_solve(4, 5, reps, seed)?;
    let minimal_us = time_solve(2, 2, reps, seed)?;

    let (tr, omega, k, model) = bench_scene(1000, 5, seed)?;
    let (_, bearings) = prepare_bearings(&tr, &[omega], &k, &model, None)?;
    let blocks = bearings
        .iter()
        .map(|b| track_blocks(&b.bearings, 1))
        .collect::<Result<Vec<_>>>()?;
    let schur_reps = (reps / 100).max(20);
    let time_schur = |n: usize| -> Result<f64> {
        let subset = &blocks[..n.min(blocks.len())];
        accumulate_schur(subset, DEFAULT_EPS_RANK)?;
        let samples = (0..schur_reps)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(accumulate_schur(std::hint::black_box(subset), DEFAULT_EPS_RANK)).ok();
                t.elapsed().as_secs_f64() * 1e6
            })
            .collect();
        Ok(median_us(samples))
    };
    Ok(BenchReport {
        reps,
        sampled_minimal_us,
        minimal_us,
        schur_100_us: time_schur(100)?,
        schur_1000_us: time_schur(1000)?,
    })
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let r = run_bench(args.reps, args.seed)?;
    println!("reps {}", r.reps);
    println!("solve_4x5_median_us {:.3}", r.sampled_minimal_us);
    println!("solve_2x2_median_us {:.3}", r.minimal_us);
    println!("schur_100_median_us {:.3}", r.schur_100_us);
    println!("schur_1000_median_us {:.3}", r.schur_1000_us);
    println!("schur_ratio {:.3}", r.schur_ratio());
    Ok(())
}
