//! Synthetic scenes, noise injection and batched error statistics.
//!
//! A scene is a camera moving with constant velocity (optionally constant
//! acceleration) and rotating at a constant rate past points scattered in a
//! cube in front of it. Trajectory and rotation are expressed relative to the
//! window center; the solver's own reference frame may differ, so truth is
//! re-expressed at the estimate's reference time before comparison.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{
    so3_exp, AngularRate, CameraIntrinsics, ReadoutSign, TimestampModel, Track, TrackId, TrackObservation,
};
use crate::robust::{ransac_tracks, RansacConfig};
use crate::solver::{
    prepare_bearings, solve, solve_bearings_known_accel, solve_order_s, MotionEstimate, Normalization, OrderSInputs,
    SolveConfig,
};

/// Point placement attempts before generation gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Fixed-point iterations for rolling-shutter row times.
const RS_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 5 tracks, 5 observations each.
    Sparse,
    /// 20 tracks, 20 observations each.
    Moderate,
    /// 100 tracks, 50 observations each.
    Dense,
}

impl Preset {
    pub fn tracks_and_observations(self) -> (usize, usize) {
        match self {
            Preset::Sparse => (5, 5),
            Preset::Moderate => (20, 20),
            Preset::Dense => (100, 50),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Sparse => "sparse",
            Preset::Moderate => "moderate",
            Preset::Dense => "dense",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Preset::Sparse),
            "moderate" => Ok(Preset::Moderate),
            "dense" => Ok(Preset::Dense),
            _ => Err(Error::InvalidInput(format!("unknown preset {s:?} (sparse, moderate, dense)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JitterDistribution {
    /// Configured value is the standard deviation.
    #[default]
    Gaussian,
    /// Configured value is the half-width.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per-axis pixel standard deviation.
    pub pixel_sigma: f64,
    /// Timestamp perturbation scale in seconds.
    pub timestamp_jitter: f64,
    pub jitter_distribution: JitterDistribution,
    /// RMS magnitude of the angular-rate error in deg/s.
    pub omega_noise_deg_s: f64,
}

impl NoiseConfig {
    pub fn new(pixel_sigma: f64, timestamp_jitter: f64, omega_noise_deg_s: f64) -> Self {
        Self {
            pixel_sigma,
            timestamp_jitter,
            omega_noise_deg_s,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Acceleration {
    Fixed { accel: [f64; 3] },
    /// Random direction with the given magnitude in m/s^2.
    Random { magnitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Motion {
    #[default]
    ConstantVelocity,
    ConstantAcceleration { accel: Acceleration },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampling {
    /// Every observation at its own uniformly drawn time.
    #[default]
    Asynchronous,
    /// `obs_per_track` evenly spaced frames spanning the window.
    GlobalShutter,
    /// As global shutter, with each row delayed by `y / (H - 1) * t_rs`.
    RollingShutter { t_rs: f64, sign: ReadoutSign },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolverKind {
    /// Constant-velocity direction.
    #[default]
    Velocity,
    /// Order-`order` homogeneous solve; the first rate is scored.
    Joint { order: usize },
    /// Metric velocity given the true acceleration.
    KnownAccel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    Direct,
    /// RANSAC; the configured seed is replaced per trial.
    Ransac { config: RansacConfig },
}

/// Tracks whose image motion is rotated about their first observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierConfig {
    pub fraction: f64,
    pub angle_deg: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            angle_deg: 45.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Camera speed in m/s.
    pub speed: f64,
    /// True rotation rate in deg/s, random axis.
    pub omega_deg_s: f64,
    /// Edge length of the point cube in m.
    pub cube_size: f64,
    /// Distance from the camera to the cube center in m.
    pub cube_distance: f64,
    /// Observation window in s.
    pub window: f64,
    pub num_tracks: usize,
    pub obs_per_track: usize,
    pub trials: usize,
    pub noise: NoiseConfig,
    pub motion: Motion,
    pub sampling: Sampling,
    pub solver: SolverKind,
    pub normalization: Normalization,
    pub estimator: Estimator,
    pub outliers: OutlierConfig,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::preset(Preset::Moderate)
    }
}

impl SimConfig {
    pub fn preset(preset: Preset) -> Self {
        let (num_tracks, obs_per_track) = preset.tracks_and_observations();
        Self {
            width: 640,
            height: 480,
            focal: 320.0,
            speed: 1.0,
            omega_deg_s: 20.0,
            cube_size: 1.0,
            cube_distance: 2.0,
            window: 0.2,
            num_tracks,
            obs_per_track,
            trials: 1000,
            noise: NoiseConfig::default(),
            motion: Motion::ConstantVelocity,
            sampling: Sampling::Asynchronous,
            solver: SolverKind::Velocity,
            normalization: Normalization::Joint,
            estimator: Estimator::Direct,
            outliers: OutlierConfig::default(),
            seed: 0,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let nonneg = [
            ("speed", self.speed),
            ("omega_deg_s", self.omega_deg_s),
            ("pixel_sigma", self.noise.pixel_sigma),
            ("timestamp_jitter", self.noise.timestamp_jitter),
            ("omega_noise_deg_s", self.noise.omega_noise_deg_s),
            ("outlier angle", self.outliers.angle_deg),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.width < 2 || self.height < 2 || !(self.focal > 0.0) {
            return bad("image must be at least 2x2 px with positive focal length".into());
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return bad(format!("window must be > 0, got {}", self.window));
        }
        if !(self.cube_size > 0.0 && self.cube_distance > 0.5 * self.cube_size) {
            return bad("point cube must have positive size and lie in front of the camera".into());
        }
        if self.num_tracks < 1 {
            return bad("need at least one track".into());
        }
        if self.obs_per_track < 2 {
            return bad("need at least two observations per track".into());
        }
        if self.trials < 1 {
            return bad("need at least one trial".into());
        }
        if !(0.0..=1.0).contains(&self.outliers.fraction) {
            return bad(format!("outlier fraction must lie in [0, 1], got {}", self.outliers.fraction));
        }
        if let Sampling::RollingShutter { t_rs, .. } = self.sampling {
            if !(t_rs > 0.0 && t_rs.is_finite()) {
                return bad(format!("rolling shutter scan time must be > 0, got {t_rs}"));
            }
        }
        if let SolverKind::Joint { order } = self.solver {
            if !(1..=crate::linsys::MAX_ORDER).contains(&order) {
                return bad(format!("joint order {order} unsupported"));
            }
        }
        if let Motion::ConstantAcceleration { accel } = self.motion {
            let ok = match accel {
                Acceleration::Fixed { accel } => accel.iter().all(|v| v.is_finite()),
                Acceleration::Random { magnitude } => magnitude >= 0.0 && magnitude.is_finite(),
            };
            if !ok {
                return bad("acceleration must be finite".into());
            }
        }
        if let Estimator::Ransac { config } = self.estimator {
            config.validate()?;
        }
        Ok(())
    }

    /// Hex prefix of the SHA-256 of the JSON-serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn timestamp_model(&self) -> TimestampModel {
        match self.sampling {
            Sampling::Asynchronous => TimestampModel::Asynchronous,
            Sampling::GlobalShutter => TimestampModel::GlobalShutter { exposure_offset: 0.0 },
            Sampling::RollingShutter { t_rs, sign } => TimestampModel::RollingShutter { t_rs, sign },
        }
    }
}

/// Camera trajectory in the frame at `reference_time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundTruth {
    pub velocity: Vector3<f64>,
    pub accel: Vector3<f64>,
    /// rad/s
    pub omega: Vector3<f64>,
    pub reference_time: f64,
}

impl GroundTruth {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        let tau = t - self.reference_time;
        self.velocity * tau + self.accel * (0.5 * tau * tau)
    }

    /// Camera-to-reference rotation at `t`.
    pub fn rotation(&self, t: f64) -> Matrix3<f64> {
        so3_exp(&(self.omega * (t - self.reference_time)))
    }

    /// Velocity at `t`, expressed in the camera frame at `t`.
    pub fn velocity_in_frame(&self, t: f64) -> Vector3<f64> {
        let tau = t - self.reference_time;
        self.rotation(t).transpose() * (self.velocity + self.accel * tau)
    }

    /// Acceleration expressed in the camera frame at `t`.
    pub fn accel_in_frame(&self, t: f64) -> Vector3<f64> {
        self.rotation(t).transpose() * self.accel
    }

    /// `p` (reference frame) in camera coordinates at `t`.
    pub fn to_camera(&self, p: &Vector3<f64>, t: f64) -> Vector3<f64> {
        self.rotation(t).transpose() * (p - self.position(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub truth: GroundTruth,
    /// Reference-frame points, one per track, in track order.
    pub points: Vec<Vector3<f64>>,
    pub tracks: Vec<Track>,
    /// How the tracks' raw timestamps map to capture times.
    pub model: TimestampModel,
    pub intrinsics: CameraIntrinsics,
    pub outlier_ids: Vec<TrackId>,
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Raw frame times of `n` evenly spaced frames covering `[0, window]`.
fn frame_times(n: usize, window: f64) -> Vec<f64> {
    (0..n).map(|k| window * k as f64 / (n - 1) as f64).collect()
}

/// Observations of `p`, or `None` if it leaves the image or crosses the
/// camera plane at any sample.
fn observe(
    p: &Vector3<f64>,
    raw_times: &[f64],
    truth: &GroundTruth,
    k: &CameraIntrinsics,
    sampling: &Sampling,
) -> Option<Vec<TrackObservation>> {
    raw_times
        .iter()
        .map(|&raw| {
            let project = |t: f64| -> Option<Vector2<f64>> {
                let pc = truth.to_camera(p, t);
                (pc.z > 1e-3).then(|| k.project(&pc)).flatten().filter(|x| k.contains(x))
            };
            let x = match *sampling {
                Sampling::RollingShutter { t_rs, sign } => {
                    let row_time = |x: &Vector2<f64>| {
                        crate::geometry::assign_timestamp(
                            &TimestampModel::RollingShutter { t_rs, sign },
                            raw,
                            x,
                            k.height,
                        )
                        .ok()
                    };
                    let mut x = project(raw)?;
                    for _ in 0..RS_ITERATIONS {
                        let next = project(row_time(&x)?)?;
                        let done = next == x;
                        x = next;
                        if done {
                            break;
                        }
                    }
                    x
                }
                _ => project(raw)?,
            };
            Some(TrackObservation { x, t: raw })
        })
        .collect()
}

/// Rotates a track's image motion by `angle` radians about its first
/// observation.
fn corrupt_direction(track: &mut Track, angle: f64) {
    let Some(origin) = track.observations.first().map(|o| o.x) else { return };
    let (s, c) = angle.sin_cos();
    for o in &mut track.observations {
        let d = o.x - origin;
        o.x = origin + Vector2::new(c * d.x - s * d.y, s * d.x + c * d.y);
    }
}

/// Draws a scene: random velocity direction at the configured speed, random
/// rotation axis, points uniform in the cube and visible throughout.
pub fn generate_scene<R: Rng>(config: &SimConfig, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    let k = config.intrinsics();
    let accel = match config.motion {
        Motion::ConstantVelocity => Vector3::zeros(),
        Motion::ConstantAcceleration { accel: Acceleration::Fixed { accel } } => Vector3::from(accel),
        Motion::ConstantAcceleration { accel: Acceleration::Random { magnitude } } => random_unit(rng) * magnitude,
    };
    let truth = GroundTruth {
        velocity: random_unit(rng) * config.speed,
        accel,
        omega: random_unit(rng) * config.omega_deg_s.to_radians(),
        reference_time: 0.5 * config.window,
    };
    let half = 0.5 * config.cube_size;
    let frames = frame_times(config.obs_per_track, config.window);

    let mut points = Vec::with_capacity(config.num_tracks);
    let mut tracks = Vec::with_capacity(config.num_tracks);
    for i in 0..config.num_tracks {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let p = Vector3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                config.cube_distance + rng.random_range(-half..half),
            );
            let raw = match config.sampling {
                Sampling::Asynchronous => {
                    let mut ts: Vec<f64> =
                        (0..config.obs_per_track).map(|_| rng.random_range(0.0..config.window)).collect();
                    ts.sort_by(f64::total_cmp);
                    ts
                }
                _ => frames.clone(),
            };
            if let Some(obs) = observe(&p, &raw, &truth, &k, &config.sampling) {
                placed = Some((p, obs));
                break;
            }
        }
        let Some((p, obs)) = placed else {
            return Err(Error::Generation(format!(
                "could not place a visible point for track {i} in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        };
        points.push(p);
        tracks.push(Track::new(TrackId(i as u64), obs));
    }

    let n_out = (config.outliers.fraction * config.num_tracks as f64).round() as usize;
    let mut outlier_ids = Vec::with_capacity(n_out);
    if n_out > 0 {
        let picks = rand::seq::index::sample(rng, config.num_tracks, n_out);
        for i in picks.iter() {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            corrupt_direction(&mut tracks[i], sign * config.outliers.angle_deg.to_radians());
            outlier_ids.push(tracks[i].id);
        }
        outlier_ids.sort();
    }

    Ok(Scene {
        truth,
        points,
        tracks,
        model: config.timestamp_model(),
        intrinsics: k,
        outlier_ids,
    })
}

/// Perturbs pixel positions and timestamps and returns the angular rate to
/// hand to the solver. Zero noise leaves everything bitwise unchanged.
///
/// Timestamps move by at most just under half the gap to each neighbor, so
/// per-track order is preserved.
pub fn add_noise<R: Rng>(tracks: &[Track], omega: &Vector3<f64>, noise: &NoiseConfig, rng: &mut R) -> (Vec<Track>, Vector3<f64>) {
    let mut out = tracks.to_vec();
    if noise.pixel_sigma > 0.0 {
        let n = Normal::new(0.0, noise.pixel_sigma).expect("finite sigma");
        for tr in &mut out {
            for o in &mut tr.observations {
                o.x += Vector2::new(n.sample(rng), n.sample(rng));
            }
        }
    }
    if noise.timestamp_jitter > 0.0 {
        let j = noise.timestamp_jitter;
        let gauss = Normal::new(0.0, j).expect("finite jitter");
        for tr in &mut out {
            let orig: Vec<f64> = tr.observations.iter().map(|o| o.t).collect();
            for (idx, o) in tr.observations.iter_mut().enumerate() {
                let d = match noise.jitter_distribution {
                    JitterDistribution::Gaussian => gauss.sample(rng),
                    JitterDistribution::Uniform => rng.random_range(-j..=j),
                };
                let lo = if idx > 0 { -0.49 * (orig[idx] - orig[idx - 1]) } else { f64::NEG_INFINITY };
                let hi = if idx + 1 < orig.len() { 0.49 * (orig[idx + 1] - orig[idx]) } else { f64::INFINITY };
                o.t = orig[idx] + d.clamp(lo, hi);
            }
        }
    }
    let mut w = *omega;
    if noise.omega_noise_deg_s > 0.0 {
        let sigma = noise.omega_noise_deg_s.to_radians() / 3f64.sqrt();
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        w += Vector3::from_fn(|_, _| n.sample(rng));
    }
    (out, w)
}

/// Angle between estimate and truth in degrees, in `[0, 180]`.
pub fn velocity_error(v_hat: &Vector3<f64>, v_gt: &Vector3<f64>) -> Result<f64> {
    if v_hat.norm() == 0.0 || v_gt.norm() == 0.0 {
        return Err(Error::InvalidInput("velocity error of a zero vector".into()));
    }
    let a = v_hat.cross(v_gt).norm().atan2(v_hat.dot(v_gt)).to_degrees();
    Ok(a.clamp(0.0, 180.0))
}

/// Result of one successful trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub error_deg: f64,
    /// `| |v_hat| - |v| |` in m/s for the metric solver.
    pub speed_error: Option<f64>,
    /// Direction error of the second rate in degrees, for joint solves of
    /// order 2 or more on accelerating scenes.
    pub accel_error_deg: Option<f64>,
    pub outliers_injected: usize,
    pub outliers_excluded: usize,
    pub inlier_ratio: Option<f64>,
    /// Best hypothesis and refit mean inlier residuals (RANSAC only).
    pub residuals_deg: Option<(f64, f64)>,
}

/// Solves one noisy scene with the configured solver and estimator.
pub fn solve_scene(
    config: &SimConfig,
    scene: &Scene,
    tracks: &[Track],
    omega: &Vector3<f64>,
    ransac_seed: u64,
) -> Result<(MotionEstimate, Option<crate::robust::RansacResult>)> {
    let k = &scene.intrinsics;
    let cfg = SolveConfig {
        normalization: config.normalization,
        ..SolveConfig::default()
    };
    let omegas: Vec<Vector3<f64>> = match config.solver {
        SolverKind::Joint { order } => {
            let mut w = vec![Vector3::zeros(); order];
            w[0] = *omega;
            w
        }
        _ => vec![*omega],
    };
    match (config.estimator, config.solver) {
        (Estimator::Ransac { .. }, SolverKind::KnownAccel) => {
            Err(Error::InvalidInput("RANSAC is not available for the known-acceleration solver".into()))
        }
        (Estimator::Ransac { config: rc }, _) => {
            let rc = RansacConfig { seed: ransac_seed, ..rc };
            let res = ransac_tracks(tracks, &omegas, k, &scene.model, &cfg, &rc)?;
            Ok((res.estimate.clone(), Some(res)))
        }
        (Estimator::Direct, SolverKind::Velocity) => Ok((solve(tracks, &AngularRate(*omega), k, &scene.model, &cfg)?, None)),
        (Estimator::Direct, SolverKind::Joint { .. }) => {
            Ok((solve_order_s(tracks, &OrderSInputs::new(omegas), k, &scene.model, &cfg)?, None))
        }
        (Estimator::Direct, SolverKind::KnownAccel) => {
            // The accelerometer reading is expressed in the reference frame
            // the solver picks for these tracks.
            let (t_s, bearings) = prepare_bearings(tracks, &[*omega], k, &scene.model, None)?;
            let a = scene.truth.accel_in_frame(t_s);
            Ok((solve_bearings_known_accel(&bearings, &a, cfg.eps_rank, t_s)?, None))
        }
    }
}

/// Generates, perturbs and solves one trial. Degenerate estimates count as
/// failures.
pub fn run_trial<R: Rng>(config: &SimConfig, rng: &mut R) -> Result<TrialOutcome> {
    let scene = generate_scene(config, rng)?;
    let (tracks, omega) = add_noise(&scene.tracks, &scene.truth.omega, &config.noise, rng);
    let ransac_seed: u64 = rng.random();
    let (est, ransac) = solve_scene(config, &scene, &tracks, &omega, ransac_seed)?;
    if let Some(d) = &est.degenerate {
        return Err(Error::NoSolution(format!("degenerate estimate: {d}")));
    }
    let v_gt = scene.truth.velocity_in_frame(est.reference_time);
    let v_hat = est.velocity();
    let error_deg = velocity_error(&v_hat, &v_gt)?;
    let speed_error = est.metric.then(|| (v_hat.norm() - v_gt.norm()).abs());
    let a_gt = scene.truth.accel_in_frame(est.reference_time);
    let accel_error_deg = match est.rates.get(1) {
        Some(a_hat) if !est.metric && a_gt.norm() > 0.0 && a_hat.norm() > 0.0 => Some(velocity_error(a_hat, &a_gt)?),
        _ => None,
    };
    let (outliers_excluded, inlier_ratio, residuals_deg) = match &ransac {
        Some(r) => (
            scene.outlier_ids.iter().filter(|id| r.inlier_ids.binary_search(id).is_err()).count(),
            Some(r.inlier_ratio),
            Some((r.hypothesis_residual_deg, r.refined_residual_deg)),
        ),
        None => (0, None, None),
    };
    Ok(TrialOutcome {
        error_deg,
        speed_error,
        accel_error_deg,
        outliers_injected: scene.outlier_ids.len(),
        outliers_excluded,
        inlier_ratio,
        residuals_deg,
    })
}

/// RNG of trial `trial` in a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialStats {
    /// Velocity errors of successful trials in trial order, degrees.
    pub errors_deg: Vec<f64>,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub p25_deg: f64,
    pub p75_deg: f64,
    pub failures: usize,
    pub trials: usize,
    pub outcomes: Vec<TrialOutcome>,
}

impl TrialStats {
    pub fn from_outcomes(outcomes: Vec<TrialOutcome>, failures: usize) -> Self {
        let errors_deg: Vec<f64> = outcomes.iter().map(|o| o.error_deg).collect();
        let mut sorted = errors_deg.clone();
        sorted.sort_by(f64::total_cmp);
        let mean_deg = if sorted.is_empty() {
            f64::NAN
        } else {
            sorted.iter().sum::<f64>() / sorted.len() as f64
        };
        Self {
            mean_deg,
            median_deg: percentile(&sorted, 50.0),
            p25_deg: percentile(&sorted, 25.0),
            p75_deg: percentile(&sorted, 75.0),
            trials: outcomes.len() + failures,
            failures,
            errors_deg,
            outcomes,
        }
    }

    /// Injected outliers left out of the inlier set over all RANSAC trials,
    /// or `None` when nothing was injected.
    pub fn outlier_exclusion_rate(&self) -> Option<f64> {
        let injected: usize = self.outcomes.iter().map(|o| o.outliers_injected).sum();
        let excluded: usize = self.outcomes.iter().map(|o| o.outliers_excluded).sum();
        (injected > 0).then(|| excluded as f64 / injected as f64)
    }

    pub fn speed_errors(&self) -> Vec<f64> {
        self.outcomes.iter().filter_map(|o| o.speed_error).collect()
    }

    pub fn accel_errors_deg(&self) -> Vec<f64> {
        self.outcomes.iter().filter_map(|o| o.accel_error_deg).collect()
    }
}

/// Linearly interpolated percentile of sorted data; NaN when empty.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = pct / 100.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

/// Runs `config.trials` independent trials in parallel. Fails when more
/// than half of them fail.
pub fn run_trials(config: &SimConfig) -> Result<TrialStats> {
    config.validate()?;
    let results: Vec<Result<TrialOutcome>> = (0..config.trials as u64)
        .into_par_iter()
        .map(|i| run_trial(config, &mut trial_rng(config.seed, i)))
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(Error::InvalidInput(msg)) => return Err(Error::InvalidInput(msg)),
            Err(_) => failures += 1,
        }
    }
    if 2 * failures > config.trials {
        return Err(Error::Experiment {
            failures,
            trials: config.trials,
        });
    }
    Ok(TrialStats::from_outcomes(outcomes, failures))
}

pub const CSV_HEADER: &str =
    "config_hash,pixel_sigma_px,timestamp_jitter_s,omega_noise_deg_s,trials,mean_deg,median_deg,p25_deg,p75_deg,failures";

/// One CSV row (no trailing newline) matching [`CSV_HEADER`].
pub fn csv_row(config: &SimConfig, stats: &TrialStats) -> String {
    format!(
        "{},{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
        config.hash(),
        config.noise.pixel_sigma,
        config.noise.timestamp_jitter,
        config.noise.omega_noise_deg_s,
        stats.trials,
        stats.mean_deg,
        stats.median_deg,
        stats.p25_deg,
        stats.p75_deg,
        stats.failures
    )
}
