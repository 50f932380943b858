//! RANSAC over feature tracks.
//!
//! A hypothesis is fit to a few tracks, each thinned to a handful of
//! temporally spread observations, and scored by the mean angular residual of
//! every full candidate track. The best hypothesis's inliers are refit
//! jointly.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngularRate, BearingObservation, CameraIntrinsics, Track, TrackId, TimestampModel};
use crate::linsys::{rank_check_F, track_blocks, TrackBlocks};
use crate::solver::{displacement, prepare_bearings, solve_bearings, MotionEstimate, SolveConfig, TrackBearings};

/// Residual reported when the predicted point coincides with the camera.
pub const RESIDUAL_SENTINEL_DEG: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Tracks per hypothesis.
    pub sample_tracks: usize,
    /// Observations drawn from each sampled track.
    pub sample_obs_per_track: usize,
    pub inlier_threshold_deg: f64,
    pub early_stop_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            sample_tracks: 4,
            sample_obs_per_track: 5,
            inlier_threshold_deg: 5.0,
            early_stop_inlier_ratio: 0.9,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_tracks < 1 {
            return Err(Error::InvalidInput("sample_tracks must be at least 1".into()));
        }
        if self.sample_obs_per_track < 2 {
            return Err(Error::InvalidInput("sample_obs_per_track must be at least 2".into()));
        }
        if !(self.inlier_threshold_deg > 0.0) {
            return Err(Error::InvalidInput("inlier threshold must be positive".into()));
        }
        if !(self.early_stop_inlier_ratio > 0.0 && self.early_stop_inlier_ratio <= 1.0) {
            return Err(Error::InvalidInput("early-stop ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RansacResult {
    /// Refit over all observations of the inlier tracks.
    pub estimate: MotionEstimate,
    /// Sorted ascending.
    pub inlier_ids: Vec<TrackId>,
    /// Inliers over candidate tracks (those whose point is observable).
    pub inlier_ratio: f64,
    pub iterations_run: usize,
    /// Mean inlier residual of the best hypothesis, degrees.
    pub hypothesis_residual_deg: f64,
    /// Mean residual of the same inliers under the refit, degrees.
    pub refined_residual_deg: f64,
}

/// Angle between two vectors in degrees, accurate near 0 and 180.
fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Mean angle in degrees between each observed bearing and the bearing
/// predicted from `point` and the motion `rates`.
pub fn track_residual(bearings: &[BearingObservation], point: &Vector3<f64>, rates: &[Vector3<f64>]) -> f64 {
    if bearings.is_empty() {
        return RESIDUAL_SENTINEL_DEG;
    }
    let mut sum = 0.0;
    for b in bearings {
        let predicted = point - displacement(rates, b.t_prime);
        if predicted.norm() == 0.0 {
            return RESIDUAL_SENTINEL_DEG;
        }
        sum += angle_deg(&b.f_prime, &predicted);
    }
    sum / bearings.len() as f64
}

/// Residual of a track under `estimate`, or `None` when the estimate holds
/// no point for it.
pub fn estimate_residual(track: &TrackBearings, estimate: &MotionEstimate) -> Option<f64> {
    let p = estimate.point(track.id)?;
    Some(track_residual(&track.bearings, &p, &estimate.rates))
}

/// Stratified pick of `n` indices out of `len`: first and last always, one
/// uniformly drawn index from each of `n - 2` equal slices of the interior.
fn stratified_indices<R: Rng>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let interior = len - 2;
    let strata = n - 2;
    let mut out = Vec::with_capacity(n);
    out.push(0);
    for k in 0..strata {
        let lo = 1 + k * interior / strata;
        let hi = 1 + (k + 1) * interior / strata;
        out.push(rng.random_range(lo..hi));
    }
    out.push(len - 1);
    out
}

/// Draws `sample_tracks` distinct tracks uniformly among those with at least
/// two observations and thins each to `sample_obs_per_track` observations.
/// Observations are assumed sorted by time.
pub fn sample_hypothesis<R: Rng>(
    tracks: &[TrackBearings],
    config: &RansacConfig,
    rng: &mut R,
) -> Result<Vec<TrackBearings>> {
    let eligible: Vec<&TrackBearings> = tracks.iter().filter(|t| t.bearings.len() >= 2).collect();
    if eligible.len() < config.sample_tracks {
        return Err(Error::InsufficientData {
            needed: config.sample_tracks,
            available: eligible.len(),
        });
    }
    let picks = index::sample(rng, eligible.len(), config.sample_tracks);
    Ok(picks
        .iter()
        .map(|i| {
            let tr = eligible[i];
            let idx = stratified_indices(tr.bearings.len(), config.sample_obs_per_track, rng);
            TrackBearings {
                id: tr.id,
                bearings: idx.into_iter().map(|j| tr.bearings[j]).collect(),
            }
        })
        .collect())
}

/// Inlier count and mean inlier residual of one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub inliers: usize,
    pub mean_residual_deg: f64,
}

impl Score {
    /// More inliers wins; equal counts fall back to the lower mean residual.
    /// Exact ties keep the incumbent.
    pub fn beats(&self, other: &Score) -> bool {
        self.inliers > other.inliers
            || (self.inliers == other.inliers && self.mean_residual_deg < other.mean_residual_deg)
    }
}

struct Candidate<'a> {
    track: &'a TrackBearings,
    blocks: TrackBlocks,
    ftf_inv: Matrix3<f64>,
}

impl Candidate<'_> {
    /// Full-track triangulation under the given rates, then residual.
    fn residual(&self, rates: &[Vector3<f64>], stacked: &nalgebra::DVector<f64>) -> f64 {
        let point = -(self.ftf_inv * (&self.blocks.ftg * stacked));
        track_residual(&self.track.bearings, &point, rates)
    }
}

fn score(candidates: &[Candidate<'_>], rates: &[Vector3<f64>], threshold: f64) -> (Score, Vec<bool>) {
    let stacked = nalgebra::DVector::from_iterator(3 * rates.len(), rates.iter().flat_map(|v| v.iter().copied()));
    let mut inliers = 0;
    let mut sum = 0.0;
    let mask = candidates
        .iter()
        .map(|c| {
            let r = c.residual(rates, &stacked);
            let inlier = r < threshold;
            if inlier {
                inliers += 1;
                sum += r;
            }
            inlier
        })
        .collect();
    let mean_residual_deg = if inliers > 0 { sum / inliers as f64 } else { f64::INFINITY };
    (Score { inliers, mean_residual_deg }, mask)
}

/// RNG for iteration `iteration` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// RANSAC over compensated bearings with an order-`order` motion model.
pub fn ransac(
    tracks: &[TrackBearings],
    order: usize,
    solve_cfg: &SolveConfig,
    reference_time: f64,
    config: &RansacConfig,
) -> Result<RansacResult> {
    config.validate()?;
    let eps_rank = solve_cfg.eps_rank;
    // Sampling indexes into this list, so its order must not depend on the
    // caller's track order.
    let mut candidates: Vec<Candidate<'_>> = tracks
        .iter()
        .filter_map(|track| {
            let blocks = track_blocks(&track.bearings, order).ok()?;
            if !rank_check_F(&blocks, eps_rank).passed {
                return None;
            }
            let ftf_inv = blocks.ftf_inverse()?;
            Some(Candidate { track, blocks, ftf_inv })
        })
        .collect();
    candidates.sort_by_key(|c| c.track.id);
    if candidates.len() < config.sample_tracks {
        return Err(Error::InsufficientData {
            needed: config.sample_tracks,
            available: candidates.len(),
        });
    }
    let pool: Vec<TrackBearings> = candidates.iter().map(|c| c.track.clone()).collect();

    let mut best: Option<(Score, Vec<bool>)> = None;
    let mut iterations_run = 0;
    for it in 0..config.max_iterations {
        iterations_run = it + 1;
        let mut rng = iteration_rng(config.seed, it as u64);
        let sample = sample_hypothesis(&pool, config, &mut rng)?;
        let Ok(hyp) = solve_bearings(&sample, order, solve_cfg, reference_time) else { continue };
        if hyp.is_degenerate() {
            continue;
        }
        let (s, mask) = score(&candidates, &hyp.rates, config.inlier_threshold_deg);
        if best.as_ref().is_none_or(|(b, _)| s.beats(b)) {
            best = Some((s, mask));
        }
        let (b, _) = best.as_ref().expect("just set");
        if b.inliers as f64 >= config.early_stop_inlier_ratio * candidates.len() as f64 {
            break;
        }
    }
    let Some((best_score, mask)) = best else {
        return Err(Error::NoSolution(format!("no valid hypothesis in {iterations_run} iterations")));
    };
    if best_score.inliers == 0 {
        return Err(Error::NoSolution("best hypothesis has no inliers".into()));
    }

    let inlier_tracks: Vec<TrackBearings> = pool
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t.clone())
        .collect();
    let estimate = solve_bearings(&inlier_tracks, order, solve_cfg, reference_time)?;
    let refined: Vec<f64> = inlier_tracks
        .iter()
        .filter_map(|t| estimate_residual(t, &estimate))
        .collect();
    let refined_residual_deg = if refined.is_empty() {
        f64::INFINITY
    } else {
        refined.iter().sum::<f64>() / refined.len() as f64
    };
    let mut inlier_ids: Vec<TrackId> = inlier_tracks.iter().map(|t| t.id).collect();
    inlier_ids.sort();
    Ok(RansacResult {
        estimate,
        inlier_ratio: inlier_ids.len() as f64 / candidates.len() as f64,
        inlier_ids,
        iterations_run,
        hypothesis_residual_deg: best_score.mean_residual_deg,
        refined_residual_deg,
    })
}

/// Compensates raw tracks with the angular rates `omegas` (one per order)
/// and runs [`ransac`].
pub fn ransac_tracks(
    tracks: &[Track],
    omegas: &[Vector3<f64>],
    k: &CameraIntrinsics,
    model: &TimestampModel,
    solve_cfg: &SolveConfig,
    config: &RansacConfig,
) -> Result<RansacResult> {
    let (t_s, bearings) = prepare_bearings(tracks, omegas, k, model, solve_cfg.reference_time)?;
    ransac(&bearings, omegas.len(), solve_cfg, t_s, config)
}

/// Constant-velocity convenience wrapper around [`ransac_tracks`].
pub fn ransac_velocity(
    tracks: &[Track],
    omega: &AngularRate,
    k: &CameraIntrinsics,
    model: &TimestampModel,
    solve_cfg: &SolveConfig,
    config: &RansacConfig,
) -> Result<RansacResult> {
    ransac_tracks(tracks, &[omega.0], k, model, solve_cfg, config)
}
