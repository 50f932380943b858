//! Pinhole camera, bearings, rotation compensation and timestamp assignment.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle `so3_exp` switches to its series expansion.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!("bad focal lengths in {self:?}")));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput(format!("principal point outside sensor in {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, x: &Vector2<f64>) -> bool {
        x.x >= 0.0 && x.y >= 0.0 && x.x < self.width as f64 && x.y < self.height as f64
    }

    /// Perspective projection of a camera-frame point. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrackId(pub u64);

impl std::fmt::Display for TrackId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackObservation {
    pub x: Vector2<f64>,
    pub t: f64,
}

impl TrackObservation {
    pub fn new(u: f64, v: f64, t: f64) -> Self {
        Self {
            x: Vector2::new(u, v),
            t,
        }
    }
}

/// Observations of a single 3D point, ordered by time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Track {
    pub id: TrackId,
    pub observations: Vec<TrackObservation>,
}

impl Track {
    /// Sorts observations by time and drops repeated timestamps (the first
    /// observation at a given time wins).
    pub fn new(id: TrackId, mut observations: Vec<TrackObservation>) -> Self {
        observations.sort_by(|a, b| a.t.total_cmp(&b.t));
        observations.dedup_by(|b, a| a.t == b.t);
        Self { id, observations }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn time_span(&self) -> Option<(f64, f64)> {
        Some((self.observations.first()?.t, self.observations.last()?.t))
    }

    /// Pixel distance between first and last observation.
    pub fn endpoint_displacement(&self) -> f64 {
        match (self.observations.first(), self.observations.last()) {
            (Some(a), Some(b)) => (b.x - a.x).norm(),
            _ => 0.0,
        }
    }
}

/// A rotation-compensated unit bearing and its time relative to the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingObservation {
    pub f_prime: Vector3<f64>,
    pub t_prime: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AngularRate(pub Vector3<f64>);

impl AngularRate {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }
}

/// Which way the row delay of a rolling shutter is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReadoutSign {
    /// Later rows are captured later: `t = frame + y / (H - 1) * T_rs`.
    #[default]
    Positive,
    /// Later rows are captured earlier: `t = frame - y / (H - 1) * T_rs`.
    Negative,
}

impl ReadoutSign {
    fn factor(self) -> f64 {
        match self {
            ReadoutSign::Positive => 1.0,
            ReadoutSign::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum TimestampModel {
    GlobalShutter { exposure_offset: f64 },
    RollingShutter { t_rs: f64, sign: ReadoutSign },
    #[default]
    Asynchronous,
}

impl TimestampModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TimestampModel::GlobalShutter { exposure_offset } if !exposure_offset.is_finite() => {
                Err(Error::InvalidInput("exposure offset must be finite".into()))
            }
            TimestampModel::RollingShutter { t_rs, .. } if !(t_rs > 0.0 && t_rs.is_finite()) => {
                Err(Error::InvalidInput(format!("rolling shutter scan time must be > 0, got {t_rs}")))
            }
            _ => Ok(()),
        }
    }
}

/// Capture time of a pixel under `model`. For asynchronous sensors
/// `frame_time` is already the observation's own timestamp.
pub fn assign_timestamp(model: &TimestampModel, frame_time: f64, x: &Vector2<f64>, height: u32) -> Result<f64> {
    if !frame_time.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite timestamp {frame_time}")));
    }
    match *model {
        TimestampModel::GlobalShutter { exposure_offset } => Ok(frame_time + exposure_offset),
        TimestampModel::Asynchronous => Ok(frame_time),
        TimestampModel::RollingShutter { t_rs, sign } => {
            model.validate()?;
            let y = x.y;
            if height < 2 || !(y >= 0.0 && y < height as f64) {
                return Err(Error::InvalidInput(format!("row {y} outside sensor of height {height}")));
            }
            Ok(frame_time + sign.factor() * (y / (height - 1) as f64) * t_rs)
        }
    }
}

/// Unit bearing `normalize(K^-1 [x, 1])`.
pub fn pixel_to_bearing(x: &Vector2<f64>, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(x.x.is_finite() && x.y.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite pixel {x:?}")));
    }
    Ok(Vector3::new((x.x - k.cx) / k.fx, (x.y - k.cy) / k.fy, 1.0).normalize())
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation matrix `exp([w]x)`.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let k2 = k * k;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    Matrix3::identity() + k * a + k2 * b
}

pub(crate) const INV_FACTORIAL: [f64; 10] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
];

/// Rotation vector `sum_s rates[s-1] * t^s / s!`.
pub fn rotation_vector(rates: &[Vector3<f64>], t: f64) -> Vector3<f64> {
    let mut tp = 1.0;
    let mut out = Vector3::zeros();
    for (s, rate) in rates.iter().enumerate() {
        tp *= t;
        out += rate * (tp * INV_FACTORIAL[s + 1]);
    }
    out
}

/// Rotation-compensated bearings of a track relative to `t_s`.
pub fn compensate(track: &Track, omega: &AngularRate, t_s: f64, k: &CameraIntrinsics) -> Result<Vec<BearingObservation>> {
    compensate_higher_order(track, &[omega.0], t_s, k)
}

/// As [`compensate`] with an angular Taylor expansion; `rates[s-1]` is the
/// order-`s` angular rate.
pub fn compensate_higher_order(
    track: &Track,
    rates: &[Vector3<f64>],
    t_s: f64,
    k: &CameraIntrinsics,
) -> Result<Vec<BearingObservation>> {
    if track.len() < 2 {
        return Err(Error::DegenerateTrack {
            track: track.id.0,
            reason: format!("{} observation(s), need at least 2", track.len()),
        });
    }
    if rates.iter().any(|r| !r.iter().all(|v| v.is_finite())) || !t_s.is_finite() {
        return Err(Error::InvalidInput("non-finite angular rate or reference time".into()));
    }
    track
        .observations
        .iter()
        .map(|obs| {
            if !obs.t.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite timestamp in track {}", track.id)));
            }
            let f = pixel_to_bearing(&obs.x, k)?;
            let t_prime = obs.t - t_s;
            let r = so3_exp(&rotation_vector(rates, t_prime));
            Ok(BearingObservation {
                f_prime: (r * f).normalize(),
                t_prime,
            })
        })
        .collect()
}

/// Midpoint of the earliest and latest observation over all tracks.
pub fn reference_time(tracks: &[Track]) -> Option<f64> {
    let (lo, hi) = tracks
        .iter()
        .filter_map(Track::time_span)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
    (lo <= hi).then_some(0.5 * (lo + hi))
}

/// Mean of vector samples, accumulated as offsets from the first sample so a
/// run of identical readings averages to exactly that reading.
pub fn mean_vector(samples: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    let first = *samples.first()?;
    let offset = samples.iter().fold(Vector3::zeros(), |acc, s| acc + (s - first));
    Some(first + offset / samples.len() as f64)
}
