//! Scene construction and a dense reference solver written directly against
//! nalgebra, so integration tests do not lean on the library's own
//! compensation or assembly code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Rotation3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use trackvel::geometry::{CameraIntrinsics, Track, TrackId, TrackObservation};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
pub const FOCAL: f64 = 320.0;

pub fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(FOCAL, FOCAL, 0.5 * (WIDTH - 1) as f64, 0.5 * (HEIGHT - 1) as f64, WIDTH, HEIGHT).unwrap()
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Observations per track.
    pub counts: Vec<usize>,
    pub window: f64,
    pub speed: f64,
    pub accel: f64,
    pub omega_deg_s: f64,
    /// Shared observation times for every track; random per observation when `None`.
    pub sync_times: Option<Vec<f64>>,
}

impl SceneSpec {
    pub fn new(counts: Vec<usize>) -> Self {
        Self {
            counts,
            window: 0.2,
            speed: 1.0,
            accel: 0.0,
            omega_deg_s: 20.0,
            sync_times: None,
        }
    }
}

/// Noiseless scene. Motion is expressed relative to the midpoint of the
/// observation times, which is also the reference the solver picks.
#[derive(Debug, Clone)]
pub struct Scene {
    pub tracks: Vec<Track>,
    pub omega: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub points: Vec<Vector3<f64>>,
    pub t_s: f64,
}

impl Scene {
    /// Camera-to-reference rotation at time `t`.
    pub fn rotation(&self, t: f64) -> Rotation3<f64> {
        Rotation3::new(self.omega * (t - self.t_s))
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let tau = t - self.t_s;
        self.velocity * tau + self.accel * (0.5 * tau * tau)
    }

    pub fn project(&self, p: &Vector3<f64>, t: f64) -> Option<Vector2<f64>> {
        let x = self.rotation(t).inverse() * (p - self.position(t));
        (x.z > 0.1).then(|| Vector2::new(FOCAL * x.x / x.z + 0.5 * (WIDTH - 1) as f64, FOCAL * x.y / x.z + 0.5 * (HEIGHT - 1) as f64))
    }
}

fn draw_times<R: Rng>(rng: &mut R, n: usize, window: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..window)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn scene<R: Rng>(rng: &mut R, spec: &SceneSpec) -> Scene {
    'retry: loop {
        let times: Vec<Vec<f64>> = spec
            .counts
            .iter()
            .map(|&n| match &spec.sync_times {
                Some(ts) => ts.clone(),
                None => draw_times(rng, n, spec.window),
            })
            .collect();
        if times.iter().zip(&spec.counts).any(|(t, &n)| t.len() != n && spec.sync_times.is_none()) {
            continue;
        }
        let lo = times.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = times.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sc = Scene {
            tracks: Vec::new(),
            omega: random_unit(rng) * spec.omega_deg_s.to_radians(),
            velocity: random_unit(rng) * spec.speed,
            accel: random_unit(rng) * spec.accel,
            points: Vec::new(),
            t_s: 0.5 * (lo + hi),
        };
        for (i, ts) in times.iter().enumerate() {
            let mut placed = false;
            for _ in 0..200 {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(1.5..3.5));
                let obs: Option<Vec<TrackObservation>> = ts
                    .iter()
                    .map(|&t| {
                        let x = sc.project(&p, t)?;
                        let inside = (0.0..WIDTH as f64).contains(&x.x) && (0.0..HEIGHT as f64).contains(&x.y);
                        inside.then(|| TrackObservation::new(x.x, x.y, t))
                    })
                    .collect();
                if let Some(obs) = obs {
                    sc.tracks.push(Track::new(TrackId(i as u64), obs));
                    sc.points.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'retry;
            }
        }
        return sc;
    }
}

/// Adds isotropic Gaussian pixel noise.
pub fn perturb<R: Rng>(rng: &mut R, tracks: &[Track], sigma: f64) -> Vec<Track> {
    tracks
        .iter()
        .map(|tr| {
            let obs = tr
                .observations
                .iter()
                .map(|o| {
                    let dx: f64 = StandardNormal.sample(rng);
                    let dy: f64 = StandardNormal.sample(rng);
                    TrackObservation::new(o.x.x + sigma * dx, o.x.y + sigma * dy, o.t)
                })
                .collect();
            Track::new(tr.id, obs)
        })
        .collect()
}

fn skew(v: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation-compensated unit bearing of a pixel observed at `t`, for a
/// constant rate `omega` and reference `t_s`.
pub fn compensated_bearing(u: f64, v: f64, t: f64, omega: &Vector3<f64>, t_s: f64) -> Vector3<f64> {
    let f = Vector3::new((u - 0.5 * (WIDTH - 1) as f64) / FOCAL, (v - 0.5 * (HEIGHT - 1) as f64) / FOCAL, 1.0).normalize();
    Rotation3::new(omega * (t - t_s)) * f
}

pub struct DenseSolution {
    /// Unit null vector, points first, then `v^(1) .. v^(S)`.
    pub x: DVector<f64>,
    /// Singular values, descending, zero padded to the unknown count.
    pub singular_values: Vec<f64>,
    pub tracks: usize,
}

impl DenseSolution {
    pub fn rates(&self, order: usize) -> DVector<f64> {
        self.x.rows(3 * self.tracks, 3 * order).into_owned()
    }

    pub fn nullity(&self, rel_tol: f64) -> usize {
        let s1 = self.singular_values[0];
        self.singular_values.iter().filter(|&&s| s <= rel_tol * s1).count()
    }
}

/// Stacks `[f']x (P_i - sum_s v^(s) tau^s / s!) = 0` for every observation
/// and takes the smallest right singular vector.
pub fn dense_solve(tracks: &[Track], omega: &Vector3<f64>, t_s: f64, order: usize) -> DenseSolution {
    let m = tracks.len();
    let cols = 3 * m + 3 * order;
    let rows: usize = tracks.iter().map(|t| 3 * t.observations.len()).sum::<usize>().max(cols);
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut r = 0;
    for (i, tr) in tracks.iter().enumerate() {
        for o in &tr.observations {
            let k = skew(&compensated_bearing(o.x.x, o.x.y, o.t, omega, t_s));
            let tau = o.t - t_s;
            a.view_mut((r, 3 * i), (3, 3)).copy_from(&k);
            let mut w = 1.0;
            for s in 1..=order {
                w *= tau / s as f64;
                a.view_mut((r, 3 * m + 3 * (s - 1)), (3, 3)).copy_from(&(k * -w));
            }
            r += 3;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut idx: Vec<usize> = (0..cols).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    DenseSolution {
        x: v_t.row(idx[cols - 1]).transpose(),
        singular_values: idx.iter().map(|&i| svd.singular_values[i]).collect(),
        tracks: m,
    }
}

/// Angle between two directions in radians, ignoring sign.
pub fn unsigned_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (a, b) = (a.normalize(), b.normalize());
    let b = if a.dot(&b) < 0.0 { -b } else { b };
    2.0 * (0.5 * (&a - &b).norm()).asin()
}

/// Angle between two 3-vectors in degrees.
pub fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

pub fn stack(rates: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * rates.len(), rates.iter().flat_map(|v| v.iter().copied()))
}
