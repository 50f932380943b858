//! Closed-form motion and structure recovery.
//!
//! The homogeneous solvers return the motion rates up to scale, resolved in
//! sign by a depth vote over the triangulated points. Without noise the rates
//! span the null space of the reduced matrix `B`. With noise the answer
//! depends on how the homogeneous vector is normalized; see
//! [`Normalization`]. With a known acceleration the system becomes
//! inhomogeneous and the velocity is recovered in metric units.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    assign_timestamp, compensate_higher_order, reference_time, skew, AngularRate, BearingObservation, CameraIntrinsics,
    Track, TrackId, TimestampModel, INV_FACTORIAL,
};
use crate::linsys::{
    accel_rhs, accumulate_schur, rank_check_F, schur_inverse, track_blocks, SchurMatrix, TrackBlocks, TrackFactor,
    DEFAULT_EPS_RANK, MAX_ORDER,
};

/// Relative pivot below which `B` counts as singular in the metric solve.
pub const SINGULAR_PIVOT: f64 = 1e-12;

/// Entry budget of the dense reference system.
pub const DENSE_REFERENCE_LIMIT: usize = 10_000_000;

/// Constraint that fixes the scale of the homogeneous least-squares problem
/// `min |A x|` over `x = [P_1 .. P_M, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `|x| = 1`: the smallest right singular vector of the full system,
    /// found without forming it. Penalizes solutions that shrink the points
    /// toward the camera.
    #[default]
    Joint,
    /// `|v| = 1`: the smallest singular vector of `B`. Cheapest, but under
    /// noise it favors collapsing the points onto the camera and pointing
    /// `v` at the scene.
    Velocity,
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::Joint => "joint",
            Normalization::Velocity => "velocity",
        })
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Normalization::Joint),
            "velocity" => Ok(Normalization::Velocity),
            _ => Err(Error::InvalidInput(format!("unknown normalization {s:?} (joint, velocity)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    /// Relative eigenvalue threshold for `F^T F` and for the second-smallest
    /// singular value of `B`.
    pub eps_rank: f64,
    /// Reference time `t_s`. Defaults to the midpoint of the observed span.
    pub reference_time: Option<f64>,
    pub normalization: Normalization,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            eps_rank: DEFAULT_EPS_RANK,
            reference_time: None,
            normalization: Normalization::Joint,
        }
    }
}

/// Rotation-compensated bearings of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBearings {
    pub id: TrackId,
    pub bearings: Vec<BearingObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Degeneracy {
    /// `B` has more than one (near) null direction.
    RankDeficient { ratio: f64 },
    /// The depth vote could not choose a sign.
    AmbiguousSign { positive: usize, negative: usize },
}

impl std::fmt::Display for Degeneracy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Degeneracy::RankDeficient { ratio } => write!(f, "rank-deficient B (sigma ratio {ratio:e})"),
            Degeneracy::AmbiguousSign { positive, negative } => {
                write!(f, "ambiguous sign ({positive} positive, {negative} negative depths)")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackPoint {
    pub id: TrackId,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionEstimate {
    /// `v^(1) .. v^(S)`. Jointly unit-norm for homogeneous solves, m/s^s for
    /// the metric solve.
    pub rates: Vec<Vector3<f64>>,
    pub metric: bool,
    pub points: Vec<TrackPoint>,
    /// Singular values of `B`, descending.
    pub singular_values: Vec<f64>,
    pub degenerate: Option<Degeneracy>,
    pub sign_flipped: bool,
    pub reference_time: f64,
}

impl MotionEstimate {
    pub fn velocity(&self) -> Vector3<f64> {
        self.rates[0]
    }

    pub fn order(&self) -> usize {
        self.rates.len()
    }

    /// `[v^(1); ..; v^(S)]` as one vector.
    pub fn stacked_rates(&self) -> DVector<f64> {
        stack_rates(&self.rates)
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate.is_some()
    }

    /// Camera displacement `sum_s v^(s) t^s / s!` at relative time `t`.
    pub fn displacement(&self, t: f64) -> Vector3<f64> {
        displacement(&self.rates, t)
    }

    pub fn point(&self, id: TrackId) -> Option<Vector3<f64>> {
        self.points.iter().find(|p| p.id == id).map(|p| p.point)
    }
}

pub(crate) fn displacement(rates: &[Vector3<f64>], t: f64) -> Vector3<f64> {
    let mut tp = 1.0;
    let mut out = Vector3::zeros();
    for (s, v) in rates.iter().enumerate() {
        tp *= t;
        out += v * (tp * INV_FACTORIAL[s + 1]);
    }
    out
}

fn stack_rates(rates: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * rates.len(), rates.iter().flat_map(|v| v.iter().copied()))
}

fn split_rates(x: &DVector<f64>) -> Vec<Vector3<f64>> {
    x.as_slice().chunks_exact(3).map(Vector3::from_column_slice).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySolution {
    /// Unit null direction of `B`, length `3S`.
    pub v_hat: DVector<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub degenerate: bool,
}

/// Right singular vector of the smallest singular value of `B`. Flags the
/// solution when the second-smallest singular value falls below
/// `eps_rank * sigma_1`.
pub fn solve_velocity(b: &SchurMatrix, eps_rank: f64) -> Result<VelocitySolution> {
    if !b.b.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite B".into()));
    }
    let n = b.b.nrows();
    let svd = b.b.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smallest = order[n - 1];
    let v_hat = v_t.row(smallest).transpose().normalize();
    let sigma1 = singular_values[0];
    let degenerate = n < 2 || !(sigma1 > 0.0) || singular_values[n - 2] < eps_rank * sigma1;
    Ok(VelocitySolution {
        v_hat,
        singular_values,
        degenerate,
    })
}

/// `P = -(F^T F)^-1 F^T G v` for one track.
pub fn solve_points(blocks: &TrackBlocks, v_hat: &DVector<f64>) -> Result<Vector3<f64>> {
    let inv = blocks.ftf_inverse().ok_or_else(|| Error::DegenerateTrack {
        track: 0,
        reason: "singular F^T F".into(),
    })?;
    Ok(-(inv * (&blocks.ftg * v_hat)))
}

/// Picks the sign with the majority of points in front of the camera.
/// Depths within `1e-12` of the largest point norm do not vote.
pub fn disambiguate_sign(
    mut points: Vec<Vector3<f64>>,
    mut v_hat: DVector<f64>,
) -> Result<(Vec<Vector3<f64>>, DVector<f64>, bool)> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no points to vote on".into()));
    }
    let scale = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let floor = 1e-12 * scale;
    let positive = points.iter().filter(|p| p.z > floor).count();
    let negative = points.iter().filter(|p| p.z < -floor).count();
    if positive == negative {
        return Err(Error::AmbiguousSign { positive, negative });
    }
    let flipped = negative > positive;
    if flipped {
        points.iter_mut().for_each(|p| *p = -*p);
        v_hat = -v_hat;
    }
    Ok((points, v_hat, flipped))
}

/// Timestamps per `model`, reference time, and compensated bearings for all
/// tracks with at least two distinct observations. `rates[s-1]` is the
/// order-`s` angular rate.
pub fn prepare_bearings(
    tracks: &[Track],
    rates: &[Vector3<f64>],
    k: &CameraIntrinsics,
    model: &TimestampModel,
    reference: Option<f64>,
) -> Result<(f64, Vec<TrackBearings>)> {
    model.validate()?;
    let timed = tracks
        .iter()
        .map(|tr| {
            let obs = tr
                .observations
                .iter()
                .map(|o| {
                    Ok(crate::geometry::TrackObservation {
                        x: o.x,
                        t: assign_timestamp(model, o.t, &o.x, k.height)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Track::new(tr.id, obs))
        })
        .collect::<Result<Vec<_>>>()?;
    let pruned: Vec<Track> = timed.into_iter().filter(|t| t.len() >= 2).collect();
    if pruned.is_empty() {
        return Err(Error::NoSolution("no track has two or more distinct observations".into()));
    }
    let t_s = match reference {
        Some(t) => t,
        None => reference_time(&pruned).expect("non-empty"),
    };
    let bearings = pruned
        .iter()
        .map(|tr| {
            Ok(TrackBearings {
                id: tr.id,
                bearings: compensate_higher_order(tr, rates, t_s, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((t_s, bearings))
}

/// Blocks of every track that passes the rank check, with its id.
fn usable_blocks(tracks: &[TrackBearings], order: usize, eps_rank: f64) -> Result<(Vec<TrackId>, Vec<TrackBlocks>)> {
    let mut ids = Vec::with_capacity(tracks.len());
    let mut blocks = Vec::with_capacity(tracks.len());
    for tr in tracks {
        let Ok(blk) = track_blocks(&tr.bearings, order) else { continue };
        if rank_check_F(&blk, eps_rank).passed {
            ids.push(tr.id);
            blocks.push(blk);
        }
    }
    if blocks.is_empty() {
        return Err(Error::NoSolution("every track is degenerate".into()));
    }
    Ok((ids, blocks))
}

/// Smallest eigenpair of the full normal matrix `A^T A`, found on the
/// reduced system: the eigenvalue `lambda` solves
/// `lambda_min(S(lambda)) = lambda` with the shifted complement
/// `S(lambda) = B - lambda sum_i C_i^T (F_i^T F_i)^-1 (F_i^T F_i - lambda I)^-1 C_i`
/// and `C_i = F_i^T G_i`. The left side minus `lambda` is concave and
/// decreasing below the smallest `F_i^T F_i` eigenvalue, so safeguarded Newton
/// converges. Returns the unit rate direction and `lambda`.
pub fn joint_null_direction(blocks: &[TrackBlocks], schur: &SchurMatrix) -> Result<(DVector<f64>, f64)> {
    let upper = blocks
        .iter()
        .map(|b| b.ftf_eigenvalues().min())
        .fold(f64::INFINITY, f64::min);
    if !(upper > 0.0) {
        return Err(Error::NoSolution("singular F^T F in joint normalization".into()));
    }
    // g(lambda) = lambda_min(S(lambda)) - lambda, its eigenvector, and
    // -g'(lambda) = 1 + sum |P_i|^2.
    let eval = |lambda: f64| -> Option<(f64, DVector<f64>, f64)> {
        let mut s = schur.b.clone();
        if lambda != 0.0 {
            for b in blocks {
                s -= b.shift_correction(lambda)? * lambda;
            }
        }
        let eig = s.symmetric_eigen();
        let i = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(i).normalize();
        let mut slope = 1.0;
        for b in blocks {
            let p = b.shifted_inverse(lambda)? * (&b.ftg * &v);
            slope += p.norm_squared();
        }
        Some((eig.eigenvalues[i] - lambda, v, slope))
    };
    let (g0, v0, slope0) = eval(0.0).ok_or_else(|| Error::NoSolution("joint normalization failed".into()))?;
    if !(g0 > 0.0) {
        return Ok((v0, 0.0));
    }
    let (mut lo, mut hi) = (0.0, upper);
    let (mut lambda, mut g, mut v, mut slope) = (0.0, g0, v0, slope0);
    for _ in 0..100 {
        let mut next = lambda + g / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let Some((g_next, v_next, slope_next)) = eval(next) else {
            hi = next;
            continue;
        };
        if g_next >= 0.0 {
            lo = next;
        } else {
            hi = next;
        }
        let step = (next - lambda).abs();
        (lambda, g, v, slope) = (next, g_next, v_next, slope_next);
        if g == 0.0 || step <= 1e-15 * lambda.abs() || hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok((v, lambda))
}

/// Upper-triangular factor of the whole incidence system in block form: a
/// `[R11_i R12_i]` row block per track and a closing `[0 Rv]` block, with
/// diagonals floored so that triangular solves stay finite.
struct SystemFactor {
    tracks: Vec<TrackFactor>,
    rv: DMatrix<f64>,
}

fn floor_diagonal(r: &mut DMatrix<f64>) {
    let n = r.nrows().min(r.ncols());
    let max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let floor = (f64::EPSILON * max).max(f64::MIN_POSITIVE);
    for i in 0..n {
        if r[(i, i)].abs() < floor {
            r[(i, i)] = if r[(i, i)] < 0.0 { -floor } else { floor };
        }
    }
}

impl SystemFactor {
    fn new(blocks: &[TrackBlocks]) -> Self {
        let mut tracks: Vec<TrackFactor> = blocks.iter().map(TrackBlocks::factor).collect();
        let dim = 3 * blocks[0].order;
        let rows: usize = tracks.iter().map(|t| t.r22.nrows()).sum();
        let mut stacked = DMatrix::zeros(rows.max(dim), dim);
        let mut r = 0;
        for t in &tracks {
            stacked.view_mut((r, 0), (t.r22.nrows(), dim)).copy_from(&t.r22);
            r += t.r22.nrows();
        }
        let mut rv = stacked.qr().r();
        floor_diagonal(&mut rv);
        for t in &mut tracks {
            let mut r11 = DMatrix::from_column_slice(3, 3, t.r11.as_slice());
            floor_diagonal(&mut r11);
            t.r11 = Matrix3::from_column_slice(r11.as_slice());
        }
        Self { tracks, rv }
    }

    /// Unit rates minimizing `|A x|` subject to `|v| = 1`.
    fn velocity_direction(&self) -> DVector<f64> {
        let svd = self.rv.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        v_t.row(svd.singular_values.imin()).transpose().normalize()
    }

    /// `P_i = -R11_i^-1 R12_i v`.
    fn points(&self, v: &DVector<f64>) -> Vec<Vector3<f64>> {
        self.tracks
            .iter()
            .map(|t| {
                let rhs = -(&t.r12 * v);
                t.r11.solve_upper_triangular(&rhs).expect("floored diagonal")
            })
            .collect()
    }

    /// One step of `x <- (A^T A)^-1 x`, normalized, by a forward and a back
    /// substitution through the block factor.
    fn inverse_iteration(&self, points: &mut [Vector3<f64>], v: &mut DVector<f64>) {
        let z: Vec<Vector3<f64>> = self
            .tracks
            .iter()
            .zip(points.iter())
            .map(|(t, p)| t.r11.tr_solve_upper_triangular(p).expect("floored diagonal"))
            .collect();
        let mut rhs = v.clone();
        for (t, zi) in self.tracks.iter().zip(&z) {
            rhs -= t.r12.transpose() * zi;
        }
        let zv = self.rv.tr_solve_upper_triangular(&rhs).expect("floored diagonal");
        let yv = self.rv.solve_upper_triangular(&zv).expect("floored diagonal");
        for ((t, zi), p) in self.tracks.iter().zip(&z).zip(points.iter_mut()) {
            *p = t.r11.solve_upper_triangular(&(zi - &t.r12 * &yv)).expect("floored diagonal");
        }
        let norm = (points.iter().map(|p| p.norm_squared()).sum::<f64>() + yv.norm_squared()).sqrt();
        for p in points.iter_mut() {
            *p /= norm;
        }
        *v = yv / norm;
    }
}

/// Inverse-iteration steps applied to the joint solution. Starting from the
/// reduced solve, each step removes rounding error amplified by the normal
/// equations.
const POLISH_STEPS: usize = 2;

/// Homogeneous solve over already compensated bearings. Rank-deficient tracks
/// are skipped; a rank-deficient `B` or a tied depth vote yields a flagged
/// estimate rather than an error.
pub fn solve_bearings(
    tracks: &[TrackBearings],
    order: usize,
    cfg: &SolveConfig,
    reference_time: f64,
) -> Result<MotionEstimate> {
    let eps_rank = cfg.eps_rank;
    let (ids, blocks) = usable_blocks(tracks, order, eps_rank)?;
    let schur = accumulate_schur(&blocks, eps_rank)?;
    let sol = solve_velocity(&schur, eps_rank)?;
    let mut degenerate = sol.degenerate.then(|| Degeneracy::RankDeficient {
        ratio: sol.singular_values[sol.singular_values.len().saturating_sub(2)] / sol.singular_values[0],
    });
    let factor = SystemFactor::new(&blocks);
    let (v_hat, points) = match cfg.normalization {
        Normalization::Joint if degenerate.is_none() => {
            let (v, lambda) = joint_null_direction(&blocks, &schur)?;
            let mut points = blocks
                .iter()
                .zip(&ids)
                .map(|(b, id)| {
                    b.shifted_inverse(lambda)
                        .map(|inv| -(inv * (&b.ftg * &v)))
                        .ok_or_else(|| Error::DegenerateTrack {
                            track: id.0,
                            reason: "singular F^T F".into(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut v = v;
            for _ in 0..POLISH_STEPS {
                factor.inverse_iteration(&mut points, &mut v);
            }
            let scale = v.norm();
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::NoSolution("joint normalization lost the rates".into()));
            }
            (v / scale, points.into_iter().map(|p| p / scale).collect::<Vec<_>>())
        }
        _ => {
            let v = factor.velocity_direction();
            let points = factor.points(&v);
            (v, points)
        }
    };
    let (points, v_hat, sign_flipped) = match disambiguate_sign(points.clone(), v_hat.clone()) {
        Ok(r) => r,
        Err(Error::AmbiguousSign { positive, negative }) => {
            degenerate.get_or_insert(Degeneracy::AmbiguousSign { positive, negative });
            (points, v_hat, false)
        }
        Err(e) => return Err(e),
    };
    Ok(MotionEstimate {
        rates: split_rates(&v_hat),
        metric: false,
        points: ids.iter().zip(points).map(|(&id, point)| TrackPoint { id, point }).collect(),
        singular_values: sol.singular_values,
        degenerate,
        sign_flipped,
        reference_time,
    })
}

/// Constant-velocity solve: compensate, build blocks, reduce, solve for the
/// unit velocity, triangulate and fix the sign.
pub fn solve(
    tracks: &[Track],
    omega: &AngularRate,
    k: &CameraIntrinsics,
    model: &TimestampModel,
    cfg: &SolveConfig,
) -> Result<MotionEstimate> {
    let (t_s, bearings) = prepare_bearings(tracks, &[omega.0], k, model, cfg.reference_time)?;
    solve_bearings(&bearings, 1, cfg, t_s)
}

/// Expansion order and the given angular rates `omega^(1..S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderSInputs {
    pub order: usize,
    pub omegas: Vec<Vector3<f64>>,
}

impl OrderSInputs {
    pub fn new(omegas: Vec<Vector3<f64>>) -> Self {
        Self {
            order: omegas.len(),
            omegas,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(1..=MAX_ORDER).contains(&self.order) || self.omegas.len() != self.order {
            return Err(Error::InvalidInput(format!(
                "order {} with {} angular rates (order must be 1..={MAX_ORDER})",
                self.order,
                self.omegas.len()
            )));
        }
        if self.omegas.iter().any(|w| !w.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite angular rate".into()));
        }
        Ok(())
    }
}

/// Order-`S` homogeneous solve for `v^(1..S)` jointly up to scale. Refuses
/// underconstrained configurations before any numerics.
pub fn solve_order_s(
    tracks: &[Track],
    inputs: &OrderSInputs,
    k: &CameraIntrinsics,
    model: &TimestampModel,
    cfg: &SolveConfig,
) -> Result<MotionEstimate> {
    inputs.validate()?;
    let (t_s, bearings) = prepare_bearings(tracks, &inputs.omegas, k, model, cfg.reference_time)?;
    let counts: Vec<usize> = bearings.iter().map(|t| t.bearings.len()).collect();
    let class = classify_minimality(counts.len(), &counts, inputs.order);
    if class.classification == Classification::Underconstrained {
        return Err(Error::Underconstrained {
            equations: class.equations,
            unknowns: class.unknowns,
            tracks: class.tracks,
            observations: class.total_observations(),
        });
    }
    solve_bearings(&bearings, inputs.order, cfg, t_s)
}

/// Metric velocity given a known constant acceleration `accel` (m/s^2) in the
/// reference frame: `v = B^-1 d`, points by back substitution. No sign vote.
pub fn solve_with_known_accel(
    tracks: &[Track],
    omega: &AngularRate,
    accel: &Vector3<f64>,
    k: &CameraIntrinsics,
    model: &TimestampModel,
    cfg: &SolveConfig,
) -> Result<MotionEstimate> {
    if !accel.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite acceleration".into()));
    }
    if accel.norm() == 0.0 {
        return Err(Error::ScaleUnobservable);
    }
    let (t_s, bearings) = prepare_bearings(tracks, &[omega.0], k, model, cfg.reference_time)?;
    solve_bearings_known_accel(&bearings, accel, cfg.eps_rank, t_s)
}

pub fn solve_bearings_known_accel(
    tracks: &[TrackBearings],
    accel: &Vector3<f64>,
    eps_rank: f64,
    reference_time: f64,
) -> Result<MotionEstimate> {
    if accel.norm() == 0.0 {
        return Err(Error::ScaleUnobservable);
    }
    let mut ids = Vec::new();
    let mut blocks = Vec::new();
    let mut rhs = Vec::new();
    for tr in tracks {
        let Ok(blk) = track_blocks(&tr.bearings, 1) else { continue };
        if rank_check_F(&blk, eps_rank).passed {
            ids.push(tr.id);
            blocks.push(blk);
            rhs.push(accel_rhs(&tr.bearings, accel));
        }
    }
    if blocks.is_empty() {
        return Err(Error::NoSolution("every track is degenerate".into()));
    }
    let schur = accumulate_schur(&blocks, eps_rank)?;
    let mut d = DVector::zeros(3);
    let mut inverses = Vec::with_capacity(blocks.len());
    for (i, (blk, (ftb, gtb))) in blocks.iter().zip(&rhs).enumerate() {
        let inv = schur_inverse(blk, i, eps_rank)?;
        d += DVector::from_column_slice(gtb.as_slice()) - blk.ftg.transpose() * (inv * ftb);
        inverses.push(inv);
    }
    let v = ldlt_solve(&schur.b, &d, SINGULAR_PIVOT)?;
    let points = blocks
        .iter()
        .zip(&rhs)
        .zip(&inverses)
        .zip(&ids)
        .map(|(((blk, (ftb, _)), inv), &id)| TrackPoint {
            id,
            point: inv * (ftb - &blk.ftg * &v),
        })
        .collect();
    let singular_values = {
        let mut sv: Vec<f64> = schur.b.clone().singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    };
    Ok(MotionEstimate {
        rates: split_rates(&v),
        metric: true,
        points,
        singular_values,
        degenerate: None,
        sign_flipped: false,
        reference_time,
    })
}

/// Solves `A x = b` for symmetric `A` by an unpivoted `L D L^T`
/// factorization. Fails when a pivot drops below `rel_pivot` times the
/// largest diagonal magnitude.
pub fn ldlt_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_pivot: f64) -> Result<DVector<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().amax();
    if !(scale > 0.0) {
        return Err(Error::SingularSystem { pivot: 0.0 });
    }
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut d = DVector::<f64>::zeros(n);
    for j in 0..n {
        let mut dj = a[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if !(dj > rel_pivot * scale) {
            return Err(Error::SingularSystem { pivot: dj / scale });
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
    }
    for i in 0..n {
        y[i] /= d[i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Underconstrained,
    Minimal,
    Overconstrained,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classification::Underconstrained => "underconstrained",
            Classification::Minimal => "minimal",
            Classification::Overconstrained => "overconstrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MinimalityClass {
    pub tracks: usize,
    pub observations: Vec<usize>,
    pub order: usize,
    /// Independent constraints, two per observation.
    pub equations: usize,
    /// `3M + 3S - 1`: points and rates, less the unobservable scale.
    pub unknowns: usize,
    pub classification: Classification,
}

impl MinimalityClass {
    pub fn total_observations(&self) -> usize {
        self.observations.iter().sum()
    }

    /// Equations beyond the unknown count; an overconstrained configuration
    /// becomes minimal after dropping this many.
    pub fn excess_equations(&self) -> isize {
        self.equations as isize - self.unknowns as isize
    }
}

/// Counts constraints against unknowns. A configuration is minimal when every
/// track has exactly two observations and `2M` observations are also the
/// fewest that cover `3M + 3S - 1` unknowns.
pub fn classify_minimality(tracks: usize, observations: &[usize], order: usize) -> MinimalityClass {
    let n: usize = observations.iter().sum();
    let equations = 2 * n;
    let unknowns = (3 * tracks + 3 * order).saturating_sub(1);
    let needed = unknowns.div_ceil(2);
    let classification = if tracks == 0
        || observations.len() != tracks
        || observations.iter().any(|&ni| ni < 2)
        || equations < unknowns
        || n < 2 * tracks
    {
        Classification::Underconstrained
    } else if needed == 2 * tracks && observations.iter().all(|&ni| ni == 2) {
        Classification::Minimal
    } else {
        Classification::Overconstrained
    };
    MinimalityClass {
        tracks,
        observations: observations.to_vec(),
        order,
        equations,
        unknowns,
        classification,
    }
}

/// The stacked incidence matrix `A` (3N x (3M + 3S)), point columns first.
pub fn incidence_matrix(tracks: &[TrackBearings], order: usize) -> DMatrix<f64> {
    let m = tracks.len();
    let rows: usize = tracks.iter().map(|t| 3 * t.bearings.len()).sum();
    let cols = 3 * m + 3 * order;
    let mut a = DMatrix::zeros(rows, cols);
    let mut row = 0;
    for (i, tr) in tracks.iter().enumerate() {
        for b in &tr.bearings {
            let k = skew(&b.f_prime);
            a.fixed_view_mut::<3, 3>(row, 3 * i).copy_from(&k);
            let mut tp = 1.0;
            for s in 0..order {
                tp *= b.t_prime;
                let w = tp * INV_FACTORIAL[s + 1];
                a.fixed_view_mut::<3, 3>(row, 3 * m + 3 * s).copy_from(&(k * -w));
            }
            row += 3;
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    /// Unit null vector `[P_1 .. P_M, v^(1) .. v^(S)]`.
    pub x: DVector<f64>,
    /// Singular values of `A`, descending, padded with zeros to the column count.
    pub singular_values: Vec<f64>,
    pub tracks: usize,
    pub order: usize,
}

impl ReferenceSolution {
    pub fn rates(&self) -> DVector<f64> {
        self.x.rows(3 * self.tracks, 3 * self.order).into_owned()
    }

    /// Singular values at or below `rel_tol * sigma_1`.
    pub fn nullity(&self, rel_tol: f64) -> usize {
        let s1 = self.singular_values[0];
        self.singular_values.iter().filter(|&&s| s <= rel_tol * s1).count()
    }
}

/// Dense SVD of the full incidence system, for cross-checking the reduced
/// solver on small instances.
pub fn full_svd_reference(tracks: &[TrackBearings], order: usize) -> Result<ReferenceSolution> {
    let rows: usize = tracks.iter().map(|t| 3 * t.bearings.len()).sum();
    let cols = 3 * tracks.len() + 3 * order;
    let entries = rows.max(cols) * cols;
    if entries > DENSE_REFERENCE_LIMIT {
        return Err(Error::OracleTooLarge { entries });
    }
    let mut a = incidence_matrix(tracks, order);
    if rows < cols {
        // Pad so the thin SVD spans the whole null space.
        a = a.resize_vertically(cols, 0.0);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut idx: Vec<usize> = (0..cols).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    Ok(ReferenceSolution {
        x: v_t.row(idx[cols - 1]).transpose(),
        singular_values: idx.iter().map(|&i| svd.singular_values[i]).collect(),
        tracks: tracks.len(),
        order,
    })
}

/// [`full_svd_reference`] starting from raw tracks.
pub fn full_svd_reference_tracks(
    tracks: &[Track],
    omegas: &[Vector3<f64>],
    k: &CameraIntrinsics,
    model: &TimestampModel,
    cfg: &SolveConfig,
) -> Result<ReferenceSolution> {
    let (_, bearings) = prepare_bearings(tracks, omegas, k, model, cfg.reference_time)?;
    full_svd_reference(&bearings, omegas.len())
}

/// Angle in radians between two directions, ignoring sign.
pub fn unsigned_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    // acos loses precision near 1; measure the chord instead.
    let an = a.normalize();
    let bn = b.normalize() * if a.dot(b) < 0.0 { -1.0 } else { 1.0 };
    let chord = (an - bn).norm();
    if c > 0.9 {
        2.0 * (0.5 * chord).asin()
    } else {
        c.acos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TrackObservation;

    fn bo(p: &Vector3<f64>, rates: &[Vector3<f64>], t: f64) -> BearingObservation {
        BearingObservation {
            f_prime: (p - displacement(rates, t)).normalize(),
            t_prime: t,
        }
    }

    fn scene(points: &[Vector3<f64>], rates: &[Vector3<f64>], times: &[&[f64]]) -> Vec<TrackBearings> {
        points
            .iter()
            .zip(times)
            .enumerate()
            .map(|(i, (p, ts))| TrackBearings {
                id: TrackId(i as u64),
                bearings: ts.iter().map(|&t| bo(p, rates, t)).collect(),
            })
            .collect()
    }

    /// Perturbs every bearing by a deterministic pseudo-random rotation of
    /// roughly `mag` radians.
    fn perturb(tracks: &mut [TrackBearings], mag: f64) {
        let mut k = 0.0f64;
        for t in tracks.iter_mut() {
            for b in &mut t.bearings {
                k += 1.0;
                let axis = Vector3::new((k * 1.3).sin(), (k * 2.1).cos(), (k * 0.7).sin());
                b.f_prime = (crate::geometry::so3_exp(&(axis * mag)) * b.f_prime).normalize();
            }
        }
    }

    fn noisy_scene(order: usize) -> Vec<TrackBearings> {
        let rates: Vec<Vector3<f64>> = [Vector3::new(0.3, -0.2, 0.9), Vector3::new(0.5, 0.4, -0.1)][..order].to_vec();
        let points: Vec<Vector3<f64>> = (0..12)
            .map(|i| {
                let a = i as f64;
                Vector3::new(0.4 * (a * 0.9).sin(), 0.3 * (a * 1.7).cos(), 2.0 + 0.4 * (a * 0.5).sin())
            })
            .collect();
        let times: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..8).map(|j| -0.1 + 0.2 * ((j * 7 + i * 3) % 17) as f64 / 16.0).collect())
            .map(|mut v: Vec<f64>| {
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        let refs: Vec<&[f64]> = times.iter().map(|v| v.as_slice()).collect();
        let mut tracks = scene(&points, &rates, &refs);
        perturb(&mut tracks, 3e-3);
        tracks
    }

    #[test]
    fn joint_normalization_matches_dense_svd_under_noise() {
        for order in 1..=2 {
            let tracks = noisy_scene(order);
            let est = solve_bearings(&tracks, order, &SolveConfig::default(), 0.0).unwrap();
            let dense = full_svd_reference(&tracks, order).unwrap();
            let angle = unsigned_angle(&est.stacked_rates(), &dense.rates());
            assert!(angle < 1e-8, "order {order}: {angle}");
            // The unit-velocity variant differs once noise is present.
            let cfg = SolveConfig { normalization: Normalization::Velocity, ..Default::default() };
            let alt = solve_bearings(&tracks, order, &cfg, 0.0).unwrap();
            assert!(unsigned_angle(&alt.stacked_rates(), &dense.rates()) > 1e-6);
        }
    }

    #[test]
    fn normalizations_agree_without_noise() {
        let v = Vector3::new(0.2, 0.5, -0.8).normalize();
        let pts = [Vector3::new(0.1, 0.2, 2.0), Vector3::new(-0.3, 0.1, 1.8), Vector3::new(0.2, -0.4, 2.4)];
        let tracks = scene(&pts, &[v], &[&[-0.1, 0.0, 0.08], &[-0.05, 0.02, 0.1], &[-0.09, 0.03]]);
        let a = solve_bearings(&tracks, 1, &SolveConfig::default(), 0.0).unwrap();
        let cfg = SolveConfig { normalization: Normalization::Velocity, ..Default::default() };
        let b = solve_bearings(&tracks, 1, &cfg, 0.0).unwrap();
        assert!(a.velocity().angle(&v) < 1e-9);
        assert!(b.velocity().angle(&v) < 1e-9);
        assert_eq!("velocity".parse::<Normalization>().unwrap(), Normalization::Velocity);
    }

    fn schur(b: DMatrix<f64>) -> SchurMatrix {
        SchurMatrix { b, tracks: 1 }
    }

    #[test]
    fn velocity_from_diagonal_b() {
        let sol = solve_velocity(&schur(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]))), 1e-9).unwrap();
        assert!((sol.v_hat[2].abs() - 1.0).abs() < 1e-15);
        assert!(!sol.degenerate);
        assert_eq!(sol.singular_values, vec![1.0, 1.0, 0.0]);

        let sol = solve_velocity(&schur(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0]))), 1e-9).unwrap();
        assert!(sol.degenerate);
    }

    #[test]
    fn non_finite_b_rejected() {
        let mut b = DMatrix::identity(3, 3);
        b[(0, 1)] = f64::NAN;
        assert!(matches!(solve_velocity(&schur(b), 1e-9), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn two_view_point_triangulates() {
        let p = Vector3::new(0.0, 0.0, 2.0);
        let v = Vector3::new(1.0, 0.0, 0.0);
        let tr = scene(&[p], &[v], &[&[0.0, 0.1]]);
        let blk = track_blocks(&tr[0].bearings, 1).unwrap();
        let got = solve_points(&blk, &DVector::from_column_slice(v.as_slice())).unwrap();
        assert!((got - p).norm() < 1e-12);
        let zero = solve_points(&blk, &DVector::zeros(3)).unwrap();
        assert_eq!(zero, Vector3::zeros());
    }

    #[test]
    fn sign_vote() {
        let v = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let pos = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, 0.0, 2.0)];
        let (p, w, flipped) = disambiguate_sign(pos.clone(), v.clone()).unwrap();
        assert_eq!((p, w.clone(), flipped), (pos.clone(), v.clone(), false));

        let neg: Vec<_> = pos.iter().map(|p| -p).collect();
        let (p, w, flipped) = disambiguate_sign(neg, v.clone()).unwrap();
        assert!(flipped);
        assert_eq!(p, pos);
        assert_eq!(w, -v.clone());

        let mixed = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 0.0, -1.0),
        ];
        let (_, _, flipped) = disambiguate_sign(mixed, v.clone()).unwrap();
        assert!(!flipped);

        let tie = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)];
        assert!(matches!(disambiguate_sign(tie, v.clone()), Err(Error::AmbiguousSign { .. })));
        let flat = vec![Vector3::new(1.0, 0.0, 0.0)];
        assert!(matches!(disambiguate_sign(flat, v), Err(Error::AmbiguousSign { .. })));
    }

    #[test]
    fn minimal_two_tracks_recover_exactly() {
        let v = Vector3::new(0.3, -0.2, 0.9).normalize();
        let pts = [Vector3::new(0.3, 0.1, 2.0), Vector3::new(-0.4, 0.2, 1.7)];
        let tr = scene(&pts, &[v], &[&[-0.1, 0.08], &[-0.05, 0.1]]);
        let est = solve_bearings(&tr, 1, &SolveConfig::default(), 0.0).unwrap();
        assert!(!est.is_degenerate());
        assert!((est.velocity() - v).norm() < 1e-9);
        let scale = est.points[0].point.norm() / pts[0].norm();
        for (tp, p) in est.points.iter().zip(&pts) {
            assert!((tp.point - p * scale).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn single_track_three_observations() {
        let v = Vector3::new(-0.5, 0.4, 0.3).normalize();
        let p = Vector3::new(0.2, -0.3, 2.2);
        let tr = scene(&[p], &[v], &[&[-0.1, 0.02, 0.1]]);
        let est = solve_bearings(&tr, 1, &SolveConfig::default(), 0.0).unwrap();
        assert!(!est.is_degenerate());
        assert!((est.velocity() - v).norm() < 1e-9);
    }

    #[test]
    fn single_track_two_observations_is_flagged() {
        let tr = scene(&[Vector3::new(0.1, 0.1, 2.0)], &[Vector3::x()], &[&[-0.1, 0.1]]);
        let est = solve_bearings(&tr, 1, &SolveConfig::default(), 0.0).unwrap();
        assert!(matches!(est.degenerate, Some(Degeneracy::RankDeficient { .. })));
        let r = full_svd_reference(&tr, 1).unwrap();
        assert_eq!(r.nullity(1e-10), 2);
    }

    #[test]
    fn reference_null_space_is_exact() {
        let v = Vector3::new(0.1, 0.2, 0.97).normalize();
        let pts = [Vector3::new(0.3, 0.1, 2.0), Vector3::new(-0.4, 0.2, 1.7), Vector3::new(0.0, -0.3, 2.4)];
        let tr = scene(&pts, &[v], &[&[-0.1, 0.0, 0.1], &[-0.05, 0.1], &[-0.1, -0.02, 0.04, 0.09]]);
        let r = full_svd_reference(&tr, 1).unwrap();
        assert!(r.singular_values.last().unwrap() < &(1e-10 * r.singular_values[0]));
        let est = solve_bearings(&tr, 1, &SolveConfig::default(), 0.0).unwrap();
        assert!(unsigned_angle(&r.rates(), &est.stacked_rates()) < 1e-8);
    }

    #[test]
    fn oracle_too_large() {
        let tr: Vec<_> = (0..400)
            .map(|i| TrackBearings {
                id: TrackId(i),
                bearings: vec![
                    BearingObservation {
                        f_prime: Vector3::z(),
                        t_prime: 0.0
                    };
                    10
                ],
            })
            .collect();
        assert!(matches!(full_svd_reference(&tr, 1), Err(Error::OracleTooLarge { .. })));
    }

    #[test]
    fn second_order_minimal_six_tracks() {
        let v = Vector3::new(0.2, 0.1, 0.9);
        let a = Vector3::new(-0.8, 0.5, 0.3);
        let pts: Vec<_> = (0..6)
            .map(|i| {
                let f = i as f64;
                Vector3::new(0.4 * (f * 1.3).sin(), 0.3 * (f * 0.7).cos(), 1.8 + 0.1 * f)
            })
            .collect();
        let times: Vec<[f64; 2]> = (0..6).map(|i| [-0.5 + 0.07 * i as f64, 0.45 - 0.05 * i as f64]).collect();
        let tref: Vec<&[f64]> = times.iter().map(|t| &t[..]).collect();
        let tr = scene(&pts, &[v, a], &tref);
        let counts = vec![2; 6];
        assert_eq!(classify_minimality(6, &counts, 2).classification, Classification::Minimal);
        let est = solve_bearings(&tr, 2, &SolveConfig::default(), 0.0).unwrap();
        let truth = stack_rates(&[v, a]);
        let ang = unsigned_angle(&est.stacked_rates(), &truth);
        assert!(ang < 1e-8, "{ang} {:?}", est.singular_values);
    }

    #[test]
    fn minimality_table() {
        use Classification::*;
        let c = |m: usize, n: &[usize], s: usize| classify_minimality(m, n, s).classification;
        assert_eq!(c(1, &[2], 1), Underconstrained);
        assert_eq!(c(1, &[3], 1), Overconstrained);
        assert_eq!(classify_minimality(1, &[3], 1).excess_equations(), 1);
        assert_eq!(c(2, &[2, 2], 1), Minimal);
        assert_eq!(c(2, &[2, 3], 1), Overconstrained);
        assert_eq!(c(3, &[2, 2, 2], 1), Minimal);
        assert_eq!(c(4, &[2, 2, 2, 2], 1), Overconstrained);
        assert_eq!(c(3, &[1, 2, 3], 1), Underconstrained);
        assert_eq!(c(5, &[2; 5], 2), Minimal);
        assert_eq!(classify_minimality(5, &[2; 5], 2).equations, 20);
        assert_eq!(c(6, &[2; 6], 2), Minimal);
        assert_eq!(c(8, &[2; 8], 3), Minimal);
        assert_eq!(c(9, &[2; 9], 3), Minimal);
        assert_eq!(c(4, &[2; 4], 2), Underconstrained);
    }

    #[test]
    fn ldlt_matches_direct_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = ldlt_solve(&a, &b, 1e-12).unwrap();
        assert!((&a * &x - &b).amax() < 1e-14);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            ldlt_solve(&singular, &DVector::from_vec(vec![1.0, 1.0]), 1e-12),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn known_accel_rejects_zero() {
        let k = CameraIntrinsics::centered(320.0, 640, 480);
        let tr = vec![Track::new(
            TrackId(0),
            vec![TrackObservation::new(1.0, 1.0, 0.0), TrackObservation::new(2.0, 2.0, 0.1)],
        )];
        let r = solve_with_known_accel(
            &tr,
            &AngularRate::zero(),
            &Vector3::zeros(),
            &k,
            &TimestampModel::Asynchronous,
            &SolveConfig::default(),
        );
        assert_eq!(r, Err(Error::ScaleUnobservable));
    }

    #[test]
    fn known_accel_exact_and_metric() {
        let v = Vector3::new(0.6, -0.3, 0.74);
        let a = Vector3::new(0.0, 0.0, 1.0);
        let pts: Vec<_> = (0..8)
            .map(|i| {
                let f = i as f64;
                Vector3::new(0.5 * (f * 1.9).sin(), 0.4 * (f * 0.8).cos(), 1.6 + 0.12 * f)
            })
            .collect();
        let ts: Vec<Vec<f64>> = (0..8).map(|i| (0..5).map(|j| -0.1 + 0.05 * j as f64 + 0.003 * i as f64).collect()).collect();
        let tref: Vec<&[f64]> = ts.iter().map(|t| &t[..]).collect();
        let rates_gt = [v, a];
        let tr = scene(&pts, &rates_gt, &tref);
        let est = solve_bearings_known_accel(&tr, &a, DEFAULT_EPS_RANK, 0.0).unwrap();
        assert!(est.metric);
        assert!((est.velocity() - v).norm() < 1e-7, "{:?}", est.velocity());
        for (tp, p) in est.points.iter().zip(&pts) {
            assert!((tp.point - p).norm() < 1e-6);
        }
    }

    #[test]
    fn unsigned_angle_ignores_sign() {
        let a = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![-1.0, 1e-9, 0.0]);
        assert!((unsigned_angle(&a, &b) - 1e-9).abs() < 1e-20);
        let c = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert!((unsigned_angle(&a, &c) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }
}
