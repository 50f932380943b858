//! Per-track normal-equation blocks and their Schur-complement reduction.
//!
//! For a track with rotation-compensated bearings `f'_j` at relative times
//! `t'_j`, each observation contributes the incidence rows
//! `[f'_j]x P - sum_s (t'_j^s / s!) [f'_j]x v^(s) = 0`. Every normal-equation
//! product is a weighted sum of `[f'_j]x^2`, so the stacked system is never
//! formed: blocks are accumulated in 3x3 form and the point unknowns are
//! eliminated per track.

use nalgebra::{DMatrix, Dyn, Matrix3, OMatrix, SymmetricEigen, Vector3, U3};

use crate::error::{Error, Result};
use crate::geometry::{skew, BearingObservation, INV_FACTORIAL};

/// Highest supported Taylor order of the translational motion model.
pub const MAX_ORDER: usize = 4;

/// Default relative eigenvalue threshold for the `F^T F` rank check.
pub const DEFAULT_EPS_RANK: f64 = 1e-9;

/// `f f^T - |f|^2 I`, which equals `[f]x [f]x`.
pub fn skew_squared(f: &Vector3<f64>) -> Matrix3<f64> {
    f * f.transpose() - Matrix3::identity() * f.norm_squared()
}

/// Normal-equation blocks of one track for an order-`S` motion model.
#[derive(Debug, Clone)]
pub struct TrackBlocks {
    /// `F^T F` (3x3).
    pub ftf: Matrix3<f64>,
    /// `F^T [G^(1) .. G^(S)]` (3 x 3S).
    pub ftg: OMatrix<f64, U3, Dyn>,
    /// `G^T G` (3S x 3S).
    pub gtg: DMatrix<f64>,
    pub n_obs: usize,
    pub order: usize,
    eigen: SymmetricEigen<f64, U3>,
    samples: Vec<BearingObservation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCheck {
    pub passed: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl TrackBlocks {
    pub(crate) fn accumulate(bearings: &[BearingObservation], order: usize) -> Self {
        let dim = 3 * order;
        let mut ftf = Matrix3::zeros();
        let mut ftg = OMatrix::<f64, U3, Dyn>::zeros(dim);
        let mut gtg = DMatrix::zeros(dim, dim);
        let mut w = [0.0; MAX_ORDER];
        for b in bearings {
            let q = skew_squared(&b.f_prime);
            let mut tp = 1.0;
            for (s, ws) in w.iter_mut().enumerate().take(order) {
                tp *= b.t_prime;
                *ws = tp * INV_FACTORIAL[s + 1];
            }
            ftf -= q;
            for s in 0..order {
                let mut blk = ftg.fixed_view_mut::<3, 3>(0, 3 * s);
                blk += q * w[s];
                for r in 0..order {
                    let mut g = gtg.fixed_view_mut::<3, 3>(3 * s, 3 * r);
                    g -= q * (w[s] * w[r]);
                }
            }
        }
        let eigen = SymmetricEigen::new(ftf);
        Self {
            ftf,
            ftg,
            gtg,
            n_obs: bearings.len(),
            order,
            eigen,
            samples: bearings.to_vec(),
        }
    }

    /// `F^T G^(s)` for `s` in `1..=order`.
    pub fn ftg_block(&self, s: usize) -> Matrix3<f64> {
        self.ftg.fixed_view::<3, 3>(0, 3 * (s - 1)).into_owned()
    }

    /// `G^(s)T G^(r)` for `s, r` in `1..=order`.
    pub fn gtg_block(&self, s: usize, r: usize) -> Matrix3<f64> {
        self.gtg.fixed_view::<3, 3>(3 * (s - 1), 3 * (r - 1)).into_owned()
    }

    pub fn ftf_eigenvalues(&self) -> Vector3<f64> {
        self.eigen.eigenvalues
    }

    /// `(F^T F)^-1` from the cached eigendecomposition, or `None` when an
    /// eigenvalue is not strictly positive.
    pub fn ftf_inverse(&self) -> Option<Matrix3<f64>> {
        let ev = self.eigen.eigenvalues;
        if ev.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        let q = &self.eigen.eigenvectors;
        Some(q * Matrix3::from_diagonal(&ev.map(|l| 1.0 / l)) * q.transpose())
    }

    /// `(F^T F - lambda I)^-1`, or `None` unless `lambda` lies strictly below
    /// every eigenvalue of `F^T F`.
    pub fn shifted_inverse(&self, lambda: f64) -> Option<Matrix3<f64>> {
        let ev = self.eigen.eigenvalues.map(|l| l - lambda);
        if ev.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        let q = &self.eigen.eigenvectors;
        Some(q * Matrix3::from_diagonal(&ev.map(|l| 1.0 / l)) * q.transpose())
    }

    /// `G^T F (F^T F)^-1 (F^T F - lambda I)^-1 F^T G`, so that the shifted
    /// complement `G^T G - G^T F (F^T F - lambda I)^-1 F^T G` equals this
    /// track's share of `B` minus `lambda` times this term.
    pub fn shift_correction(&self, lambda: f64) -> Option<DMatrix<f64>> {
        let d = self.eigen.eigenvalues;
        if d.iter().any(|&l| !(l > lambda && l > 0.0)) {
            return None;
        }
        let q = &self.eigen.eigenvectors;
        let qc = q.transpose() * &self.ftg;
        let mut scaled = qc.clone();
        for r in 0..3 {
            let w = 1.0 / (d[r] * (d[r] - lambda));
            scaled.row_mut(r).scale_mut(w);
        }
        Some(qc.transpose() * scaled)
    }

    /// This track's contribution to `B` given its point map
    /// `L = -(F^T F)^-1 F^T G`, accumulated as `sum_j E_j^T E_j` with
    /// `E_j = (I - f_j f_j^T)(L - W_j)` and `W_j = [t'^1/1! I .. t'^S/S! I]`.
    /// Equal to `G^T G - G^T F (F^T F)^-1 F^T G`, but a sum of Gram terms
    /// instead of a difference of two large ones.
    fn schur_term(&self, point_map: &OMatrix<f64, U3, Dyn>) -> DMatrix<f64> {
        let dim = 3 * self.order;
        let mut out = DMatrix::zeros(dim, dim);
        let mut d = point_map.clone();
        for b in &self.samples {
            d.copy_from(point_map);
            let mut tp = 1.0;
            for s in 0..self.order {
                tp *= b.t_prime;
                let w = tp * INV_FACTORIAL[s + 1];
                for c in 0..3 {
                    d[(c, 3 * s + c)] -= w;
                }
            }
            let f = &b.f_prime;
            let proj = f.transpose() * &d;
            let e = &d - f * proj;
            out.gemm_tr(1.0, &e, &e, 1.0);
        }
        out
    }
}

/// Triangular factor of one track's stacked incidence rows `[F | G]`, split
/// after the point columns: `[R11 R12; 0 R22]`. `R^T R` reproduces the
/// normal-equation blocks without squaring their condition number.
#[derive(Debug, Clone)]
pub struct TrackFactor {
    pub r11: Matrix3<f64>,
    pub r12: OMatrix<f64, U3, Dyn>,
    /// At most `3S` rows.
    pub r22: DMatrix<f64>,
}

impl TrackBlocks {
    /// QR factor of the incidence rows this track was accumulated from.
    pub fn factor(&self) -> TrackFactor {
        let dim = 3 * self.order;
        let mut a = DMatrix::zeros(3 * self.samples.len(), 3 + dim);
        for (j, b) in self.samples.iter().enumerate() {
            let k = skew(&b.f_prime);
            a.fixed_view_mut::<3, 3>(3 * j, 0).copy_from(&k);
            let mut tp = 1.0;
            for s in 0..self.order {
                tp *= b.t_prime;
                a.fixed_view_mut::<3, 3>(3 * j, 3 + 3 * s)
                    .copy_from(&(k * -(tp * INV_FACTORIAL[s + 1])));
            }
        }
        let r = a.qr().r();
        TrackFactor {
            r11: r.fixed_view::<3, 3>(0, 0).into_owned(),
            r12: r.generic_view((0, 3), (U3, Dyn(dim))).into_owned(),
            r22: r.view((3, 3), (r.nrows() - 3, dim)).into_owned(),
        }
    }
}

/// Blocks of one track. Needs at least two observations.
pub fn track_blocks(bearings: &[BearingObservation], order: usize) -> Result<TrackBlocks> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::InvalidInput(format!("order {order} outside 1..={MAX_ORDER}")));
    }
    if bearings.len() < 2 {
        return Err(Error::DegenerateTrack {
            track: 0,
            reason: format!("{} observation(s), need at least 2", bearings.len()),
        });
    }
    Ok(TrackBlocks::accumulate(bearings, order))
}

/// Whether `F` has full column rank: the smallest eigenvalue of `F^T F` must
/// exceed `eps_rank` times the largest.
#[allow(non_snake_case)]
pub fn rank_check_F(blocks: &TrackBlocks, eps_rank: f64) -> RankCheck {
    let ev = blocks.ftf_eigenvalues();
    let min_eigenvalue = ev.min();
    let max_eigenvalue = ev.max();
    RankCheck {
        passed: blocks.n_obs >= 2 && max_eigenvalue > 0.0 && min_eigenvalue > eps_rank * max_eigenvalue,
        min_eigenvalue,
        max_eigenvalue,
    }
}

/// The reduced `3S x 3S` system in the motion rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurMatrix {
    pub b: DMatrix<f64>,
    pub tracks: usize,
}

impl SchurMatrix {
    pub fn order(&self) -> usize {
        self.b.nrows() / 3
    }
}

/// `B = sum_i G_i^T G_i - G_i^T F_i (F_i^T F_i)^-1 F_i^T G_i`, one 3x3
/// inversion per track.
pub fn accumulate_schur(all_blocks: &[TrackBlocks], eps_rank: f64) -> Result<SchurMatrix> {
    let first = all_blocks.first().ok_or(Error::InsufficientData { needed: 1, available: 0 })?;
    let dim = 3 * first.order;
    let mut b = DMatrix::zeros(dim, dim);
    for (i, blocks) in all_blocks.iter().enumerate() {
        if blocks.order != first.order {
            return Err(Error::InvalidInput(format!(
                "track {i} has order {}, expected {}",
                blocks.order, first.order
            )));
        }
        let inv = schur_inverse(blocks, i, eps_rank)?;
        let point_map = -(inv * &blocks.ftg);
        b += blocks.schur_term(&point_map);
    }
    // Symmetrize away round-off.
    let b = (&b + b.transpose()) * 0.5;
    Ok(SchurMatrix {
        b,
        tracks: all_blocks.len(),
    })
}

pub(crate) fn schur_inverse(blocks: &TrackBlocks, index: usize, eps_rank: f64) -> Result<Matrix3<f64>> {
    let check = rank_check_F(blocks, eps_rank);
    let degenerate = || Error::DegenerateTrack {
        track: index as u64,
        reason: format!(
            "F^T F eigenvalues [{:e}, {:e}] fail rank check",
            check.min_eigenvalue, check.max_eigenvalue
        ),
    };
    if !check.passed {
        return Err(degenerate());
    }
    blocks.ftf_inverse().ok_or_else(degenerate)
}

/// `F^T b` and `G^T b` for the right-hand side `b_j = t'_j^2 / 2 [f'_j]x a`
/// of the known-acceleration system.
pub fn accel_rhs(bearings: &[BearingObservation], accel: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut ftb = Vector3::zeros();
    let mut gtb = Vector3::zeros();
    for b in bearings {
        let qa = skew_squared(&b.f_prime) * accel;
        let t2 = b.t_prime * b.t_prime;
        ftb -= qa * (0.5 * t2);
        gtb += qa * (0.5 * t2 * b.t_prime);
    }
    (ftb, gtb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::skew;
    use proptest::prelude::*;

    fn bo(f: [f64; 3], t: f64) -> BearingObservation {
        BearingObservation {
            f_prime: Vector3::from(f).normalize(),
            t_prime: t,
        }
    }

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    /// Explicit `3N x (3 + 3S)` stacking of `[F | G^(1) .. G^(S)]`.
    fn stacked(bearings: &[BearingObservation], order: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(3 * bearings.len(), 3 + 3 * order);
        for (j, b) in bearings.iter().enumerate() {
            let k = skew(&b.f_prime);
            a.fixed_view_mut::<3, 3>(3 * j, 0).copy_from(&k);
            for s in 1..=order {
                let w = b.t_prime.powi(s as i32) / factorial(s);
                a.fixed_view_mut::<3, 3>(3 * j, 3 * s).copy_from(&(k * -w));
            }
        }
        a
    }

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn skew_squared_axis_aligned() {
        assert_eq!(skew_squared(&Vector3::z()), Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 0.0)));
    }

    #[test]
    fn skew_squared_trace_and_product() {
        for f in [[0.3, -0.2, 0.9], [1.0, 2.0, 3.0], [-0.7, 0.1, 0.05]] {
            let f = Vector3::from(f).normalize();
            let q = skew_squared(&f);
            assert!((q.trace() + 2.0).abs() < 1e-15);
            assert!((q - skew(&f) * skew(&f)).amax() < 1e-14);
            assert_eq!(q, q.transpose());
        }
    }

    #[test]
    fn zero_time_terms_vanish() {
        let tau = 0.37;
        let bs = [bo([0.1, 0.2, 1.0], 0.0), bo([0.3, -0.1, 1.0], tau)];
        let blk = track_blocks(&bs, 1).unwrap();
        assert_eq!(blk.ftg_block(1), skew_squared(&bs[1].f_prime) * tau);
    }

    #[test]
    fn no_temporal_baseline_gives_zero_motion_blocks() {
        let bs = [bo([0.1, 0.2, 1.0], 0.0), bo([0.3, -0.1, 1.0], 0.0), bo([0.0, 0.0, 1.0], 0.0)];
        let blk = track_blocks(&bs, 2).unwrap();
        assert_eq!(blk.ftg.amax(), 0.0);
        assert_eq!(blk.gtg.amax(), 0.0);
    }

    #[test]
    fn short_track_and_bad_order_rejected() {
        assert!(matches!(track_blocks(&[bo([0.0, 0.0, 1.0], 0.0)], 1), Err(Error::DegenerateTrack { .. })));
        let bs = [bo([0.1, 0.2, 1.0], 0.0), bo([0.3, -0.1, 1.0], 0.1)];
        assert!(track_blocks(&bs, 0).is_err());
        assert!(track_blocks(&bs, MAX_ORDER + 1).is_err());
    }

    #[test]
    fn rank_check_cases() {
        let parallel = [bo([0.1, 0.2, 1.0], -0.1), bo([0.1, 0.2, 1.0], 0.1)];
        assert!(!rank_check_F(&track_blocks(&parallel, 1).unwrap(), DEFAULT_EPS_RANK).passed);

        let distinct = [bo([0.0, 0.0, 1.0], -0.1), bo([1.0, 0.0, 1.0], 0.1)];
        let check = rank_check_F(&track_blocks(&distinct, 1).unwrap(), DEFAULT_EPS_RANK);
        // F^T F = 2I - f1 f1^T - f2 f2^T has eigenvalues 2 and 1 -/+ cos(45 deg).
        let c = std::f64::consts::FRAC_1_SQRT_2;
        assert!(check.passed);
        assert!((check.min_eigenvalue - (1.0 - c)).abs() < 1e-14);
        assert!((check.max_eigenvalue - 2.0).abs() < 1e-14);

        let single = TrackBlocks::accumulate(&[bo([0.0, 0.0, 1.0], 0.0)], 1);
        assert!(!rank_check_F(&single, DEFAULT_EPS_RANK).passed);
    }

    #[test]
    fn schur_of_nothing_is_an_error() {
        assert!(accumulate_schur(&[], DEFAULT_EPS_RANK).is_err());
    }

    #[test]
    fn schur_names_the_degenerate_track() {
        let good = track_blocks(&[bo([0.0, 0.0, 1.0], -0.1), bo([1.0, 0.0, 1.0], 0.1)], 1).unwrap();
        let bad = track_blocks(&[bo([0.1, 0.2, 1.0], -0.1), bo([0.1, 0.2, 1.0], 0.1)], 1).unwrap();
        match accumulate_schur(&[good, bad], DEFAULT_EPS_RANK) {
            Err(Error::DegenerateTrack { track, .. }) => assert_eq!(track, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_minimal_track_gives_low_rank_psd_b() {
        // Noiseless point (0.2, -0.1, 2) seen from a camera moving at v.
        let p = Vector3::new(0.2, -0.1, 2.0);
        let v = Vector3::new(0.6, 0.0, 0.8);
        let bs: Vec<_> = [-0.1, 0.0, 0.1]
            .iter()
            .map(|&t| BearingObservation {
                f_prime: (p - v * t).normalize(),
                t_prime: t,
            })
            .collect();
        let schur = accumulate_schur(&[track_blocks(&bs, 1).unwrap()], DEFAULT_EPS_RANK).unwrap();
        let b = &schur.b;
        assert!((b - b.transpose()).amax() == 0.0);
        let ev = SymmetricEigen::new(b.clone()).eigenvalues;
        assert!(ev.min() > -1e-12 * ev.max());
        // v lies in the null space.
        assert!((b * nalgebra::DVector::from_column_slice(v.as_slice())).norm() < 1e-12 * ev.max());
    }

    fn arb_track() -> impl Strategy<Value = Vec<BearingObservation>> {
        prop::collection::vec(
            ((-1.0..1.0f64, -1.0..1.0f64, 0.2..1.0f64), -0.5..0.5f64),
            2..=50,
        )
        .prop_map(|v| v.into_iter().map(|((x, y, z), t)| bo([x, y, z], t)).collect())
    }

    proptest! {
        #[test]
        fn blocks_match_stacked_products(bs in arb_track(), order in 1usize..=3) {
            let blk = track_blocks(&bs, order).unwrap();
            let a = stacked(&bs, order);
            let ata = a.transpose() * &a;
            let mut got = DMatrix::zeros(3 + 3 * order, 3 + 3 * order);
            got.fixed_view_mut::<3, 3>(0, 0).copy_from(&blk.ftf);
            got.view_mut((0, 3), (3, 3 * order)).copy_from(&blk.ftg);
            got.view_mut((3, 0), (3 * order, 3)).copy_from(&blk.ftg.transpose());
            got.view_mut((3, 3), (3 * order, 3 * order)).copy_from(&blk.gtg);
            prop_assert!((&got - &ata).amax() <= 1e-12 * ata.amax().max(1.0));
            for s in 1..=order {
                for r in 1..=order {
                    prop_assert!((blk.gtg_block(s, r) - blk.gtg_block(r, s).transpose()).amax() < 1e-15);
                }
            }
        }

        #[test]
        fn factor_reproduces_the_blocks(bs in arb_track(), order in 1usize..=3) {
            let blk = track_blocks(&bs, order).unwrap();
            let f = blk.factor();
            let scale = blk.ftf.amax().max(1.0);
            prop_assert!((f.r11.transpose() * f.r11 - blk.ftf).amax() <= 1e-12 * scale);
            prop_assert!((f.r11.transpose() * &f.r12 - &blk.ftg).amax() <= 1e-12 * scale);
            let gtg = f.r12.transpose() * &f.r12 + f.r22.transpose() * &f.r22;
            prop_assert!((gtg - &blk.gtg).amax() <= 1e-12 * scale);
            prop_assert!(f.r22.nrows() <= 3 * order);
        }

        #[test]
        fn schur_matches_dense_normal_equations(
            tracks in prop::collection::vec(arb_track(), 1..=20),
            order in 1usize..=2,
        ) {
            let blocks: Vec<_> = tracks.iter().map(|t| track_blocks(t, order).unwrap()).collect();
            prop_assume!(blocks.iter().all(|b| rank_check_F(b, 1e-6).passed));
            let schur = accumulate_schur(&blocks, DEFAULT_EPS_RANK).unwrap();

            // Dense A = blockdiag(F_i) | G, then M = A^T A and its Schur complement.
            let m = tracks.len();
            let dim = 3 * order;
            let rows: usize = tracks.iter().map(|t| 3 * t.len()).sum();
            let mut a = DMatrix::zeros(rows, 3 * m + dim);
            let mut row = 0;
            for (i, t) in tracks.iter().enumerate() {
                let s = stacked(t, order);
                a.view_mut((row, 3 * i), (s.nrows(), 3)).copy_from(&s.columns(0, 3));
                a.view_mut((row, 3 * m), (s.nrows(), dim)).copy_from(&s.columns(3, dim));
                row += s.nrows();
            }
            let mm = a.transpose() * &a;
            let ma = mm.view((0, 0), (3 * m, 3 * m)).into_owned();
            let mb = mm.view((0, 3 * m), (3 * m, dim)).into_owned();
            let md = mm.view((3 * m, 3 * m), (dim, dim)).into_owned();
            let ma_inv = ma.try_inverse().unwrap();
            let dense = md - mb.transpose() * ma_inv * mb;
            prop_assert!(rel_frob(&schur.b, &dense) < 1e-10, "rel {}", rel_frob(&schur.b, &dense));
        }
    }

    #[test]
    fn accel_rhs_matches_stacked() {
        let bs = [bo([0.1, 0.2, 1.0], -0.2), bo([0.3, -0.1, 1.0], 0.05), bo([-0.2, 0.1, 1.0], 0.3)];
        let a = Vector3::new(0.3, -0.5, 1.2);
        let (ftb, gtb) = accel_rhs(&bs, &a);
        let st = stacked(&bs, 1);
        let mut rhs = nalgebra::DVector::zeros(3 * bs.len());
        for (j, b) in bs.iter().enumerate() {
            rhs.rows_mut(3 * j, 3).copy_from(&(skew(&b.f_prime) * a * (0.5 * b.t_prime * b.t_prime)));
        }
        let c = st.transpose() * rhs;
        assert!((c.rows(0, 3) - ftb).amax() < 1e-14);
        assert!((c.rows(3, 3) - gtb).amax() < 1e-14);
    }
}
