//! Two-pose factors obtained by marginalizing the landmarks two frames share.
//!
//! The reference frame `r` sits at the origin of its own body frame, so only
//! the relative pose `T_SrSc` enters the joint system and observations taken
//! in `r` have no pose Jacobian. After the Schur complement the relative pose
//! is left with `H* δp = b*`, which the factor reproduces with
//! `W_p = H*`, `e_p0 = −H*⁺ b*` and an identity Jacobian at the linearization
//! point. Consumed observations and landmark estimates (in `S^r`) are archived
//! so the edge can later be turned back into landmarks and observations.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Matrix6, Matrix6x3, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{reprojection_error, CameraRig, ReprojectionFactor};
use crate::error::{Error, Result};
use crate::geometry::{box_minus, left_jacobian_inv, skew, Pose};
use crate::{FrameId, LandmarkId};

/// Relative tolerance of the symmetric pseudo-inverse.
pub const PINV_TOL: f64 = 1e-8;

macro_rules! sym_pinv {
    ($name:ident, $t:ty) => {
        /// Pseudo-inverse of a symmetric matrix; eigenvalues below `tol · |λ|_max` are dropped.
        pub fn $name(m: &$t, tol: f64) -> $t {
            let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
            let max = eig.eigenvalues.amax();
            if max == 0.0 {
                return <$t>::zeros();
            }
            let inv = eig.eigenvalues.map(|v| if v.abs() > tol * max { 1.0 / v } else { 0.0 });
            let mut out = eig.eigenvectors * <$t>::from_diagonal(&inv) * eig.eigenvectors.transpose();
            out = 0.5 * (out + out.transpose());
            out
        }
    };
}

sym_pinv!(pinv3, Matrix3<f64>);
sym_pinv!(pinv6, Matrix6<f64>);

/// Symmetric square root `L` with `L Lᵀ = W` for a PSD `W`.
pub fn psd_sqrt6(w: &Matrix6<f64>) -> Matrix6<f64> {
    let eig = SymmetricEigen::new(0.5 * (w + w.transpose()));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix6::from_diagonal(&d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginalOptions {
    /// Minimum number of landmarks observed in both frames.
    pub min_joint_observations: usize,
    /// Observations with a larger error (per coordinate, in σ) are archived but not used.
    pub gate_sigma: f64,
    pub pinv_tolerance: f64,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            min_joint_observations: 8,
            gate_sigma: 2.5,
            pinv_tolerance: PINV_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkBlock {
    pub id: LandmarkId,
    pub h_pj: Matrix6x3<f64>,
    pub h_jj: Matrix3<f64>,
    pub b_j: Vector3<f64>,
}

/// Gauss-Newton blocks of the joint relative-pose/landmark problem, with
/// `H = JᵀWJ` and `b = −JᵀWe`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoFrameSystem {
    pub h_pp: Matrix6<f64>,
    pub b_p: Vector6<f64>,
    pub landmarks: Vec<LandmarkBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReducedSystem {
    pub h_star: Matrix6<f64>,
    pub b_star: Vector6<f64>,
}

/// Builds the joint system for observations in frames `r` and `c`, landmarks
/// given in `S^r`. `None` when no landmark is observed in both frames.
pub fn build_two_frame_system(
    observations: &[ReprojectionFactor],
    landmarks_sr: &BTreeMap<LandmarkId, Vector3<f64>>,
    r: FrameId,
    c: FrameId,
    t_sr_sc: &Pose,
    rig: &CameraRig,
) -> Option<TwoFrameSystem> {
    if joint_landmarks(observations, r, c).is_empty() {
        return None;
    }
    let mut h_pp = Matrix6::zeros();
    let mut b_p = Vector6::zeros();
    let mut blocks: BTreeMap<LandmarkId, LandmarkBlock> = BTreeMap::new();
    let identity = Pose::identity();
    for obs in observations {
        let Some(l) = landmarks_sr.get(&obs.landmark) else {
            continue;
        };
        let in_c = if obs.frame == c {
            true
        } else if obs.frame == r {
            false
        } else {
            continue;
        };
        let pose = if in_c { t_sr_sc } else { &identity };
        let Some(ev) = reprojection_error(rig, obs.cam, pose, l, &obs.measurement) else {
            continue;
        };
        let w = &obs.weight;
        let blk = blocks.entry(obs.landmark).or_insert_with(|| LandmarkBlock {
            id: obs.landmark,
            h_pj: Matrix6x3::zeros(),
            h_jj: Matrix3::zeros(),
            b_j: Vector3::zeros(),
        });
        let jl_w = ev.j_landmark.transpose() * w;
        blk.h_jj += jl_w * ev.j_landmark;
        blk.b_j -= jl_w * ev.error;
        if in_c {
            let jp_w = ev.j_pose.transpose() * w;
            h_pp += jp_w * ev.j_pose;
            b_p -= jp_w * ev.error;
            blk.h_pj += jp_w * ev.j_landmark;
        }
    }
    Some(TwoFrameSystem {
        h_pp,
        b_p,
        landmarks: blocks.into_values().collect(),
    })
}

pub fn schur_marginalize(system: &TwoFrameSystem) -> ReducedSystem {
    schur_marginalize_tol(system, PINV_TOL)
}

pub fn schur_marginalize_tol(system: &TwoFrameSystem, tol: f64) -> ReducedSystem {
    let mut h = system.h_pp;
    let mut b = system.b_p;
    for blk in &system.landmarks {
        let inv = pinv3(&blk.h_jj, tol);
        let k = blk.h_pj * inv;
        h -= k * blk.h_pj.transpose();
        b -= k * blk.b_j;
    }
    ReducedSystem {
        h_star: 0.5 * (h + h.transpose()),
        b_star: b,
    }
}

/// Everything an edge consumed: the observations and the landmark estimates in `S^r`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub observations: Vec<ReprojectionFactor>,
    pub landmarks_sr: BTreeMap<LandmarkId, Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPoseFactor {
    pub ref_frame: FrameId,
    pub other_frame: FrameId,
    /// Linearization point `T̃_SrSc`.
    pub p_lin: Pose,
    pub e0: Vector6<f64>,
    pub w: Matrix6<f64>,
    /// `L` with `L Lᵀ = W_p`.
    pub sqrt_w: Matrix6<f64>,
    pub archive: Archive,
    pub consumed: bool,
}

/// Landmarks with at least one observation in `r` and one in `c`.
pub fn joint_landmarks(observations: &[ReprojectionFactor], r: FrameId, c: FrameId) -> BTreeSet<LandmarkId> {
    let in_r: BTreeSet<_> = observations.iter().filter(|o| o.frame == r).map(|o| o.landmark).collect();
    observations
        .iter()
        .filter(|o| o.frame == c && in_r.contains(&o.landmark))
        .map(|o| o.landmark)
        .collect()
}

/// Marginalizes the landmarks observed in `r` into a relative-pose factor
/// between `r` and `c`. `observations` must contain `r`'s observations and
/// `c`'s observations of the same landmarks; `landmarks_w` their world estimates.
#[allow(clippy::too_many_arguments)]
pub fn make_two_pose_factor(
    r: FrameId,
    c: FrameId,
    observations: &[ReprojectionFactor],
    landmarks_w: &BTreeMap<LandmarkId, Vector3<f64>>,
    t_ws_r: &Pose,
    t_ws_c: &Pose,
    rig: &CameraRig,
    opts: &MarginalOptions,
) -> Result<TwoPoseFactor> {
    let joint = joint_landmarks(observations, r, c)
        .into_iter()
        .filter(|id| landmarks_w.contains_key(id))
        .count();
    if joint < opts.min_joint_observations.max(1) {
        return Err(Error::InsufficientObservations(joint as u64, opts.min_joint_observations as u64));
    }
    let t_sw_r = t_ws_r.inverse();
    let landmarks_sr: BTreeMap<_, _> = observations
        .iter()
        .filter_map(|o| landmarks_w.get(&o.landmark).map(|l| (o.landmark, t_sw_r.transform(l))))
        .collect();
    let archived: Vec<_> = observations
        .iter()
        .filter(|o| landmarks_sr.contains_key(&o.landmark) && (o.frame == r || o.frame == c))
        .cloned()
        .collect();
    let archive = Archive {
        observations: archived,
        landmarks_sr,
    };
    factor_from_archive(r, c, archive, &t_sw_r.compose(t_ws_c), rig, opts)
}

fn factor_from_archive(
    r: FrameId,
    c: FrameId,
    archive: Archive,
    t_sr_sc: &Pose,
    rig: &CameraRig,
    opts: &MarginalOptions,
) -> Result<TwoPoseFactor> {
    let identity = Pose::identity();
    let used: Vec<ReprojectionFactor> = archive
        .observations
        .iter()
        .filter(|o| {
            let pose = if o.frame == r { &identity } else { t_sr_sc };
            let l = &archive.landmarks_sr[&o.landmark];
            let sigma = 1.0 / o.weight[(0, 0)].sqrt();
            match reprojection_error(rig, o.cam, pose, l, &o.measurement) {
                Some(ev) => ev.error.amax() <= opts.gate_sigma * sigma,
                None => false,
            }
        })
        .cloned()
        .collect();
    let system = build_two_frame_system(&used, &archive.landmarks_sr, r, c, t_sr_sc, rig)
        .ok_or(Error::InsufficientObservations(0, opts.min_joint_observations as u64))?;
    let red = schur_marginalize_tol(&system, opts.pinv_tolerance);
    let e0 = -pinv6(&red.h_star, opts.pinv_tolerance) * red.b_star;
    Ok(TwoPoseFactor {
        ref_frame: r,
        other_frame: c,
        p_lin: *t_sr_sc,
        e0,
        w: red.h_star,
        sqrt_w: psd_sqrt6(&red.h_star),
        archive,
        consumed: false,
    })
}

/// Error `e_p` and Jacobians with respect to `[δr, δα]` of the world poses of `r` and `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPoseEval {
    pub error: Vector6<f64>,
    pub j_r: Matrix6<f64>,
    pub j_c: Matrix6<f64>,
}

pub fn eval_two_pose_error(factor: &TwoPoseFactor, t_ws_r: &Pose, t_ws_c: &Pose) -> TwoPoseEval {
    let rr_t = t_ws_r.rotation().transpose();
    let d = t_ws_c.r - t_ws_r.r;
    let r_rc = rr_t * d;
    let q_rc = t_ws_r.q.inverse() * t_ws_c.q;
    let e_pos = r_rc - factor.p_lin.r;
    let e_rot = box_minus(&q_rc, &factor.p_lin.q);
    let mut error = factor.e0;
    error.fixed_rows_mut::<3>(0).add_assign(&e_pos);
    error.fixed_rows_mut::<3>(3).add_assign(&e_rot);

    let jl = left_jacobian_inv(&e_rot) * rr_t;
    let mut j_r = Matrix6::zeros();
    j_r.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rr_t));
    j_r.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rr_t * skew(&d)));
    j_r.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jl));
    let mut j_c = Matrix6::zeros();
    j_c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rr_t);
    j_c.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    TwoPoseEval { error, j_r, j_c }
}

impl TwoPoseFactor {
    pub fn cost(&self, t_ws_r: &Pose, t_ws_c: &Pose) -> f64 {
        let e = eval_two_pose_error(self, t_ws_r, t_ws_c).error;
        0.5 * (e.transpose() * self.w * e)[0]
    }

    pub fn involves(&self, f: FrameId) -> bool {
        self.ref_frame == f || self.other_frame == f
    }
}

/// Turns the factor back into observations and world-frame landmarks, using
/// the current estimate of `T_WS_r`, and marks it consumed.
pub fn revive(
    factor: &mut TwoPoseFactor,
    t_ws_r: &Pose,
) -> Result<(Vec<ReprojectionFactor>, BTreeMap<LandmarkId, Vector3<f64>>)> {
    if factor.consumed {
        return Err(Error::AlreadyConsumed);
    }
    factor.consumed = true;
    let landmarks = factor
        .archive
        .landmarks_sr
        .iter()
        .map(|(id, l)| (*id, t_ws_r.transform(l)))
        .collect();
    Ok((factor.archive.observations.clone(), landmarks))
}

/// Number of landmarks whose observations were consumed by more than one edge.
pub fn count_duplicated_landmarks<'a>(factors: impl IntoIterator<Item = &'a TwoPoseFactor>) -> usize {
    let mut seen: BTreeMap<LandmarkId, usize> = BTreeMap::new();
    for f in factors {
        for id in f.archive.landmarks_sr.keys() {
            *seen.entry(*id).or_default() += 1;
        }
    }
    seen.values().filter(|n| **n > 1).count()
}

use std::ops::AddAssign;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{pixel_weight, project_world};
    use crate::geometry::exp;
    use nalgebra::{DMatrix, DVector, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Problem {
        pub obs: Vec<ReprojectionFactor>,
        pub landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
        pub t_r: Pose,
        pub t_c: Pose,
        pub rig: CameraRig,
    }

    fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn problem(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> Problem {
        let rig = CameraRig::default();
        let t_r = Pose::new(v3(rng, 2.0), exp(&v3(rng, 0.5)));
        let t_c = t_r.compose(&Pose::new(Vector3::new(0.3, 0.2, 0.1) + v3(rng, 0.2), exp(&v3(rng, 0.1))));
        let mut obs = Vec::new();
        let mut landmarks = BTreeMap::new();
        let mut id = 0;
        while landmarks.len() < n {
            let p_s = Vector3::new(rng.random_range(3.0..8.0), rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
            let l = t_r.transform(&p_s);
            let (Some(zr), Some(zc)) = (project_world(&rig, 0, &t_r, &l), project_world(&rig, 0, &t_c, &l)) else {
                continue;
            };
            let lid = LandmarkId(id);
            id += 1;
            for (f, z) in [(FrameId(1), zr), (FrameId(2), zc)] {
                let nz = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * noise;
                obs.push(ReprojectionFactor {
                    cam: 0,
                    landmark: lid,
                    frame: f,
                    measurement: z + nz,
                    weight: pixel_weight(1.0),
                });
            }
            landmarks.insert(lid, l + v3(rng, 0.02));
        }
        Problem { obs, landmarks, t_r, t_c, rig }
    }

    fn loose() -> MarginalOptions {
        MarginalOptions {
            gate_sigma: f64::INFINITY,
            ..Default::default()
        }
    }

    fn in_sr(p: &Problem) -> BTreeMap<LandmarkId, Vector3<f64>> {
        p.landmarks.iter().map(|(k, l)| (*k, p.t_r.inverse().transform(l))).collect()
    }

    /// Stacked residual/Jacobian over `[δp, l_0, l_1, ...]` from individually evaluated rows.
    fn dense_system(p: &Problem) -> (DMatrix<f64>, DVector<f64>) {
        let lms = in_sr(p);
        let ids: Vec<_> = lms.keys().copied().collect();
        let n = 6 + 3 * ids.len();
        let rel = p.t_r.inverse().compose(&p.t_c);
        let mut j = DMatrix::zeros(2 * p.obs.len(), n);
        let mut e = DVector::zeros(2 * p.obs.len());
        let mut w = DMatrix::zeros(2 * p.obs.len(), 2 * p.obs.len());
        for (k, o) in p.obs.iter().enumerate() {
            let pose = if o.frame == FrameId(2) { rel } else { Pose::identity() };
            let ev = reprojection_error(&p.rig, 0, &pose, &lms[&o.landmark], &o.measurement).unwrap();
            if o.frame == FrameId(2) {
                j.view_mut((2 * k, 0), (2, 6)).copy_from(&ev.j_pose);
            }
            let li = ids.iter().position(|x| *x == o.landmark).unwrap();
            j.view_mut((2 * k, 6 + 3 * li), (2, 3)).copy_from(&ev.j_landmark);
            e.rows_mut(2 * k, 2).copy_from(&ev.error);
            w.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&o.weight);
        }
        (j.transpose() * &w * &j, -(j.transpose() * &w * e))
    }

    #[test]
    fn reference_only_landmark_has_no_pose_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = problem(&mut rng, 2, 0.5);
        // keep landmark 0 in both frames (so the system exists), landmark 1 only in r
        p.obs.retain(|o| !(o.landmark == LandmarkId(1) && o.frame == FrameId(2)));
        let rel = p.t_r.inverse().compose(&p.t_c);
        let only_r: Vec<_> = p.obs.iter().filter(|o| o.landmark == LandmarkId(1) || o.frame == FrameId(1)).cloned().collect();
        let sys = build_two_frame_system(&p.obs, &in_sr(&p), FrameId(1), FrameId(2), &rel, &p.rig).unwrap();
        let blk = sys.landmarks.iter().find(|b| b.id == LandmarkId(1)).unwrap();
        assert_eq!(blk.h_pj, Matrix6x3::zeros());
        assert!(build_two_frame_system(&only_r, &in_sr(&p), FrameId(1), FrameId(2), &rel, &p.rig).is_none());
    }

    #[test]
    fn exact_observations_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = problem(&mut rng, 10, 0.0);
        for o in &mut p.obs {
            let t = if o.frame == FrameId(1) { p.t_r } else { p.t_c };
            // re-measure the perturbed landmark exactly
            o.measurement = project_world(&p.rig, 0, &t, &p.landmarks[&o.landmark]).unwrap();
        }
        let rel = p.t_r.inverse().compose(&p.t_c);
        let sys = build_two_frame_system(&p.obs, &in_sr(&p), FrameId(1), FrameId(2), &rel, &p.rig).unwrap();
        assert!(sys.b_p.norm() < 1e-9);
        assert!(sys.landmarks.iter().all(|b| b.b_j.norm() < 1e-9));
        let f = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &loose()).unwrap();
        assert!(f.e0.norm() < 1e-9);
    }

    #[test]
    fn system_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = problem(&mut rng, 10, 1.0);
            let rel = p.t_r.inverse().compose(&p.t_c);
            let sys = build_two_frame_system(&p.obs, &in_sr(&p), FrameId(1), FrameId(2), &rel, &p.rig).unwrap();
            let (h, b) = dense_system(&p);
            let scale = h.amax();
            assert!((h.view((0, 0), (6, 6)) - sys.h_pp).amax() < 1e-10 * scale);
            assert!((b.rows(0, 6) - sys.b_p).amax() < 1e-10 * scale);
            for (i, blk) in sys.landmarks.iter().enumerate() {
                assert!((h.view((0, 6 + 3 * i), (6, 3)) - blk.h_pj).amax() < 1e-10 * scale);
                assert!((h.view((6 + 3 * i, 6 + 3 * i), (3, 3)) - blk.h_jj).amax() < 1e-10 * scale);
                assert!((b.rows(6 + 3 * i, 3) - blk.b_j).amax() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn schur_without_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let sys = TwoFrameSystem {
            h_pp: a * a.transpose(),
            b_p: Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            landmarks: vec![LandmarkBlock {
                id: LandmarkId(0),
                h_pj: Matrix6x3::zeros(),
                h_jj: Matrix3::identity() * 2.0,
                b_j: Vector3::new(1.0, 2.0, 3.0),
            }],
        };
        let red = schur_marginalize(&sys);
        assert!((red.h_star - sys.h_pp).amax() < 1e-14);
        assert_eq!(red.b_star, sys.b_p);
    }

    #[test]
    fn single_landmark_schur_matches_block_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = nalgebra::SMatrix::<f64, 9, 9>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let h = a * a.transpose() + nalgebra::SMatrix::<f64, 9, 9>::identity();
        let b = nalgebra::SVector::<f64, 9>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let sys = TwoFrameSystem {
            h_pp: h.fixed_view::<6, 6>(0, 0).into_owned(),
            b_p: b.fixed_rows::<6>(0).into_owned(),
            landmarks: vec![LandmarkBlock {
                id: LandmarkId(0),
                h_pj: h.fixed_view::<6, 3>(0, 6).into_owned(),
                h_jj: h.fixed_view::<3, 3>(6, 6).into_owned(),
                b_j: b.fixed_rows::<3>(6).into_owned(),
            }],
        };
        let red = schur_marginalize(&sys);
        let hinv = h.try_inverse().unwrap();
        let marg = hinv.fixed_view::<6, 6>(0, 0).into_owned();
        assert!((red.h_star.try_inverse().unwrap() - marg).amax() < 1e-10);
        // the pose block of the full solution equals the reduced solution
        let x = hinv * b;
        let xp = red.h_star.try_inverse().unwrap() * red.b_star;
        assert!((x.fixed_rows::<6>(0) - xp).amax() < 1e-10);
    }

    #[test]
    fn schur_matches_dense_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [5, 12, 30] {
            let p = problem(&mut rng, n, 1.0);
            let rel = p.t_r.inverse().compose(&p.t_c);
            let mut sys = build_two_frame_system(&p.obs, &in_sr(&p), FrameId(1), FrameId(2), &rel, &p.rig).unwrap();
            // a pose prior removes the scale gauge so the full matrix is invertible
            sys.h_pp += Matrix6::identity() * 1e2;
            let (mut h, _) = dense_system(&p);
            for i in 0..6 {
                h[(i, i)] += 1e2;
            }
            let red = schur_marginalize(&sys);
            let hinv = h.clone().try_inverse().unwrap();
            let marg = hinv.view((0, 0), (6, 6)).into_owned();
            let inv_star = red.h_star.try_inverse().unwrap();
            assert!((inv_star - &marg).amax() < 1e-8 * marg.amax().max(1.0));
            assert!(SymmetricEigen::new(red.h_star).eigenvalues.min() >= -1e-9 * red.h_star.amax());
        }
    }

    #[test]
    fn factor_reproduces_reduced_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(8..30);
            let p = problem(&mut rng, n, 1.0);
            let f = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &loose()).unwrap();
            let rel = p.t_r.inverse().compose(&p.t_c);
            let sys = build_two_frame_system(&p.obs, &in_sr(&p), FrameId(1), FrameId(2), &rel, &p.rig).unwrap();
            let red = schur_marginalize(&sys);
            // Jacobian of e_p w.r.t. the relative pose is the identity at p̃, so H = W_p and b = −W_p e_p0.
            let ev = eval_two_pose_error(&f, &Pose::identity(), &f.p_lin);
            assert!((ev.error - f.e0).amax() < 1e-12);
            assert!((ev.j_c - Matrix6::identity()).amax() < 1e-12);
            let scale = red.h_star.amax();
            assert!((f.w - red.h_star).amax() <= 1e-10 * scale);
            assert!((-(f.w * f.e0) - red.b_star).amax() <= 1e-8 * red.b_star.amax().max(1e-6));
            assert!((f.sqrt_w * f.sqrt_w.transpose() - f.w).amax() <= 1e-9 * scale);
        }
    }

    #[test]
    fn insufficient_observations_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = problem(&mut rng, 5, 0.5);
        let err = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &MarginalOptions::default());
        assert!(matches!(err, Err(Error::InsufficientObservations(5, 8))));
    }

    #[test]
    fn gate_excludes_large_errors_but_archives_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = problem(&mut rng, 12, 0.3);
        p.obs[3].measurement += Vector2::new(40.0, -30.0);
        let gated = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &MarginalOptions::default()).unwrap();
        assert_eq!(gated.archive.observations.len(), p.obs.len());
        let mut clean = p.obs.clone();
        clean.remove(3);
        let f2 = make_two_pose_factor(FrameId(1), FrameId(2), &clean, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &MarginalOptions::default()).unwrap();
        assert!((gated.w - f2.w).amax() < 1e-9 * f2.w.amax());
    }

    #[test]
    fn world_pose_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let p = problem(&mut rng, 10, 1.0);
            let f = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &loose()).unwrap();
            let tr = p.t_r.box_plus(&Vector6::from_fn(|_, _| rng.random_range(-0.2..0.2)));
            let tc = p.t_c.box_plus(&Vector6::from_fn(|_, _| rng.random_range(-0.2..0.2)));
            let ev = eval_two_pose_error(&f, &tr, &tc);
            let h = 1e-6;
            let mut jr = Matrix6::zeros();
            let mut jc = Matrix6::zeros();
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                jr.set_column(i, &((eval_two_pose_error(&f, &tr.box_plus(&d), &tc).error - eval_two_pose_error(&f, &tr.box_plus(&-d), &tc).error) / (2.0 * h)));
                jc.set_column(i, &((eval_two_pose_error(&f, &tr, &tc.box_plus(&d)).error - eval_two_pose_error(&f, &tr, &tc.box_plus(&-d)).error) / (2.0 * h)));
            }
            assert!((ev.j_r - jr).amax() < 1e-5 * jr.amax());
            assert!((ev.j_c - jc).amax() < 1e-5 * jc.amax());
        }
    }

    #[test]
    fn revival_roundtrip_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = problem(&mut rng, 15, 1.0);
        let opts = MarginalOptions::default();
        let mut f = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &opts).unwrap();
        let (obs, lms) = revive(&mut f, &p.t_r).unwrap();
        assert_eq!(obs, p.obs);
        for o in &obs {
            let t = if o.frame == FrameId(1) { p.t_r } else { p.t_c };
            let e0 = reprojection_error(&p.rig, 0, &t, &p.landmarks[&o.landmark], &o.measurement).unwrap().error;
            let e1 = reprojection_error(&p.rig, 0, &t, &lms[&o.landmark], &o.measurement).unwrap().error;
            assert!((e0 - e1).amax() < 1e-9);
        }
        assert!(matches!(revive(&mut f, &p.t_r), Err(Error::AlreadyConsumed)));
        let g = make_two_pose_factor(FrameId(1), FrameId(2), &obs, &lms, &p.t_r, &p.t_c, &p.rig, &opts).unwrap();
        assert!((g.w - f.w).amax() <= 1e-8 * f.w.amax());
        assert!((g.e0 - f.e0).amax() <= 1e-8);
    }

    #[test]
    fn collinear_landmarks_leave_an_unobservable_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let rig = CameraRig::default();
        let t_r = Pose::identity();
        let t_c = Pose::new(Vector3::new(0.1, 0.4, 0.05), exp(&Vector3::new(0.0, 0.0, 0.05)));
        let mut obs = Vec::new();
        let mut lms = BTreeMap::new();
        for i in 0..12 {
            let l = Vector3::new(5.0 + i as f64 * 0.3, -1.0 + 0.15 * i as f64, 0.2);
            let id = LandmarkId(i);
            lms.insert(id, l);
            for (f, t) in [(FrameId(1), t_r), (FrameId(2), t_c)] {
                let z = project_world(&rig, 0, &t, &l).unwrap();
                obs.push(ReprojectionFactor {
                    cam: 0,
                    landmark: id,
                    frame: f,
                    measurement: z + Vector2::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                    weight: pixel_weight(1.0),
                });
            }
        }
        let f = make_two_pose_factor(FrameId(1), FrameId(2), &obs, &lms, &t_r, &t_c, &rig, &loose()).unwrap();
        let ev = SymmetricEigen::new(f.w).eigenvalues;
        assert!(ev.min() < 1e-6 * ev.max());
    }

    #[test]
    fn duplicated_landmarks_are_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = problem(&mut rng, 10, 0.5);
        let f = make_two_pose_factor(FrameId(1), FrameId(2), &p.obs, &p.landmarks, &p.t_r, &p.t_c, &p.rig, &loose()).unwrap();
        // the same landmarks seen from a third frame, marginalized into a second edge
        let t3 = p.t_c.compose(&Pose::from_translation(Vector3::new(0.0, 0.2, 0.0)));
        let obs3: Vec<_> = p
            .obs
            .iter()
            .filter(|o| o.frame == FrameId(2))
            .map(|o| ReprojectionFactor {
                frame: FrameId(3),
                measurement: project_world(&p.rig, 0, &t3, &p.landmarks[&o.landmark]).unwrap_or(o.measurement),
                ..o.clone()
            })
            .chain(p.obs.iter().filter(|o| o.frame == FrameId(2)).cloned())
            .collect();
        let g = make_two_pose_factor(FrameId(2), FrameId(3), &obs3, &p.landmarks, &p.t_c, &t3, &p.rig, &loose()).unwrap();
        assert_eq!(count_duplicated_landmarks([&f, &g]), 10);
        assert_eq!(count_duplicated_landmarks([&f]), 0);
    }
}
